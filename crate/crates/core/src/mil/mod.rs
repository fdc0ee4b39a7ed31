//! Attention-based multiple-instance classifier trained on stored patch
//! distributions, with augmentation baselines and metrics.

pub mod metrics;
pub mod synth;

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::sample_prompt;
use crate::autodiff::{softmax_row, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::{put_blob, put_u32, read_blob, Reader};
use crate::loss::cross_entropy_graph;
use crate::prs::{mean_bag, sample_bag, sample_bag_per_patch, PrsStore, SigmaMode};

pub use metrics::{classification_metrics, micro_auc, roc_auc, Metrics};
pub use synth::{gen_synthetic, self_check, Split, SyntheticBagConfig, SyntheticDataset};

/// How training bags are represented each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugMode {
    /// Stored means.
    #[default]
    None,
    /// Fresh prompted samples from the stored distributions.
    Prs,
    /// Means plus isotropic Gaussian noise.
    RandomPerturb,
    /// Means with patches randomly dropped.
    McDiscard,
}

impl AugMode {
    pub const ALL: [AugMode; 4] = [AugMode::None, AugMode::Prs, AugMode::RandomPerturb, AugMode::McDiscard];

    pub fn name(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Prs => "prs",
            AugMode::RandomPerturb => "random-perturb",
            AugMode::McDiscard => "mc-discard",
        }
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown augmentation mode {s:?}; valid modes: none, prs, random-perturb, mc-discard"
                ))
            })
    }
}

impl std::fmt::Display for AugMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilConfig {
    pub attention_hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Noise scale `s` for `random-perturb`.
    pub perturb_scale: f64,
    /// Keep probability `q` for `mc-discard`.
    pub keep_prob: f64,
    /// Draw one prompt per patch instead of one per bag.
    pub prompt_per_patch: bool,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            attention_hidden: 16,
            epochs: 50,
            lr: 0.05,
            perturb_scale: 1.0,
            keep_prob: 0.8,
            prompt_per_patch: false,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_hidden == 0 || self.epochs == 0 {
            return Err(Error::invalid("attention_hidden and epochs must be positive"));
        }
        if !(self.lr > 0.0) || !(self.perturb_scale >= 0.0) {
            return Err(Error::invalid("lr must be > 0 and perturb_scale >= 0"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::invalid(format!("keep_prob must lie in (0, 1], got {}", self.keep_prob)));
        }
        Ok(())
    }
}

/// Attention weights `a = softmax(w^T tanh(V z_i))` and a linear classifier
/// on the attention-weighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    /// `[D, h]`
    pub v: Tensor,
    /// `[h, 1]`
    pub w: Tensor,
    /// `[D, C]`
    pub classifier: Tensor,
    /// `[1, C]`
    pub bias: Tensor,
}

struct BoundMil {
    v: Var,
    w: Var,
    classifier: Var,
    bias: Var,
}

impl MilModel {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let normal = |fan_in: usize| Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite");
        let nv = normal(dim);
        let nw = normal(hidden);
        MilModel {
            v: Tensor::from_fn(dim, hidden, |_, _| nv.sample(rng)),
            w: Tensor::from_fn(hidden, 1, |_, _| nw.sample(rng)),
            classifier: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[1, classes]),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    pub fn classes(&self) -> usize {
        self.classifier.cols()
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.v, &mut self.w, &mut self.classifier, &mut self.bias]
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMil {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundMil {
            v: leaf(&self.v),
            w: leaf(&self.w),
            classifier: leaf(&self.classifier),
            bias: leaf(&self.bias),
        }
    }
}

/// `(logits [1, C], attention [1, n])` on graph `g`.
fn pool_graph(g: &mut Graph, m: &BoundMil, z: Var) -> Result<(Var, Var)> {
    let h = g.matmul(z, m.v)?;
    let h = g.tanh(h)?;
    let scores = g.matmul(h, m.w)?;
    let scores = g.transpose(scores)?;
    let attn = g.softmax(scores)?;
    let pooled = g.matmul(attn, z)?;
    let logits = g.matmul(pooled, m.classifier)?;
    let logits = g.add_broadcast(logits, m.bias)?;
    Ok((logits, attn))
}

/// Bag logits and per-patch attention weights for `z` (`n x D`).
pub fn attention_pool(model: &MilModel, z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = (z.rows(), z.cols());
    if z.shape().len() != 2 || n == 0 {
        return Err(Error::invalid("attention pooling needs at least one patch"));
    }
    if d != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            found: d,
        });
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let (logits, attn) = pool_graph(&mut g, &bound, zv)?;
    Ok((g.value(logits).data().to_vec(), g.value(attn).data().to_vec()))
}

/// Class probabilities for a bag.
pub fn predict(model: &MilModel, z: &Tensor) -> Result<Vec<f64>> {
    let (logits, _) = attention_pool(model, z)?;
    let mut p = vec![0.0; logits.len()];
    softmax_row(&logits, &mut p);
    Ok(p)
}

pub const MIL_MAGIC: &[u8; 4] = b"PMIL";
pub const MIL_VERSION: u32 = 1;

/// Layout: magic `PMIL`, version `u32`, then `V`, `w`, classifier and bias
/// as rank-tagged `f64` blobs.
pub fn encode_mil_model(model: &MilModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MIL_MAGIC);
    put_u32(&mut out, MIL_VERSION as usize);
    for t in [&model.v, &model.w, &model.classifier, &model.bias] {
        put_blob(&mut out, t);
    }
    out
}

pub fn decode_mil_model(bytes: &[u8]) -> Result<MilModel> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != MIL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic, expected PMIL".into(),
        });
    }
    let version = r.u32()?;
    if version != MIL_VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let at = r.offset();
    let model = MilModel {
        v: read_blob(&mut r)?,
        w: read_blob(&mut r)?,
        classifier: read_blob(&mut r)?,
        bias: read_blob(&mut r)?,
    };
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.offset(),
            reason: "trailing bytes".into(),
        });
    }
    let (d, h, c) = (model.v.rows(), model.v.cols(), model.classifier.cols());
    let consistent = model.v.shape().len() == 2
        && model.w.shape() == [h, 1]
        && model.classifier.shape() == [d, c]
        && model.bias.shape() == [1, c];
    if !consistent {
        return Err(Error::Parse {
            offset: at,
            reason: "inconsistent MIL parameter shapes".into(),
        });
    }
    Ok(model)
}

pub fn write_mil_model(model: &MilModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mil_model(model)).map_err(|e| Error::io(path, e))
}

pub fn read_mil_model(path: &Path) -> Result<MilModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mil_model(&bytes)
}

/// Applies one of the non-PRS training augmentations to `z`.
pub fn baseline_augment<R: Rng + ?Sized>(
    z: &Tensor,
    mode: AugMode,
    scale: f64,
    keep_prob: f64,
    rng: &mut R,
) -> Result<Tensor> {
    match mode {
        AugMode::None => Ok(z.clone()),
        AugMode::RandomPerturb => {
            if !(scale >= 0.0) {
                return Err(Error::invalid("perturbation scale must be >= 0"));
            }
            if scale == 0.0 {
                return Ok(z.clone());
            }
            let normal = Normal::new(0.0, scale).expect("finite scale");
            let data = z.data().iter().map(|v| v + normal.sample(rng)).collect();
            Tensor::new(z.shape().to_vec(), data)
        }
        AugMode::McDiscard => {
            if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                return Err(Error::invalid(format!("keep probability must lie in (0, 1], got {keep_prob}")));
            }
            let (n, d) = (z.rows(), z.cols());
            let keep = loop {
                let keep: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < keep_prob).collect();
                if !keep.is_empty() {
                    break keep;
                }
            };
            let data = keep.iter().flat_map(|&r| z.row_slice(r).iter().copied()).collect();
            Tensor::matrix(keep.len(), d, data)
        }
        AugMode::Prs => Err(Error::invalid("prs sampling needs the distribution store, not a baseline")),
    }
}

/// Independent generator for (seed, epoch, bag), so sampling does not
/// depend on visiting order or on the shuffle stream.
pub fn bag_rng(seed: u64, epoch: usize, bag: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(bag as u64);
    rng
}

/// Bag representation fed to the classifier during training.
pub fn training_bag(
    store: &PrsStore,
    id: &str,
    mode: AugMode,
    cfg: &MilConfig,
    sigma_mode: SigmaMode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    match mode {
        AugMode::Prs => {
            if cfg.prompt_per_patch {
                let n = store.bag(id)?.patch_count(store.dim());
                let prompts: Vec<_> = (0..n).map(|_| sample_prompt(rng)).collect();
                sample_bag_per_patch(store, id, &prompts, sigma_mode, rng)
            } else {
                let prompt = sample_prompt(rng);
                sample_bag(store, id, prompt, sigma_mode, rng)
            }
        }
        other => baseline_augment(&mean_bag(store, id)?, other, cfg.perturb_scale, cfg.keep_prob, rng),
    }
}

fn class_count(store: &PrsStore) -> usize {
    store.bags().iter().map(|b| b.label as usize + 1).max().unwrap_or(2).max(2)
}

/// Inference on stored means only.
pub fn predict_split(model: &MilModel, store: &PrsStore, ids: &[String]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut labels = Vec::with_capacity(ids.len());
    let mut probs = Vec::with_capacity(ids.len());
    for id in ids {
        let bag = store.bag(id)?;
        if bag.label as usize >= model.classes() {
            return Err(Error::invalid(format!(
                "bag {id} has label {} but the model has {} classes",
                bag.label,
                model.classes()
            )));
        }
        labels.push(bag.label as usize);
        probs.push(predict(model, &mean_bag(store, id)?)?);
    }
    Ok((labels, probs))
}

/// Micro-AUC, macro-F1 and accuracy of `model` on the bags `ids`.
pub fn evaluate(model: &MilModel, store: &PrsStore, ids: &[String]) -> Result<Metrics> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let (labels, probs) = predict_split(model, store, ids)?;
    classification_metrics(&labels, &probs, model.classes())
}

fn mean_loss(model: &MilModel, store: &PrsStore, ids: &[String]) -> Result<f64> {
    let (labels, probs) = predict_split(model, store, ids)?;
    Ok(labels
        .iter()
        .zip(&probs)
        .map(|(&l, p)| -p[l].max(crate::loss::LOG_FLOOR).ln())
        .sum::<f64>()
        / ids.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MilEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MilOutcome {
    /// Weights from the epoch with the best validation score.
    pub model: MilModel,
    pub best_epoch: usize,
    pub history: Vec<MilEpoch>,
}

/// Per-bag SGD on cross-entropy. Model selection uses validation AUC, ties
/// broken by lower validation loss; an undefined AUC falls back to loss.
pub fn train_mil(
    store: &PrsStore,
    train_ids: &[String],
    val_ids: &[String],
    cfg: &MilConfig,
    sigma_mode: SigmaMode,
    mode: AugMode,
    seed: u64,
) -> Result<MilOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::invalid("no training bags"));
    }
    let classes = class_count(store);
    let labels = train_ids
        .iter()
        .map(|id| store.bag(id).map(|b| b.label as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MilModel::init(store.dim(), cfg.attention_hidden, classes, &mut rng);
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut best: Option<(f64, f64, usize, MilModel)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let mut bag_stream = bag_rng(seed, epoch, i);
            let z = training_bag(store, &train_ids[i], mode, cfg, sigma_mode, &mut bag_stream)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let zv = g.constant(z);
            let (logits, _) = pool_graph(&mut g, &bound, zv)?;
            let probs = g.softmax(logits)?;
            let mut target = Tensor::zeros(&[1, classes]);
            target.data_mut()[labels[i]] = 1.0;
            let target = g.constant(target);
            let loss = cross_entropy_graph(&mut g, target, probs)?;
            total += g.scalar(loss)?;
            let mut grads = g.backward(loss)?;
            let vars = [bound.v, bound.w, bound.classifier, bound.bias];
            for (t, v) in model.tensors_mut().into_iter().zip(vars) {
                if let Some(gr) = grads.take(v) {
                    for (w, d) in t.data_mut().iter_mut().zip(gr.data()) {
                        *w -= cfg.lr * d;
                    }
                }
            }
        }
        let (val_auc, val_loss) = if val_ids.is_empty() {
            (None, total / train_ids.len() as f64)
        } else {
            (evaluate(&model, store, val_ids).ok().map(|m| m.auc), mean_loss(&model, store, val_ids)?)
        };
        history.push(MilEpoch {
            epoch,
            train_loss: total / train_ids.len() as f64,
            val_auc,
            val_loss,
        });
        let score = val_auc.unwrap_or(0.0);
        let better = match &best {
            None => true,
            Some((s, l, _, _)) => score > *s || (score == *s && val_loss < *l),
        };
        if better {
            best = Some((score, val_loss, epoch, model.clone()));
        }
    }
    let (_, _, best_epoch, model) = best.expect("at least one epoch");
    Ok(MilOutcome {
        model,
        best_epoch,
        history,
    })
}

/// Copy of `store` whose `targets` bags have Gaussian noise added to every
/// stored mean. Per-dimension noise std is `level` times the std of the
/// means over the `reference` bags, so the target split never informs the
/// scale. Standard deviations are left unchanged.
pub fn add_feature_noise(
    store: &PrsStore,
    targets: &[String],
    reference: &[String],
    level: f64,
    seed: u64,
) -> Result<PrsStore> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::invalid(format!("noise level must be finite and >= 0, got {level}")));
    }
    let d = store.dim();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut rows = 0usize;
    for id in reference {
        for row in store.bag(id)?.mu.chunks_exact(d) {
            rows += 1;
            for j in 0..d {
                let v = row[j] as f64;
                sum[j] += v;
                sq[j] += v * v;
            }
        }
    }
    if rows < 2 {
        return Err(Error::invalid("feature noise needs at least two reference patches"));
    }
    let n = rows as f64;
    let scale: Vec<f64> = (0..d)
        .map(|j| level * ((sq[j] - sum[j] * sum[j] / n) / (n - 1.0)).max(0.0).sqrt())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut bags = store.bags().to_vec();
    for id in targets {
        store.bag(id)?;
        let bag = bags.iter_mut().find(|b| &b.id == id).expect("checked above");
        for (i, v) in bag.mu.iter_mut().enumerate() {
            *v = (*v as f64 + scale[i % d] * normal.sample(&mut rng)) as f32;
        }
    }
    PrsStore::new(d, store.mask().to_vec(), bags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prs::BagRecord;

    fn model(seed: u64) -> MilModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MilModel::init(4, 5, 3, &mut rng);
        let n = Normal::new(0.0, 1.0).unwrap();
        m.classifier = Tensor::from_fn(4, 3, |_, _| n.sample(&mut rng));
        m.bias = Tensor::row(vec![0.1, -0.2, 0.3]);
        m
    }

    fn bag(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(n, 4, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn single_patch_pools_to_itself() {
        let m = model(1);
        let z = bag(1, 2);
        let (logits, attn) = attention_pool(&m, &z).unwrap();
        assert_eq!(attn, vec![1.0]);
        let direct = z.matmul(&m.classifier).unwrap();
        for (a, (b, c)) in logits.iter().zip(direct.data().iter().zip(m.bias.data())) {
            assert!((a - (b + c)).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let m = model(3);
        let z = bag(7, 4);
        let (base, attn) = attention_pool(&m, &z).unwrap();
        assert!((attn.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let perm = [3usize, 0, 6, 2, 5, 1, 4];
        let zp = Tensor::matrix(7, 4, perm.iter().flat_map(|&r| z.row_slice(r).to_vec()).collect()).unwrap();
        let (permuted, _) = attention_pool(&m, &zp).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }
        let zd = Tensor::matrix(14, 4, [z.data(), z.data()].concat()).unwrap();
        let (dup, _) = attention_pool(&m, &zd).unwrap();
        for (a, b) in base.iter().zip(&dup) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(attention_pool(&m, &Tensor::zeros(&[0, 4])).is_err());
    }

    #[test]
    fn baselines() {
        let z = bag(100, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(baseline_augment(&z, AugMode::None, 1.0, 0.8, &mut rng).unwrap(), z);
        assert_eq!(baseline_augment(&z, AugMode::RandomPerturb, 0.0, 0.8, &mut rng).unwrap(), z);
        assert_ne!(baseline_augment(&z, AugMode::RandomPerturb, 1.0, 0.8, &mut rng).unwrap(), z);
        assert!(baseline_augment(&z, AugMode::McDiscard, 1.0, 0.0, &mut rng).is_err());
        assert!(baseline_augment(&z, AugMode::McDiscard, 1.0, 1.5, &mut rng).is_err());
        let trials = 10_000;
        let kept: usize = (0..trials)
            .map(|_| baseline_augment(&z, AugMode::McDiscard, 1.0, 0.8, &mut rng).unwrap().rows())
            .sum();
        let mean = kept as f64 / trials as f64;
        assert!((mean - 80.0).abs() < 1.0, "mean kept {mean}");
    }

    #[test]
    fn model_file_round_trip() {
        let m = model(9);
        let bytes = encode_mil_model(&m);
        assert_eq!(decode_mil_model(&bytes).unwrap(), m);
        assert!(decode_mil_model(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_mil_model(&bad).is_err());
    }

    #[test]
    fn aug_mode_parsing() {
        for m in AugMode::ALL {
            assert_eq!(m.name().parse::<AugMode>().unwrap(), m);
        }
        let err = "bogus".parse::<AugMode>().unwrap_err().to_string();
        assert!(err.contains("random-perturb") && err.contains("mc-discard"));
    }

    fn separable_store() -> (PrsStore, Vec<String>, Vec<String>) {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = Normal::new(0.0, 0.3).unwrap();
        let bags: Vec<BagRecord> = (0..40)
            .map(|b| {
                let label = (b % 2) as u32;
                let mut mu = Vec::new();
                for p in 0..6 {
                    for j in 0..d {
                        let signal = if label == 1 && p < 2 && j == 0 { 2.0 } else { 0.0 };
                        mu.push((signal + n.sample(&mut rng)) as f32);
                    }
                }
                BagRecord {
                    id: format!("b{b}"),
                    label,
                    sigma: vec![0.5; mu.len()],
                    mu,
                }
            })
            .collect();
        let ids: Vec<String> = bags.iter().map(|b| b.id.clone()).collect();
        let store = PrsStore::new(d, vec![0.5; 6 * d], bags).unwrap();
        (store, ids[..30].to_vec(), ids[30..].to_vec())
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let (store, train, val) = separable_store();
        let cfg = MilConfig::default();
        let a = train_mil(&store, &train, &val, &cfg, SigmaMode::Prompted, AugMode::None, 1).unwrap();
        let b = train_mil(&store, &train, &val, &cfg, SigmaMode::Prompted, AugMode::None, 1).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let m = evaluate(&a.model, &store, &train).unwrap();
        assert!(m.accuracy > 0.9, "{m:?}");
    }

    #[test]
    fn prs_with_zero_spread_equals_no_augmentation() {
        let (store, train, val) = separable_store();
        let cfg = MilConfig { epochs: 5, ..MilConfig::default() };
        let zeroed = store.clone().with_mask(vec![0.0; 24]).unwrap();
        let a = train_mil(&zeroed, &train, &val, &cfg, SigmaMode::Prompted, AugMode::Prs, 2).unwrap();
        let b = train_mil(&store, &train, &val, &cfg, SigmaMode::Prompted, AugMode::None, 2).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn feature_noise_hits_only_targets_at_the_reference_scale() {
        let (store, train, val) = separable_store();
        let same = add_feature_noise(&store, &val, &train, 0.0, 1).unwrap();
        assert_eq!(same, store);
        let noisy = add_feature_noise(&store, &val, &train, 2.0, 1).unwrap();
        for id in &train {
            assert_eq!(noisy.bag(id).unwrap(), store.bag(id).unwrap());
        }
        // dimension 1 of the reference means has std 0.3 by construction
        let diffs: Vec<f64> = val
            .iter()
            .flat_map(|id| {
                let a = store.bag(id).unwrap().mu.clone();
                let b = noisy.bag(id).unwrap().mu.clone();
                a.chunks(4).zip(b.chunks(4)).map(|(x, y)| (y[1] - x[1]) as f64).collect::<Vec<_>>()
            })
            .collect();
        let var = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((var.sqrt() - 0.6).abs() < 0.15, "noise std {}", var.sqrt());
        assert!(add_feature_noise(&store, &val, &train, -1.0, 1).is_err());
    }

    #[test]
    fn evaluation_ignores_training_mode() {
        let (store, train, val) = separable_store();
        let cfg = MilConfig { epochs: 3, ..MilConfig::default() };
        let out = train_mil(&store, &train, &val, &cfg, SigmaMode::Prompted, AugMode::Prs, 3).unwrap();
        let e1 = evaluate(&out.model, &store, &val).unwrap();
        let e2 = evaluate(&out.model, &store, &val).unwrap();
        assert_eq!(e1, e2);
        assert!(train_mil(&store, &["missing".into()], &val, &cfg, SigmaMode::Prompted, AugMode::None, 3).is_err());
    }
}

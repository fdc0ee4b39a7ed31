//! Class-conditional sinusoid textures arranged into labelled bags.
//!
//! Class 0 is the background texture. A bag of class `c > 0` holds a
//! fraction `positive_fraction` of class-`c` patches (at least one) among
//! background patches; class-0 bags are all background.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{ToyImage, CHANNELS};
use crate::autodiff::{softmax_row, Tensor};
use crate::error::{Error, Result};
use crate::dataset::Dataset;
use crate::prs::BagImages;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureParams {
    pub base_color: [f64; 3],
    /// Stripe cycles across the patch.
    pub frequency: f64,
    /// Per-pixel Gaussian noise level.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBagConfig {
    pub classes: usize,
    pub bags_per_class: usize,
    pub patches_per_bag: usize,
    pub positive_fraction: f64,
    pub patch_size: usize,
    pub stripe_amplitude: f64,
    /// One entry per class; generated from [`default_textures`] when empty.
    pub textures: Vec<TextureParams>,
    pub seed: u64,
}

impl Default for SyntheticBagConfig {
    fn default() -> Self {
        SyntheticBagConfig {
            classes: 2,
            bags_per_class: 50,
            patches_per_bag: 16,
            positive_fraction: 0.25,
            patch_size: 16,
            stripe_amplitude: 0.15,
            textures: Vec::new(),
            seed: 0,
        }
    }
}

/// Background plus one hue-shifted, finer-striped texture per positive class.
pub fn default_textures(classes: usize) -> Vec<TextureParams> {
    (0..classes)
        .map(|c| {
            if c == 0 {
                TextureParams {
                    base_color: [0.55, 0.5, 0.55],
                    frequency: 1.0,
                    noise: 0.08,
                }
            } else {
                let angle = 2.0 * PI * (c - 1) as f64 / (classes - 1).max(1) as f64;
                TextureParams {
                    base_color: [
                        0.55 + 0.12 * angle.cos(),
                        0.5 - 0.1 * angle.cos().abs(),
                        0.55 + 0.12 * angle.sin(),
                    ],
                    frequency: 1.0 + 2.0 * c as f64,
                    noise: 0.08,
                }
            }
        })
        .collect()
}

impl SyntheticBagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.bags_per_class == 0 || self.patches_per_bag == 0 || self.patch_size == 0 {
            return Err(Error::invalid("bag, patch and size counts must be positive"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "positive_fraction must lie in (0, 1], got {}",
                self.positive_fraction
            )));
        }
        if !self.textures.is_empty() && self.textures.len() != self.classes {
            return Err(Error::invalid("textures must list exactly one entry per class"));
        }
        if self.textures.iter().any(|t| !(t.noise >= 0.0) || !(t.frequency >= 0.0)) {
            return Err(Error::invalid("texture noise and frequency must be >= 0"));
        }
        Ok(())
    }

    pub fn resolved_textures(&self) -> Vec<TextureParams> {
        if self.textures.is_empty() {
            default_textures(self.classes)
        } else {
            self.textures.clone()
        }
    }

    /// Positive patches in a bag of class `c > 0`.
    pub fn positives_per_bag(&self) -> usize {
        ((self.positive_fraction * self.patches_per_bag as f64).round() as usize)
            .clamp(1, self.patches_per_bag)
    }
}

/// A random-orientation, random-phase stripe patch of `texture`.
pub fn texture_patch<R: Rng + ?Sized>(
    texture: &TextureParams,
    size: usize,
    amplitude: f64,
    rng: &mut R,
) -> ToyImage {
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, texture.noise.max(1e-12)).expect("finite noise");
    let (c, s) = (theta.cos(), theta.sin());
    let k = 2.0 * PI * texture.frequency / size as f64;
    ToyImage::from_fn(size, size, |x, y| {
        let stripe = amplitude * (k * (x as f64 * c + y as f64 * s) + phase).sin();
        let mut px = [0.0; CHANNELS];
        for (ch, v) in px.iter_mut().enumerate() {
            *v = texture.base_color[ch] + stripe + noise.sample(rng);
        }
        px
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Generated bags plus the texture class of every patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub data: Dataset,
    pub instance_labels: Vec<Vec<u32>>,
}

/// Train/val/test counts for `n` bags at 6:1:3.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.6).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Bags, labels and a class-stratified 6:1:3 split, all determined by
/// `cfg.seed`.
pub fn gen_synthetic(cfg: &SyntheticBagConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let textures = cfg.resolved_textures();
    let n_pos = cfg.positives_per_bag();
    let mut bags = Vec::new();
    let mut instance_labels = Vec::new();
    for class in 0..cfg.classes {
        for _ in 0..cfg.bags_per_class {
            let mut kinds = vec![0u32; cfg.patches_per_bag];
            if class > 0 {
                kinds[..n_pos].iter_mut().for_each(|k| *k = class as u32);
                kinds.shuffle(&mut rng);
            }
            let patches = kinds
                .iter()
                .map(|&k| texture_patch(&textures[k as usize], cfg.patch_size, cfg.stripe_amplitude, &mut rng))
                .collect();
            bags.push(BagImages {
                id: format!("bag-{:04}", bags.len()),
                label: class as u32,
                patches,
            });
            instance_labels.push(kinds);
        }
    }
    // round-robin over per-class shuffles keeps every split stratified
    let mut per_class: Vec<Vec<usize>> = (0..cfg.classes)
        .map(|c| (c * cfg.bags_per_class..(c + 1) * cfg.bags_per_class).collect())
        .collect();
    per_class.iter_mut().for_each(|v| v.shuffle(&mut rng));
    let order: Vec<usize> = (0..cfg.bags_per_class)
        .flat_map(|r| per_class.iter().map(move |v| v[r]))
        .collect();
    let (train, val, _) = split_sizes(order.len());
    let mut splits = vec![Split::Test; bags.len()];
    for (pos, &b) in order.iter().enumerate() {
        splits[b] = if pos < train {
            Split::Train
        } else if pos < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(SyntheticDataset {
        data: Dataset { bags, splits },
        instance_labels,
    })
}

/// `count` patches drawn evenly from every class texture, shuffled.
pub fn synthetic_patches(cfg: &SyntheticBagConfig, count: usize, seed: u64) -> Result<Vec<ToyImage>> {
    cfg.validate()?;
    let textures = cfg.resolved_textures();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<ToyImage> = (0..count)
        .map(|i| texture_patch(&textures[i % cfg.classes], cfg.patch_size, cfg.stripe_amplitude, &mut rng))
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// Held-out accuracy of a softmax-regression probe on raw pixels, trained on
/// a balanced patch sample of every class texture.
pub fn linear_probe_accuracy(cfg: &SyntheticBagConfig, per_class: usize, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let textures = cfg.resolved_textures();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.classes;
    let draw = |rng: &mut ChaCha8Rng| -> (Tensor, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * c {
            let k = i % c;
            let img = texture_patch(&textures[k], cfg.patch_size, cfg.stripe_amplitude, rng);
            rows.extend(img.to_chw().into_iter().map(|v| v - 0.5));
            labels.push(k);
        }
        let n = labels.len();
        (Tensor::matrix(n, rows.len() / n, rows).expect("rectangular"), labels)
    };
    let (x_train, y_train) = draw(&mut rng);
    let (x_test, y_test) = draw(&mut rng);
    let n = y_train.len();
    let dim = x_train.cols();
    let mut w = Tensor::zeros(&[dim, c]);
    let xt = x_train.transpose();
    let lr = 0.5;
    let mut probs = vec![0.0; c];
    for _ in 0..200 {
        let logits = x_train.matmul(&w)?;
        let mut delta = Tensor::zeros(&[n, c]);
        for r in 0..n {
            softmax_row(logits.row_slice(r), &mut probs);
            for k in 0..c {
                let target = if y_train[r] == k { 1.0 } else { 0.0 };
                delta.data_mut()[r * c + k] = (probs[k] - target) / n as f64;
            }
        }
        let grad = xt.matmul(&delta)?;
        for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
            *wv -= lr * gv;
        }
    }
    let logits = x_test.matmul(&w)?;
    let correct = (0..y_test.len())
        .filter(|&r| super::metrics::argmax(logits.row_slice(r)) == y_test[r])
        .count();
    Ok(correct as f64 / y_test.len() as f64)
}

/// Runs the linear probe and fails unless it beats chance by three binomial
/// standard errors of the held-out sample.
pub fn self_check(cfg: &SyntheticBagConfig) -> Result<f64> {
    const PER_CLASS: usize = 100;
    let acc = linear_probe_accuracy(cfg, PER_CLASS, cfg.seed)?;
    let chance = 1.0 / cfg.classes as f64;
    let n = (PER_CLASS * cfg.classes) as f64;
    let margin = 3.0 * (chance * (1.0 - chance) / n).sqrt();
    if acc > chance + margin {
        Ok(acc)
    } else {
        Err(Error::Domain {
            op: "gen_synthetic",
            detail: format!("class textures are not linearly separable: probe accuracy {acc:.3} is within {margin:.3} of chance {chance:.3}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticBagConfig {
        SyntheticBagConfig {
            patches_per_bag: 4,
            patch_size: 8,
            seed: 3,
            ..SyntheticBagConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = SyntheticBagConfig { seed: 4, ..small() };
        assert_ne!(gen_synthetic(&small()).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn split_ratio() {
        assert_eq!(split_sizes(100), (60, 10, 30));
        let ds = gen_synthetic(&small()).unwrap();
        assert_eq!(ds.data.ids_in(Split::Train).len(), 60);
        assert_eq!(ds.data.ids_in(Split::Val).len(), 10);
        assert_eq!(ds.data.ids_in(Split::Test).len(), 30);
        for split in [Split::Train, Split::Val, Split::Test] {
            let labels: Vec<u32> = ds
                .data
                .bags
                .iter()
                .zip(&ds.data.splits)
                .filter(|(_, s)| **s == split)
                .map(|(b, _)| b.label)
                .collect();
            let pos = labels.iter().filter(|l| **l == 1).count();
            assert_eq!(pos * 2, labels.len(), "{split:?} is not balanced");
        }
    }

    #[test]
    fn positive_fraction_invariants() {
        assert!(gen_synthetic(&SyntheticBagConfig { positive_fraction: 0.0, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticBagConfig { positive_fraction: 1.5, ..small() }).is_err());
        let ds = gen_synthetic(&SyntheticBagConfig { positive_fraction: 0.01, ..small() }).unwrap();
        for (bag, kinds) in ds.data.bags.iter().zip(&ds.instance_labels) {
            let pos = kinds.iter().filter(|k| **k > 0).count();
            if bag.label == 0 {
                assert_eq!(pos, 0);
            } else {
                assert!(pos >= 1);
                assert!(kinds.iter().all(|k| *k == 0 || *k == bag.label));
            }
        }
    }

    #[test]
    fn textures_are_linearly_separable() {
        let acc = linear_probe_accuracy(&SyntheticBagConfig::default(), 64, 1).unwrap();
        assert!(acc > 0.9, "probe accuracy {acc}");
        let three = SyntheticBagConfig { classes: 3, ..SyntheticBagConfig::default() };
        let acc = linear_probe_accuracy(&three, 64, 1).unwrap();
        assert!(acc > 1.0 / 3.0 + 0.3, "probe accuracy {acc}");
    }

    #[test]
    fn self_check_rejects_identical_textures() {
        assert!(self_check(&SyntheticBagConfig::default()).is_ok());
        let flat = TextureParams {
            base_color: [0.5; 3],
            frequency: 1.0,
            noise: 0.05,
        };
        let same = SyntheticBagConfig {
            textures: vec![flat.clone(), flat],
            ..SyntheticBagConfig::default()
        };
        assert!(self_check(&same).is_err());
    }
}

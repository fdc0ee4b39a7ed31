//! Encoder, projection head, distribution estimator and augmentation masks.

mod checkpoint;
mod nn;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use nn::{BoundMlp, Linear, Mlp};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{Prompt, ToyImage, NUM_OPERATORS};
use crate::autodiff::{sigmoid, softmax_row, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square encoder input.
    pub image_size: usize,
    pub encoder_hidden: Vec<usize>,
    /// Representation dimension `D`.
    pub repr_dim: usize,
    pub projector_hidden: usize,
    /// Projector output dimension `P`.
    pub proj_dim: usize,
    /// Linear layers in each of the mean and log-variance heads.
    pub head_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            encoder_hidden: vec![128, 128],
            repr_dim: 32,
            projector_hidden: 128,
            proj_dim: 64,
            head_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.repr_dim < 2 || self.proj_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive (D >= 2)"));
        }
        if self.head_depth == 0 || self.projector_hidden == 0 {
            return Err(Error::invalid("head depth and projector width must be positive"));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::invalid("encoder hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Flattens images into a `[n, 3*h*w]` encoder input centred on 0.5.
pub fn images_to_input(images: &[&ToyImage], size: usize) -> Result<Tensor> {
    let dim = 3 * size * size;
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![img.height(), img.width()],
                right: vec![size, size],
            });
        }
        data.extend(img.to_chw().into_iter().map(|v| v - 0.5));
    }
    if images.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    Tensor::matrix(images.len(), dim, data)
}

/// Encoder `f` plus projector `g`; the part shared by teacher and student.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub encoder: Mlp,
    pub projector: Mlp,
}

#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub encoder: BoundMlp,
    pub projector: BoundMlp,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut dims = vec![cfg.input_dim()];
        dims.extend(&cfg.encoder_hidden);
        dims.push(cfg.repr_dim);
        let encoder = Mlp::init(&dims, 1.0, rng);
        let projector = Mlp::init(&[cfg.repr_dim, cfg.projector_hidden, cfg.proj_dim], 1.0, rng);
        Backbone { encoder, projector }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        v.extend(self.projector.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.projector.tensors_mut());
        v
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        BoundBackbone {
            encoder: self.encoder.bind(g, trainable),
            projector: self.projector.bind(g, trainable),
        }
    }

    /// Representations `z = f(x)` of a batch of images, one row per image.
    pub fn encode_batch(&self, images: &[&ToyImage]) -> Result<Tensor> {
        let side = ((self.encoder.in_dim() / 3) as f64).sqrt().round() as usize;
        self.encoder.forward(&images_to_input(images, side)?)
    }
}

/// `z = f(v)` for a single view.
pub fn encode(backbone: &Backbone, view: &ToyImage) -> Result<Vec<f64>> {
    Ok(backbone.encode_batch(&[view])?.into_data())
}

/// `softmax(g(z) / tau)`.
pub fn project_probs(projector: &Mlp, z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let logits = projector.forward(&Tensor::row(z.to_vec()))?;
    let scaled: Vec<f64> = logits.data().iter().map(|x| x / tau).collect();
    let mut out = vec![0.0; scaled.len()];
    softmax_row(&scaled, &mut out);
    Ok(out)
}

/// Mean head `h_mu` and log-variance head `h_sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionHeads {
    pub mean: Mlp,
    pub log_var: Mlp,
}

#[derive(Clone, Debug)]
pub struct BoundHeads {
    pub mean: BoundMlp,
    pub log_var: BoundMlp,
}

impl DistributionHeads {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let dims = vec![cfg.repr_dim; cfg.head_depth + 1];
        let mean = Mlp::init(&dims, 1.0, rng);
        // small initial log-variance keeps sigma near 1 at the start
        let log_var = Mlp::init(&dims, 0.01, rng);
        DistributionHeads { mean, log_var }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.mean.tensors();
        v.extend(self.log_var.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.mean.tensors_mut();
        v.extend(self.log_var.tensors_mut());
        v
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHeads {
        BoundHeads {
            mean: self.mean.bind(g, trainable),
            log_var: self.log_var.bind(g, trainable),
        }
    }
}

impl BoundHeads {
    /// `(mu, sigma)` rows from encoder outputs `h`, with `sigma = exp(h_sigma(h) / 2)`.
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        let mu = self.mean.forward(g, h)?;
        let log_var = self.log_var.forward(g, h)?;
        let half = g.scale(log_var, 0.5)?;
        let sigma = g.exp(half)?;
        Ok((mu, sigma))
    }
}

/// Learnable pre-activation matrix `U` (`K x D`); the masks are `M = sigmoid(U)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    u: Tensor,
}

impl MaskMatrix {
    pub fn new(u: Tensor) -> Result<Self> {
        let (k, d) = u.require_matrix("mask")?;
        if k != NUM_OPERATORS || d < 2 {
            return Err(Error::ShapeMismatch {
                op: "mask",
                left: vec![k, d],
                right: vec![NUM_OPERATORS, d.max(2)],
            });
        }
        Ok(MaskMatrix { u })
    }

    /// Standard normal entries.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        MaskMatrix {
            u: Tensor::from_fn(NUM_OPERATORS, dim, |_, _| StandardNormal.sample(rng)),
        }
    }

    pub fn pre_activation(&self) -> &Tensor {
        &self.u
    }

    pub fn pre_activation_mut(&mut self) -> &mut Tensor {
        &mut self.u
    }

    pub fn dim(&self) -> usize {
        self.u.cols()
    }

    /// `M = sigmoid(U)`, recomputed on every call.
    pub fn masks(&self) -> Tensor {
        self.u.map(sigmoid)
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.u.row_slice(k).iter().map(|&x| sigmoid(x)).collect()
    }

    /// `m_p = p M / ||p||_1`: the active rows are summed, then divided by
    /// their count.
    pub fn prompted(&self, prompt: Prompt) -> Vec<f64> {
        let m = self.masks();
        let mut out = vec![0.0; self.dim()];
        for (k, active) in prompt.bits().iter().enumerate() {
            if *active {
                for (o, &x) in out.iter_mut().zip(m.row_slice(k)) {
                    *o += x;
                }
            }
        }
        let n = prompt.count() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Prompt indicator rows stacked into a `[n, K]` tensor.
pub fn prompt_bit_matrix(prompts: &[Prompt]) -> Tensor {
    let mut data = Vec::with_capacity(prompts.len() * NUM_OPERATORS);
    for p in prompts {
        data.extend(p.bits().map(|b| if b { 1.0 } else { 0.0 }));
    }
    Tensor::matrix(prompts.len(), NUM_OPERATORS, data).expect("non-empty prompt list")
}

/// `[n, D]` prompted masks for a batch of prompts, differentiable in `U`.
pub fn prompted_mask_graph(g: &mut Graph, u: Var, prompts: &[Prompt]) -> Result<Var> {
    let m = g.sigmoid(u)?;
    let bits = g.constant(prompt_bit_matrix(prompts));
    let summed = g.matmul(bits, m)?;
    let dim = g.value(summed).cols();
    let counts = Tensor::from_fn(prompts.len(), dim, |i, _| prompts[i].count() as f64);
    let counts = g.constant(counts);
    g.div(summed, counts)
}

/// Per-patch Gaussian in representation space.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprDistribution {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ReprDistribution {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::ShapeMismatch {
                op: "distribution",
                left: vec![mu.len()],
                right: vec![sigma.len()],
            });
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain {
                op: "distribution",
                detail: format!("sigma entry {s} is not a positive finite number"),
            });
        }
        Ok(ReprDistribution { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `mu = h_mu(f(x))`, `sigma = exp(h_sigma(f(x)) / 2)` for a batch of images.
pub fn estimate_distributions(
    backbone: &Backbone,
    heads: &DistributionHeads,
    images: &[&ToyImage],
) -> Result<Vec<ReprDistribution>> {
    let h = backbone.encode_batch(images)?;
    let mu = heads.mean.forward(&h)?;
    let log_var = heads.log_var.forward(&h)?;
    (0..images.len())
        .map(|i| {
            let sigma = log_var.row_slice(i).iter().map(|v| (v / 2.0).exp()).collect();
            ReprDistribution::new(mu.row_slice(i).to_vec(), sigma)
        })
        .collect()
}

pub fn estimate_distribution(
    backbone: &Backbone,
    heads: &DistributionHeads,
    image: &ToyImage,
) -> Result<ReprDistribution> {
    Ok(estimate_distributions(backbone, heads, &[image])?.remove(0))
}

/// `sigma_p = sigma ⊙ m_p`.
pub fn prompted_sigma(mask: &MaskMatrix, sigma: &[f64], prompt: Prompt) -> Result<Vec<f64>> {
    if sigma.len() != mask.dim() {
        return Err(Error::Dimension {
            expected: mask.dim(),
            found: sigma.len(),
        });
    }
    Ok(mask
        .prompted(prompt)
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * s)
        .collect())
}

/// `z = mu + sigma_p ⊙ eps` for a given noise draw.
pub fn reparameterize(mu: &[f64], sigma_p: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(sigma_p)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws `z_v ~ N(mu, sigma_p^2)` through the reparameterization.
pub fn sample_representation<R: Rng + ?Sized>(
    dist: &ReprDistribution,
    sigma_p: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sigma_p.len() != dist.dim() {
        return Err(Error::Dimension {
            expected: dist.dim(),
            found: sigma_p.len(),
        });
    }
    if sigma_p.iter().any(|s| *s < 0.0) {
        return Err(Error::Domain {
            op: "sample_representation",
            detail: "negative standard deviation".into(),
        });
    }
    let eps = standard_normal_vec(dist.dim(), rng);
    Ok(reparameterize(&dist.mu, sigma_p, &eps))
}

/// `theta_t <- lambda theta_t + (1 - lambda) theta_s`.
pub fn ema_update(teacher: &mut Backbone, student: &Backbone, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    nn::check_same_shapes(&teacher.tensors(), &student.tensors(), "ema_update")?;
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

/// Teacher parameters together with the last momentum used to update them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub teacher: Backbone,
    pub momentum: f64,
}

impl EmaState {
    pub fn from_student(student: &Backbone, momentum: f64) -> Self {
        EmaState {
            teacher: student.clone(),
            momentum,
        }
    }

    pub fn update(&mut self, student: &Backbone, momentum: f64) -> Result<()> {
        ema_update(&mut self.teacher, student, momentum)?;
        self.momentum = momentum;
        Ok(())
    }
}

/// Cosine similarity between every pair of mask rows (`K x K`).
pub fn mask_similarity(mask: &MaskMatrix) -> Tensor {
    let m = mask.masks();
    let k = m.rows();
    let norms: Vec<f64> = (0..k)
        .map(|i| m.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Tensor::from_fn(k, k, |i, j| {
        if i == j {
            return 1.0;
        }
        let dot: f64 = m.row_slice(i).iter().zip(m.row_slice(j)).map(|(a, b)| a * b).sum();
        (dot / (norms[i] * norms[j])).min(1.0)
    })
}

/// Every parameter trained by gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams {
    pub backbone: Backbone,
    pub heads: DistributionHeads,
    pub mask: MaskMatrix,
}

impl StudentParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        StudentParams {
            backbone: Backbone::init(cfg, rng),
            heads: DistributionHeads::init(cfg, rng),
            mask: MaskMatrix::random(cfg.repr_dim, rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.tensors();
        v.extend(self.heads.tensors());
        v.push(self.mask.pre_activation());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.heads.tensors_mut());
        v.push(self.mask.pre_activation_mut());
        v
    }
}

/// Graph handles for every [`StudentParams`] tensor.
#[derive(Clone, Debug)]
pub struct BoundStudent {
    pub backbone: BoundBackbone,
    pub heads: BoundHeads,
    pub u: Var,
}

impl BoundStudent {
    /// Handles in [`StudentParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.encoder.vars();
        v.extend(self.backbone.projector.vars());
        v.extend(self.heads.mean.vars());
        v.extend(self.heads.log_var.vars());
        v.push(self.u);
        v
    }
}

impl StudentParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundStudent {
        let backbone = self.backbone.bind(g, trainable);
        let heads = self.heads.bind(g, trainable);
        let u = if trainable {
            g.param(self.mask.pre_activation().clone())
        } else {
            g.constant(self.mask.pre_activation().clone())
        };
        BoundStudent { backbone, heads, u }
    }

    /// Reuses existing graph leaves, given in [`StudentParams::tensors`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundStudent> {
        let expected = self.tensors().len();
        if vars.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut take = |mlp: &Mlp| BoundMlp {
            layers: mlp
                .layers
                .iter()
                .map(|_| (it.next().expect("counted"), it.next().expect("counted")))
                .collect(),
        };
        let encoder = take(&self.backbone.encoder);
        let projector = take(&self.backbone.projector);
        let mean = take(&self.heads.mean);
        let log_var = take(&self.heads.log_var);
        Ok(BoundStudent {
            backbone: BoundBackbone { encoder, projector },
            heads: BoundHeads { mean, log_var },
            u: vars[expected - 1],
        })
    }
}

/// Student, teacher and teacher-centering state.
#[derive(Clone, Debug, PartialEq)]
pub struct PrdlModel {
    pub config: ModelConfig,
    pub student: StudentParams,
    pub ema: EmaState,
    /// Running mean of teacher logits, `[1, P]`.
    pub center: Tensor,
    pub step: u64,
}

impl PrdlModel {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let student = StudentParams::init(cfg, rng);
        let ema = EmaState::from_student(&student.backbone, 1.0);
        Ok(PrdlModel {
            config: cfg.clone(),
            center: Tensor::zeros(&[1, cfg.proj_dim]),
            student,
            ema,
            step: 0,
        })
    }

    pub fn repr_dim(&self) -> usize {
        self.config.repr_dim
    }

    pub fn distribution(&self, image: &ToyImage) -> Result<ReprDistribution> {
        estimate_distribution(&self.student.backbone, &self.student.heads, image)
    }
}

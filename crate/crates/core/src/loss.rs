//! Distillation, KL, sparsity and variance losses and their weighted total.
//!
//! Each term is built on an autodiff [`Graph`] so training can differentiate
//! it; the plain-value functions evaluate the same graph code on constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ReprDistribution;

/// Floor applied inside `log` so saturated softmax outputs stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Argument order of the KL penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(N(0, I) || N(mu, sigma^2))`
    #[default]
    PriorFirst,
    /// `KL(N(mu, sigma^2) || N(0, I))`
    Conventional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Student temperature for the image branch.
    pub student_temp: f64,
    /// Temperature for sampled representations.
    pub sample_temp: f64,
    pub kl_weight: f64,
    pub sparsity_weight: f64,
    pub variance_weight: f64,
    /// Floor inside the variance hinge.
    pub gamma: f64,
    pub kl_direction: KlDirection,
    /// Subtract a running mean of teacher logits before the teacher softmax.
    pub centering: bool,
    pub center_momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            student_temp: 0.1,
            sample_temp: 1.0,
            kl_weight: 0.001,
            sparsity_weight: 0.001,
            variance_weight: 1.0,
            gamma: 1e-4,
            kl_direction: KlDirection::PriorFirst,
            centering: true,
            center_momentum: 0.9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.student_temp > 0.0 && self.sample_temp > 0.0) {
            return Err(Error::invalid("temperatures must be > 0"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be > 0"));
        }
        if [self.kl_weight, self.sparsity_weight, self.variance_weight]
            .iter()
            .any(|b| !(*b >= 0.0))
        {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::invalid("center momentum must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-term loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub sparsity: f64,
    pub variance: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.kl, self.sparsity, self.variance, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_CE={} L_KL={} L_sp={} L_var={} L_total={}",
            self.ce, self.kl, self.sparsity, self.variance, self.total
        )
    }
}

/// `-sum(target ⊙ log(max(probs, LOG_FLOOR)))` over every entry.
pub fn cross_entropy_graph(g: &mut Graph, target: Var, probs: Var) -> Result<Var> {
    let floored = g.clamp_min(probs, LOG_FLOOR)?;
    let logp = g.log(floored)?;
    let prod = g.mul(target, logp)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0)
}

/// Layout of the multi-crop batch: rows are grouped per image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropLayout {
    pub images: usize,
    /// Teacher (global) views per image.
    pub teacher_views: usize,
    /// Student views per image; the first `teacher_views` of them are the
    /// same crops the teacher saw.
    pub student_views: usize,
}

impl CropLayout {
    pub fn pairs_per_image(&self) -> usize {
        self.teacher_views * (self.student_views - 1)
    }
}

/// Target matrix `T` with `sum(T ⊙ log S) = sum over (i, j != i) of y_t^i · log y_s^j`.
fn pair_targets(teacher: &Tensor, layout: CropLayout) -> Tensor {
    let p = teacher.cols();
    let mut out = Tensor::zeros(&[layout.images * layout.student_views, p]);
    for b in 0..layout.images {
        for j in 0..layout.student_views {
            let row = b * layout.student_views + j;
            for i in 0..layout.teacher_views {
                if i == j {
                    continue;
                }
                let t = teacher.row_slice(b * layout.teacher_views + i);
                for (o, v) in out.data_mut()[row * p..(row + 1) * p].iter_mut().zip(t) {
                    *o += v;
                }
            }
        }
    }
    out
}

/// `L_CE`: mean over (teacher view, other student view) pairs of
/// `H(y_t, y_s)` plus mean over teacher views of `H(y_t, y_v)`, averaged over
/// images. Teacher probabilities enter as constants.
pub fn distillation_loss_graph(
    g: &mut Graph,
    teacher: &Tensor,
    student: Var,
    sampled: Var,
    layout: CropLayout,
) -> Result<Var> {
    let t_rows = layout.images * layout.teacher_views;
    let s_rows = layout.images * layout.student_views;
    if layout.teacher_views == 0 || layout.student_views < layout.teacher_views || layout.pairs_per_image() == 0 {
        return Err(Error::invalid("need at least one teacher view and one other student view"));
    }
    if teacher.rows() != t_rows {
        return Err(Error::invalid(format!(
            "expected {t_rows} teacher rows, got {}",
            teacher.rows()
        )));
    }
    if g.value(student).rows() != s_rows {
        return Err(Error::invalid(format!(
            "expected {s_rows} student rows, got {}",
            g.value(student).rows()
        )));
    }
    if g.value(sampled).rows() != t_rows {
        return Err(Error::invalid(format!(
            "one sampled representation per teacher view: expected {t_rows}, got {}",
            g.value(sampled).rows()
        )));
    }
    let targets = g.constant(pair_targets(teacher, layout));
    let h_s = cross_entropy_graph(g, targets, student)?;
    let h_s = g.scale(h_s, 1.0 / (layout.images * layout.pairs_per_image()) as f64)?;
    let t = g.constant(teacher.clone());
    let h_v = cross_entropy_graph(g, t, sampled)?;
    let h_v = g.scale(h_v, 1.0 / t_rows as f64)?;
    g.add(h_s, h_v)
}

/// KL term per row summed over `D`, averaged over rows.
pub fn kl_graph(g: &mut Graph, mu: Var, sigma: Var, direction: KlDirection) -> Result<Var> {
    let rows = g.value(mu).rows();
    let per_entry = match direction {
        KlDirection::PriorFirst => {
            // ln sigma + (1 + mu^2) / (2 sigma^2) - 1/2
            let ln_s = g.log(sigma)?;
            let mu2 = g.mul(mu, mu)?;
            let num = g.add_scalar(mu2, 1.0)?;
            let s2 = g.mul(sigma, sigma)?;
            let den = g.scale(s2, 2.0)?;
            let frac = g.div(num, den)?;
            let a = g.add(ln_s, frac)?;
            g.add_scalar(a, -0.5)?
        }
        KlDirection::Conventional => {
            // (sigma^2 + mu^2 - 1 - ln sigma^2) / 2
            let s2 = g.mul(sigma, sigma)?;
            let mu2 = g.mul(mu, mu)?;
            let ln_s2 = g.log(s2)?;
            let a = g.add(s2, mu2)?;
            let b = g.sub(a, ln_s2)?;
            let c = g.add_scalar(b, -1.0)?;
            g.scale(c, 0.5)?
        }
    };
    let total = g.sum(per_entry)?;
    g.scale(total, 1.0 / rows as f64)
}

/// `||m_p||_1` per row, averaged over rows.
pub fn sparsity_graph(g: &mut Graph, masks: Var) -> Result<Var> {
    let rows = g.value(masks).rows();
    let l1 = g.l1_norm(masks)?;
    g.scale(l1, 1.0 / rows as f64)
}

/// `max(0, 1 - sqrt(Var(m_p) + gamma))` per row (population variance over
/// the feature axis), averaged over rows.
pub fn variance_graph(g: &mut Graph, masks: Var, gamma: f64) -> Result<Var> {
    let (rows, d) = (g.value(masks).rows(), g.value(masks).cols());
    if d < 2 {
        return Err(Error::invalid(format!(
            "variance regularizer needs D >= 2, got {d}"
        )));
    }
    let v = g.variance_axis(masks, 1)?;
    let v = g.add_scalar(v, gamma)?;
    let sd = g.sqrt(v)?;
    let neg = g.scale(sd, -1.0)?;
    let gap = g.add_scalar(neg, 1.0)?;
    let hinge = g.relu(gap)?;
    let s = g.sum(hinge)?;
    g.scale(s, 1.0 / rows as f64)
}

/// Graph handles of the four terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce: Var,
    pub kl: Var,
    pub sparsity: Var,
    pub variance: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            ce: g.scalar(self.ce)?,
            kl: g.scalar(self.kl)?,
            sparsity: g.scalar(self.sparsity)?,
            variance: g.scalar(self.variance)?,
            total: g.scalar(self.total)?,
        })
    }
}

/// `L_CE + b1 L_KL + b2 L_sp + b3 L_var`.
pub fn total_graph(
    g: &mut Graph,
    ce: Var,
    kl: Var,
    sparsity: Var,
    variance: Var,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let a = g.scale(kl, cfg.kl_weight)?;
    let b = g.scale(sparsity, cfg.sparsity_weight)?;
    let c = g.scale(variance, cfg.variance_weight)?;
    let t = g.add(ce, a)?;
    let t = g.add(t, b)?;
    let total = g.add(t, c)?;
    Ok(LossVars {
        ce,
        kl,
        sparsity,
        variance,
        total,
    })
}

fn row(values: &[f64]) -> Result<Tensor> {
    if values.is_empty() {
        return Err(Error::invalid("empty vector"));
    }
    Ok(Tensor::row(values.to_vec()))
}

/// `H(a, b) = -sum a_i log b_i`. Negative `b_i` is a domain error; zeros are
/// floored at [`LOG_FLOOR`].
pub fn cross_entropy(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if let Some(v) = b.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain {
            op: "cross_entropy",
            detail: format!("probability {v} is negative"),
        });
    }
    let mut g = Graph::new();
    let av = g.constant(row(a)?);
    let bv = g.constant(row(b)?);
    let h = cross_entropy_graph(&mut g, av, bv)?;
    g.scalar(h)
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("probability vectors must be non-empty and equally long"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat())
}

/// `L_CE` for a single image given teacher, student and sampled probability
/// vectors. The first `teacher.len()` student vectors are the teacher's crops.
pub fn distillation_loss(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    sampled: &[Vec<f64>],
) -> Result<f64> {
    if teacher.len() != sampled.len() {
        return Err(Error::invalid(format!(
            "{} teacher views but {} sampled representations",
            teacher.len(),
            sampled.len()
        )));
    }
    if student.len() < teacher.len() || student.len() < 2 {
        return Err(Error::invalid("student views must include every teacher crop plus one more"));
    }
    let layout = CropLayout {
        images: 1,
        teacher_views: teacher.len(),
        student_views: student.len(),
    };
    let mut g = Graph::new();
    let s = g.constant(stack(student)?);
    let v = g.constant(stack(sampled)?);
    let l = distillation_loss_graph(&mut g, &stack(teacher)?, s, v, layout)?;
    g.scalar(l)
}

pub fn kl_loss(dist: &ReprDistribution, direction: KlDirection) -> Result<f64> {
    if dist.sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain {
            op: "kl_loss",
            detail: "sigma must be positive".into(),
        });
    }
    let mut g = Graph::new();
    let mu = g.constant(row(&dist.mu)?);
    let sigma = g.constant(row(&dist.sigma)?);
    let kl = kl_graph(&mut g, mu, sigma, direction)?;
    g.scalar(kl)
}

pub fn sparsity_loss(masks: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let m = g.constant(row(masks)?);
    let l = sparsity_graph(&mut g, m)?;
    g.scalar(l)
}

pub fn variance_loss(masks: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be > 0"));
    }
    let mut g = Graph::new();
    let m = g.constant(row(masks)?);
    let l = variance_graph(&mut g, m, gamma)?;
    g.scalar(l)
}

/// Weighted total of precomputed component values.
pub fn total_loss(ce: f64, kl: f64, sparsity: f64, variance: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        ce,
        kl,
        sparsity,
        variance,
        total: ce + cfg.kl_weight * kl + cfg.sparsity_weight * sparsity + cfg.variance_weight * variance,
    }
}

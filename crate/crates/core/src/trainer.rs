//! Teacher/student pretraining: schedules, multi-crop batches, the combined
//! image/representation forward pass, SGD and the EMA teacher update.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_prompt, AugmentConfig, Augmenter, Prompt, ToyImage, ViewKind};
use crate::autodiff::{grad_check_with, softmax_row, Graph, Stencil, Tensor};
use crate::error::{Error, Result};
use crate::loss::{
    distillation_loss_graph, kl_graph, sparsity_graph, total_graph, variance_graph, CropLayout,
    LossBreakdown, LossConfig, LossVars,
};
use crate::model::{
    images_to_input, prompted_mask_graph, standard_normal_vec, write_checkpoint, Backbone,
    BoundStudent, ModelConfig, PrdlModel,
};

/// Teacher views per image.
pub const GLOBAL_VIEWS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate for a batch of 256; scaled linearly with `batch_size`.
    /// The default is sized for plain gradient descent, not AdamW.
    pub lr_per_256: f64,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_fraction: f64,
    pub warmup_steps: usize,
    /// EMA momentum at step 0; rises to 1 along a cosine.
    pub momentum_start: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_ramp_epochs: usize,
    pub local_views: usize,
    /// Global gradient norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stops training (and ends the schedule) after this many steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            batch_size: 32,
            epochs: 20,
            lr_per_256: 0.05,
            min_lr_fraction: 0.01,
            warmup_steps: 10,
            momentum_start: 0.996,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_ramp_epochs: 6,
            local_views: 4,
            grad_clip: Some(3.0),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr_per_256 * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.augment.global_size != self.model.image_size {
            return Err(Error::invalid(format!(
                "augment.global_size {} must equal model.image_size {}",
                self.augment.global_size, self.model.image_size
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.lr_per_256 >= 0.0) || !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::invalid("learning rate settings out of range"));
        }
        if !(0.0..=1.0).contains(&self.momentum_start) {
            return Err(Error::invalid("momentum_start must lie in [0, 1]"));
        }
        if !(self.teacher_temp_start > 0.0 && self.teacher_temp_end > 0.0) {
            return Err(Error::invalid("teacher temperatures must be > 0"));
        }
        if self.local_views == 0 {
            return Err(Error::invalid("at least one local view is required"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::invalid("max_steps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be > 0"));
            }
        }
        Ok(())
    }
}

/// Scheduled values for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScheduleValues {
    pub lr: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
}

#[derive(Clone, Debug)]
pub struct Schedule {
    cfg: TrainConfig,
    steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            cfg: cfg.clone(),
            steps_per_epoch: steps_per_epoch.max(1),
        }
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.epochs * self.steps_per_epoch;
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Linear warmup then cosine decay for the learning rate, cosine rise of
    /// the EMA momentum to exactly 1 at the final step, and a per-epoch linear
    /// teacher-temperature ramp.
    pub fn at(&self, step: usize) -> ScheduleValues {
        let c = &self.cfg;
        let last = self.total_steps().saturating_sub(1).max(1) as f64;
        let base = c.base_lr();
        let floor = base * c.min_lr_fraction;
        let lr = if step < c.warmup_steps {
            base * step as f64 / c.warmup_steps as f64
        } else {
            let span = (last - c.warmup_steps as f64).max(1.0);
            let t = ((step - c.warmup_steps) as f64 / span).min(1.0);
            floor + (base - floor) * 0.5 * (1.0 + (PI * t).cos())
        };
        let t = (step as f64 / last).min(1.0);
        let momentum = if step as f64 >= last {
            1.0
        } else {
            1.0 - (1.0 - c.momentum_start) * 0.5 * (1.0 + (PI * t).cos())
        };
        let epoch = step / self.steps_per_epoch;
        let teacher_temp = if epoch < c.teacher_temp_ramp_epochs {
            c.teacher_temp_start
                + (c.teacher_temp_end - c.teacher_temp_start) * epoch as f64
                    / c.teacher_temp_ramp_epochs as f64
        } else {
            c.teacher_temp_end
        };
        ScheduleValues {
            lr,
            momentum,
            teacher_temp,
        }
    }
}

/// Views, prompts and noise for one optimization step, already flattened into
/// encoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub layout: CropLayout,
    /// `[B * 2, in]`: the global views, fed to both teacher and student.
    pub teacher_input: Tensor,
    /// `[B * V, in]`: per image the two globals followed by the locals.
    pub student_input: Tensor,
    /// `[B, in]`: pre-augmented images for the distribution branch.
    pub base_input: Tensor,
    /// One prompt per teacher view, gating the matching sampled representation.
    pub teacher_prompts: Vec<Prompt>,
    /// `[B * 2, D]` standard normal draws for the reparameterization.
    pub noise: Tensor,
}

struct ImageViews {
    base: ToyImage,
    globals: Vec<ToyImage>,
    locals: Vec<ToyImage>,
    prompts: Vec<Prompt>,
    noise: Vec<f64>,
}

fn prepare_image(
    aug: &Augmenter,
    img: &ToyImage,
    local_views: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImageViews> {
    let x = aug.pre_augment(img, rng);
    let base = aug.plain_resize(&x, ViewKind::Global);
    let prompts: Vec<Prompt> = (0..GLOBAL_VIEWS).map(|_| sample_prompt(rng)).collect();
    let globals = prompts
        .iter()
        .map(|&p| aug.compose_view(&x, p, ViewKind::Global, rng).map(|v| v.image))
        .collect::<Result<Vec<_>>>()?;
    let locals = (0..local_views)
        .map(|_| {
            let p = sample_prompt(rng);
            aug.compose_view(&x, p, ViewKind::Local, rng).map(|v| v.image)
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = standard_normal_vec(GLOBAL_VIEWS * dim, rng);
    Ok(ImageViews {
        base,
        globals,
        locals,
        prompts,
        noise,
    })
}

/// Builds every view of `images`. Image `i` draws from stream `i` of a
/// generator seeded with `seed`, so the result does not depend on how many
/// worker threads run.
pub fn prepare_batch(
    aug: &Augmenter,
    images: &[&ToyImage],
    local_views: usize,
    dim: usize,
    seed: u64,
) -> Result<PreparedBatch> {
    if images.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            prepare_image(aug, img, local_views, dim, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let size = aug.config.global_size;
    let teacher: Vec<&ToyImage> = per_image.iter().flat_map(|v| &v.globals).collect();
    let student: Vec<&ToyImage> = per_image
        .iter()
        .flat_map(|v| v.globals.iter().chain(&v.locals))
        .collect();
    let base: Vec<&ToyImage> = per_image.iter().map(|v| &v.base).collect();
    let noise: Vec<f64> = per_image.iter().flat_map(|v| v.noise.iter().copied()).collect();
    Ok(PreparedBatch {
        layout: CropLayout {
            images: images.len(),
            teacher_views: GLOBAL_VIEWS,
            student_views: GLOBAL_VIEWS + local_views,
        },
        teacher_input: images_to_input(&teacher, size)?,
        student_input: images_to_input(&student, size)?,
        base_input: images_to_input(&base, size)?,
        teacher_prompts: per_image.iter().flat_map(|v| v.prompts.iter().copied()).collect(),
        noise: Tensor::matrix(images.len() * GLOBAL_VIEWS, dim, noise)?,
    })
}

/// Teacher logits for the global views.
pub fn teacher_logits(teacher: &Backbone, batch: &PreparedBatch) -> Result<Tensor> {
    let h = teacher.encoder.forward(&batch.teacher_input)?;
    teacher.projector.forward(&h)
}

/// `softmax((logits - center) / tau)` row by row.
pub fn teacher_probs(logits: &Tensor, center: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::invalid("teacher temperature must be > 0"));
    }
    let (rows, cols) = logits.require_matrix("teacher_probs")?;
    if let Some(c) = center {
        if c.shape() != [1, cols] {
            return Err(Error::ShapeMismatch {
                op: "teacher_probs",
                left: logits.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    let mut scaled = vec![0.0; cols];
    for r in 0..rows {
        for (j, s) in scaled.iter_mut().enumerate() {
            let shift = center.map_or(0.0, |c| c.data()[j]);
            *s = (logits.get(r, j) - shift) / tau;
        }
        softmax_row(&scaled, &mut out.data_mut()[r * cols..(r + 1) * cols]);
    }
    Ok(out)
}

/// Student side of the objective on graph `g`: image branch on every view,
/// distribution branch on the pre-augmented images with one prompted sample
/// per teacher view.
pub fn student_loss(
    g: &mut Graph,
    student: &BoundStudent,
    batch: &PreparedBatch,
    teacher_probs: &Tensor,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let x = g.constant(batch.student_input.clone());
    let h = student.backbone.encoder.forward(g, x)?;
    let logits = student.backbone.projector.forward(g, h)?;
    let scaled = g.scale(logits, 1.0 / cfg.student_temp)?;
    let student_probs = g.softmax(scaled)?;

    let base = g.constant(batch.base_input.clone());
    let hb = student.backbone.encoder.forward(g, base)?;
    let (mu, sigma) = student.heads.forward(g, hb)?;
    let rows: Vec<usize> = (0..batch.layout.images)
        .flat_map(|b| std::iter::repeat_n(b, batch.layout.teacher_views))
        .collect();
    let mu_rep = g.select_rows(mu, rows.clone())?;
    let sigma_rep = g.select_rows(sigma, rows)?;
    let masks = prompted_mask_graph(g, student.u, &batch.teacher_prompts)?;
    let sigma_p = g.mul(sigma_rep, masks)?;
    let eps = g.constant(batch.noise.clone());
    let offset = g.mul(sigma_p, eps)?;
    let z = g.add(mu_rep, offset)?;
    let zl = student.backbone.projector.forward(g, z)?;
    let zl = g.scale(zl, 1.0 / cfg.sample_temp)?;
    let sampled_probs = g.softmax(zl)?;

    let ce = distillation_loss_graph(g, teacher_probs, student_probs, sampled_probs, batch.layout)?;
    let kl = kl_graph(g, mu, sigma, cfg.kl_direction)?;
    let sp = sparsity_graph(g, masks)?;
    let var = variance_graph(g, masks, cfg.gamma)?;
    total_graph(g, ce, kl, sp, var, cfg)
}

/// Model plus the random stream that drives augmentation and shuffling.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: PrdlModel,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PrdlModel::init(model_cfg, &mut rng)?;
        Ok(TrainState { model, rng })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub schedule: ScheduleValues,
}

fn column_mean(t: &Tensor) -> Tensor {
    let rows = t.rows() as f64;
    Tensor::from_fn(1, t.cols(), |_, j| (0..t.rows()).map(|r| t.get(r, j)).sum::<f64>() / rows)
}

/// One SGD step on the student followed by the EMA and centering updates.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    images: &[&ToyImage],
    sched: ScheduleValues,
) -> Result<StepReport> {
    let model = &mut state.model;
    let seed = state.rng.next_u64();
    let aug = Augmenter::new(cfg.augment.clone());
    let batch = prepare_batch(&aug, images, cfg.local_views, model.repr_dim(), seed)?;
    let t_logits = teacher_logits(&model.ema.teacher, &batch)?;
    if loss_cfg.centering && model.step == 0 {
        model.center = column_mean(&t_logits);
    }
    let center = loss_cfg.centering.then_some(&model.center);
    let t_probs = teacher_probs(&t_logits, center, sched.teacher_temp)?;

    let mut g = Graph::new();
    let bound = model.student.bind(&mut g, true);
    let vars = student_loss(&mut g, &bound, &batch, &t_probs, loss_cfg)?;
    let loss = vars.breakdown(&g)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: model.step,
            breakdown: loss.to_string(),
        });
    }
    let mut grads = g.backward(vars.total)?;
    let mut grads: Vec<Tensor> = bound
        .vars()
        .into_iter()
        .zip(model.student.tensors())
        .map(|(v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let grad_norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    let mut scale = sched.lr;
    if let Some(c) = cfg.grad_clip {
        if grad_norm > c {
            scale *= c / grad_norm;
        }
    }
    for (p, gr) in model.student.tensors_mut().into_iter().zip(grads.iter_mut()) {
        for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
            *w -= scale * d;
        }
    }
    if model.student.mask.masks().data().iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
        return Err(Error::Domain {
            op: "train_step",
            detail: "mask entry left (0, 1)".into(),
        });
    }
    model.ema.update(&model.student.backbone, sched.momentum)?;
    if loss_cfg.centering {
        let m = loss_cfg.center_momentum;
        let mean = column_mean(&t_logits);
        for (c, x) in model.center.data_mut().iter_mut().zip(mean.data()) {
            *c = m * *c + (1.0 - m) * x;
        }
    }
    model.step += 1;
    Ok(StepReport {
        loss,
        grad_norm,
        schedule: sched,
    })
}

/// Loss of the current weights on a fixed probe batch, without updating
/// anything. Depends only on the model, the configs, the images and `seed`.
pub fn eval_loss(
    model: &PrdlModel,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    images: &[ToyImage],
    teacher_temp: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    let probe: Vec<&ToyImage> = images.iter().take(cfg.batch_size).collect();
    let aug = Augmenter::new(cfg.augment.clone());
    let batch = prepare_batch(&aug, &probe, cfg.local_views, model.repr_dim(), seed)?;
    let t_logits = teacher_logits(&model.ema.teacher, &batch)?;
    let center = loss_cfg.centering.then_some(&model.center);
    let t_probs = teacher_probs(&t_logits, center, teacher_temp)?;
    let mut g = Graph::new();
    let bound = model.student.bind(&mut g, false);
    student_loss(&mut g, &bound, &batch, &t_probs, loss_cfg)?.breakdown(&g)
}

/// Mean step losses over one epoch with the schedule at its last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub schedule: ScheduleValues,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: PrdlModel,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepReport>,
    /// [`eval_loss`] of the final weights with `seed` and the final teacher temperature.
    pub eval: LossBreakdown,
    pub eval_teacher_temp: f64,
}

/// Full schedule over `images`; batches are reshuffled each epoch and the
/// last partial batch is dropped.
pub fn pretrain(
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    images: &[ToyImage],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("pretraining needs at least one image"));
    }
    let batch = cfg.batch_size.min(images.len());
    let steps_per_epoch = images.len() / batch;
    let schedule = Schedule::new(cfg, steps_per_epoch);
    let mut state = TrainState::new(&cfg.model, seed)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(schedule.total_steps());
    for epoch in 0..cfg.epochs {
        if steps.len() >= schedule.total_steps() {
            break;
        }
        order.shuffle(&mut state.rng);
        let mut sum = LossBreakdown::default();
        let mut last = schedule.at(0);
        let mut taken = 0usize;
        for chunk in order.chunks_exact(batch) {
            if steps.len() >= schedule.total_steps() {
                break;
            }
            taken += 1;
            let sched = schedule.at(state.model.step as usize);
            let refs: Vec<&ToyImage> = chunk.iter().map(|&i| &images[i]).collect();
            let report = train_step(&mut state, cfg, loss_cfg, &refs, sched)?;
            sum.ce += report.loss.ce;
            sum.kl += report.loss.kl;
            sum.sparsity += report.loss.sparsity;
            sum.variance += report.loss.variance;
            sum.total += report.loss.total;
            last = sched;
            steps.push(report);
        }
        let n = taken as f64;
        let log = EpochLog {
            epoch,
            loss: LossBreakdown {
                ce: sum.ce / n,
                kl: sum.kl / n,
                sparsity: sum.sparsity / n,
                variance: sum.variance / n,
                total: sum.total / n,
            },
            schedule: last,
        };
        on_epoch(&log);
        epochs.push(log);
    }
    let eval_teacher_temp = schedule.at(schedule.total_steps().saturating_sub(1)).teacher_temp;
    let eval = eval_loss(&state.model, cfg, loss_cfg, images, eval_teacher_temp, seed)?;
    Ok(PretrainOutcome {
        model: state.model,
        epochs,
        steps,
        eval,
        eval_teacher_temp,
    })
}

pub const LOSS_LOG_HEADER: &str = "epoch L_CE L_KL L_sp L_var L_total lr lambda tau_t";

/// Plain-text log: a header, one line per epoch and a final `eval` line whose
/// loss fields are the probe-batch loss of the saved weights.
pub fn format_loss_log(outcome: &PretrainOutcome) -> String {
    let mut s = String::new();
    s.push_str(LOSS_LOG_HEADER);
    s.push('\n');
    for e in &outcome.epochs {
        let l = &e.loss;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {}",
            e.epoch,
            l.ce,
            l.kl,
            l.sparsity,
            l.variance,
            l.total,
            e.schedule.lr,
            e.schedule.momentum,
            e.schedule.teacher_temp
        );
    }
    let l = &outcome.eval;
    let _ = writeln!(
        s,
        "eval {} {} {} {} {} 0 1 {}",
        l.ce, l.kl, l.sparsity, l.variance, l.total, outcome.eval_teacher_temp
    );
    s
}

/// Parses the `eval` line written by [`format_loss_log`].
pub fn parse_eval_line(log: &str) -> Result<(LossBreakdown, f64)> {
    let line = log
        .lines()
        .find(|l| l.starts_with("eval "))
        .ok_or_else(|| Error::invalid("loss log has no eval line"))?;
    let f: Vec<f64> = line
        .split_whitespace()
        .skip(1)
        .map(|t| t.parse::<f64>().map_err(|e| Error::invalid(format!("bad eval field {t}: {e}"))))
        .collect::<Result<_>>()?;
    if f.len() != 8 {
        return Err(Error::invalid("eval line must have 8 numeric fields"));
    }
    Ok((
        LossBreakdown {
            ce: f[0],
            kl: f[1],
            sparsity: f[2],
            variance: f[3],
            total: f[4],
        },
        f[7],
    ))
}

/// Writes the checkpoint and the loss log.
pub fn write_pretrain_outputs(outcome: &PretrainOutcome, checkpoint: &Path, log: &Path) -> Result<()> {
    write_checkpoint(&outcome.model, checkpoint)?;
    fs::write(log, format_loss_log(outcome)).map_err(|e| Error::io(log, e))
}

/// Which scalar the gradient suite differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Ce,
    Kl,
    Sparsity,
    Variance,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Ce,
        LossTerm::Kl,
        LossTerm::Sparsity,
        LossTerm::Variance,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "L_CE",
            LossTerm::Kl => "L_KL",
            LossTerm::Sparsity => "L_sp",
            LossTerm::Variance => "L_var",
            LossTerm::Total => "L_total",
        }
    }

    fn pick(self, v: &LossVars) -> crate::autodiff::Var {
        match self {
            LossTerm::Ce => v.ce,
            LossTerm::Kl => v.kl,
            LossTerm::Sparsity => v.sparsity,
            LossTerm::Variance => v.variance,
            LossTerm::Total => v.total,
        }
    }
}

/// Toy configuration used by [`gradient_suite`]: `D = P = 8`, 4x4 inputs.
pub fn gradcheck_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            image_size: 4,
            encoder_hidden: vec![8],
            repr_dim: 8,
            projector_hidden: 8,
            proj_dim: 8,
            head_depth: 1,
        },
        augment: AugmentConfig {
            global_size: 4,
            local_size: 2,
            ..AugmentConfig::default()
        },
        batch_size: 2,
        local_views: 2,
        grad_clip: None,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct TermCheck {
    pub term: LossTerm,
    pub report: crate::autodiff::GradCheckReport,
}

/// Smallest distance of any hidden ReLU input from its kink over the whole
/// student forward pass for `batch`.
pub fn relu_margin(student: &crate::model::StudentParams, batch: &PreparedBatch) -> Result<f64> {
    let enc = &student.backbone.encoder;
    let proj = &student.backbone.projector;
    let mut margin = enc.relu_margin(&batch.student_input)?;
    margin = margin.min(enc.relu_margin(&batch.base_input)?);
    margin = margin.min(proj.relu_margin(&enc.forward(&batch.student_input)?)?);
    let hb = enc.forward(&batch.base_input)?;
    margin = margin
        .min(student.heads.mean.relu_margin(&hb)?)
        .min(student.heads.log_var.relu_margin(&hb)?);
    let mu = student.heads.mean.forward(&hb)?;
    let log_var = student.heads.log_var.forward(&hb)?;
    let d = mu.cols();
    let per_image = batch.layout.teacher_views;
    let z = Tensor::from_fn(batch.noise.rows(), d, |r, c| {
        let b = r / per_image;
        let m = student.mask.prompted(batch.teacher_prompts[r])[c];
        mu.get(b, c) + (0.5 * log_var.get(b, c)).exp() * m * batch.noise.get(r, c)
    });
    Ok(margin.min(proj.relu_margin(&z)?))
}

/// Minimum ReLU margin accepted by [`gradient_suite`]. Central differences
/// are meaningless across a kink, so points closer than this are redrawn.
pub const GRADCHECK_RELU_MARGIN: f64 = 1e-2;

/// Finite-difference check of every loss term and the total on a freshly
/// initialized toy model with a random batch, both derived from `seed`.
/// Draws whose ReLU inputs come within [`GRADCHECK_RELU_MARGIN`] of zero are
/// replaced by the next draw of the same seeded stream.
pub fn gradient_suite(seed: u64, step: f64, tolerance: f64) -> Result<Vec<TermCheck>> {
    let cfg = gradcheck_config();
    let loss_cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.model.image_size;
    let aug = Augmenter::new(cfg.augment.clone());
    let mut attempt = 0;
    let (state, batch) = loop {
        let state = TrainState::new(&cfg.model, rng.next_u64())?;
        let images: Vec<ToyImage> = (0..cfg.batch_size)
            .map(|_| {
                ToyImage::from_fn(side, side, |_, _| {
                    [
                        rand::Rng::random(&mut rng),
                        rand::Rng::random(&mut rng),
                        rand::Rng::random(&mut rng),
                    ]
                })
            })
            .collect();
        let refs: Vec<&ToyImage> = images.iter().collect();
        let batch = prepare_batch(&aug, &refs, cfg.local_views, cfg.model.repr_dim, rng.next_u64())?;
        if relu_margin(&state.model.student, &batch)? >= GRADCHECK_RELU_MARGIN {
            break (state, batch);
        }
        attempt += 1;
        if attempt == 1000 {
            return Err(Error::invalid("no kink-free draw found for the gradient suite"));
        }
    };
    let logits = teacher_logits(&state.model.ema.teacher, &batch)?;
    let probs = teacher_probs(&logits, None, cfg.teacher_temp_start)?;
    let student = &state.model.student;
    let params: Vec<Tensor> = student.tensors().into_iter().cloned().collect();
    LossTerm::ALL
        .iter()
        .map(|&term| {
            let f = |g: &mut Graph, vars: &[crate::autodiff::Var]| {
                let bound = student.bind_vars(vars)?;
                Ok(term.pick(&student_loss(g, &bound, &batch, &probs, &loss_cfg)?))
            };
            Ok(TermCheck {
                term,
                report: grad_check_with(&params, f, step, tolerance, Stencil::Richardson)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate_with_gradients, grad_check};
    use rand::Rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                image_size: 4,
                encoder_hidden: vec![8],
                repr_dim: 8,
                projector_hidden: 8,
                proj_dim: 8,
                head_depth: 1,
            },
            augment: AugmentConfig {
                global_size: 4,
                local_size: 2,
                ..AugmentConfig::default()
            },
            batch_size: 4,
            epochs: 2,
            local_views: 2,
            ..TrainConfig::default()
        }
    }

    fn images(n: usize, side: usize, seed: u64) -> Vec<ToyImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ToyImage::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()]))
            .collect()
    }

    #[test]
    fn gradient_suite_passes_on_a_few_seeds() {
        for seed in 0..3 {
            let checks = gradient_suite(seed, 1e-3, 1e-4).unwrap();
            assert_eq!(checks.len(), 5);
            for c in checks {
                assert!(c.report.passed, "seed {seed} {}: {}", c.term.name(), c.report.max_relative_error());
            }
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            lr_per_256: 0.0005,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.base_lr(), 6.25e-5);
        let s = Schedule::new(&cfg, 16);
        assert_eq!(s.at(0).lr, 0.0);
        assert_eq!(s.at(0).momentum, 0.996);
        assert_eq!(s.at(0).teacher_temp, 0.04);
        let last = s.total_steps() - 1;
        assert!((s.at(last).momentum - 1.0).abs() < 1e-9);
        assert!((s.at(cfg.warmup_steps).lr - cfg.base_lr()).abs() < 1e-18);
        assert!((s.at(last).lr - cfg.base_lr() * cfg.min_lr_fraction).abs() < 1e-15);
        assert_eq!(s.at(6 * 16).teacher_temp, 0.07);
        let mid = s.at(3 * 16).teacher_temp;
        assert!((mid - 0.055).abs() < 1e-15);
        let mut prev = 0.0;
        for step in 0..=last {
            let m = s.at(step).momentum;
            assert!(m >= prev && m <= 1.0);
            prev = m;
        }
    }

    #[test]
    fn batch_layout() {
        let cfg = tiny_cfg();
        let imgs = images(3, 4, 1);
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let aug = Augmenter::new(cfg.augment.clone());
        let b = prepare_batch(&aug, &refs, 2, 8, 5).unwrap();
        assert_eq!(b.teacher_input.shape(), &[6, 48]);
        assert_eq!(b.student_input.shape(), &[12, 48]);
        assert_eq!(b.base_input.shape(), &[3, 48]);
        assert_eq!(b.noise.shape(), &[6, 8]);
        assert_eq!(b.teacher_prompts.len(), 6);
        for img in 0..3 {
            for v in 0..2 {
                assert_eq!(
                    b.teacher_input.row_slice(img * 2 + v),
                    b.student_input.row_slice(img * 4 + v)
                );
            }
        }
        assert_eq!(prepare_batch(&aug, &refs, 2, 8, 5).unwrap(), b);
    }

    #[test]
    fn batch_is_thread_count_invariant() {
        let cfg = tiny_cfg();
        let imgs = images(6, 4, 2);
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let aug = Augmenter::new(cfg.augment.clone());
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| prepare_batch(&aug, &refs, 2, 8, 9).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = tiny_cfg();
        let lc = LossConfig::default();
        let imgs = images(4, 4, 3);
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let sched = Schedule::new(&cfg, 1).at(5);
        let mut a = TrainState::new(&cfg.model, 11).unwrap();
        let mut b = a.clone();
        let ra = train_step(&mut a, &cfg, &lc, &refs, sched).unwrap();
        let rb = train_step(&mut b, &cfg, &lc, &refs, sched).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn teacher_changes_only_by_ema() {
        let cfg = tiny_cfg();
        let lc = LossConfig::default();
        let imgs = images(4, 4, 4);
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let mut st = TrainState::new(&cfg.model, 12).unwrap();
        let before = st.model.clone();
        let sched = ScheduleValues {
            lr: 0.05,
            momentum: 1.0,
            teacher_temp: 0.04,
        };
        train_step(&mut st, &cfg, &lc, &refs, sched).unwrap();
        assert_eq!(st.model.ema.teacher, before.ema.teacher);
        for (a, b) in st.model.student.tensors().iter().zip(before.student.tensors()) {
            assert_ne!(*a, b);
        }
    }

    #[test]
    fn zero_noise_sample_equals_mean_view() {
        let cfg = tiny_cfg();
        let lc = LossConfig::default();
        let st = TrainState::new(&cfg.model, 13).unwrap();
        let imgs = images(2, 4, 5);
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let aug = Augmenter::new(cfg.augment.clone());
        let mut batch = prepare_batch(&aug, &refs, 2, 8, 1).unwrap();
        batch.noise = Tensor::zeros(batch.noise.shape());
        // z_v collapses to mu, so y_v must equal the projected mean.
        let mut g = Graph::new();
        let bound = st.model.student.bind(&mut g, false);
        let base = g.constant(batch.base_input.clone());
        let h = bound.backbone.encoder.forward(&mut g, base).unwrap();
        let (mu, _) = bound.heads.forward(&mut g, h).unwrap();
        let mu = g.value(mu).clone();
        let projected = st.model.student.backbone.projector.forward(&mu).unwrap();
        let mut direct = vec![0.0; 8];
        softmax_row(projected.row_slice(1), &mut direct);
        let via_model = crate::model::project_probs(
            &st.model.student.backbone.projector,
            mu.row_slice(1),
            lc.sample_temp,
        )
        .unwrap();
        for (a, b) in direct.iter().zip(&via_model) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_zero_weights_passes_gradcheck() {
        let cfg = tiny_cfg();
        let lc = LossConfig {
            kl_weight: 0.0,
            sparsity_weight: 0.0,
            variance_weight: 0.0,
            ..LossConfig::default()
        };
        let st = TrainState::new(&cfg.model, 14).unwrap();
        let imgs = images(2, 4, 6);
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let aug = Augmenter::new(cfg.augment.clone());
        let mut batch = prepare_batch(&aug, &refs, 2, 8, 2).unwrap();
        batch.noise = Tensor::zeros(batch.noise.shape());
        let tl = teacher_logits(&st.model.ema.teacher, &batch).unwrap();
        let tp = teacher_probs(&tl, None, 0.04).unwrap();
        let params: Vec<Tensor> = st.model.student.tensors().into_iter().cloned().collect();
        let student = &st.model.student;
        let f = |g: &mut Graph, vars: &[crate::autodiff::Var]| {
            let bound = student.bind_vars(vars)?;
            Ok(student_loss(g, &bound, &batch, &tp, &lc)?.total)
        };
        let (value, _) = evaluate_with_gradients(&params, f).unwrap();
        assert!(value.is_finite());
        let report = grad_check(&params, f, 1e-3, 1e-4).unwrap();
        assert!(report.passed, "max rel err {}", report.max_relative_error());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let cfg = tiny_cfg();
        let lc = LossConfig::default();
        let mut st = TrainState::new(&cfg.model, 15).unwrap();
        st.model.student.heads.log_var.layers[0].bias = Tensor::full(&[1, 8], 1e308);
        let imgs = images(2, 4, 7);
        let refs: Vec<&ToyImage> = imgs.iter().collect();
        let sched = Schedule::new(&cfg, 1).at(3);
        match train_step(&mut st, &cfg, &lc, &refs, sched) {
            Err(Error::NonFiniteLoss { breakdown, .. }) => assert!(breakdown.contains("L_KL")),
            Err(Error::Domain { .. }) => {}
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn pretrain_log_round_trip() {
        let cfg = tiny_cfg();
        let lc = LossConfig::default();
        let imgs = images(9, 4, 8);
        let mut seen = 0;
        let out = pretrain(&cfg, &lc, &imgs, 21, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(out.steps.len(), 4);
        let log = format_loss_log(&out);
        assert_eq!(log.lines().count(), 4);
        let (eval, tau) = parse_eval_line(&log).unwrap();
        assert_eq!(eval, out.eval);
        let again = eval_loss(&out.model, &cfg, &lc, &imgs, tau, 21).unwrap();
        assert_eq!(again, eval);
    }
}

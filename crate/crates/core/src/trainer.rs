//! Optimization loop: two-view forwards, the symmetrized contrastive loss,
//! AdamW with a warmup-cosine schedule, gradient accumulation, checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use crate::dataio::{save_checkpoint, CHECKPOINT_EXTENSION};
use crate::encoder::{init_params, Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numeric::{Gradients, Graph, Tensor, Var};
use crate::partition::{sample_partition, PartitionPlan, DEFAULT_MASK_RATIO};
use crate::patching::ImageGray;
use crate::rng::{Purpose, StreamRng};
use crate::tsp_loss::{batch_loss, BatchLossReport, CollapseMonitor, LossParams, Pairing};

pub const METRICS_HEADER: &str = "step\tloss\ttau\tmean_pos_sim\tmean_neg_sim\tlr";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accum_steps: usize,
    pub lr_peak: f64,
    /// 0 = 5% of `total_steps` (rounded up).
    pub warmup_steps: usize,
    /// 0 = `epochs · steps_per_epoch`, resolved against the dataset.
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_ratio: f64,
    pub kappa: f64,
    pub tau_init: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Run the per-image forwards/backwards on the rayon pool. Reduction
    /// order is fixed either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            accum_steps: 1,
            lr_peak: 1e-3,
            warmup_steps: 0,
            total_steps: 0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            mask_ratio: DEFAULT_MASK_RATIO,
            kappa: 1.0,
            tau_init: 10.0,
            seed: 0,
            checkpoint_every: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.accum_steps == 0 || self.epochs == 0 {
            return bad("epochs, batch_size and accum_steps must be at least 1".into());
        }
        if self.total_steps != 0 && self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr_peak and weight_decay must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if !(self.kappa > 0.0) || !(self.tau_init > 0.0) {
            return bad("kappa and tau_init must be positive".into());
        }
        Ok(())
    }

    pub fn images_per_step(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn steps_per_epoch(&self, dataset: usize) -> usize {
        dataset.div_ceil(self.images_per_step())
    }

    /// Fills in derived schedule lengths for a dataset of the given size.
    pub fn resolved(&self, dataset: usize) -> Result<TrainConfig> {
        if dataset == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let mut cfg = self.clone();
        if cfg.total_steps == 0 {
            cfg.total_steps = cfg.epochs * cfg.steps_per_epoch(dataset);
        }
        if cfg.warmup_steps == 0 {
            cfg.warmup_steps = cfg.total_steps.div_ceil(20).min(cfg.total_steps - 1);
        }
        cfg.validate()?;
        if cfg.total_steps < 1 {
            return Err(Error::Config("schedule has no steps".into()));
        }
        Ok(cfg)
    }
}

/// Learning rate at `step` of a resolved schedule: linear warmup from 0 to
/// `lr_peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule of {}", cfg.total_steps)));
    }
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return Ok(cfg.lr_peak * step as f64 / w as f64);
    }
    if t == w {
        return Ok(cfg.lr_peak);
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Adam moment buffers for every parameter (encoder tensors, then theta_tau).
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Completed optimizer updates.
    pub step: u64,
}

impl OptState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f32>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        OptState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One AdamW update of `param` at 1-based step `t`. `decay` selects whether
/// decoupled weight decay applies (weight matrices only).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Tensor,
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    hp: &AdamHyper,
    decay: bool,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::shape("adamw_update", param.shape(), &[grad.len()]));
    }
    if t == 0 || !(lr >= 0.0) {
        return Err(Error::Config(format!("invalid optimizer step {t} or lr {lr}")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = f64::from(g);
        let mi = hp.beta1 * f64::from(*m) + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * f64::from(*v) + (1.0 - hp.beta2) * g * g;
        *m = mi as f32;
        *v = vi as f32;
        let update = (mi / bc1) / ((vi / bc2).sqrt() + hp.eps) + wd * f64::from(*p);
        *p = (f64::from(*p) - lr * update) as f32;
    }
    Ok(())
}

/// Weight decay applies to weight matrices; norms, biases, `[CLS]` and the
/// temperature are exempt.
pub fn decays(param: &Tensor) -> bool {
    param.rank() == 2
}

/// Everything needed to continue a run; this is what checkpoints store.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub params: EncoderParams,
    pub loss: LossParams,
    pub opt: OptState,
    /// Sequential partition stream, advanced image by image.
    pub partition_rng: crate::rng::StreamState,
}

impl TrainState {
    /// Fresh state: parameters drawn from the seed's init stream.
    pub fn init(encoder: EncoderConfig, train: TrainConfig) -> Result<Self> {
        encoder.validate()?;
        train.validate()?;
        let params = init_params(&encoder, &mut StreamRng::new(train.seed, Purpose::Init, 0))?;
        let loss = LossParams::new(train.kappa, train.tau_init);
        loss.validate()?;
        let opt = OptState::new(params.tensors().iter().map(Tensor::len).chain([1]));
        Ok(TrainState {
            partition_rng: StreamRng::new(train.seed, Purpose::Partition, 0).state(),
            encoder,
            train,
            params,
            loss,
            opt,
        })
    }

    /// Number of trainable scalars: one encoder plus the temperature.
    pub fn trainable_count(&self) -> usize {
        self.params.parameter_count() + self.loss.theta_tau.len()
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

/// Loss report and summed gradients for one micro-batch. Gradient slots are
/// the encoder tensor indices, plus `params.tensors().len()` for theta_tau.
pub fn batch_gradients(
    encoder: &Encoder,
    params: &EncoderParams,
    loss: &LossParams,
    images: &[&ImageGray],
    plans: &[PartitionPlan],
    parallel: bool,
) -> Result<(BatchLossReport, Gradients)> {
    if images.is_empty() || images.len() != plans.len() {
        return Err(Error::Config(format!(
            "{} images but {} partition plans",
            images.len(),
            plans.len()
        )));
    }
    let dim = encoder.config().dim;
    let forward = |(img, plan): (&&ImageGray, &PartitionPlan)| -> Result<(Graph<'_>, Var)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let tokens = encoder.tokenize(&mut g, img, &bound)?;
        let (z1, z2) = encoder.forward_pair(&mut g, &tokens, plan, &bound)?;
        let z1 = g.reshape(z1, &[1, dim])?;
        let z2 = g.reshape(z2, &[1, dim])?;
        let z = g.concat_rows(z1, z2)?;
        let zn = g.l2_normalize_rows(z)?;
        Ok((g, zn))
    };
    let mut graphs: Vec<(Graph<'_>, Var)> = if parallel {
        images.par_iter().zip(plans.par_iter()).map(forward).collect::<Result<_>>()?
    } else {
        images.iter().zip(plans).map(forward).collect::<Result<_>>()?
    };

    let mut rows = Vec::with_capacity(2 * images.len() * dim);
    for (g, zn) in &graphs {
        rows.extend_from_slice(g.value(*zn).data());
    }
    let z = Tensor::new(&[2 * images.len(), dim], rows)?;
    let theta_slot = params.tensors().len();
    let mut lg = Graph::new();
    let zv = lg.param_owned(z, 0);
    let theta = lg.param(&loss.theta_tau, 1);
    let (total, report) = batch_loss(&mut lg, zv, &Pairing::adjacent(images.len())?, theta, loss)?;
    let loss_grads = lg.backward(total)?;
    let dz = loss_grads.get(0).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; 2 * images.len() * dim]);

    let backward = |(i, (g, zn)): (usize, &mut (Graph<'_>, Var))| -> Result<Gradients> {
        let seed = dz[2 * i * dim..(2 * i + 2) * dim].to_vec();
        g.backward_seeded(&[(*zn, seed)])
    };
    let per_image: Vec<Gradients> = if parallel {
        graphs.par_iter_mut().enumerate().map(backward).collect::<Result<_>>()?
    } else {
        graphs.iter_mut().enumerate().map(backward).collect::<Result<_>>()?
    };
    let mut grads = Gradients::default();
    for g in &per_image {
        grads.merge(g);
    }
    if let Some(dtheta) = loss_grads.get(1) {
        grads.add(theta_slot, dtheta);
    }
    Ok((report, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 0-based index of the update this report belongs to.
    pub step: u64,
    pub lr: f64,
    /// Mean of the micro-batch totals.
    pub loss: f64,
    pub tau: f64,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    pub micro: Vec<BatchLossReport>,
}

impl StepReport {
    pub fn metrics_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.loss, self.tau, self.mean_pos_sim, self.mean_neg_sim, self.lr
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// One optimizer update over up to `accum_steps` micro-batches. Partitions
/// are drawn from `state.partition_rng` in image order; gradients are
/// averaged over the micro-batches.
pub fn train_step(encoder: &Encoder, state: &mut TrainState, micro_batches: &[Vec<&ImageGray>]) -> Result<StepReport> {
    let cfg = state.train.clone();
    let micro: Vec<&Vec<&ImageGray>> = micro_batches.iter().filter(|b| !b.is_empty()).collect();
    if micro.is_empty() {
        return Err(Error::Config("train_step needs at least one image".into()));
    }
    if micro.len() > cfg.accum_steps {
        return Err(Error::Config(format!(
            "{} micro-batches exceed accum_steps = {}",
            micro.len(),
            cfg.accum_steps
        )));
    }
    let step = state.opt.step;
    let lr = lr_at(step as usize + 1, &cfg)?;
    let patches = state.encoder.num_patches();

    let mut rng = StreamRng::from_state(state.partition_rng);
    let mut reports = Vec::with_capacity(micro.len());
    let mut grads = Gradients::default();
    for batch in &micro {
        if batch.len() == 1 {
            warn!("micro-batch of one image has no negatives; its loss is identically 0");
        }
        let plans = batch
            .iter()
            .map(|_| sample_partition(patches, cfg.mask_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (report, g) = batch_gradients(encoder, &state.params, &state.loss, batch, &plans, cfg.parallel)?;
        grads.merge(&g);
        reports.push(report);
    }
    grads.scale(1.0 / micro.len() as f32);

    let theta_slot = state.params.tensors().len();
    let hp = AdamHyper::from(&cfg);
    for slot in 0..=theta_slot {
        if let Some(g) = grads.get(slot) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                let name = state.params.names().get(slot).map_or("theta_tau", String::as_str);
                return Err(Error::NonFinite(format!("gradient of {name}[{i}] at step {step}")));
            }
        }
    }
    let t = step + 1;
    for (slot, param) in state.params.tensors_mut().iter_mut().enumerate() {
        let zeros;
        let g = match grads.get(slot) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; param.len()];
                &zeros
            }
        };
        let decay = decays(param);
        adamw_update(param, g, &mut state.opt.m[slot], &mut state.opt.v[slot], t, lr, &hp, decay)?;
    }
    let dtheta = grads.get(theta_slot).map_or(vec![0.0], <[f32]>::to_vec);
    adamw_update(
        &mut state.loss.theta_tau,
        &dtheta,
        &mut state.opt.m[theta_slot],
        &mut state.opt.v[theta_slot],
        t,
        lr,
        &hp,
        false,
    )?;
    state.loss.clamp_theta();
    state.opt.step = t;
    state.partition_rng = rng.state();

    Ok(StepReport {
        step,
        lr,
        loss: mean(reports.iter().map(|r| r.total)),
        tau: reports[0].tau_value,
        mean_pos_sim: mean(reports.iter().map(|r| r.mean_pos_sim)),
        mean_neg_sim: mean(reports.iter().map(|r| r.mean_neg_sim)),
        micro: reports,
    })
}

/// Image indices used by optimizer step `step` (split into micro-batches).
pub fn step_batches(cfg: &TrainConfig, dataset: usize, step: usize) -> Vec<Vec<usize>> {
    let per_epoch = cfg.steps_per_epoch(dataset);
    let epoch = step / per_epoch;
    let mut order: Vec<usize> = (0..dataset).collect();
    rand::seq::SliceRandom::shuffle(
        order.as_mut_slice(),
        &mut StreamRng::new(cfg.seed, Purpose::Shuffle, epoch as u64),
    );
    let start = (step % per_epoch) * cfg.images_per_step();
    let end = (start + cfg.images_per_step()).min(dataset);
    order[start..end].chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many updates in total (the schedule is unchanged).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepReport>,
    pub collapse_warnings: usize,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.{CHECKPOINT_EXTENSION}"))
}

/// Runs (or continues) pre-training of `state` on `dataset`.
///
/// The schedule must already be resolved against the dataset size (see
/// [`TrainConfig::resolved`]). On a non-finite loss the run stops with an
/// error; previously written checkpoints are left in place.
pub fn pretrain(mut state: TrainState, dataset: &[ImageGray], opts: &PretrainOptions) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let resolved = state.train.resolved(dataset.len())?;
    if resolved != state.train {
        return Err(Error::Config("training schedule is not resolved for this dataset".into()));
    }
    let cfg = state.train.clone();
    let encoder = Encoder::new(state.encoder.clone())?;
    let end = opts.stop_after.map_or(cfg.total_steps as u64, |s| s.min(cfg.total_steps as u64));

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let fresh = state.step() == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    info!(
        "pre-training from step {} to {end} ({} images, {} per step)",
        state.step(),
        dataset.len(),
        cfg.images_per_step()
    );
    let mut monitor = CollapseMonitor::default();
    let mut collapse_warnings = 0;
    let mut metrics = Vec::new();
    while state.step() < end {
        let step = state.step();
        let batches: Vec<Vec<&ImageGray>> = step_batches(&cfg, dataset.len(), step as usize)
            .into_iter()
            .map(|b| b.into_iter().map(|i| &dataset[i]).collect())
            .collect();
        let report = train_step(&encoder, &mut state, &batches)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step} aborted: {m}")),
                other => other,
            })?;
        let anchors = 2 * batches[0].len();
        if monitor.observe(report.loss, anchors) {
            collapse_warnings += 1;
            warn!(
                "possible representation collapse: loss within {} of ln({}) for {} steps",
                monitor.tolerance,
                anchors - 1,
                monitor.patience
            );
        }
        if let Some((f, path)) = &mut log_file {
            writeln!(f, "{}", report.metrics_line()).map_err(|e| Error::io(path, e))?;
        }
        if step.is_multiple_of(50) || state.step() == end {
            info!("step {step}: loss {:.5} tau {:.3} lr {:.3e}", report.loss, report.tau, report.lr);
        }
        metrics.push(report);
        if let Some(dir) = &opts.out_dir {
            let done = state.step();
            if (cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every as u64)) || done == end {
                save_checkpoint(&checkpoint_path(dir, done), &state)?;
            }
        }
    }
    if let Some((f, path)) = &mut log_file {
        f.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(PretrainOutcome {
        state,
        metrics,
        collapse_warnings,
    })
}

/// Convenience: fresh state with a schedule resolved for `dataset` images.
pub fn fresh_state(encoder: EncoderConfig, train: TrainConfig, dataset: usize) -> Result<TrainState> {
    TrainState::init(encoder, train.resolved(dataset)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(warmup: usize, total: usize) -> TrainConfig {
        TrainConfig {
            lr_peak: 1.0,
            warmup_steps: warmup,
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let cfg = sched(10, 110);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(10, &cfg).unwrap(), 1.0);
        assert!(lr_at(110, &cfg).unwrap().abs() < 1e-15);
        assert!((lr_at(60, &cfg).unwrap() - 0.5).abs() < 1e-12);
        assert!(lr_at(111, &cfg).is_err());
    }

    #[test]
    fn schedule_is_lipschitz() {
        for (w, t) in [(1, 2), (5, 100), (25, 500), (3, 7)] {
            let cfg = sched(w, t);
            let bound = 1.0 / w as f64 + PI / (t - w) as f64;
            for s in 0..t {
                let d = (lr_at(s + 1, &cfg).unwrap() - lr_at(s, &cfg).unwrap()).abs();
                assert!(d <= bound + 1e-12, "step {s}: {d} > {bound}");
            }
        }
    }

    fn scalar_update(theta: f32, g: f32, lr: f64, wd: f64) -> f32 {
        let mut p = Tensor::scalar(theta);
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let hp = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        };
        adamw_update(&mut p, &[g], &mut m, &mut v, 1, lr, &hp, true).unwrap();
        p.item()
    }

    #[test]
    fn adamw_examples() {
        assert!((scalar_update(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-6);
        assert_eq!(scalar_update(1.0, 0.0, 0.1, 0.0), 1.0);
        assert!((scalar_update(1.0, 0.0, 0.1, 0.1) - 0.99).abs() < 1e-7);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut p = Tensor::scalar(1.0);
        let hp = AdamHyper::from(&TrainConfig::default());
        let err = adamw_update(&mut p, &[f32::NAN], &mut [0.0], &mut [0.0], 1, 0.1, &hp, false);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn decay_targets_matrices_only() {
        let cfg = EncoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            patch: 4,
            image: 8,
            ..EncoderConfig::default()
        };
        let p = init_params(&cfg, &mut StreamRng::new(0, Purpose::Init, 0)).unwrap();
        let decayed: Vec<&str> = p
            .names()
            .iter()
            .zip(p.tensors())
            .filter(|(_, t)| decays(t))
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(
            decayed,
            ["patch_proj", "blocks.0.qkv_w", "blocks.0.proj_w", "blocks.0.fc1_w", "blocks.0.fc2_w"]
        );
        assert!(!decays(&Tensor::scalar(1.0)));
    }

    #[test]
    fn resolution_fills_schedule() {
        let cfg = TrainConfig::default().resolved(800).unwrap();
        assert_eq!(cfg.total_steps, 500);
        assert_eq!(cfg.warmup_steps, 25);
        assert!(TrainConfig::default().resolved(0).is_err());
        let one = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        }
        .resolved(3)
        .unwrap();
        assert_eq!((one.total_steps, one.warmup_steps), (1, 0));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let cfg = TrainConfig {
            batch_size: 3,
            accum_steps: 2,
            ..TrainConfig::default()
        };
        for epoch in 0..3 {
            let per = cfg.steps_per_epoch(20);
            let mut seen: Vec<usize> = (0..per)
                .flat_map(|s| step_batches(&cfg, 20, epoch * per + s))
                .flatten()
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..20).collect::<Vec<_>>());
        }
        assert_ne!(step_batches(&cfg, 20, 0), step_batches(&cfg, 20, 4));
    }
}

//! Optimization loop: AdamW with parameter-group weight decay, linear
//! warmup + cosine decay, epoch-level metrics, frozen-set enforcement, and
//! multi-view top-1/top-5 evaluation.

use std::collections::BTreeMap;

use crate::data::{make_views, Video, ViewSpec};
use crate::error::{AptError, Result};
use crate::model::model_forward;
use crate::numerics::{Rng, Scalar, Stream, Tape};
use crate::prompt::TunedModel;

pub const REFERENCE_BATCH: f64 = 256.0;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub wd_prompts: f64,
    pub wd_head: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Stream seed for shuffling and dropout. Not a config-file key: the
    /// run's top-level seed is copied here so one seed drives everything.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            wd_prompts: 1e-5,
            wd_head: 1e-5,
            warmup_epochs: 1,
            total_epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(AptError::config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("eps", self.eps),
            ("wd_prompts", self.wd_prompts),
            ("wd_head", self.wd_head),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AptError::config(format!("{name} must be a finite non-negative rate")));
            }
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(AptError::config("betas must lie in [0, 1)".to_string()));
        }
        if self.batch_size == 0 {
            return Err(AptError::config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Base rate scaled linearly with batch size against a 256 reference.
    pub fn scaled_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / REFERENCE_BATCH
    }
}

/// Step-resolution schedule: linear 0 -> lr over the warmup, then cosine
/// down to exactly 0 at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
}

impl Schedule {
    pub fn from_config(cfg: &OptimConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.total_epochs * steps_per_epoch,
            peak_lr: cfg.scaled_lr(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Weight-decay group for a parameter name.
pub fn wd_group(name: &str) -> &'static str {
    if name.contains(".apt.") || name.contains(".vpt.") {
        "prompts"
    } else {
        "head"
    }
}

struct ParamState {
    m: Vec<f64>,
    v: Vec<f64>,
    group: &'static str,
}

/// AdamW with decoupled weight decay and bias-corrected moments, kept in
/// f64 regardless of the training dtype.
pub struct AdamW {
    betas: (f64, f64),
    eps: f64,
    t: u64,
    state: BTreeMap<String, ParamState>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64) -> Self {
        AdamW { betas, eps, t: 0, state: BTreeMap::new() }
    }

    /// Advance the shared step counter; call once before a sweep of updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One parameter update. `grad` must align elementwise with `param`.
    pub fn update<E: Scalar>(
        &mut self,
        name: &str,
        param: &mut [E],
        grad: &[E],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(AptError::invariant(format!(
                "gradient length {} does not match parameter {name} length {}",
                grad.len(),
                param.len()
            )));
        }
        let (b1, b2) = self.betas;
        let st = self.state.entry(name.to_string()).or_insert_with(|| ParamState {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            group: wd_group(name),
        });
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in param.iter_mut().zip(grad).enumerate() {
            let g = g.to_f64c();
            if !g.is_finite() {
                return Err(AptError::invariant(format!(
                    "non-finite gradient in {name} at element {i}"
                )));
            }
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            let theta = p.to_f64c();
            let updated = theta - lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * theta);
            *p = E::from_f64c(updated);
        }
        Ok(())
    }

    /// Parameter name -> weight-decay group, as registered by updates.
    pub fn groups(&self) -> BTreeMap<String, &'static str> {
        self.state.iter().map(|(k, v)| (k.clone(), v.group)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Wall-clock per epoch; reported separately so metrics stay
    /// byte-reproducible across machines.
    pub wall_ms: Vec<u128>,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub val_loss: f64,
    pub views: usize,
}

/// Ranked class indices for one probability row: descending probability,
/// ties broken by the lower class index.
pub fn rank_classes(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Multi-view evaluation: per-sample softmax probabilities averaged over
/// all temporal-clip x spatial-crop views, then top-k accuracy.
pub fn evaluate<E: Scalar>(
    model: &TunedModel<E>,
    data: &[(Video, usize)],
    views: &ViewSpec,
) -> Result<EvalReport> {
    views.validate()?;
    let arch = *model.arch();
    let classes = arch.num_classes;
    let k5 = classes.min(5);
    if data.is_empty() {
        return Err(AptError::config("evaluation set is empty".to_string()));
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut loss_sum = 0.0f64;
    for (video, label) in data {
        if *label >= classes {
            return Err(AptError::invariant(format!(
                "label {label} outside {classes}-class head"
            )));
        }
        let clips = make_views(video, arch.input_span(), views)?;
        let mut mean_probs = vec![0.0f64; classes];
        for clip in &clips {
            let mut tape = Tape::<E>::new();
            let bm = model.bind(&mut tape, false, None)?;
            let out = model_forward(&mut tape, &bm, &[clip], false)?;
            let logits: Vec<f64> = tape.value(out.logits).data().iter().map(|v| v.to_f64c()).collect();
            for (acc, p) in mean_probs.iter_mut().zip(softmax_f64(&logits)) {
                *acc += p;
            }
        }
        for p in &mut mean_probs {
            *p /= clips.len() as f64;
        }
        let ranked = rank_classes(&mean_probs);
        if ranked[0] == *label {
            hits1 += 1;
        }
        if ranked[..k5].contains(label) {
            hits5 += 1;
        }
        loss_sum += -mean_probs[*label].max(1e-300).ln();
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        top1: 100.0 * hits1 as f64 / n,
        top5: 100.0 * hits5 as f64 / n,
        val_loss: loss_sum / n,
        views: views.total_views(),
    })
}

/// Train `model` in place. Evaluates on `val` every `eval_every` epochs
/// (0 = final epoch only) and hard-fails if any frozen tensor changes.
pub fn train<E: Scalar>(
    model: &mut TunedModel<E>,
    train_set: &[(Video, usize)],
    val: Option<&[(Video, usize)]>,
    cfg: &OptimConfig,
    views: &ViewSpec,
    eval_every: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut outcome = TrainOutcome { metrics: Vec::new(), wall_ms: Vec::new() };
    if cfg.total_epochs == 0 {
        return Ok(outcome);
    }
    if train_set.is_empty() {
        return Err(AptError::config("training set is empty".to_string()));
    }
    let frozen_before = model.frozen_checksum()?;
    let trainable = model.trainable_names()?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let sched = Schedule::from_config(cfg, steps_per_epoch);
    let mut opt = AdamW::new(cfg.betas, cfg.eps);
    let mut global_step = 0usize;
    for epoch in 0..cfg.total_epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::seeded(cfg.seed, Stream::Shuffle(epoch as u64)).shuffle(&mut order);
        let mut dropout_rng = Rng::seeded(cfg.seed, Stream::Dropout(epoch as u64));
        let mut loss_sum = 0.0f64;
        let mut last_lr = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = sched.lr_at(global_step);
            last_lr = lr;
            let mut tape = Tape::<E>::new();
            let bm = model.bind(&mut tape, true, Some(&mut dropout_rng))?;
            let videos: Vec<&Video> = chunk.iter().map(|&i| &train_set[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].1).collect();
            let out = model_forward(&mut tape, &bm, &videos, false)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_val = tape.value(loss).at(0, 0).to_f64c();
            if !loss_val.is_finite() {
                return Err(AptError::invariant(format!(
                    "non-finite training loss at epoch {epoch} step {global_step}"
                )));
            }
            tape.backward(loss)?;
            opt.begin_step();
            let mut tensors: BTreeMap<String, &mut crate::numerics::Tensor<E>> =
                model.named_mut().into_iter().collect();
            for (name, var) in &bm.names {
                if !trainable.contains(name) {
                    continue;
                }
                let grad = tape.grad(*var).ok_or_else(|| {
                    AptError::invariant(format!("no gradient reached trainable tensor {name}"))
                })?;
                let wd = match wd_group(name) {
                    "prompts" => cfg.wd_prompts,
                    _ => cfg.wd_head,
                };
                let param = tensors
                    .get_mut(name)
                    .ok_or_else(|| AptError::invariant(format!("unknown parameter {name}")))?;
                opt.update(name, param.data_mut(), grad, lr, wd)?;
            }
            loss_sum += loss_val * chunk.len() as f64;
            global_step += 1;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let is_last = epoch + 1 == cfg.total_epochs;
        let due = eval_every > 0 && (epoch + 1) % eval_every == 0;
        let mut metrics = EpochMetrics {
            epoch,
            train_loss,
            lr: last_lr,
            top1: None,
            top5: None,
            val_loss: None,
        };
        if let Some(val) = val {
            if due || is_last {
                let report = evaluate(model, val, views)?;
                metrics.top1 = Some(report.top1);
                metrics.top5 = Some(report.top5);
                metrics.val_loss = Some(report.val_loss);
            }
        }
        outcome.metrics.push(metrics);
        outcome.wall_ms.push(started.elapsed().as_millis());
    }
    if model.frozen_checksum()? != frozen_before {
        return Err(AptError::invariant(
            "a frozen tensor changed during training".to_string(),
        ));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;
    use crate::model::ArchSpec;
    use crate::numerics::Tensor;
    use crate::prompt::{DepthPlacement, TuningMode};

    fn cfg(epochs: usize, batch: usize, lr: f64, seed: u64) -> OptimConfig {
        OptimConfig {
            base_lr: lr,
            warmup_epochs: if epochs > 1 { 1 } else { 0 },
            total_epochs: epochs,
            batch_size: batch,
            seed,
            ..OptimConfig::default()
        }
    }

    fn apt_mode(n_p: usize) -> TuningMode {
        TuningMode::Apt {
            n_p,
            placement: DepthPlacement::All,
            dropout_rate: 0.1,
            reparam: true,
        }
    }

    fn tiny_set(seed: u64, n: usize) -> Vec<(Video, usize)> {
        generate(seed, n, (4, 8, 8, 1), 4, 0.05).unwrap().samples
    }

    #[test]
    fn schedule_boundary_values() {
        let sched = Schedule { warmup_steps: 10, total_steps: 110, peak_lr: 0.4 };
        assert_eq!(sched.lr_at(0), 0.0);
        assert_eq!(sched.lr_at(10), 0.4, "end of warmup hits the peak exactly");
        assert_eq!(sched.lr_at(5), 0.2);
        // Midpoint of the cosine phase.
        assert!((sched.lr_at(60) - 0.2).abs() < 1e-12);
        // Decayed to zero at (and beyond) the end.
        assert!(sched.lr_at(109) > 0.0);
        assert_eq!(sched.lr_at(110), 0.0);
        assert_eq!(sched.lr_at(200), 0.0);
        // Monotone non-increasing through the cosine phase.
        let mut prev = f64::INFINITY;
        for step in 10..=110 {
            let lr = sched.lr_at(step);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn lr_scales_linearly_with_batch_size() {
        let mut c = cfg(10, 256, 0.5, 0);
        assert_eq!(c.scaled_lr(), 0.5);
        c.batch_size = 64;
        assert_eq!(c.scaled_lr(), 0.125);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(5, 8, 0.1, 0);
        c.warmup_epochs = 5;
        assert!(c.validate().is_err());
        c.warmup_epochs = 6;
        assert!(c.validate().is_err());
        let mut c = cfg(5, 8, 0.1, 0);
        c.base_lr = -0.1;
        assert!(c.validate().is_err());
        let mut c = cfg(5, 8, 0.1, 0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        // 0 total epochs is allowed (no-op run), warmup check skipped.
        let c = cfg(0, 8, 0.1, 0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn adamw_first_step_has_sign_magnitude() {
        // Loss θ², θ=1, grad 2: bias-corrected first step moves by ~lr.
        let mut opt = AdamW::new((0.9, 0.999), 1e-8);
        let mut theta = [1.0f64];
        opt.begin_step();
        opt.update("w", &mut theta, &[2.0], 0.1, 0.0).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-7, "theta {}", theta[0]);
    }

    #[test]
    fn adamw_zero_grads_are_a_no_op_without_decay() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8);
        let mut theta = [0.7f32, -1.3];
        let before = theta;
        for _ in 0..3 {
            opt.begin_step();
            opt.update("w", &mut theta, &[0.0, 0.0], 0.2, 0.0).unwrap();
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn adamw_zero_grads_apply_pure_decoupled_decay() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8);
        let mut theta = [2.0f64];
        opt.begin_step();
        opt.update("w", &mut theta, &[0.0], 0.1, 0.1).unwrap();
        assert!((theta[0] - 0.99 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8);
        let mut theta = [1.0f64];
        opt.begin_step();
        let err = opt.update("block00.apt.k_p", &mut theta, &[f64::NAN], 0.1, 0.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("block00.apt.k_p"), "diagnostic names the tensor: {msg}");
        assert!(matches!(err, AptError::InvariantBreach(_)));
    }

    #[test]
    fn weight_decay_groups_are_read_back_from_state() {
        let mut opt = AdamW::new((0.9, 0.999), 1e-8);
        let mut a = [0.1f32];
        let mut b = [0.1f32];
        let mut c = [0.1f32];
        opt.begin_step();
        opt.update("block00.apt.k_p", &mut a, &[0.0], 0.1, 1e-5).unwrap();
        opt.update("block01.vpt.p", &mut b, &[0.0], 0.1, 1e-5).unwrap();
        opt.update("head.w", &mut c, &[0.0], 0.1, 1e-5).unwrap();
        let groups = opt.groups();
        assert_eq!(groups["block00.apt.k_p"], "prompts");
        assert_eq!(groups["block01.vpt.p"], "prompts");
        assert_eq!(groups["head.w"], "head");
    }

    #[test]
    fn rank_classes_breaks_ties_by_lower_index() {
        assert_eq!(rank_classes(&[2.0, 1.0, 0.0]), vec![0, 1, 2]);
        assert_eq!(rank_classes(&[0.0, 1.0, 2.0]), vec![2, 1, 0]);
        assert_eq!(rank_classes(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
        assert_eq!(rank_classes(&[0.1, 0.8, 0.8]), vec![1, 2, 0]);
    }

    #[test]
    fn evaluate_zero_head_bias_model() {
        let arch = ArchSpec::tiny(2);
        let mut model: TunedModel<f32> =
            TunedModel::init(arch, TuningMode::LinearProbe, 3).unwrap();
        for v in model.backbone.head_w.data_mut() {
            *v = 0.0;
        }
        model.backbone.head_b = Tensor::from_vec(1, 2, vec![0.9, -0.9]).unwrap();
        let data = tiny_set(5, 8);
        let data: Vec<(Video, usize)> =
            data.into_iter().map(|(v, l)| (v, l % 2)).collect();
        let views = ViewSpec::default();
        let report = evaluate(&model, &data, &views).unwrap();
        // Predicts class 0 always; labels alternate 0/1 -> 50% top-1.
        assert_eq!(report.top1, 50.0);
        // Two classes: top-5 degenerates to top-2 = everything.
        assert_eq!(report.top5, 100.0);
        assert!(report.top1 <= report.top5);
        assert_eq!(report.views, 3);
    }

    #[test]
    fn evaluate_respects_view_spec_counts() {
        let arch = ArchSpec::tiny(4);
        let model: TunedModel<f32> = TunedModel::init(arch, TuningMode::LinearProbe, 4).unwrap();
        let data = tiny_set(6, 4);
        for (k, spatial, want) in [(1usize, 1usize, 1usize), (2, 3, 6)] {
            let views = ViewSpec { temporal_clips: k, spatial_views: spatial };
            let report = evaluate(&model, &data, &views).unwrap();
            assert_eq!(report.views, want);
            assert!(report.top1 <= report.top5);
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let arch = ArchSpec::tiny(4);
        let mut model: TunedModel<f32> = TunedModel::init(arch, apt_mode(2), 7).unwrap();
        let before = crate::model::checksum_tensors(&model.named());
        let data = tiny_set(7, 4);
        let out = train(&mut model, &data, None, &cfg(0, 2, 0.05, 7), &ViewSpec::default(), 0)
            .unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(crate::model::checksum_tensors(&model.named()), before);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let arch = ArchSpec::tiny(4);
        let data = tiny_set(8, 10);
        let run = || {
            let mut model: TunedModel<f32> = TunedModel::init(arch, apt_mode(2), 11).unwrap();
            let out = train(
                &mut model,
                &data,
                Some(&data),
                &cfg(3, 4, 0.05, 11),
                &ViewSpec::default(),
                0,
            )
            .unwrap();
            (out.metrics, crate::model::checksum_tensors(&model.named()))
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
        assert_eq!(m1.len(), 3);
        // Only the last epoch evaluated under eval_every = 0.
        assert!(m1[0].top1.is_none() && m1[2].top1.is_some());
    }

    #[test]
    fn frozen_trunk_survives_training_except_full_mode() {
        let arch = ArchSpec::tiny(4);
        let data = tiny_set(9, 6);
        for (mode, changes) in [
            (TuningMode::LinearProbe, false),
            (TuningMode::VptDeep { n_p: 2 }, false),
            (apt_mode(2), false),
            (TuningMode::Full, true),
        ] {
            let mut model: TunedModel<f32> = TunedModel::init(arch, mode, 13).unwrap();
            let before = model.trunk_checksum();
            train(&mut model, &data, None, &cfg(2, 3, 0.05, 13), &ViewSpec::default(), 0)
                .unwrap();
            let moved = model.trunk_checksum() != before;
            assert_eq!(moved, changes, "mode {mode:?}");
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let arch = ArchSpec::tiny(4);
        let data = tiny_set(10, 16);
        let mut model: TunedModel<f32> = TunedModel::init(arch, apt_mode(4), 17).unwrap();
        let out = train(
            &mut model,
            &data,
            None,
            &cfg(8, 4, 0.3, 17),
            &ViewSpec::default(),
            0,
        )
        .unwrap();
        let first = out.metrics.first().unwrap().train_loss;
        let last = out.metrics.last().unwrap().train_loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }
}

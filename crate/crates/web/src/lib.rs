//! Browser demo bindings: thin wasm-bindgen wrappers over the core crate.
//!
//! Three operations back the static demo page:
//! - [`cost_sweep_json`]: parameter/GFLOPs curves for APT vs VPT-deep.
//! - [`lr_schedule_json`]: the warmup+cosine schedule at step resolution.
//! - [`toy_train_json`]: a complete deterministic training run on the tiny
//!   synthetic motion task, small enough for a browser tab.
//!
//! Every function returns a JSON string; errors come back as
//! `{"error": "..."}` so the page can render them without unwinding through
//! the FFI boundary. The crate also compiles natively, which is how its
//! tests run.

use wasm_bindgen::prelude::wasm_bindgen;

use apt_core::config::preset_arch;
use apt_core::costmodel;
use apt_core::data::{self, ViewSpec};
use apt_core::error::Result;
use apt_core::prompt::{DepthPlacement, TunedModel, TuningMode, DEFAULT_PROMPT_DROPOUT};
use apt_core::trainer::{self, OptimConfig, Schedule};

fn err_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn ok_or_err(r: Result<String>) -> String {
    match r {
        Ok(s) => s,
        Err(e) => err_json(&e.to_string()),
    }
}

fn cost_sweep_impl(preset: &str, classes: usize, max_n_p: usize, step: usize) -> Result<String> {
    let arch = preset_arch(preset, classes)?;
    let step = step.max(1);
    let lp = costmodel::report(&TuningMode::LinearProbe, &arch)?;
    let full = costmodel::report(&TuningMode::Full, &arch)?;
    let mut rows = Vec::new();
    let mut n_p = step;
    while n_p <= max_n_p {
        let apt = costmodel::report(
            &TuningMode::Apt {
                n_p,
                placement: DepthPlacement::all(),
                dropout_rate: DEFAULT_PROMPT_DROPOUT,
                reparam: true,
            },
            &arch,
        )?;
        let vpt = costmodel::report(&TuningMode::VptDeep { n_p }, &arch)?;
        rows.push(serde_json::json!({
            "n_p": n_p,
            "apt_params": apt.trainable_params,
            "vpt_params": vpt.trainable_params,
            "apt_gflops": apt.gflops,
            "vpt_gflops": vpt.gflops,
        }));
        n_p += step;
    }
    Ok(serde_json::json!({
        "preset": preset,
        "classes": classes,
        "backbone_params": lp.total_params,
        "baseline_gflops": full.gflops,
        "lp_params": lp.trainable_params,
        "rows": rows,
    })
    .to_string())
}

/// Trainable-parameter and GFLOPs curves for APT and VPT-deep over a range
/// of prompt lengths, plus the linear-probe/backbone reference numbers.
#[wasm_bindgen]
pub fn cost_sweep_json(preset: &str, classes: usize, max_n_p: usize, step: usize) -> String {
    ok_or_err(cost_sweep_impl(preset, classes, max_n_p, step))
}

fn lr_schedule_impl(
    base_lr: f64,
    batch_size: usize,
    warmup_epochs: usize,
    total_epochs: usize,
    steps_per_epoch: usize,
) -> Result<String> {
    let cfg = OptimConfig {
        base_lr,
        batch_size,
        warmup_epochs,
        total_epochs,
        ..Default::default()
    };
    cfg.validate()?;
    let sched = Schedule::from_config(&cfg, steps_per_epoch.max(1));
    let total = total_epochs * steps_per_epoch.max(1);
    let lrs: Vec<f64> = (0..=total).map(|s| sched.lr_at(s)).collect();
    Ok(serde_json::json!({
        "peak_lr": cfg.scaled_lr(),
        "warmup_steps": warmup_epochs * steps_per_epoch.max(1),
        "total_steps": total,
        "lr": lrs,
    })
    .to_string())
}

/// The linear-warmup + cosine-decay learning-rate curve, one value per step,
/// with the batch-scaled peak.
#[wasm_bindgen]
pub fn lr_schedule_json(
    base_lr: f64,
    batch_size: usize,
    warmup_epochs: usize,
    total_epochs: usize,
    steps_per_epoch: usize,
) -> String {
    ok_or_err(lr_schedule_impl(
        base_lr,
        batch_size,
        warmup_epochs,
        total_epochs,
        steps_per_epoch,
    ))
}

fn parse_mode(kind: &str, n_p: usize, reparam: bool) -> Result<TuningMode> {
    match kind {
        "linear-probe" => Ok(TuningMode::LinearProbe),
        "vpt-deep" => Ok(TuningMode::VptDeep { n_p }),
        "apt" => Ok(TuningMode::Apt {
            n_p,
            placement: DepthPlacement::all(),
            dropout_rate: DEFAULT_PROMPT_DROPOUT,
            reparam,
        }),
        "full" => Ok(TuningMode::Full),
        other => Err(apt_core::error::AptError::config(format!(
            "unknown mode {other:?}"
        ))),
    }
}

fn toy_train_impl(
    seed: u64,
    mode_kind: &str,
    n_p: usize,
    reparam: bool,
    epochs: usize,
    train_samples: usize,
    base_lr: f64,
) -> Result<String> {
    let arch = apt_core::model::ArchSpec::tiny(4);
    let mode = parse_mode(mode_kind, n_p, reparam)?;
    mode.validate(&arch)?;
    let train_samples = train_samples.clamp(8, 512);
    let test_samples = (train_samples / 4).max(8);
    let set = data::generate(
        seed,
        train_samples + test_samples,
        (arch.frames, arch.height, arch.width, arch.channels),
        arch.num_classes,
        0.05,
    )?;
    let train = &set.samples[..train_samples];
    let test = &set.samples[train_samples..];

    let mut model = TunedModel::<f32>::init(arch, mode, seed)?;
    let cfg = OptimConfig {
        base_lr,
        warmup_epochs: if epochs > 1 { 1 } else { 0 },
        total_epochs: epochs,
        batch_size: 16,
        seed,
        ..Default::default()
    };
    let views = ViewSpec { temporal_clips: 1, spatial_views: 1 };
    let outcome = trainer::train(&mut model, train, Some(test), &cfg, &views, 1)?;
    let report = trainer::evaluate(&model, test, &views)?;
    let metrics = serde_json::to_value(&outcome.metrics)
        .map_err(|e| apt_core::error::AptError::invariant(format!("serialize: {e}")))?;
    Ok(serde_json::json!({
        "mode": mode_kind,
        "n_p": n_p,
        "trainable_params": model.count_trainable()?,
        "metrics": metrics,
        "final_top1": report.top1,
        "final_val_loss": report.val_loss,
    })
    .to_string())
}

/// Run a complete deterministic training session on the tiny synthetic
/// motion task and report per-epoch metrics plus the final evaluation.
#[wasm_bindgen]
pub fn toy_train_json(
    seed: u64,
    mode_kind: &str,
    n_p: usize,
    reparam: bool,
    epochs: usize,
    train_samples: usize,
    base_lr: f64,
) -> String {
    ok_or_err(toy_train_impl(
        seed,
        mode_kind,
        n_p,
        reparam,
        epochs,
        train_samples,
        base_lr,
    ))
}

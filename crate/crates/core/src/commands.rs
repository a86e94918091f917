//! Command implementations shared by the CLI binary and tests. Each
//! subcommand is a thin wrapper over one of these functions, so integration
//! tests exercise the exact production code paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::costmodel;
use crate::data::{self, SyntheticVideoSet, Video, ViewSpec};
use crate::error::{AptError, Result};
use crate::model::{model_forward, ArchSpec};
use crate::numerics::{grad_check, Rng, Stream, Tensor};
use crate::prompt::{DepthPlacement, TunedModel, TuningMode, DEFAULT_PROMPT_DROPOUT};
use crate::trainer::{self, EpochMetrics, EvalReport};

/// Everything `train` leaves behind, with paths for follow-up commands.
#[derive(Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Held-out split as an APTD file (written for synthetic data, echoed
    /// for file-backed data) so `eval` can replay the final numbers.
    pub test_data_path: Option<PathBuf>,
    pub metrics: Vec<EpochMetrics>,
    pub final_eval: Option<EvalReport>,
}

fn check_dataset_matches(set: &SyntheticVideoSet, arch: &ArchSpec, what: &str) -> Result<()> {
    let dims = (set.frames, set.height, set.width, set.channels);
    let want = (arch.frames, arch.height, arch.width, arch.channels);
    if dims != want {
        return Err(AptError::artifact(format!(
            "{what}: video dims {dims:?} do not match model input {want:?}"
        )));
    }
    if set.num_classes != arch.num_classes {
        return Err(AptError::artifact(format!(
            "{what}: dataset has {} classes, model head has {}",
            set.num_classes, arch.num_classes
        )));
    }
    Ok(())
}

fn load_dataset(path: &Path, arch: &ArchSpec) -> Result<SyntheticVideoSet> {
    let set = SyntheticVideoSet::load_aptd(path)?;
    check_dataset_matches(&set, arch, &path.display().to_string())?;
    Ok(set)
}

fn write_metrics_jsonl(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut text = String::new();
    for m in metrics {
        let line = serde_json::to_string(m)
            .map_err(|e| AptError::invariant(format!("metrics serialize: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Train per the config file; writes `metrics.jsonl`, `checkpoint.aptc` and
/// (for synthetic data) `test.aptd` under the configured output directory.
pub fn cmd_train(config_path: &Path) -> Result<TrainSummary> {
    let cfg = RunConfig::from_path(config_path)?;
    let arch = cfg.arch()?;
    let mode = cfg.tuning_mode()?;
    let views = cfg.eval.views();

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    // Assemble train/test splits. Synthetic samples depend only on
    // (seed, index), so the first `train_samples` indices are the train
    // split and the tail is held out.
    let (train_vec, test_set): (Vec<(Video, usize)>, Option<SyntheticVideoSet>) =
        if let Some(train_path) = &cfg.data.train_path {
            let train = load_dataset(Path::new(train_path), &arch)?;
            let test = match &cfg.data.test_path {
                Some(p) => Some(load_dataset(Path::new(p), &arch)?),
                None => None,
            };
            (train.samples, test)
        } else {
            let n_train = cfg.data.train_samples.unwrap_or(0);
            let n_test = cfg.data.test_samples.unwrap_or(0);
            let dims = (arch.frames, arch.height, arch.width, arch.channels);
            let full = data::generate(
                cfg.seed,
                n_train + n_test,
                dims,
                arch.num_classes,
                cfg.data.noise_sigma,
            )?;
            let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
            let test = if n_test > 0 { Some(full.subset(&test_idx)) } else { None };
            let mut train = full.samples;
            train.truncate(n_train);
            (train, test)
        };

    let mut model = TunedModel::<f32>::init(arch, mode, cfg.seed)?;
    let mut ocfg = cfg.optim.clone();
    // One seed drives everything: model init, data and training streams.
    ocfg.seed = cfg.seed;

    let outcome = trainer::train(
        &mut model,
        &train_vec,
        test_set.as_ref().map(|s| s.samples.as_slice()),
        &ocfg,
        &views,
        cfg.eval.every,
    )?;

    let metrics_path = out_dir.join("metrics.jsonl");
    write_metrics_jsonl(&metrics_path, &outcome.metrics)?;

    let checkpoint_path = out_dir.join("checkpoint.aptc");
    checkpoint::save(&model, &checkpoint_path)?;

    let test_data_path = if let Some(test) = &test_set {
        if cfg.data.train_path.is_some() {
            cfg.data.test_path.as_ref().map(PathBuf::from)
        } else {
            let p = out_dir.join("test.aptd");
            test.save_aptd(&p)?;
            Some(p)
        }
    } else {
        None
    };

    let final_eval = outcome
        .metrics
        .iter()
        .rev()
        .find(|m| m.top1.is_some())
        .map(|m| EvalReport {
            top1: m.top1.unwrap(),
            top5: m.top5.unwrap_or(0.0),
            val_loss: m.val_loss.unwrap_or(f64::NAN),
            views: views.total_views(),
        });

    Ok(TrainSummary {
        out_dir,
        metrics_path,
        checkpoint_path,
        test_data_path,
        metrics: outcome.metrics,
        final_eval,
    })
}

/// Evaluate a checkpoint on an APTD dataset under the given view spec.
pub fn cmd_eval(checkpoint_path: &Path, data_path: &Path, views: &ViewSpec) -> Result<EvalReport> {
    let model = checkpoint::load::<f32>(checkpoint_path)?;
    let set = load_dataset(data_path, model.arch())?;
    trainer::evaluate(&model, &set.samples, views)
}

/// Expand mode names × prompt lengths into concrete tuning modes. Prompt
/// lengths apply to the prompt-based modes; `full`/`linear-probe` emit one
/// row each regardless.
pub fn cost_modes(mode_kinds: &[String], prompt_lengths: &[usize]) -> Result<Vec<TuningMode>> {
    let mut modes = Vec::new();
    for kind in mode_kinds {
        match kind.as_str() {
            "full" => modes.push(TuningMode::Full),
            "linear-probe" => modes.push(TuningMode::LinearProbe),
            "vpt-deep" => {
                for &n_p in prompt_lengths {
                    modes.push(TuningMode::VptDeep { n_p });
                }
            }
            "apt" => {
                for &n_p in prompt_lengths {
                    modes.push(TuningMode::Apt {
                        n_p,
                        placement: DepthPlacement::all(),
                        dropout_rate: DEFAULT_PROMPT_DROPOUT,
                        reparam: true,
                    });
                }
            }
            other => {
                return Err(AptError::config(format!(
                    "unknown cost mode {other:?}; expected full, linear-probe, vpt-deep or apt"
                )))
            }
        }
    }
    if modes.is_empty() {
        return Err(AptError::config("cost: no modes requested".to_string()));
    }
    Ok(modes)
}

/// Render the cost table as CSV: exact integer parameter counts, percentage
/// of the backbone, and GFLOPs per forward pass.
pub fn cmd_cost(arch: &ArchSpec, modes: &[TuningMode]) -> Result<String> {
    let rows = costmodel::sweep(arch, modes)?;
    let mut csv = String::from("mode,n_p,trainable_params,trainable_pct,gflops\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{:.1}%,{:.3}\n",
            r.mode, r.n_p, r.trainable_params, r.trainable_pct, r.gflops
        ));
    }
    Ok(csv)
}

/// Gradient-check verdict, aggregated per parameter group.
#[derive(Debug)]
pub struct GradCheckSummary {
    /// (group, max relative error) sorted by group name.
    pub groups: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Tensors at or above `tol`, with their errors.
    pub offenders: Vec<(String, f64)>,
    pub tol: f64,
}

impl GradCheckSummary {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }

    /// One printable line per parameter group, plus a verdict line.
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .groups
            .iter()
            .map(|(g, e)| format!("group {g}: max rel err {e:.3e}"))
            .collect();
        if self.pass() {
            out.push(format!("PASS: all gradients within {:.1e}", self.tol));
        } else {
            out.push(format!(
                "FAIL: {} tensor(s) at or above {:.1e}, worst {} ({:.3e})",
                self.offenders.len(),
                self.tol,
                self.worst_param,
                self.max_rel_err
            ));
            for (name, err) in &self.offenders {
                out.push(format!("  offender {name}: {err:.3e}"));
            }
        }
        out
    }
}

fn param_group(name: &str) -> &'static str {
    if name.contains(".apt.s_") {
        "scales"
    } else if name.contains(".apt.") || name.contains(".vpt.") {
        "prompts"
    } else if name.starts_with("head.") {
        "head"
    } else if name.starts_with("fc_norm.") {
        "fc_norm"
    } else {
        "backbone"
    }
}

/// Check analytic gradients of every trainable tensor against 64-bit central
/// finite differences on one synthetic sample.
///
/// `corrupt` is a negative control: it leaks a parameter-dependent term into
/// the loss value that the tape cannot see, so the check must fail.
pub fn cmd_gradcheck(config_path: &Path, tol: f64, corrupt: bool) -> Result<GradCheckSummary> {
    let cfg = RunConfig::from_path(config_path)?;
    let arch = cfg.arch()?;
    let mode = cfg.tuning_mode()?;

    // The check runs in f64 regardless of the training dtype; f32 rounding
    // would drown the finite-difference signal.
    let mut model = TunedModel::<f64>::init(arch, mode, cfg.seed)?;

    let mut rng = Rng::seeded(cfg.seed, Stream::GradCheck);
    // Move the checked tensors to a generic point first. Fresh-init prompts
    // sit near zero, where their gradients are ~1e-8 and central differences
    // are all cancellation noise; healthy magnitudes make the comparison
    // meaningful. Scales initialize exactly at the clamp kink (s = 1), where
    // the two-sided difference straddles two subgradients, so jitter each
    // one to either side, well clear of the finite-difference step.
    for (name, t) in model.named_mut() {
        if name.contains(".apt.s_") {
            for s in t.data_mut() {
                let mut v = 1.0f64;
                while (v - 1.0).abs() < 2e-2 {
                    v = 1.0 + 0.2 * (rng.next_f64() - 0.5);
                }
                *s = v;
            }
        } else if name.contains(".apt.") || name.contains(".vpt.") {
            for p in t.data_mut() {
                *p = 0.3 * rng.normal();
            }
        }
    }

    // A synthetic probe input: pixel statistics do not matter for the
    // arithmetic being checked, only that activations are generic.
    let mut video = Video::zeros(arch.frames, arch.height, arch.width, arch.channels);
    for px in &mut video.data {
        *px = rng.normal() as f32;
    }
    let label = 1 % arch.num_classes;

    let trainable = model.trainable_names()?;
    let params: Vec<(String, Tensor<f64>)> = model
        .named()
        .into_iter()
        .filter(|(name, _)| trainable.contains(name))
        .map(|(name, t)| (name, t.clone()))
        .collect();

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let report = grad_check(&params, 2e-3, |tape, vars| {
        let overrides: BTreeMap<String, crate::numerics::Var> =
            names.iter().cloned().zip(vars.iter().copied()).collect();
        let bm = model.bind_with_overrides(tape, false, None, &overrides)?;
        let out = model_forward(tape, &bm, &[&video], false)?;
        let mut loss = tape.cross_entropy(out.logits, &[label])?;
        if corrupt {
            let leak: f64 = tape.value(vars[0]).data().iter().sum();
            let c = tape.constant(Tensor::from_vec(1, 1, vec![0.01 * leak])?);
            loss = tape.add(loss, c)?;
        }
        Ok(loss)
    })?;

    let mut groups: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut offenders = Vec::new();
    for (name, err) in &report.per_param {
        let g = groups.entry(param_group(name)).or_insert(0.0);
        if *err > *g {
            *g = *err;
        }
        if *err >= tol {
            offenders.push((name.clone(), *err));
        }
    }
    Ok(GradCheckSummary {
        groups: groups.into_iter().map(|(g, e)| (g.to_string(), e)).collect(),
        max_rel_err: report.max_rel_err,
        worst_param: report.worst_param,
        offenders,
        tol,
    })
}

#[derive(Debug)]
pub struct DatagenSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub num_classes: usize,
}

/// Generate a synthetic motion dataset and write it as an APTD file.
pub fn cmd_datagen(
    path: &Path,
    seed: u64,
    n_samples: usize,
    dims: (usize, usize, usize, usize),
    num_classes: usize,
    noise_sigma: f64,
) -> Result<DatagenSummary> {
    let set = data::generate(seed, n_samples, dims, num_classes, noise_sigma)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    set.save_aptd(path)?;
    Ok(DatagenSummary { path: path.to_path_buf(), samples: n_samples, num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("aptw-cmd-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn tiny_apt_config(dir: &Path, out: &Path) -> PathBuf {
        let text = format!(
            r#"
seed = 11
out_dir = "{}"

[model]
preset = "tiny"
num_classes = 4

[mode]
kind = "apt"
n_p = 4
placement = "all"
dropout = 0.1
reparam = true

[optim]
base_lr = 0.02
warmup_epochs = 1
total_epochs = 3
batch_size = 8

[data]
train_samples = 16
test_samples = 8

[eval]
temporal_clips = 1
spatial_views = 1
every = 0
"#,
            out.display()
        );
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn train_writes_metrics_checkpoint_and_test_split() {
        let dir = tmp_dir("train");
        let out = dir.join("out");
        let cfg = tiny_apt_config(&dir, &out);
        let summary = cmd_train(&cfg).unwrap();

        assert_eq!(summary.metrics.len(), 3, "one metrics row per epoch");
        let text = std::fs::read_to_string(&summary.metrics_path).unwrap();
        assert_eq!(text.lines().count(), 3);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("epoch").is_some() && v.get("train_loss").is_some());
        }
        assert!(summary.checkpoint_path.exists());
        assert!(summary.test_data_path.as_ref().unwrap().exists());
        assert!(summary.final_eval.is_some(), "val split present, eval ran");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn eval_replays_the_training_final_numbers_exactly() {
        let dir = tmp_dir("eval");
        let out = dir.join("out");
        let cfg = tiny_apt_config(&dir, &out);
        let summary = cmd_train(&cfg).unwrap();
        let views = ViewSpec { temporal_clips: 1, spatial_views: 1 };
        let report = cmd_eval(
            &summary.checkpoint_path,
            summary.test_data_path.as_ref().unwrap(),
            &views,
        )
        .unwrap();
        let last = summary.final_eval.unwrap();
        assert_eq!(report.top1, last.top1);
        assert_eq!(report.top5, last.top5);
        assert_eq!(report.val_loss, last.val_loss);
        assert_eq!(report.views, 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rerun_of_same_config_is_byte_identical() {
        let dir = tmp_dir("rerun");
        let out_a = dir.join("a");
        let out_b = dir.join("b");
        std::fs::create_dir_all(dir.join("ca")).unwrap();
        std::fs::create_dir_all(dir.join("cb")).unwrap();
        let cfg_a = tiny_apt_config(&dir.join("ca"), &out_a);
        let cfg_b = tiny_apt_config(&dir.join("cb"), &out_b);
        let a = cmd_train(&cfg_a).unwrap();
        let b = cmd_train(&cfg_b).unwrap();
        let bytes_a = std::fs::read(&a.metrics_path).unwrap();
        let bytes_b = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(bytes_a, bytes_b, "metrics.jsonl must replay bitwise");
        let ckpt_a = std::fs::read(&a.checkpoint_path).unwrap();
        let ckpt_b = std::fs::read(&b.checkpoint_path).unwrap();
        assert_eq!(ckpt_a, ckpt_b, "checkpoints must replay bitwise");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn eval_rejects_mismatched_dataset() {
        let dir = tmp_dir("mismatch");
        let out = dir.join("out");
        let cfg = tiny_apt_config(&dir, &out);
        let summary = cmd_train(&cfg).unwrap();
        // 8 classes instead of 4: same video dims, wrong head.
        let other = dir.join("other.aptd");
        cmd_datagen(&other, 3, 8, (4, 8, 8, 1), 8, 0.05).unwrap();
        let views = ViewSpec { temporal_clips: 1, spatial_views: 1 };
        let err = cmd_eval(&summary.checkpoint_path, &other, &views).unwrap_err();
        assert!(matches!(err, AptError::ArtifactMismatch(_)), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn datagen_then_load_round_trips() {
        let dir = tmp_dir("datagen");
        let p = dir.join("set.aptd");
        let s = cmd_datagen(&p, 5, 12, (4, 8, 8, 1), 4, 0.05).unwrap();
        assert_eq!(s.samples, 12);
        let set = SyntheticVideoSet::load_aptd(&p).unwrap();
        assert_eq!(set.samples.len(), 12);
        assert_eq!(set.num_classes, 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cost_csv_contains_published_table_rows() {
        let arch = ArchSpec::vit_small_video(174);
        let modes = cost_modes(&["apt".to_string()], &[400]).unwrap();
        let csv = cmd_cost(&arch, &modes).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "mode,n_p,trainable_params,trainable_pct,gflops");
        let row = lines.next().unwrap();
        assert!(row.contains("691758"), "{row}");
        assert!(row.contains("3.2%"), "{row}");

        let base = ArchSpec::vit_base_video(101);
        let modes = cost_modes(&["apt".to_string()], &[200]).unwrap();
        let csv = cmd_cost(&base, &modes).unwrap();
        assert!(csv.contains("391205"), "{csv}");
    }

    #[test]
    fn cost_zero_prompts_equals_linear_probe_row() {
        let arch = ArchSpec::vit_small_video(174);
        let modes = cost_modes(
            &["linear-probe".to_string(), "apt".to_string()],
            &[0],
        )
        .unwrap();
        let csv = cmd_cost(&arch, &modes).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        let lp: Vec<&str> = rows[0].splitn(2, ',').collect();
        let apt: Vec<&str> = rows[1].splitn(2, ',').collect();
        assert_eq!(lp[0], "linear-probe");
        assert_eq!(apt[0], "apt");
        assert_eq!(lp[1], apt[1], "numbers after the mode label must agree");
    }

    #[test]
    fn cost_rejects_unknown_mode() {
        assert!(cost_modes(&["adapters".to_string()], &[8]).is_err());
    }

    #[test]
    fn gradcheck_passes_on_tiny_apt_and_reports_groups() {
        let dir = tmp_dir("gc");
        let out = dir.join("out");
        let cfg = tiny_apt_config(&dir, &out);
        let summary = cmd_gradcheck(&cfg, 1e-5, false).unwrap();
        for line in summary.lines() {
            println!("{line}");
        }
        assert!(summary.pass(), "worst {}: {:.3e}", summary.worst_param, summary.max_rel_err);
        let names: Vec<&str> = summary.groups.iter().map(|(g, _)| g.as_str()).collect();
        assert_eq!(names, ["fc_norm", "head", "prompts", "scales"]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn gradcheck_linear_probe_prints_exactly_two_groups() {
        let dir = tmp_dir("gc-lp");
        let out = dir.join("out");
        let cfg_path = tiny_apt_config(&dir, &out);
        let text = std::fs::read_to_string(&cfg_path).unwrap().replace(
            "kind = \"apt\"",
            "kind = \"linear-probe\"",
        );
        std::fs::write(&cfg_path, text).unwrap();
        let summary = cmd_gradcheck(&cfg_path, 1e-5, false).unwrap();
        assert!(summary.pass());
        let names: Vec<&str> = summary.groups.iter().map(|(g, _)| g.as_str()).collect();
        assert_eq!(names, ["fc_norm", "head"]);
        assert_eq!(summary.lines().len(), 3, "two group lines plus the verdict");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn gradcheck_corruption_is_caught() {
        let dir = tmp_dir("gc-bad");
        let out = dir.join("out");
        let cfg = tiny_apt_config(&dir, &out);
        let summary = cmd_gradcheck(&cfg, 1e-5, true).unwrap();
        assert!(!summary.pass(), "leaked term must break the check");
        assert!(!summary.offenders.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }
}

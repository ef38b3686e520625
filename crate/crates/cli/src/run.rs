//! Executes (variant, seed) runs and the optional gamma/beta sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use geofuse_core::fusion::Variant;
use geofuse_core::masking::MaskPlan;
use geofuse_core::synthdata::{make_dataset, Dataset, SceneConfig};
use geofuse_core::train::{evaluate, train, Disabled, Model, ModelConfig, TrainConfig};
use geofuse_core::{Error as CoreError, NumericsConfig};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::json;
use crate::report::{self, Report, RunEntry, RunStatus, Stats};

/// Stored beside every run so the heatmap tool can rebuild the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn generate(&self) -> geofuse_core::Result<Dataset> {
        make_dataset(&self.scene, self.n_train, self.n_test, self.seed)
    }
}

/// Everything needed to rebuild the trained model of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub numerics: NumericsConfig,
    pub scene: SceneConfig,
}

impl RunManifest {
    pub fn build_model(&self) -> geofuse_core::Result<Model> {
        Model::new(&self.model, self.variant, &self.scene, self.seed, self.numerics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Main,
    Cell(usize),
    Control(usize),
}

#[derive(Debug, Clone)]
pub struct Job {
    pub group: Group,
    pub variant: Variant,
    pub seed: u64,
    pub mask: MaskPlan,
    /// Relative to the output directory.
    pub dir: String,
}

fn mask_tag(v: f64) -> String {
    format!("{v}").replace('.', "p")
}

/// The sweep controls: gamma = 0, beta = 0, and the unmasked variant (d).
pub fn controls(base: &MaskPlan) -> Vec<(&'static str, Variant, MaskPlan)> {
    vec![
        ("gamma=0", Variant::A, MaskPlan { gamma: 0.0, ..*base }),
        ("beta=0", Variant::A, MaskPlan { beta: 0.0, ..*base }),
        ("variant d", Variant::D, *base),
    ]
}

pub fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            out.push(Job {
                group: Group::Main,
                variant,
                seed,
                mask: cfg.train.mask,
                dir: format!("runs/{variant}-seed{seed}"),
            });
        }
    }
    if let Some(sw) = &cfg.sweep {
        let mut k = 0;
        for &gamma in &sw.gammas {
            for &beta in &sw.betas {
                for &seed in &cfg.seeds {
                    out.push(Job {
                        group: Group::Cell(k),
                        variant: sw.variant,
                        seed,
                        mask: MaskPlan { gamma, beta, ..cfg.train.mask },
                        dir: format!("sweep/g{}-b{}/{}-seed{seed}", mask_tag(gamma), mask_tag(beta), sw.variant),
                    });
                }
                k += 1;
            }
        }
        if sw.controls {
            for (c, (name, variant, mask)) in controls(&cfg.train.mask).into_iter().enumerate() {
                let slug = name.replace(['=', ' '], "");
                for &seed in &cfg.seeds {
                    out.push(Job {
                        group: Group::Control(c),
                        variant,
                        seed,
                        mask,
                        dir: format!("sweep/control-{slug}/{variant}-seed{seed}"),
                    });
                }
            }
        }
    }
    out
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn diagnostics(model: &Model, data: &Dataset, n: usize) -> geofuse_core::Result<(Option<f64>, Option<Stats>)> {
    let mut gates = Vec::new();
    let mut rel = Vec::new();
    for s in data.test.iter().take(n) {
        let d = model.diagnose(s)?;
        if let Some(g) = d.gate_mean {
            gates.push(g.iter().sum::<f64>() / g.len() as f64);
        }
        if let Some(r) = d.relevance {
            rel.extend(r);
        }
    }
    let gate = (!gates.is_empty()).then(|| gates.iter().sum::<f64>() / gates.len() as f64);
    Ok((gate, Stats::of(&rel)))
}

/// Trains one job and writes its directory. Divergence is recorded in the
/// entry rather than returned.
fn execute(cfg: &ExperimentConfig, job: &Job, data: &Dataset, out: &Path, timestamps: bool) -> anyhow::Result<RunEntry> {
    let dir = out.join(&job.dir);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let train_cfg = TrainConfig {
        variant: job.variant,
        seed: job.seed,
        mask: job.mask,
        ..cfg.train.clone()
    };
    let manifest = RunManifest {
        schema: 1,
        variant: job.variant,
        seed: job.seed,
        model: cfg.model.clone(),
        train: train_cfg.clone(),
        numerics: cfg.numerics,
        scene: cfg.scene.clone(),
    };
    let data_manifest = DatasetManifest {
        schema: 1,
        scene: cfg.scene.clone(),
        n_train: cfg.data.n_train,
        n_test: cfg.data.n_test,
        seed: job.seed,
    };
    write(&dir.join("dataset.json"), &json::to_string_pretty(&data_manifest)?)?;
    let started = Instant::now();
    let mut model = manifest.build_model()?;
    let mut entry = RunEntry::pending(job, format!("{}/history.csv", job.dir));
    match train(&mut model, data, &train_cfg) {
        Ok(history) => {
            write(&dir.join("history.csv"), &history.to_csv())?;
            model.store.save(&dir.join("checkpoint"))?;
            let n_probe = data.test.len().min(data.train.len());
            entry.train_acc = Some(evaluate(&model, &data.train[..n_probe], Disabled)?);
            entry.test_acc = history.records.last().and_then(|r| r.eval_acc);
            entry.final_loss = history.final_loss();
            let (gate, rel) = diagnostics(&model, data, cfg.diagnostic_samples)?;
            entry.gate_mean = gate;
            entry.relevance = rel;
            entry.status = RunStatus::Ok;
        }
        Err(e @ CoreError::Diverged { .. }) => {
            entry.status = RunStatus::Diverged;
            entry.error = Some(e.to_string());
        }
        Err(e) => return Err(e.into()),
    }
    if timestamps {
        entry.elapsed_s = Some(started.elapsed().as_secs_f64());
    }
    let run_json = serde_json::json!({ "manifest": manifest, "result": entry });
    write(&dir.join("run.json"), &json::to_string_pretty(&run_json)?)?;
    Ok(entry)
}

/// Runs every job, writes `report.json` and `summary.md` under `out`, and
/// fails with a partial report when any run diverged.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, timestamps: bool) -> CliResult<Report> {
    cfg.validate().map_err(CliError::Config)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let all = jobs(cfg);
    // Seed-major so one dataset is alive at a time.
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.sort_by_key(|&i| cfg.seeds.iter().position(|&s| s == all[i].seed));
    let mut results: BTreeMap<usize, RunEntry> = BTreeMap::new();
    let mut current: Option<(u64, Dataset)> = None;
    for i in order {
        let job = &all[i];
        if current.as_ref().map(|c| c.0) != Some(job.seed) {
            drop(current.take());
            let data = make_dataset(&cfg.scene, cfg.data.n_train, cfg.data.n_test, job.seed).map_err(anyhow::Error::from)?;
            current = Some((job.seed, data));
        }
        let data = &current.as_ref().expect("dataset loaded").1;
        let entry = execute(cfg, job, data, out, timestamps)?;
        eprintln!(
            "{}: {} test_acc={}",
            job.dir,
            entry.status,
            entry.test_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        results.insert(i, entry);
    }
    let entries: Vec<(Job, RunEntry)> = all.into_iter().zip(results.into_values()).collect();
    let report = report::assemble(cfg, entries, timestamps);
    let path = out.join("report.json");
    write(&path, &json::to_string_pretty(&report).map_err(anyhow::Error::from)?)?;
    write(&out.join("summary.md"), &report.summary_markdown())?;
    let failed: Vec<String> = report
        .all_runs()
        .filter(|r| r.status != RunStatus::Ok)
        .map(|r| r.loss_curve.trim_end_matches("/history.csv").to_string())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::RunsFailed {
            failed,
            total: report.all_runs().count(),
            report: path,
        });
    }
    Ok(report)
}

pub fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::MissingFile {
            what,
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    let v = if what == "run manifest" { v["manifest"].clone() } else { v };
    Ok(serde_json::from_value(v).with_context(|| format!("{} has an unexpected layout", path.display()))?)
}

pub fn run_dir_files(run: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (run.join("run.json"), run.join("dataset.json"), run.join("checkpoint"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SweepConfig;

    #[test]
    fn job_list_covers_grid_and_controls() {
        let cfg = ExperimentConfig {
            variants: vec![Variant::A, Variant::F],
            seeds: vec![1, 2],
            sweep: Some(SweepConfig::default()),
            ..ExperimentConfig::default()
        };
        let js = jobs(&cfg);
        assert_eq!(js.len(), 2 * 2 + 9 * 2 + 3 * 2);
        let dirs: std::collections::BTreeSet<_> = js.iter().map(|j| j.dir.clone()).collect();
        assert_eq!(dirs.len(), js.len());
        assert!(dirs.contains("sweep/g0p8-b0p5/a-seed2"));
        assert!(dirs.contains("sweep/control-gamma0/a-seed1"));
    }
}

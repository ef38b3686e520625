//! Report assembly: per-run entries, per-variant aggregates, sweep cells.

use std::fmt::{self, Write as _};

use serde::Serialize;

use geofuse_core::fusion::Variant;

use crate::config::ExperimentConfig;
use crate::run::{controls, Group, Job};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// Sample standard deviation; zero for a single value.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self {
            mean,
            std: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEntry {
    pub variant: Variant,
    pub seed: u64,
    pub gamma: f64,
    pub beta: f64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Accuracy on the first `n_test` training samples.
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub final_loss: Option<f64>,
    pub loss_curve: String,
    /// Mean gate over test samples, tokens and channels.
    pub gate_mean: Option<f64>,
    pub relevance: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
}

impl RunEntry {
    pub(crate) fn pending(job: &Job, loss_curve: String) -> Self {
        Self {
            variant: job.variant,
            seed: job.seed,
            gamma: job.mask.gamma,
            beta: job.mask.beta,
            status: RunStatus::Diverged,
            error: None,
            train_acc: None,
            test_acc: None,
            final_loss: None,
            loss_curve,
            gate_mean: None,
            relevance: None,
            elapsed_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub runs_ok: usize,
    pub test_acc: Option<Stats>,
    pub train_acc: Option<Stats>,
}

impl Aggregate {
    fn of<'a>(runs: impl IntoIterator<Item = &'a RunEntry>) -> Self {
        let ok: Vec<_> = runs.into_iter().filter(|r| r.status == RunStatus::Ok).collect();
        let test: Vec<f64> = ok.iter().filter_map(|r| r.test_acc).collect();
        let train: Vec<f64> = ok.iter().filter_map(|r| r.train_acc).collect();
        Self {
            runs_ok: ok.len(),
            test_acc: Stats::of(&test),
            train_acc: Stats::of(&train),
        }
    }

    fn test_mean(&self) -> Option<f64> {
        self.test_acc.map(|s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantAggregate {
    pub variant: Variant,
    #[serde(flatten)]
    pub stats: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub gamma: f64,
    pub beta: f64,
    pub best: bool,
    #[serde(flatten)]
    pub stats: Aggregate,
    pub runs: Vec<RunEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepControl {
    pub name: String,
    pub variant: Variant,
    pub gamma: f64,
    pub beta: f64,
    #[serde(flatten)]
    pub stats: Aggregate,
    pub runs: Vec<RunEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub variant: Variant,
    pub cells: Vec<SweepCell>,
    /// `(gamma, beta)` of the cell with the highest mean test accuracy.
    pub best: Option<[f64; 2]>,
    pub controls: Vec<SweepControl>,
    /// Largest |mean test accuracy - variant (d)| over the gamma = 0 and
    /// beta = 0 controls.
    pub control_gap_to_d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_unix_s: Option<u64>,
    pub config: ExperimentConfig,
    pub runs: Vec<RunEntry>,
    pub aggregates: Vec<VariantAggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepReport>,
}

impl Report {
    pub fn all_runs(&self) -> impl Iterator<Item = &RunEntry> {
        let sweep = self.sweep.iter().flat_map(|s| {
            s.cells
                .iter()
                .flat_map(|c| &c.runs)
                .chain(s.controls.iter().flat_map(|c| &c.runs))
        });
        self.runs.iter().chain(sweep)
    }

    pub fn aggregate(&self, v: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == v).map(|a| &a.stats)
    }

    pub fn summary_markdown(&self) -> String {
        let pct = |s: Option<Stats>| s.map_or("-".to_string(), |s| format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std));
        let mut out = String::from("| variant | runs ok | train acc (%) | test acc (%) |\n|---|---|---|---|\n");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "| ({}) | {} | {} | {} |",
                a.variant,
                a.stats.runs_ok,
                pct(a.stats.train_acc),
                pct(a.stats.test_acc)
            );
        }
        if let Some(sw) = &self.sweep {
            let _ = writeln!(out, "\nSweep over variant ({}), test accuracy (%):\n", sw.variant);
            out.push_str("| gamma | beta | test acc (%) | best |\n|---|---|---|---|\n");
            for c in &sw.cells {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} |",
                    c.gamma,
                    c.beta,
                    pct(c.stats.test_acc),
                    if c.best { "*" } else { "" }
                );
            }
            for c in &sw.controls {
                let _ = writeln!(out, "| control: {} | | {} | |", c.name, pct(c.stats.test_acc));
            }
        }
        out
    }
}

/// Groups finished jobs into the report. Entries keep the job order.
pub fn assemble(cfg: &ExperimentConfig, entries: Vec<(Job, RunEntry)>, timestamps: bool) -> Report {
    let mut runs = Vec::new();
    let mut cells: Vec<Vec<RunEntry>> = Vec::new();
    let mut ctrl: Vec<Vec<RunEntry>> = Vec::new();
    for (job, e) in entries {
        match job.group {
            Group::Main => runs.push(e),
            Group::Cell(k) => {
                cells.resize_with(cells.len().max(k + 1), Vec::new);
                cells[k].push(e);
            }
            Group::Control(k) => {
                ctrl.resize_with(ctrl.len().max(k + 1), Vec::new);
                ctrl[k].push(e);
            }
        }
    }
    let aggregates = cfg
        .variants
        .iter()
        .map(|&v| VariantAggregate {
            variant: v,
            stats: Aggregate::of(runs.iter().filter(|r| r.variant == v)),
        })
        .collect();
    let sweep = cfg.sweep.as_ref().map(|sw| {
        let mut cells: Vec<SweepCell> = cells
            .into_iter()
            .map(|runs| SweepCell {
                gamma: runs[0].gamma,
                beta: runs[0].beta,
                best: false,
                stats: Aggregate::of(&runs),
                runs,
            })
            .collect();
        let best = cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.stats.test_mean().map(|m| (i, m)))
            .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
                Some((_, bm)) if bm >= m => acc,
                _ => Some((i, m)),
            });
        if let Some((i, _)) = best {
            cells[i].best = true;
        }
        let names = controls(&cfg.train.mask);
        let controls: Vec<SweepControl> = ctrl
            .into_iter()
            .zip(names)
            .map(|(runs, (name, variant, mask))| SweepControl {
                name: name.to_string(),
                variant,
                gamma: mask.gamma,
                beta: mask.beta,
                stats: Aggregate::of(&runs),
                runs,
            })
            .collect();
        let d = controls.iter().find(|c| c.variant == Variant::D).and_then(|c| c.stats.test_mean());
        let control_gap_to_d = d.and_then(|d| {
            controls
                .iter()
                .filter(|c| c.variant != Variant::D)
                .map(|c| c.stats.test_mean().map(|m| (m - d).abs()))
                .collect::<Option<Vec<_>>>()
                .map(|gaps| gaps.into_iter().fold(0.0, f64::max))
        });
        SweepReport {
            variant: sw.variant,
            best: best.map(|(i, _)| [cells[i].gamma, cells[i].beta]),
            cells,
            controls,
            control_gap_to_d,
        }
    });
    let mut config = cfg.clone();
    config.output_dir = Default::default();
    Report {
        schema: 1,
        generated_unix_s: timestamps.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        }),
        config,
        runs,
        aggregates,
        sweep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_small_samples() {
        assert!(Stats::of(&[]).is_none());
        let s = Stats::of(&[0.5]).unwrap();
        assert_eq!((s.mean, s.std), (0.5, 0.0));
        let s = Stats::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!((s.min, s.max), (1.0, 3.0));
    }
}

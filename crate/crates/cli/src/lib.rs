//! Experiment runner for the geometry-fusion ablations: TOML configs,
//! deterministic runs, JSON reports, heatmap export and dataset dumps.

pub mod config;
pub mod error;
pub mod heatmap;
pub mod json;
pub mod report;
pub mod run;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;

use geofuse_core::synthdata::{json_records, make_dataset};
use geofuse_core::tensor::GradcheckReport;
use geofuse_core::train::gradcheck;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use report::Report;

/// Writes both splits as JSON lines, train first. The dataset seed is the
/// first configured seed.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<usize> {
    let data = make_dataset(&cfg.scene, cfg.data.n_train, cfg.data.n_test, cfg.seeds[0]).map_err(anyhow::Error::from)?;
    let file = File::create(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let records = json_records(&data).map_err(anyhow::Error::from)?;
    for r in &records {
        json::write_line(&mut w, r).map_err(anyhow::Error::from)?;
    }
    w.flush().with_context(|| format!("cannot write {}", out.display()))?;
    Ok(records.len())
}

/// Runs the full suite; the verdict fails if any target exceeds `tol`.
pub fn gradcheck_all(tol: f64) -> (Vec<GradcheckReport>, CliResult<()>) {
    let reports = gradcheck::run_all(tol);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let verdict = if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck { failed })
    };
    (reports, verdict)
}

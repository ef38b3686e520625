//! Per-token relevance and gate maps for one sample of a finished run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use geofuse_core::fusion::grid_csv;
use geofuse_core::synthdata::Split;

use crate::error::{CliError, CliResult};
use crate::run::{read_manifest, run_dir_files, DatasetManifest, RunManifest};

/// Writes `relevance.csv` and `gate.csv` (whichever the variant produces)
/// for test sample `index` into `out`, returning the written paths.
pub fn export_heatmaps(run: &Path, index: usize, split: Split, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (run_json, data_json, ckpt) = run_dir_files(run);
    let manifest: RunManifest = read_manifest(&run_json, "run manifest")?;
    let data_manifest: DatasetManifest = read_manifest(&data_json, "dataset manifest")?;
    if !ckpt.join("manifest.json").exists() {
        return Err(CliError::MissingFile {
            what: "checkpoint",
            path: ckpt,
        });
    }
    let mut model = manifest.build_model().map_err(anyhow::Error::from)?;
    model
        .store
        .load_into(&ckpt)
        .with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let data = data_manifest.generate().map_err(anyhow::Error::from)?;
    let samples = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let sample = samples.get(index).ok_or_else(|| {
        anyhow::anyhow!("sample {index} out of range: the {split:?} split has {} samples", samples.len())
    })?;
    let diag = model.diagnose(sample).map_err(anyhow::Error::from)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut written = Vec::new();
    for (name, values) in [("relevance", diag.relevance), ("gate", diag.gate_mean)] {
        if let Some(v) = values {
            let path = out.join(format!("{name}.csv"));
            let csv = grid_csv(&v, diag.grid).map_err(anyhow::Error::from)?;
            fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?;
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(anyhow::anyhow!("variant {} produces neither relevance nor gate values", manifest.variant).into());
    }
    Ok(written)
}

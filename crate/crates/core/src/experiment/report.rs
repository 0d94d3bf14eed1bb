use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentResult, ResultSummary};
use crate::error::Result;
use crate::nnkit::checkpoint;

pub const METRICS_HEADER: [&str; 7] = ["method", "seed", "round", "epoch", "stage", "metric", "value"];

/// One long-format metric observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub epoch: usize,
    pub stage: String,
    pub metric: String,
    pub value: f64,
}

/// Write rows with the fixed header, LF line endings. An empty slice gives
/// a header-only file.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

/// Persist a run under `dir`:
///
/// - `metrics.csv` with the deterministic rows and `timings.csv` with
///   wall-clock seconds per stage
/// - `results.json` (the summary) and `config.toml`
/// - `caps_U.csv`, `caps_Ur.csv` and `caps_Uc.csv` for the first stratified
///   seed and round, with every seed and round under `caps/`
/// - `partitions/seed<S>.json` and `checkpoints/<method>_seed<S>/`
pub fn emit_results(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_metrics_csv(&result.metrics, &mut buf)?;
    write_file(&dir.join("metrics.csv"), &buf)?;
    buf.clear();
    write_metrics_csv(&result.timings, &mut buf)?;
    write_file(&dir.join("timings.csv"), &buf)?;

    let json = serde_json::to_string_pretty(&result.summary)? + "\n";
    write_file(&dir.join("results.json"), json.as_bytes())?;
    write_file(&dir.join("config.toml"), result.config.to_toml_string()?.as_bytes())?;

    if let Some(first) = result.caps.first() {
        first.caps.write_csvs(dir)?;
    }
    for rec in &result.caps {
        let sub = dir.join("caps").join(format!("seed{}_round{}", rec.seed, rec.round));
        fs::create_dir_all(&sub)?;
        rec.caps.write_csvs(&sub)?;
    }

    let parts = dir.join("partitions");
    fs::create_dir_all(&parts)?;
    for (seed, p) in &result.partitions {
        write_file(&parts.join(format!("seed{seed}.json")), p.to_json()?.as_bytes())?;
    }
    for ck in &result.checkpoints {
        checkpoint::save(&ck.model, &dir.join("checkpoints").join(format!("{}_seed{}", ck.method, ck.seed)))?;
    }
    Ok(())
}

pub(crate) fn read_summary(dir: &Path) -> Result<ResultSummary> {
    let text = fs::read_to_string(dir.join("results.json"))?;
    Ok(serde_json::from_str(&text)?)
}

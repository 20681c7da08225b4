//! Artifact output: atomic writes, CSV formatting, config hashing, and the
//! merged run report.
//!
//! Every artifact gets a `<name>.meta.json` sidecar carrying the schema name
//! and the hash of the run configuration that produced it. Merging a report
//! refuses to combine artifacts produced under different configurations.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::CostReport;
use crate::sensitivity::{CellStatus, SensitivityEntry, SweepResult};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("artifact {name} was produced under config {found}, expected {expected}")]
    HashMismatch { name: String, found: String, expected: String },
    #[error("no artifacts found in {0}")]
    NoArtifacts(String),
}

/// Writes via a temporary file in the same directory plus an atomic rename,
/// so readers never observe a partially written artifact.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// SHA-256 hex digest of the canonical JSON encoding of a configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&json);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Six significant digits, scientific notation; used for every CSV numeric
/// that is not a percentage.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if x.is_finite() {
        format!("{x:.5e}")
    } else {
        format!("{x}")
    }
}

/// Percentages print with two decimals.
pub fn pct2(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.2}")
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    /// Unix seconds; excluded from determinism comparisons.
    pub created: u64,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn meta_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    std::path::PathBuf::from(p)
}

/// Writes an artifact and its sidecar metadata atomically (each on its own).
pub fn write_artifact(
    path: &std::path::Path,
    bytes: &[u8],
    schema: &str,
    config_hash: &str,
) -> Result<(), ReportError> {
    atomic_write(path, bytes)?;
    let meta = Meta {
        schema: schema.to_string(),
        version: 1,
        config_hash: config_hash.to_string(),
        created: now_unix(),
    };
    atomic_write(&meta_path(path), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(path: &std::path::Path) -> Result<Meta, ReportError> {
    let bytes = std::fs::read(meta_path(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ---- CSV formats -------------------------------------------------------

/// sweep.csv: one row per (selector, rho) cell after a shared baseline row
/// at sparsity 0.
pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from(
        "selector_side,selector_kind,layer_range,sparsity_pct,wer_clean,wer_other,delta_other,status\n",
    );
    out.push_str(&format!(
        "*,*,*,0.00,{},{},0.00,ok\n",
        pct2(sweep.baseline_clean.wer_pct()),
        pct2(sweep.baseline_other.wer_pct()),
    ));
    for c in &sweep.cells {
        let status = match &c.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Failed(msg) => format!("failed: {}", msg.replace(',', ";")),
        };
        let side = c.selector.side.map(|s| s.to_string()).unwrap_or_else(|| "*".into());
        let kind = match &c.selector.kinds {
            None => "*".to_string(),
            Some(ks) => ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+"),
        };
        let layers = match c.selector.layers {
            None => "*".to_string(),
            Some((a, b)) => format!("{a}-{b}"),
        };
        out.push_str(&format!(
            "{side},{kind},{layers},{},{},{},{},{status}\n",
            pct2(c.rho * 100.0),
            pct2(c.wer_clean),
            pct2(c.wer_other),
            pct2(c.delta_other),
        ));
    }
    out
}

/// sensitivity.csv: first- and second-order scores per module and split.
pub fn sensitivity_csv(entries: &[SensitivityEntry]) -> String {
    let mut out = String::from("module,split,s_grad,s_fisher,n_samples\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.module,
            e.split,
            sig6(e.s_g),
            sig6(e.s_h),
            e.n,
        ));
    }
    out
}

/// One row of the compression accounting table.
#[derive(Debug, Clone)]
pub struct CompressRow {
    pub wer_pct: f64,
    pub cer_pct: f64,
    pub sparsity_pct: f64,
    pub cost: CostReport,
}

/// cost.csv: baseline row first, then the pruned row.
pub fn cost_csv(baseline: &CompressRow, pruned: &CompressRow) -> String {
    let mut out =
        String::from("wer_pct,cer_pct,total_params,sparsity_pct,flops,sparse_size_bytes\n");
    for row in [baseline, pruned] {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            pct2(row.wer_pct),
            pct2(row.cer_pct),
            row.cost.total_params,
            pct2(row.sparsity_pct),
            sig6(row.cost.flops_per_step),
            row.cost.sparse_size_bytes,
        ));
    }
    out
}

// ---- merged report -----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactSummary {
    pub name: String,
    pub schema: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub created: u64,
    pub artifacts: Vec<ArtifactSummary>,
}

/// Collects every artifact with a metadata sidecar in `dir` into
/// report.json, verifying that all were produced under the same
/// configuration hash. Returns the merged report.
pub fn merge_report(dir: &std::path::Path) -> Result<RunReport, ReportError> {
    let mut artifacts = Vec::new();
    let mut hash: Option<String> = None;
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with(".meta.json"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    for meta_file in names {
        let name = meta_file
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap()
            .trim_end_matches(".meta.json")
            .to_string();
        let artifact = dir.join(&name);
        if !artifact.exists() {
            continue;
        }
        let meta: Meta = serde_json::from_slice(&std::fs::read(&meta_file)?)?;
        match &hash {
            None => hash = Some(meta.config_hash.clone()),
            Some(h) if *h != meta.config_hash => {
                return Err(ReportError::HashMismatch {
                    name,
                    found: meta.config_hash,
                    expected: h.clone(),
                });
            }
            Some(_) => {}
        }
        let bytes = std::fs::metadata(&artifact)?.len() as usize;
        artifacts.push(ArtifactSummary { name, schema: meta.schema, bytes });
    }
    let Some(config_hash) = hash else {
        return Err(ReportError::NoArtifacts(dir.display().to_string()));
    };
    let report = RunReport { config_hash, created: now_unix(), artifacts };
    atomic_write(&dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

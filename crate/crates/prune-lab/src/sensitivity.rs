//! Sensitivity diagnostics and empirical pruning sweeps.
//!
//! First-order scores are mean per-sample gradient norms over a selector's
//! pooled weights, normalized by the selector's weight norm. Second-order
//! scores are per-module means of the diagonal Fisher approximation (mean
//! squared per-sample gradient). Sweeps prune one selector at a time from a
//! frozen snapshot and measure WER on both test splits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, ErrorRates, MetricError};
use crate::model::{Model, ModelError, ParameterRegistry, Side};
use crate::pruning::{self, LayerBlock, PruneError, Selector};
use crate::task::Item;

#[derive(Debug, Error)]
pub enum SensError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("selector {0} has zero weight norm")]
    DegenerateModule(String),
    #[error("planted-redundancy fraction must be in (0, 0.5), got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Greedy-decodes every item and pools WER/CER against the references.
pub fn evaluate_split(model: &Model, items: &[Item], max_len: usize) -> Result<ErrorRates, SensError> {
    let hyps: Vec<Vec<usize>> = items
        .par_iter()
        .map(|(frames, _)| model.greedy_decode(frames, max_len))
        .collect::<Result<_, _>>()?;
    let refs: Vec<Vec<usize>> = items.iter().map(|(_, t)| t.clone()).collect();
    Ok(metrics::wer(&refs, &hyps)?)
}

/// Normalized first-order sensitivity of a selector on a batch:
/// mean_i ||grad_selector L_i||_2 / ||theta_selector||_2, per-sample gradients.
pub fn first_order_score(
    model: &Model,
    registry: &ParameterRegistry,
    batch: &[Item],
    selector: &Selector,
) -> Result<f64, SensError> {
    first_order_score_scaled(model, registry, batch, selector, 1.0)
}

/// As `first_order_score` with every per-sample loss multiplied by `scale`.
pub fn first_order_score_scaled(
    model: &Model,
    registry: &ParameterRegistry,
    batch: &[Item],
    selector: &Selector,
    scale: f64,
) -> Result<f64, SensError> {
    if batch.is_empty() {
        return Err(SensError::EmptyBatch);
    }
    let ids = selector.resolve(registry)?;
    let mut theta_sq = 0.0;
    for &id in &ids {
        for &w in &model.params[id].data {
            theta_sq += w * w;
        }
    }
    let theta_norm = theta_sq.sqrt();
    if theta_norm == 0.0 {
        return Err(SensError::DegenerateModule(selector.describe()));
    }
    let norms: Vec<f64> = batch
        .par_iter()
        .map(|(frames, tgt)| -> Result<f64, SensError> {
            let (_, grads) = model.loss_and_grads_scaled(frames, tgt, scale)?;
            let mut sq = 0.0;
            for &id in &ids {
                for &g in &grads[id] {
                    sq += g * g;
                }
            }
            Ok(sq.sqrt())
        })
        .collect::<Result<_, _>>()?;
    let mut acc = 0.0;
    for n in norms {
        acc += n / theta_norm;
    }
    Ok(acc / batch.len() as f64)
}

/// Diagonal Fisher approximation: per parameter, mean over samples of the
/// squared per-sample gradient. Accumulation order is fixed by sample index.
pub fn fisher_diag(model: &Model, batch: &[Item]) -> Result<Vec<Vec<f64>>, SensError> {
    if batch.is_empty() {
        return Err(SensError::EmptyBatch);
    }
    let per_sample: Vec<Vec<Vec<f64>>> = batch
        .par_iter()
        .map(|(frames, tgt)| Ok(model.loss_and_grads(frames, tgt)?.1))
        .collect::<Result<_, SensError>>()?;
    let mut acc: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    for grads in &per_sample {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (av, gv) in a.iter_mut().zip(g) {
                *av += gv * gv;
            }
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    for a in acc.iter_mut() {
        for v in a.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(acc)
}

/// Arithmetic mean of the Fisher diagonal over a selector's index set.
pub fn module_fisher(
    fisher: &[Vec<f64>],
    registry: &ParameterRegistry,
    selector: &Selector,
) -> Result<f64, SensError> {
    let ids = selector.resolve(registry)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for &id in &ids {
        for &f in &fisher[id] {
            sum += f;
        }
        count += fisher[id].len();
    }
    Ok(sum / count as f64)
}

/// One (selector, S_g, S_h) row of a diagnostics report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub module: String,
    pub split: String,
    pub s_g: f64,
    pub s_h: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub entries: Vec<SensitivityEntry>,
}

/// Encoder/decoder S_g and S_h on one labeled split.
pub fn side_sensitivities(
    model: &Model,
    registry: &ParameterRegistry,
    batch: &[Item],
    split: &str,
) -> Result<Vec<SensitivityEntry>, SensError> {
    let fisher = fisher_diag(model, batch)?;
    let mut out = Vec::new();
    for side in [Side::Encoder, Side::Decoder] {
        let sel = Selector::side(side);
        out.push(SensitivityEntry {
            module: side.to_string(),
            split: split.to_string(),
            s_g: first_order_score(model, registry, batch, &sel)?,
            s_h: module_fisher(&fisher, registry, &sel)?,
            n: batch.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

/// One sweep measurement. WERs are percentages; `delta_other` is in absolute
/// percentage points against the sweep baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub selector: Selector,
    pub rho: f64,
    pub wer_clean: f64,
    pub wer_other: f64,
    pub delta_other: f64,
    pub status: CellStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub baseline_clean: ErrorRates,
    pub baseline_other: ErrorRates,
    pub cells: Vec<SweepCell>,
}

/// The default sparsity grid: 10% increments from 0.1 to 0.9.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Prunes each (selector, rho) cell independently from the model's current
/// weights, evaluating on both test splits. Failed cells are recorded and do
/// not abort the sweep. Cells are returned sorted by (label, rho), so the
/// result is independent of evaluation order; the input model is untouched.
pub fn component_sweep(
    model: &Model,
    registry: &ParameterRegistry,
    selectors: &[(String, Selector)],
    rho_grid: &[f64],
    test_clean: &[Item],
    test_other: &[Item],
    max_len: usize,
) -> Result<SweepResult, SensError> {
    let baseline_clean = evaluate_split(model, test_clean, max_len)?;
    let baseline_other = evaluate_split(model, test_other, max_len)?;
    let jobs: Vec<(String, Selector, f64)> = selectors
        .iter()
        .flat_map(|(label, sel)| {
            rho_grid.iter().map(move |&rho| (label.clone(), sel.clone(), rho))
        })
        .collect();
    let mut cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|(label, sel, rho)| {
            let mut m = model.clone();
            match pruning::prune(&mut m, registry, sel, *rho) {
                Err(e) => SweepCell {
                    label: label.clone(),
                    selector: sel.clone(),
                    rho: *rho,
                    wer_clean: f64::NAN,
                    wer_other: f64::NAN,
                    delta_other: f64::NAN,
                    status: CellStatus::Failed(e.to_string()),
                },
                Ok(_) => {
                    let clean = evaluate_split(&m, test_clean, max_len);
                    let other = evaluate_split(&m, test_other, max_len);
                    match (clean, other) {
                        (Ok(c), Ok(o)) => SweepCell {
                            label: label.clone(),
                            selector: sel.clone(),
                            rho: *rho,
                            wer_clean: c.wer_pct(),
                            wer_other: o.wer_pct(),
                            delta_other: metrics::delta_wer(&baseline_other, &o),
                            status: CellStatus::Ok,
                        },
                        (c, o) => {
                            let msg = c.err().or(o.err()).map(|e| e.to_string()).unwrap_or_default();
                            SweepCell {
                                label: label.clone(),
                                selector: sel.clone(),
                                rho: *rho,
                                wer_clean: f64::NAN,
                                wer_other: f64::NAN,
                                delta_other: f64::NAN,
                                status: CellStatus::Failed(msg),
                            }
                        }
                    }
                }
            }
        })
        .collect();
    cells.sort_by(|a, b| a.label.cmp(&b.label).then(a.rho.partial_cmp(&b.rho).unwrap()));
    Ok(SweepResult { baseline_clean, baseline_other, cells })
}

/// The nine component selectors, one per taxonomy kind.
pub fn component_selectors() -> Vec<(String, Selector)> {
    crate::model::Kind::ALL
        .iter()
        .map(|&k| (k.to_string(), Selector::kind(k)))
        .collect()
}

/// Early/mid/late layer blocks on both sides at a single sparsity
/// (six cells).
pub fn layer_block_sweep(
    model: &Model,
    registry: &ParameterRegistry,
    rho: f64,
    test_clean: &[Item],
    test_other: &[Item],
    max_len: usize,
) -> Result<SweepResult, SensError> {
    let mut selectors = Vec::new();
    for side in [Side::Encoder, Side::Decoder] {
        let n = match side {
            Side::Encoder => model.config.enc_layers,
            _ => model.config.dec_layers,
        };
        if n < 3 {
            return Err(SensError::Prune(PruneError::TooFewLayers(n)));
        }
        for block in LayerBlock::ALL {
            let sel = pruning::block_selector(side, n, block);
            let (lo, hi) = pruning::block_range(n, block);
            selectors.push((format!("{side}_{block}_{lo}-{hi}"), sel));
        }
    }
    component_sweep(model, registry, &selectors, &[rho], test_clean, test_other, max_len)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RedundancyCheck {
    pub wer_baseline: f64,
    pub wer_corrupted: f64,
    pub wer_pruned: f64,
}

/// Corrupts the smallest-magnitude fraction `p` of a selector's weights with
/// seeded Gaussian noise (std = half the rho=p pruning threshold, so the
/// corrupted weights stay small), then magnitude-prunes the selector at p.
/// WERs (percent) are measured at each stage; the model is restored before
/// returning.
pub fn planted_redundancy_check(
    model: &mut Model,
    registry: &ParameterRegistry,
    selector: &Selector,
    p: f64,
    items: &[Item],
    max_len: usize,
    seed: u64,
) -> Result<RedundancyCheck, SensError> {
    if !(0.0..0.5).contains(&p) || p == 0.0 {
        return Err(SensError::InvalidFraction(p));
    }
    let snap = model.snapshot();
    let wer_baseline = evaluate_split(model, items, max_len)?.wer_pct();

    let ids = selector.resolve(registry)?;
    let targets = pruning::pruned_indices(model, &ids, p)?;
    let tau = targets.last().map(|&(id, i)| model.params[id].data[i].abs()).unwrap_or(0.0);
    let std = 0.5 * tau;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for &(id, i) in &targets {
        model.params[id].data[i] += std * normal.sample(&mut rng);
    }
    let wer_corrupted = evaluate_split(model, items, max_len)?.wer_pct();

    model.restore(&snap)?;
    pruning::prune(model, registry, selector, p)?;
    let wer_pruned = evaluate_split(model, items, max_len)?.wer_pct();

    model.restore(&snap)?;
    Ok(RedundancyCheck { wer_baseline, wer_corrupted, wer_pruned })
}

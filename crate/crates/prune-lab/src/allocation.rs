//! Sensitivity-aware sparsity allocation.
//!
//! A plan assigns a target sparsity to each of a set of pairwise-disjoint
//! selectors. Plans come from the fixed per-component recipe, from greedy
//! selection over sweep measurements, or from a hand-written plan file.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{cost_report, CostReport};
use crate::model::{Kind, Model, ModelError, ParameterRegistry, Side};
use crate::pruning::{self, block_range, PruneError, PruneMask, Selector};
use crate::sensitivity::{CellStatus, SweepResult};

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("selectors overlap on parameter {0}")]
    Overlap(String),
    #[error("sweep has no usable cells")]
    EmptySweep,
    #[error("sparsity {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("plan file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Recipe,
    Greedy,
    Manual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEntry {
    pub selector: Selector,
    pub rho: f64,
}

/// Per-selector sparsity assignment. Selectors must be pairwise disjoint over
/// parameters; unlisted parameters are left dense.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunePlan {
    pub provenance: Provenance,
    /// False when a greedy allocation could not reach its overall target even
    /// at maximal admissible sparsities.
    pub feasible: bool,
    pub entries: Vec<PlanEntry>,
}

/// Resolved sizes with the disjointness invariant checked. Selectors that
/// match nothing in this registry contribute zero mass.
fn resolve_disjoint(
    plan: &PrunePlan,
    registry: &ParameterRegistry,
) -> Result<Vec<(Vec<usize>, f64)>, AllocError> {
    let mut seen: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut out = Vec::new();
    for (n, entry) in plan.entries.iter().enumerate() {
        if !(0.0..=1.0).contains(&entry.rho) {
            return Err(AllocError::InvalidRho(entry.rho));
        }
        let ids = entry.selector.resolve_allow_empty(registry);
        for &id in &ids {
            if let Some(prev) = seen.insert(id, n) {
                let name = &registry.entries.iter().find(|e| e.id == id).unwrap().name;
                let _ = prev;
                return Err(AllocError::Overlap(name.clone()));
            }
        }
        out.push((ids, entry.rho));
    }
    Ok(out)
}

/// Achieved overall sparsity of a plan: sum of floor(rho_c * d_c) over the
/// registry's total parameter count (floor-based, matching the pruning rule).
pub fn overall_sparsity(plan: &PrunePlan, registry: &ParameterRegistry) -> Result<f64, AllocError> {
    let resolved = resolve_disjoint(plan, registry)?;
    let counts: std::collections::HashMap<usize, usize> =
        registry.entries.iter().map(|e| (e.id, e.count)).collect();
    let total: usize = registry.total_count();
    let mut pruned = 0u64;
    for (ids, rho) in &resolved {
        let d: usize = ids.iter().map(|id| counts[id]).sum();
        pruned += (rho * d as f64).floor() as u64;
    }
    Ok(pruned as f64 / total as f64)
}

/// The fixed per-component sparsity recipe. Decoder FFNs get early/mid/late
/// rates over the layer-block partition; norms and biases stay dense.
pub fn paper_recipe(dec_layers: usize) -> PrunePlan {
    let ffn_block = |block| {
        let (lo, hi) = block_range(dec_layers, block);
        Selector {
            side: Some(Side::Decoder),
            kinds: Some(vec![Kind::Ffn]),
            layers: Some((lo, hi)),
        }
    };
    let entries = vec![
        PlanEntry { selector: Selector::side_kind(Side::Encoder, Kind::Conv), rho: 0.20 },
        PlanEntry { selector: Selector::side_kind(Side::Encoder, Kind::SelfAttn), rho: 0.40 },
        PlanEntry { selector: Selector::side_kind(Side::Encoder, Kind::Ffn), rho: 0.55 },
        PlanEntry { selector: Selector::side_kind(Side::Decoder, Kind::SelfAttn), rho: 0.50 },
        PlanEntry { selector: Selector::side_kind(Side::Decoder, Kind::CrossAttn), rho: 0.45 },
        PlanEntry { selector: ffn_block(pruning::LayerBlock::Early), rho: 0.25 },
        PlanEntry { selector: ffn_block(pruning::LayerBlock::Mid), rho: 0.45 },
        PlanEntry { selector: ffn_block(pruning::LayerBlock::Late), rho: 0.30 },
        PlanEntry { selector: Selector::kind(Kind::TokenEmb), rho: 0.25 },
        PlanEntry { selector: Selector::kind(Kind::OutputProj), rho: 0.25 },
    ];
    PrunePlan { provenance: Provenance::Recipe, feasible: true, entries }
}

/// Applies every entry independently (per-selector thresholds). On any
/// pruning error the model is restored to its pre-plan state.
pub fn apply_plan(
    model: &mut Model,
    registry: &ParameterRegistry,
    plan: &PrunePlan,
) -> Result<(Vec<PruneMask>, CostReport), AllocError> {
    resolve_disjoint(plan, registry)?;
    let snap = model.snapshot();
    let mut masks = Vec::with_capacity(plan.entries.len());
    for entry in &plan.entries {
        if entry.selector.resolve_allow_empty(registry).is_empty() {
            continue;
        }
        match pruning::prune(model, registry, &entry.selector, entry.rho) {
            Ok(m) => masks.push(m),
            Err(e) => {
                model.restore(&snap)?;
                return Err(e.into());
            }
        }
    }
    let report = cost_report(model, registry);
    Ok((masks, report))
}

/// Greedy allocation from sweep data. For each swept selector the admissible
/// sparsities are the grid points whose measured delta_other stays within
/// `epsilon` (rho = 0 is always admissible with delta 0). Starting from every
/// selector at its largest admissible rho, the selector whose current cell
/// has the worst delta is stepped down one admissible grid point at a time,
/// as long as the overall sparsity stays at or above `target`; a final
/// exchange pass then settles every selector (and selector pair) on the
/// admissible rungs minimizing summed delta, tie-broken toward the target
/// from above. If even the maximal admissible plan misses the target it is
/// returned flagged infeasible.
pub fn greedy_allocate(
    sweep: &SweepResult,
    registry: &ParameterRegistry,
    target: f64,
    epsilon: f64,
) -> Result<PrunePlan, AllocError> {
    if sweep.cells.is_empty() {
        return Err(AllocError::EmptySweep);
    }
    // group cells by selector label, keep admissible (rho, delta) ascending
    struct Cand {
        selector: Selector,
        size: usize,
        // admissible ladder including the implicit (0, 0) rung
        ladder: Vec<(f64, f64)>,
        // index into ladder
        at: usize,
    }
    let total: usize = registry.total_count();
    let counts: std::collections::HashMap<usize, usize> =
        registry.entries.iter().map(|e| (e.id, e.count)).collect();
    let mut labels: Vec<&str> = sweep.cells.iter().map(|c| c.label.as_str()).collect();
    labels.dedup();
    let mut cands: Vec<Cand> = Vec::new();
    for label in labels {
        let cells: Vec<_> = sweep.cells.iter().filter(|c| c.label == label).collect();
        let selector = cells[0].selector.clone();
        let mut ladder = vec![(0.0, 0.0)];
        for c in &cells {
            if c.status == CellStatus::Ok && c.rho > 0.0 && c.delta_other <= epsilon {
                ladder.push((c.rho, c.delta_other));
            }
        }
        ladder.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let ids = selector.resolve(registry)?;
        let size = ids.iter().map(|id| counts[id]).sum();
        let at = ladder.len() - 1;
        cands.push(Cand { selector, size, ladder, at });
    }
    // all feasibility checks run on floor-based pruned mass, so the greedy
    // descent and the exchange pass agree at the boundary
    let pruned_mass = |c: &Cand, at: usize| (c.ladder[at].0 * c.size as f64).floor() as u64;
    let total_at = |cands: &[Cand]| -> u64 { cands.iter().map(|c| pruned_mass(c, c.at)).sum() };
    let need = (target * total as f64 - 1e-9).ceil().max(0.0) as u64;
    let feasible = total_at(&cands) >= need;
    if feasible {
        loop {
            // order reducible selectors by worst current delta, then label order
            let mut order: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].at > 0).collect();
            order.sort_by(|&a, &b| {
                cands[b].ladder[cands[b].at]
                    .1
                    .partial_cmp(&cands[a].ladder[cands[a].at].1)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut stepped = false;
            for &i in &order {
                cands[i].at -= 1;
                if total_at(&cands) >= need {
                    stepped = true;
                    break;
                }
                cands[i].at += 1;
            }
            if !stepped {
                break;
            }
        }
        // exchange pass: one big-mass step can eat the slack a cheaper pair
        // of steps would have used, so settle each selector and selector pair
        // exactly on (summed delta, then sparsity) over their rung products
        loop {
            let mut improved = false;
            for i in 0..cands.len() {
                for j in i..cands.len() {
                    let rest: u64 = total_at(&cands)
                        - pruned_mass(&cands[i], cands[i].at)
                        - if j != i { pruned_mass(&cands[j], cands[j].at) } else { 0 };
                    let mut best = (cands[i].at, cands[j].at);
                    let score = |ri: usize, rj: usize, cands: &[Cand]| -> (f64, u64) {
                        let delta = cands[i].ladder[ri].1
                            + if j != i { cands[j].ladder[rj].1 } else { 0.0 };
                        let mass = pruned_mass(&cands[i], ri)
                            + if j != i { pruned_mass(&cands[j], rj) } else { 0 };
                        (delta, mass)
                    };
                    let mut best_score = score(best.0, best.1, &cands);
                    for ri in 0..cands[i].ladder.len() {
                        for rj in 0..cands[j].ladder.len() {
                            if j == i && rj != ri {
                                continue;
                            }
                            let (delta, mass) = score(ri, rj, &cands);
                            if rest + mass < need {
                                continue;
                            }
                            if delta < best_score.0 - 1e-12
                                || ((delta - best_score.0).abs() <= 1e-12 && mass < best_score.1)
                            {
                                best_score = (delta, mass);
                                best = (ri, rj);
                            }
                        }
                    }
                    if best != (cands[i].at, cands[j].at) {
                        cands[i].at = best.0;
                        cands[j].at = best.1;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    let entries = cands
        .iter()
        .filter(|c| c.ladder[c.at].0 > 0.0)
        .map(|c| PlanEntry { selector: c.selector.clone(), rho: c.ladder[c.at].0 })
        .collect();
    Ok(PrunePlan { provenance: Provenance::Greedy, feasible, entries })
}

// ---- plan file ---------------------------------------------------------

/// Plans serialize as TOML (selector fields plus rho per entry).
pub fn save_plan(plan: &PrunePlan, path: &std::path::Path) -> Result<(), AllocError> {
    let text = toml::to_string_pretty(plan).map_err(|e| AllocError::File(e.to_string()))?;
    crate::report::atomic_write(path, text.as_bytes()).map_err(|e| AllocError::File(e.to_string()))
}

pub fn load_plan(path: &std::path::Path) -> Result<PrunePlan, AllocError> {
    let text = std::fs::read_to_string(path).map_err(|e| AllocError::File(e.to_string()))?;
    toml::from_str(&text).map_err(|e| AllocError::File(e.to_string()))
}

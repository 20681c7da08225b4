//! One-shot unstructured magnitude pruning.
//!
//! A selector resolves to an ordered parameter list through the registry; the
//! pruning threshold is pooled over that whole selection (one tau per call).
//! Exactly floor(rho * d) weights are zeroed, with ties at the cut broken by
//! (parameter id, flat index) so masks nest across rho.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Kind, Model, ParameterRegistry, Side};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("selector matches no parameters: {0}")]
    EmptySelector(String),
    #[error("sparsity {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error("layer-block pruning needs at least 3 layers, side has {0}")]
    TooFewLayers(usize),
    #[error("mask file: {0}")]
    File(String),
}

/// Parameter filter: all fields are conjunctive; `None` matches everything.
/// Layer range is inclusive and 1-based; parameters without a layer index
/// (embeddings, frontend convs, final norms) only match when no range is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    pub side: Option<Side>,
    pub kinds: Option<Vec<Kind>>,
    pub layers: Option<(u32, u32)>,
}

impl Selector {
    pub fn all() -> Selector {
        Selector { side: None, kinds: None, layers: None }
    }

    pub fn side(side: Side) -> Selector {
        Selector { side: Some(side), kinds: None, layers: None }
    }

    pub fn kind(kind: Kind) -> Selector {
        Selector { side: None, kinds: Some(vec![kind]), layers: None }
    }

    pub fn side_kind(side: Side, kind: Kind) -> Selector {
        Selector { side: Some(side), kinds: Some(vec![kind]), layers: None }
    }

    /// The kinds pooled by whole-model ("global") pruning: weight matrices
    /// and embeddings, excluding biases and layer-norm gains.
    pub const WEIGHT_KINDS: [Kind; 7] = [
        Kind::Conv,
        Kind::PosEmb,
        Kind::TokenEmb,
        Kind::SelfAttn,
        Kind::CrossAttn,
        Kind::Ffn,
        Kind::OutputProj,
    ];

    pub fn global_weights() -> Selector {
        Selector { side: None, kinds: Some(Self::WEIGHT_KINDS.to_vec()), layers: None }
    }

    pub fn side_weights(side: Side) -> Selector {
        Selector { side: Some(side), kinds: Some(Self::WEIGHT_KINDS.to_vec()), layers: None }
    }

    fn matches(&self, tag: &crate::model::ComponentTag) -> bool {
        if let Some(s) = self.side {
            if tag.side != s {
                return false;
            }
        }
        if let Some(kinds) = &self.kinds {
            if !kinds.contains(&tag.kind) {
                return false;
            }
        }
        if let Some((lo, hi)) = self.layers {
            match tag.layer {
                Some(l) if l >= lo && l <= hi => {}
                _ => return false,
            }
        }
        true
    }

    /// Matching parameter ids in ascending order; errors when empty.
    pub fn resolve(&self, registry: &ParameterRegistry) -> Result<Vec<usize>, PruneError> {
        let ids: Vec<usize> = registry
            .entries
            .iter()
            .filter(|e| self.matches(&e.tag))
            .map(|e| e.id)
            .collect();
        if ids.is_empty() {
            return Err(PruneError::EmptySelector(self.describe()));
        }
        Ok(ids)
    }

    /// Like `resolve` but an empty match is not an error.
    pub fn resolve_allow_empty(&self, registry: &ParameterRegistry) -> Vec<usize> {
        registry.entries.iter().filter(|e| self.matches(&e.tag)).map(|e| e.id).collect()
    }

    pub fn describe(&self) -> String {
        let side = self.side.map(|s| s.to_string()).unwrap_or_else(|| "*".into());
        let kinds = match &self.kinds {
            None => "*".into(),
            Some(ks) => ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+"),
        };
        let layers = match self.layers {
            None => "*".into(),
            Some((a, b)) => format!("{a}-{b}"),
        };
        format!("{side}/{kinds}/{layers}")
    }
}

/// Boolean retention masks per selected parameter, plus the achieved sparsity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneMask {
    pub selector: Selector,
    pub rho: f64,
    /// floor(rho * d) / d over the selector's pooled weights.
    pub achieved: f64,
    /// (parameter id, retention bits) in ascending id order; true = retained.
    pub masks: Vec<(usize, Vec<bool>)>,
}

impl PruneMask {
    pub fn pruned_count(&self) -> usize {
        self.masks.iter().map(|(_, m)| m.iter().filter(|&&b| !b).count()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.masks.iter().map(|(_, m)| m.len()).sum()
    }

    /// Zeroing is idempotent: applying a mask twice equals applying it once.
    pub fn apply(&self, model: &mut Model) {
        for (id, bits) in &self.masks {
            for (v, &keep) in model.params[*id].data.iter_mut().zip(bits) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Indices (ordered by |w|, then parameter id, then flat index) of the
/// floor(rho * d) weights a pooled magnitude cut removes.
pub(crate) fn pruned_indices(
    model: &Model,
    ids: &[usize],
    rho: f64,
) -> Result<Vec<(usize, usize)>, PruneError> {
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(PruneError::InvalidRho(rho));
    }
    let d: usize = ids.iter().map(|&id| model.params[id].data.len()).sum();
    let k = (rho * d as f64).floor() as usize;
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut pool: Vec<(f64, usize, usize)> = Vec::with_capacity(d);
    for &id in ids {
        for (i, &v) in model.params[id].data.iter().enumerate() {
            pool.push((v.abs(), id, i));
        }
    }
    pool.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    Ok(pool[..k].iter().map(|&(_, id, i)| (id, i)).collect())
}

/// The pooled magnitude threshold tau(rho, selector): the largest |w| among
/// the pruned set, or None when rho selects nothing.
pub fn magnitude_threshold(
    model: &Model,
    registry: &ParameterRegistry,
    selector: &Selector,
    rho: f64,
) -> Result<Option<f64>, PruneError> {
    let ids = selector.resolve(registry)?;
    let pruned = pruned_indices(model, &ids, rho)?;
    Ok(pruned.last().map(|&(id, i)| model.params[id].data[i].abs()))
}

/// One-shot magnitude pruning of a selector at sparsity rho. Weights outside
/// the selector are untouched.
pub fn prune(
    model: &mut Model,
    registry: &ParameterRegistry,
    selector: &Selector,
    rho: f64,
) -> Result<PruneMask, PruneError> {
    let ids = selector.resolve(registry)?;
    let pruned = pruned_indices(model, &ids, rho)?;
    let d: usize = ids.iter().map(|&id| model.params[id].data.len()).sum();
    let mut masks: Vec<(usize, Vec<bool>)> =
        ids.iter().map(|&id| (id, vec![true; model.params[id].data.len()])).collect();
    let pos: std::collections::HashMap<usize, usize> =
        ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
    for &(id, i) in &pruned {
        masks[pos[&id]].1[i] = false;
        model.params[id].data[i] = 0.0;
    }
    Ok(PruneMask {
        selector: selector.clone(),
        rho,
        achieved: pruned.len() as f64 / d as f64,
        masks,
    })
}

/// Global magnitude pruning over the weight-matrix pool (biases and
/// layer-norm gains excluded).
pub fn prune_global(
    model: &mut Model,
    registry: &ParameterRegistry,
    rho: f64,
) -> Result<PruneMask, PruneError> {
    prune(model, registry, &Selector::global_weights(), rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerBlock {
    Early,
    Mid,
    Late,
}

impl LayerBlock {
    pub const ALL: [LayerBlock; 3] = [LayerBlock::Early, LayerBlock::Mid, LayerBlock::Late];
}

impl std::fmt::Display for LayerBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerBlock::Early => write!(f, "early"),
            LayerBlock::Mid => write!(f, "mid"),
            LayerBlock::Late => write!(f, "late"),
        }
    }
}

/// Contiguous early/mid/late partition of layers 1..=n: boundaries at
/// ceil(n/3) and ceil(2n/3), so 12 layers split 1-4 / 5-8 / 9-12.
pub fn block_range(n_layers: usize, block: LayerBlock) -> (u32, u32) {
    let b1 = n_layers.div_ceil(3);
    let b2 = (2 * n_layers).div_ceil(3);
    match block {
        LayerBlock::Early => (1, b1 as u32),
        LayerBlock::Mid => (b1 as u32 + 1, b2 as u32),
        LayerBlock::Late => (b2 as u32 + 1, n_layers as u32),
    }
}

/// Selector for a layer block's attention + FFN weight matrices on one side.
pub fn block_selector(side: Side, n_layers: usize, block: LayerBlock) -> Selector {
    let (lo, hi) = block_range(n_layers, block);
    Selector {
        side: Some(side),
        kinds: Some(vec![Kind::SelfAttn, Kind::CrossAttn, Kind::Ffn]),
        layers: Some((lo, hi)),
    }
}

/// Prunes one early/mid/late layer block at sparsity rho with a threshold
/// pooled over the whole block.
pub fn prune_layer_block(
    model: &mut Model,
    registry: &ParameterRegistry,
    side: Side,
    block: LayerBlock,
    rho: f64,
) -> Result<PruneMask, PruneError> {
    let n = match side {
        Side::Encoder => model.config.enc_layers,
        Side::Decoder => model.config.dec_layers,
        Side::Shared => 0,
    };
    if n < 3 {
        return Err(PruneError::TooFewLayers(n));
    }
    prune(model, registry, &block_selector(side, n, block), rho)
}

// ---- mask file ---------------------------------------------------------

/// JSON export of a mask for audit and replay.
pub fn save_mask(mask: &PruneMask, path: &std::path::Path) -> Result<(), PruneError> {
    let json = serde_json::to_vec_pretty(mask).map_err(|e| PruneError::File(e.to_string()))?;
    crate::report::atomic_write(path, &json).map_err(|e| PruneError::File(e.to_string()))
}

pub fn load_mask(path: &std::path::Path) -> Result<PruneMask, PruneError> {
    let buf = std::fs::read(path).map_err(|e| PruneError::File(e.to_string()))?;
    serde_json::from_slice(&buf).map_err(|e| PruneError::File(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use proptest::prelude::*;

    fn tiny_model() -> Model {
        Model::build(ModelConfig {
            enc_layers: 3,
            dec_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 12,
            d_in: 4,
            max_src_len: 8,
            max_tgt_len: 6,
            conv_kernel: 3,
            seed: 13,
        })
        .unwrap()
    }

    #[test]
    fn prunes_exactly_floor_rho_d() {
        let mut model = tiny_model();
        let reg = model.registry();
        for rho in [0.0, 0.1, 0.33, 0.5, 0.999, 1.0] {
            let mut m = model.clone();
            let mask = prune(&mut m, &reg, &Selector::global_weights(), rho).unwrap();
            let d = mask.total_count();
            assert_eq!(mask.pruned_count(), (rho * d as f64).floor() as usize, "rho {rho}");
        }
        // rho = 0 leaves every byte unchanged
        let before: Vec<u64> =
            model.params.iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect();
        prune(&mut model, &reg, &Selector::all(), 0.0).unwrap();
        let after: Vec<u64> =
            model.params.iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn pruned_set_matches_sort_oracle() {
        let model = tiny_model();
        let reg = model.registry();
        let sel = Selector::side_kind(Side::Decoder, Kind::Ffn);
        let ids = sel.resolve(&reg).unwrap();
        let got = pruned_indices(&model, &ids, 0.4).unwrap();
        // oracle: independent full sort of (|w|, id, idx)
        let mut pool: Vec<(f64, usize, usize)> = Vec::new();
        for &id in &ids {
            for (i, &v) in model.params[id].data.iter().enumerate() {
                pool.push((v.abs(), id, i));
            }
        }
        pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = (0.4 * pool.len() as f64).floor() as usize;
        let want: Vec<(usize, usize)> = pool[..k].iter().map(|&(_, id, i)| (id, i)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn threshold_bounds_surviving_weights() {
        let mut model = tiny_model();
        let reg = model.registry();
        let sel = Selector::side(Side::Encoder);
        let tau = magnitude_threshold(&model, &reg, &sel, 0.5).unwrap().unwrap();
        let mask = prune(&mut model, &reg, &sel, 0.5).unwrap();
        for (id, bits) in &mask.masks {
            for (&v, &keep) in model.params[*id].data.iter().zip(bits) {
                if keep {
                    assert!(v.abs() >= tau || v == 0.0);
                }
            }
        }
    }

    #[test]
    fn non_selected_parameters_untouched() {
        let mut model = tiny_model();
        let reg = model.registry();
        let sel = Selector::side_kind(Side::Decoder, Kind::SelfAttn);
        let ids: std::collections::HashSet<usize> =
            sel.resolve(&reg).unwrap().into_iter().collect();
        let before: Vec<Vec<u64>> = model
            .params
            .iter()
            .map(|p| p.data.iter().map(|v| v.to_bits()).collect())
            .collect();
        prune(&mut model, &reg, &sel, 0.7).unwrap();
        for (id, p) in model.params.iter().enumerate() {
            if !ids.contains(&id) {
                let now: Vec<u64> = p.data.iter().map(|v| v.to_bits()).collect();
                assert_eq!(now, before[id], "parameter {} moved", p.name);
            }
        }
    }

    #[test]
    fn layer_blocks_partition_layered_weights() {
        let model = tiny_model();
        let reg = model.registry();
        for side in [Side::Encoder, Side::Decoder] {
            let mut seen = std::collections::HashSet::new();
            for block in LayerBlock::ALL {
                for id in block_selector(side, 3, block).resolve(&reg).unwrap() {
                    assert!(seen.insert(id), "block overlap on id {id}");
                }
            }
            let all = Selector {
                side: Some(side),
                kinds: Some(vec![Kind::SelfAttn, Kind::CrossAttn, Kind::Ffn]),
                layers: Some((1, 3)),
            };
            let want: std::collections::HashSet<usize> =
                all.resolve(&reg).unwrap().into_iter().collect();
            assert_eq!(seen, want);
        }
    }

    #[test]
    fn block_boundaries_match_ceil_rule() {
        assert_eq!(block_range(12, LayerBlock::Early), (1, 4));
        assert_eq!(block_range(12, LayerBlock::Mid), (5, 8));
        assert_eq!(block_range(12, LayerBlock::Late), (9, 12));
        assert_eq!(block_range(6, LayerBlock::Early), (1, 2));
        assert_eq!(block_range(6, LayerBlock::Mid), (3, 4));
        assert_eq!(block_range(6, LayerBlock::Late), (5, 6));
        // blocks stay nonempty down to 3 layers
        assert_eq!(block_range(3, LayerBlock::Early), (1, 1));
        assert_eq!(block_range(3, LayerBlock::Mid), (2, 2));
        assert_eq!(block_range(3, LayerBlock::Late), (3, 3));
    }

    #[test]
    fn too_few_layers_for_blocks_is_error() {
        let mut model = Model::build(ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 12,
            d_in: 4,
            max_src_len: 8,
            max_tgt_len: 6,
            conv_kernel: 3,
            seed: 13,
        })
        .unwrap();
        let reg = model.registry();
        assert!(matches!(
            prune_layer_block(&mut model, &reg, Side::Encoder, LayerBlock::Early, 0.5),
            Err(PruneError::TooFewLayers(2))
        ));
    }

    #[test]
    fn invalid_rho_and_empty_selector_are_errors() {
        let mut model = tiny_model();
        let reg = model.registry();
        assert!(matches!(
            prune(&mut model, &reg, &Selector::all(), 1.5),
            Err(PruneError::InvalidRho(_))
        ));
        let empty = Selector {
            side: Some(Side::Shared),
            kinds: None,
            layers: None,
        };
        assert!(matches!(
            prune(&mut model, &reg, &empty, 0.5),
            Err(PruneError::EmptySelector(_))
        ));
    }

    #[test]
    fn mask_file_roundtrip() {
        let mut model = tiny_model();
        let reg = model.registry();
        let mask = prune(&mut model, &reg, &Selector::kind(Kind::Ffn), 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.json");
        save_mask(&mask, &path).unwrap();
        let loaded = load_mask(&path).unwrap();
        assert_eq!(loaded.masks, mask.masks);
        assert_eq!(loaded.rho, mask.rho);
        assert_eq!(loaded.selector, mask.selector);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Nesting: everything pruned at rho1 <= rho2 is also pruned at rho2.
        #[test]
        fn masks_nest_across_rho(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let model = tiny_model();
            let reg = model.registry();
            let ids = Selector::global_weights().resolve(&reg).unwrap();
            let small: std::collections::HashSet<(usize, usize)> =
                pruned_indices(&model, &ids, lo).unwrap().into_iter().collect();
            let big: std::collections::HashSet<(usize, usize)> =
                pruned_indices(&model, &ids, hi).unwrap().into_iter().collect();
            prop_assert!(small.is_subset(&big));
        }

        /// Achieved sparsity equals floor(rho * d) / d for arbitrary selectors.
        #[test]
        fn achieved_sparsity_is_floored(rho in 0.0f64..=1.0, kind_ix in 0usize..7) {
            let mut model = tiny_model();
            let reg = model.registry();
            let sel = Selector::kind(Selector::WEIGHT_KINDS[kind_ix]);
            let mask = prune(&mut model, &reg, &sel, rho).unwrap();
            let d = mask.total_count();
            let expect = (rho * d as f64).floor() / d as f64;
            prop_assert!((mask.achieved - expect).abs() < 1e-15);
        }
    }
}

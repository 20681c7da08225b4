//! Error-rate metrics and model cost accounting.
//!
//! "Words" are vocabulary tokens; "characters" are the base-10 digits of the
//! token id, concatenated per utterance. WER/CER are pooled at corpus level
//! (total edits over total reference length).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Kind, Model, ModelConfig, ParameterRegistry, Side};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("refs and hyps differ in length: {refs} vs {hyps}")]
    LengthMismatch { refs: usize, hyps: usize },
}

/// Corpus-level error rates. Rates are fractions (0.1164 means 11.64%);
/// `wer` may exceed 1.0 when insertions dominate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub wer: f64,
    pub cer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl ErrorRates {
    pub fn wer_pct(&self) -> f64 {
        self.wer * 100.0
    }

    pub fn cer_pct(&self) -> f64 {
        self.cer * 100.0
    }
}

/// Levenshtein distance with unit costs and a deterministic S/D/I split.
/// Ties in the backtrace are broken substitution, then deletion, then
/// insertion.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> (usize, usize, usize, usize) {
    let n = reference.len();
    let m = hypothesis.len();
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    // backtrace with fixed tie-break order
    let (mut i, mut j) = (n, m);
    let (mut s, mut del_n, mut ins_n) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i * w + j] == d[(i - 1) * w + j - 1] + cost {
                s += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i * w + j] == d[(i - 1) * w + j] + 1 {
            del_n += 1;
            i -= 1;
            continue;
        }
        ins_n += 1;
        j -= 1;
    }
    (d[n * w + m], s, del_n, ins_n)
}

fn digits(token: usize) -> Vec<usize> {
    token.to_string().bytes().map(|b| (b - b'0') as usize).collect()
}

/// Corpus-pooled WER/CER over parallel reference and hypothesis lists.
pub fn wer(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<ErrorRates, MetricError> {
    if refs.len() != hyps.len() {
        return Err(MetricError::LengthMismatch { refs: refs.len(), hyps: hyps.len() });
    }
    let ref_len: usize = refs.iter().map(|r| r.len()).sum();
    if ref_len == 0 {
        return Err(MetricError::EmptyCorpus);
    }
    let mut dist = 0usize;
    let (mut s, mut d, mut ins) = (0usize, 0usize, 0usize);
    let mut char_dist = 0usize;
    let mut char_ref = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let (e, es, ed, ei) = edit_distance(r, h);
        dist += e;
        s += es;
        d += ed;
        ins += ei;
        let rc: Vec<usize> = r.iter().flat_map(|&t| digits(t)).collect();
        let hc: Vec<usize> = h.iter().flat_map(|&t| digits(t)).collect();
        char_dist += edit_distance(&rc, &hc).0;
        char_ref += rc.len();
    }
    debug_assert_eq!(dist, s + d + ins);
    Ok(ErrorRates {
        wer: dist as f64 / ref_len as f64,
        cer: if char_ref > 0 { char_dist as f64 / char_ref as f64 } else { 0.0 },
        substitutions: s,
        deletions: d,
        insertions: ins,
        ref_len,
    })
}

/// Pruned-minus-baseline WER in absolute percentage points; negative means
/// the pruned model improved.
pub fn delta_wer(baseline: &ErrorRates, pruned: &ErrorRates) -> f64 {
    (pruned.wer - baseline.wer) * 100.0
}

/// Parameter, sparsity, compute, and storage accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub total_params: usize,
    pub nonzero_params: usize,
    pub sparsity: f64,
    pub flops_per_step: f64,
    pub sparse_size_bytes: usize,
}

/// Bytes per stored nonzero: a 4-byte value plus a 4-byte flat index.
pub const BYTES_PER_NONZERO: usize = 8;

/// Dense matrix-multiply FLOPs attributed to one component kind for a single
/// forward step at the configured maximum lengths (multiply-add = 2 FLOPs).
/// Embedding lookups, norms, and biases are counted as zero.
pub fn dense_component_flops(config: &ModelConfig, side: Side, kind: Kind) -> f64 {
    let d = config.d_model as f64;
    let dffn = config.d_ffn as f64;
    let t_src = config.max_src_len as f64;
    let t_enc = config.enc_positions(config.max_src_len) as f64;
    let t_tgt = config.max_tgt_len as f64;
    let k = config.conv_kernel as f64;
    match (side, kind) {
        (Side::Encoder, Kind::Conv) => {
            2.0 * k * config.d_in as f64 * d * t_src + 2.0 * k * d * d * t_enc
        }
        (Side::Encoder, Kind::SelfAttn) => {
            config.enc_layers as f64 * (4.0 * 2.0 * d * d * t_enc + 2.0 * 2.0 * t_enc * t_enc * d)
        }
        (Side::Encoder, Kind::Ffn) => config.enc_layers as f64 * 2.0 * 2.0 * d * dffn * t_enc,
        (Side::Decoder, Kind::SelfAttn) => {
            config.dec_layers as f64 * (4.0 * 2.0 * d * d * t_tgt + 2.0 * 2.0 * t_tgt * t_tgt * d)
        }
        (Side::Decoder, Kind::CrossAttn) => {
            config.dec_layers as f64
                * (2.0 * 2.0 * d * d * t_tgt
                    + 2.0 * 2.0 * d * d * t_enc
                    + 2.0 * 2.0 * t_tgt * t_enc * d)
        }
        (Side::Decoder, Kind::Ffn) => config.dec_layers as f64 * 2.0 * 2.0 * d * dffn * t_tgt,
        (Side::Decoder, Kind::OutputProj) => 2.0 * d * config.vocab_size as f64 * t_tgt,
        _ => 0.0,
    }
}

/// Exact nonzero count, effective FLOPs (each component's dense FLOPs scaled
/// by its nonzero fraction), and modeled sparse storage size.
pub fn cost_report(model: &Model, registry: &ParameterRegistry) -> CostReport {
    let total: usize = registry.total_count();
    let mut nonzero_total = 0usize;
    // per (side, kind) nonzero / count for FLOP scaling
    let mut flops = 0.0;
    for side in [Side::Encoder, Side::Decoder, Side::Shared] {
        for kind in Kind::ALL {
            let mut count = 0usize;
            let mut nz = 0usize;
            for e in registry.entries.iter().filter(|e| e.tag.side == side && e.tag.kind == kind) {
                count += e.count;
                nz += model.params[e.id].data.iter().filter(|&&v| v != 0.0).count();
            }
            nonzero_total += nz;
            if count > 0 {
                let density = nz as f64 / count as f64;
                flops += dense_component_flops(&model.config, side, kind) * density;
            }
        }
    }
    CostReport {
        total_params: total,
        nonzero_params: nonzero_total,
        sparsity: 1.0 - nonzero_total as f64 / total as f64,
        flops_per_step: flops,
        sparse_size_bytes: nonzero_total * BYTES_PER_NONZERO,
    }
}

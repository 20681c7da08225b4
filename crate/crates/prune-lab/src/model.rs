//! Toy encoder-decoder transformer with a component-tagged parameter registry.
//!
//! The architecture mirrors a Whisper-like ASR stack at desk scale: a two-conv
//! frame frontend, sinusoidal encoder positions, learned decoder positions,
//! pre-norm attention/FFN blocks, and a separate output projection. Every
//! trainable tensor is registered with a (side, kind, layer) tag, which is the
//! addressing scheme used by pruning and diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::kernels;

pub const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input length {got} exceeds configured maximum {max} for {what}")]
    TooLong { what: &'static str, got: usize, max: usize },
    #[error("snapshot does not match model config")]
    SnapshotMismatch,
    #[error("training diverged (non-finite loss) at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Decoder,
    Shared,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Encoder => write!(f, "encoder"),
            Side::Decoder => write!(f, "decoder"),
            Side::Shared => write!(f, "shared"),
        }
    }
}

/// Component taxonomy: one variant per architectural parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Conv,
    PosEmb,
    TokenEmb,
    SelfAttn,
    CrossAttn,
    Ffn,
    LayerNorm,
    Bias,
    OutputProj,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::Conv,
        Kind::PosEmb,
        Kind::TokenEmb,
        Kind::SelfAttn,
        Kind::CrossAttn,
        Kind::Ffn,
        Kind::LayerNorm,
        Kind::Bias,
        Kind::OutputProj,
    ];
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Kind::Conv => "conv",
            Kind::PosEmb => "pos_emb",
            Kind::TokenEmb => "token_emb",
            Kind::SelfAttn => "self_attn",
            Kind::CrossAttn => "cross_attn",
            Kind::Ffn => "ffn",
            Kind::LayerNorm => "layer_norm",
            Kind::Bias => "bias",
            Kind::OutputProj => "output_proj",
        };
        write!(f, "{s}")
    }
}

/// Addressing tag for one parameter tensor. `layer` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentTag {
    pub side: Side,
    pub kind: Kind,
    pub layer: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub d_in: usize,
    /// Maximum source length in frames (before the stride-2 conv).
    pub max_src_len: usize,
    /// Maximum decoder input length (BOS included).
    pub max_tgt_len: usize,
    pub conv_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 64,
            d_in: 16,
            max_src_len: 32,
            max_tgt_len: 16,
            conv_kernel: 3,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(ModelError::InvalidConfig("layer counts must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(ModelError::InvalidConfig(
                "vocab_size must be at least 3 (content + BOS + EOS)".into(),
            ));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig("conv_kernel must be odd".into()));
        }
        if self.d_in == 0 || self.d_ffn == 0 || self.max_src_len == 0 || self.max_tgt_len == 0 {
            return Err(ModelError::InvalidConfig("dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn bos_id(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    /// Ids below this bound are ordinary content tokens.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - 2
    }

    /// Encoder sequence length produced by the conv frontend for `frames` input rows.
    pub fn enc_positions(&self, frames: usize) -> usize {
        kernels::conv1d_out_len(frames, 2)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tag: ComponentTag,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// One registry row: parameter id (index into the model's parameter list),
/// its tag, and its element count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: usize,
    pub name: String,
    pub tag: ComponentTag,
    pub count: usize,
}

/// Maps every trainable tensor to its component tag. Queries are order-stable
/// (ascending parameter id).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ParameterRegistry {
    pub fn from_entries(entries: Vec<RegistryEntry>) -> Self {
        ParameterRegistry { entries }
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct LnIds {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayerIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecLayerIds {
    ln1: LnIds,
    self_attn: AttnIds,
    ln_cross: LnIds,
    cross_attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    enc: Vec<EncLayerIds>,
    enc_lnf: LnIds,
    tok_emb: usize,
    pos_emb: usize,
    dec: Vec<DecLayerIds>,
    dec_lnf: LnIds,
    out_proj: usize,
}

/// A model instance: config, parameter store, layout, and the fixed sinusoidal
/// encoder position table. Single-threaded during forward/backward/train;
/// clones are independent.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    layout: Layout,
    sin_pos: Vec<f64>, // [enc_positions(max_src_len) x d_model]
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder {
    fn gauss(&mut self, name: &str, tag: ComponentTag, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal.sample(&mut self.rng) * INIT_STD).collect();
        self.params.push(Param { name: name.into(), tag, shape, data });
        self.params.len() - 1
    }

    fn constant(&mut self, name: &str, tag: ComponentTag, shape: Vec<usize>, v: f64) -> usize {
        let n: usize = shape.iter().product();
        self.params.push(Param { name: name.into(), tag, shape, data: vec![v; n] });
        self.params.len() - 1
    }

    fn ln(&mut self, prefix: &str, side: Side, layer: Option<u32>, d: usize) -> LnIds {
        let g = self.constant(
            &format!("{prefix}.g"),
            ComponentTag { side, kind: Kind::LayerNorm, layer },
            vec![d],
            1.0,
        );
        let b = self.constant(
            &format!("{prefix}.b"),
            ComponentTag { side, kind: Kind::Bias, layer },
            vec![d],
            0.0,
        );
        LnIds { g, b }
    }

    fn attn(&mut self, prefix: &str, side: Side, kind: Kind, layer: u32, d: usize) -> AttnIds {
        let w = |b: &mut Self, n: &str| {
            b.gauss(
                &format!("{prefix}.{n}"),
                ComponentTag { side, kind, layer: Some(layer) },
                vec![d, d],
            )
        };
        let bias = |b: &mut Self, n: &str| {
            b.constant(
                &format!("{prefix}.{n}"),
                ComponentTag { side, kind: Kind::Bias, layer: Some(layer) },
                vec![d],
                0.0,
            )
        };
        let wq = w(self, "wq");
        let bq = bias(self, "bq");
        let wk = w(self, "wk");
        let bk = bias(self, "bk");
        let wv = w(self, "wv");
        let bv = bias(self, "bv");
        let wo = w(self, "wo");
        let bo = bias(self, "bo");
        AttnIds { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, side: Side, layer: u32, d: usize, d_ffn: usize) -> FfnIds {
        let tag_w = ComponentTag { side, kind: Kind::Ffn, layer: Some(layer) };
        let tag_b = ComponentTag { side, kind: Kind::Bias, layer: Some(layer) };
        let w1 = self.gauss(&format!("{prefix}.w1"), tag_w, vec![d, d_ffn]);
        let b1 = self.constant(&format!("{prefix}.b1"), tag_b, vec![d_ffn], 0.0);
        let w2 = self.gauss(&format!("{prefix}.w2"), tag_w, vec![d_ffn, d]);
        let b2 = self.constant(&format!("{prefix}.b2"), tag_b, vec![d], 0.0);
        FfnIds { w1, b1, w2, b2 }
    }
}

fn sinusoidal_table(positions: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * d];
    for pos in 0..positions {
        for i in 0..d / 2 {
            let freq = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = freq.sin();
            out[pos * d + 2 * i + 1] = freq.cos();
        }
    }
    out
}

impl Model {
    /// Builds a model with seeded Gaussian weights (std 0.02), zero biases,
    /// and unit layer-norm gains. Same seed, same bytes.
    pub fn build(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            normal: Normal::new(0.0, 1.0).unwrap(),
        };
        let d = config.d_model;
        let enc = Side::Encoder;
        let dec = Side::Decoder;
        let k = config.conv_kernel;

        let conv1_w = b.gauss(
            "enc.conv1.w",
            ComponentTag { side: enc, kind: Kind::Conv, layer: None },
            vec![k * config.d_in, d],
        );
        let conv1_b = b.constant(
            "enc.conv1.b",
            ComponentTag { side: enc, kind: Kind::Bias, layer: None },
            vec![d],
            0.0,
        );
        let conv2_w = b.gauss(
            "enc.conv2.w",
            ComponentTag { side: enc, kind: Kind::Conv, layer: None },
            vec![k * d, d],
        );
        let conv2_b = b.constant(
            "enc.conv2.b",
            ComponentTag { side: enc, kind: Kind::Bias, layer: None },
            vec![d],
            0.0,
        );

        let mut enc_layers = Vec::new();
        for l in 1..=config.enc_layers {
            let p = format!("enc.l{l}");
            enc_layers.push(EncLayerIds {
                ln1: b.ln(&format!("{p}.ln1"), enc, Some(l as u32), d),
                attn: b.attn(&format!("{p}.attn"), enc, Kind::SelfAttn, l as u32, d),
                ln2: b.ln(&format!("{p}.ln2"), enc, Some(l as u32), d),
                ffn: b.ffn(&format!("{p}.ffn"), enc, l as u32, d, config.d_ffn),
            });
        }
        let enc_lnf = b.ln("enc.ln_final", enc, None, d);

        let tok_emb = b.gauss(
            "dec.tok_emb",
            ComponentTag { side: dec, kind: Kind::TokenEmb, layer: None },
            vec![config.vocab_size, d],
        );
        let pos_emb = b.gauss(
            "dec.pos_emb",
            ComponentTag { side: dec, kind: Kind::PosEmb, layer: None },
            vec![config.max_tgt_len, d],
        );

        let mut dec_layers = Vec::new();
        for l in 1..=config.dec_layers {
            let p = format!("dec.l{l}");
            dec_layers.push(DecLayerIds {
                ln1: b.ln(&format!("{p}.ln1"), dec, Some(l as u32), d),
                self_attn: b.attn(&format!("{p}.self_attn"), dec, Kind::SelfAttn, l as u32, d),
                ln_cross: b.ln(&format!("{p}.ln_cross"), dec, Some(l as u32), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), dec, Kind::CrossAttn, l as u32, d),
                ln2: b.ln(&format!("{p}.ln2"), dec, Some(l as u32), d),
                ffn: b.ffn(&format!("{p}.ffn"), dec, l as u32, d, config.d_ffn),
            });
        }
        let dec_lnf = b.ln("dec.ln_final", dec, None, d);
        let out_proj = b.gauss(
            "dec.out_proj",
            ComponentTag { side: dec, kind: Kind::OutputProj, layer: None },
            vec![d, config.vocab_size],
        );

        let layout = Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            enc: enc_layers,
            enc_lnf,
            tok_emb,
            pos_emb,
            dec: dec_layers,
            dec_lnf,
            out_proj,
        };
        let sin_pos = sinusoidal_table(config.enc_positions(config.max_src_len), d);
        Ok(Model { config, params: b.params, layout, sin_pos })
    }

    pub fn registry(&self) -> ParameterRegistry {
        ParameterRegistry {
            entries: self
                .params
                .iter()
                .enumerate()
                .map(|(id, p)| RegistryEntry {
                    id,
                    name: p.name.clone(),
                    tag: p.tag,
                    count: p.data.len(),
                })
                .collect(),
        }
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    // ---- graph forward -------------------------------------------------

    fn check_lengths(&self, frames: &Tensor, tgt_len: usize) -> Result<(), ModelError> {
        let (t, d_in) = frames.dims2();
        if d_in != self.config.d_in {
            return Err(ModelError::InvalidConfig(format!(
                "frames have dimension {d_in}, expected {}",
                self.config.d_in
            )));
        }
        if t > self.config.max_src_len {
            return Err(ModelError::TooLong { what: "frames", got: t, max: self.config.max_src_len });
        }
        if tgt_len > self.config.max_tgt_len {
            return Err(ModelError::TooLong {
                what: "tgt_tokens",
                got: tgt_len,
                max: self.config.max_tgt_len,
            });
        }
        Ok(())
    }

    fn leaves(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(Tensor::new(p.shape.clone(), p.data.clone()), requires_grad))
            .collect()
    }

    fn attention(
        &self,
        g: &mut Graph,
        nodes: &[NodeId],
        q_src: NodeId,
        kv_src: NodeId,
        ids: &AttnIds,
        mask: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mm = |g: &mut Graph, x, w, bias| -> Result<NodeId, ModelError> {
            let y = g.matmul(x, w)?;
            Ok(g.add_row(y, bias)?)
        };
        let q = mm(g, q_src, nodes[ids.wq], nodes[ids.bq])?;
        let k = mm(g, kv_src, nodes[ids.wk], nodes[ids.bk])?;
        let v = mm(g, kv_src, nodes[ids.wv], nodes[ids.bv])?;
        let mut ctxs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let raw = g.matmul(qh, kt)?;
            let mut scores = g.scale(raw, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let a = g.softmax(scores);
            ctxs.push(g.matmul(a, vh)?);
        }
        let ctx = g.concat_cols(&ctxs);
        mm(g, ctx, nodes[ids.wo], nodes[ids.bo])
    }

    fn ffn_block(
        &self,
        g: &mut Graph,
        nodes: &[NodeId],
        x: NodeId,
        ids: &FfnIds,
    ) -> Result<NodeId, ModelError> {
        let h = g.matmul(x, nodes[ids.w1])?;
        let h = g.add_row(h, nodes[ids.b1])?;
        let h = g.gelu(h);
        let y = g.matmul(h, nodes[ids.w2])?;
        Ok(g.add_row(y, nodes[ids.b2])?)
    }

    fn encode_graph(
        &self,
        g: &mut Graph,
        nodes: &[NodeId],
        frames: &Tensor,
    ) -> Result<NodeId, ModelError> {
        let k = self.config.conv_kernel;
        let d = self.config.d_model;
        let x = g.leaf(frames.clone(), false);
        let c1 = g.conv1d(x, nodes[self.layout.conv1_w], nodes[self.layout.conv1_b], k, 1)?;
        let c1 = g.gelu(c1);
        let c2 = g.conv1d(c1, nodes[self.layout.conv2_w], nodes[self.layout.conv2_b], k, 2)?;
        let c2 = g.gelu(c2);
        let t_enc = g.value(c2).dims2().0;
        let pos = g.leaf(
            Tensor::new(vec![t_enc, d], self.sin_pos[..t_enc * d].to_vec()),
            false,
        );
        let mut h = g.add(c2, pos)?;
        for layer in &self.layout.enc {
            let n1 = g.layer_norm(h, nodes[layer.ln1.g], nodes[layer.ln1.b], LN_EPS)?;
            let a = self.attention(g, nodes, n1, n1, &layer.attn, None)?;
            h = g.add(h, a)?;
            let n2 = g.layer_norm(h, nodes[layer.ln2.g], nodes[layer.ln2.b], LN_EPS)?;
            let f = self.ffn_block(g, nodes, n2, &layer.ffn)?;
            h = g.add(h, f)?;
        }
        Ok(g.layer_norm(h, nodes[self.layout.enc_lnf.g], nodes[self.layout.enc_lnf.b], LN_EPS)?)
    }

    fn decode_graph(
        &self,
        g: &mut Graph,
        nodes: &[NodeId],
        enc_out: NodeId,
        tgt_tokens: &[usize],
    ) -> Result<NodeId, ModelError> {
        let t = tgt_tokens.len();
        let tok = g.embedding(nodes[self.layout.tok_emb], tgt_tokens)?;
        let pos_ids: Vec<usize> = (0..t).collect();
        let pos = g.embedding(nodes[self.layout.pos_emb], &pos_ids)?;
        let mut h = g.add(tok, pos)?;
        // strictly-upper-triangular additive mask
        let mut mdata = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                mdata[i * t + j] = MASK_NEG;
            }
        }
        let mask = g.leaf(Tensor::new(vec![t, t], mdata), false);
        for layer in &self.layout.dec {
            let n1 = g.layer_norm(h, nodes[layer.ln1.g], nodes[layer.ln1.b], LN_EPS)?;
            let a = self.attention(g, nodes, n1, n1, &layer.self_attn, Some(mask))?;
            h = g.add(h, a)?;
            let nc = g.layer_norm(h, nodes[layer.ln_cross.g], nodes[layer.ln_cross.b], LN_EPS)?;
            let c = self.attention(g, nodes, nc, enc_out, &layer.cross_attn, None)?;
            h = g.add(h, c)?;
            let n2 = g.layer_norm(h, nodes[layer.ln2.g], nodes[layer.ln2.b], LN_EPS)?;
            let f = self.ffn_block(g, nodes, n2, &layer.ffn)?;
            h = g.add(h, f)?;
        }
        let hf = g.layer_norm(h, nodes[self.layout.dec_lnf.g], nodes[self.layout.dec_lnf.b], LN_EPS)?;
        Ok(g.matmul(hf, nodes[self.layout.out_proj])?)
    }

    /// Teacher-forced forward pass. `tgt_tokens` are the decoder input ids
    /// (BOS-prefixed by the caller); the result is `[len(tgt_tokens) x vocab]`
    /// logits under causal masking.
    pub fn forward(&self, frames: &Tensor, tgt_tokens: &[usize]) -> Result<Tensor, ModelError> {
        self.check_lengths(frames, tgt_tokens.len())?;
        let mut g = Graph::new();
        let nodes = self.leaves(&mut g, false);
        let enc = self.encode_graph(&mut g, &nodes, frames)?;
        let logits = self.decode_graph(&mut g, &nodes, enc, tgt_tokens)?;
        Ok(g.value(logits).clone())
    }

    /// Mean NLL of `target ++ [EOS]` under teacher forcing with BOS-prefixed input.
    pub fn loss(&self, frames: &Tensor, target: &[usize]) -> Result<f64, ModelError> {
        let (l, _, _, _) = self.loss_graph(frames, target, false)?;
        Ok(l)
    }

    /// Loss plus per-parameter gradients (indexed like `self.params`).
    pub fn loss_and_grads(
        &self,
        frames: &Tensor,
        target: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        self.loss_and_grads_scaled(frames, target, 1.0)
    }

    /// As `loss_and_grads` with the loss multiplied by `scale`.
    pub fn loss_and_grads_scaled(
        &self,
        frames: &Tensor,
        target: &[usize],
        scale: f64,
    ) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let (_, g, loss_id, nodes) = self.loss_graph_scaled(frames, target, true, scale)?;
        let grads = g.backward(loss_id)?;
        let out = self
            .params
            .iter()
            .zip(&nodes)
            .map(|(p, &n)| grads.get(n, p.data.len()))
            .collect();
        let loss = g.value(loss_id).data[0];
        Ok((loss, out))
    }

    fn loss_graph(
        &self,
        frames: &Tensor,
        target: &[usize],
        requires_grad: bool,
    ) -> Result<(f64, Graph, NodeId, Vec<NodeId>), ModelError> {
        let (_, g, id, n) = self.loss_graph_scaled(frames, target, requires_grad, 1.0)?;
        let l = g.value(id).data[0];
        Ok((l, g, id, n))
    }

    fn loss_graph_scaled(
        &self,
        frames: &Tensor,
        target: &[usize],
        requires_grad: bool,
        scale: f64,
    ) -> Result<(f64, Graph, NodeId, Vec<NodeId>), ModelError> {
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(self.config.bos_id());
        input.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(self.config.eos_id());
        self.check_lengths(frames, input.len())?;
        let mut g = Graph::new();
        let nodes = self.leaves(&mut g, requires_grad);
        let enc = self.encode_graph(&mut g, &nodes, frames)?;
        let logits = self.decode_graph(&mut g, &nodes, enc, &input)?;
        let mut loss = g.cross_entropy(logits, &labels)?;
        if scale != 1.0 {
            loss = g.scale(loss, scale);
        }
        let l = g.value(loss).data[0];
        Ok((l, g, loss, nodes))
    }

    // ---- incremental (inference) decoding ------------------------------

    /// Encoder output as a plain matrix, via the graph path (bit-identical to
    /// the teacher-forced forward).
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor, ModelError> {
        self.check_lengths(frames, 0)?;
        let mut g = Graph::new();
        let nodes = self.leaves(&mut g, false);
        let enc = self.encode_graph(&mut g, &nodes, frames)?;
        Ok(g.value(enc).clone())
    }

    /// Greedy autoregressive decoding: argmax per step (ties to the lowest
    /// id), stops at EOS or after `max_len` emitted tokens. Returns the
    /// emitted tokens with EOS excluded.
    pub fn greedy_decode(&self, frames: &Tensor, max_len: usize) -> Result<Vec<usize>, ModelError> {
        if max_len > self.config.max_tgt_len {
            return Err(ModelError::TooLong {
                what: "max_len",
                got: max_len,
                max: self.config.max_tgt_len,
            });
        }
        let enc_out = self.encode(frames)?;
        let mut state = DecodeState::new(self, &enc_out);
        let mut out = Vec::new();
        let mut token = self.config.bos_id();
        for pos in 0..max_len {
            let logits = state.step(self, token, pos);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in logits.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            if best == self.config.eos_id() {
                break;
            }
            out.push(best);
            token = best;
        }
        Ok(out)
    }

    // ---- training ------------------------------------------------------

    /// Plain SGD over uniformly sampled batches. Per-sample gradients are
    /// averaged in sample order. Returns the per-step mean NLL curve.
    pub fn train(
        &mut self,
        items: &[(Tensor, Vec<usize>)],
        steps: usize,
        lr: f64,
        batch: usize,
        seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        assert!(!items.is_empty(), "train requires a nonempty dataset");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut curve = Vec::with_capacity(steps);
        for step in 0..steps {
            let idx: Vec<usize> =
                (0..batch).map(|_| rand::Rng::gen_range(&mut rng, 0..items.len())).collect();
            let mut mean_loss = 0.0;
            let mut acc: Vec<Vec<f64>> =
                self.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            for &i in &idx {
                let (l, grads) = self.loss_and_grads(&items[i].0, &items[i].1)?;
                mean_loss += l;
                for (a, gp) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.iter_mut().zip(gp) {
                        *av += gv;
                    }
                }
            }
            mean_loss /= batch as f64;
            if !mean_loss.is_finite() {
                return Err(ModelError::Diverged(step));
            }
            let scale = lr / batch as f64;
            for (p, a) in self.params.iter_mut().zip(&acc) {
                for (pv, av) in p.data.iter_mut().zip(a) {
                    *pv -= scale * av;
                }
            }
            curve.push(mean_loss);
        }
        Ok(curve)
    }

    // ---- snapshot / restore -------------------------------------------

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            config: self.config.clone(),
            data: self.params.iter().map(|p| p.data.clone()).collect(),
        }
    }

    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<(), ModelError> {
        if snap.config != self.config || snap.data.len() != self.params.len() {
            return Err(ModelError::SnapshotMismatch);
        }
        for (p, d) in self.params.iter_mut().zip(&snap.data) {
            if p.data.len() != d.len() {
                return Err(ModelError::SnapshotMismatch);
            }
            p.data.copy_from_slice(d);
        }
        Ok(())
    }
}

/// Frozen copy of every parameter tensor plus the config it came from.
#[derive(Debug, Clone)]
pub struct ParameterSnapshot {
    pub config: ModelConfig,
    pub data: Vec<Vec<f64>>,
}

impl ParameterSnapshot {
    pub fn total_count(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }
}

/// KV-cache state for incremental greedy decoding. Produces, step by step,
/// exactly the last logits row of the teacher-forced forward pass.
struct DecodeState {
    x_cache: Vec<LayerCache>,
    t_enc: usize,
}

struct LayerCache {
    self_k: Vec<f64>,
    self_v: Vec<f64>,
    cross_k: Vec<f64>,
    cross_v: Vec<f64>,
}

impl DecodeState {
    fn new(model: &Model, enc_out: &Tensor) -> DecodeState {
        let d = model.config.d_model;
        let (t_enc, _) = enc_out.dims2();
        let mut caches = Vec::with_capacity(model.layout.dec.len());
        for layer in &model.layout.dec {
            let ids = &layer.cross_attn;
            let mut ck = vec![0.0; t_enc * d];
            let mut cv = vec![0.0; t_enc * d];
            linear(model, &enc_out.data, ids.wk, ids.bk, t_enc, d, d, &mut ck);
            linear(model, &enc_out.data, ids.wv, ids.bv, t_enc, d, d, &mut cv);
            caches.push(LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: ck,
                cross_v: cv,
            });
        }
        DecodeState { x_cache: caches, t_enc }
    }

    fn step(&mut self, model: &Model, token: usize, pos: usize) -> Vec<f64> {
        let d = model.config.d_model;
        let heads = model.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = &model.params[model.layout.tok_emb].data[token * d..(token + 1) * d];
        let posv = &model.params[model.layout.pos_emb].data[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(posv).map(|(a, b)| a + b).collect();

        let mut norm = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut ctx = vec![0.0; d];
        let mut proj = vec![0.0; d];
        for (layer, cache) in model.layout.dec.iter().zip(self.x_cache.iter_mut()) {
            // self attention
            ln_row(model, &x, &layer.ln1, &mut norm);
            linear(model, &norm, layer.self_attn.wq, layer.self_attn.bq, 1, d, d, &mut q);
            linear(model, &norm, layer.self_attn.wk, layer.self_attn.bk, 1, d, d, &mut k);
            linear(model, &norm, layer.self_attn.wv, layer.self_attn.bv, 1, d, d, &mut v);
            cache.self_k.extend_from_slice(&k);
            cache.self_v.extend_from_slice(&v);
            let t = cache.self_k.len() / d;
            mha_row(&q, &cache.self_k, &cache.self_v, t, d, heads, scale, &mut ctx);
            linear(model, &ctx, layer.self_attn.wo, layer.self_attn.bo, 1, d, d, &mut proj);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            // cross attention
            ln_row(model, &x, &layer.ln_cross, &mut norm);
            linear(model, &norm, layer.cross_attn.wq, layer.cross_attn.bq, 1, d, d, &mut q);
            mha_row(&q, &cache.cross_k, &cache.cross_v, self.t_enc, d, heads, scale, &mut ctx);
            linear(model, &ctx, layer.cross_attn.wo, layer.cross_attn.bo, 1, d, d, &mut proj);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            // ffn
            ln_row(model, &x, &layer.ln2, &mut norm);
            let d_ffn = model.config.d_ffn;
            let mut h = vec![0.0; d_ffn];
            linear(model, &norm, layer.ffn.w1, layer.ffn.b1, 1, d, d_ffn, &mut h);
            for hv in h.iter_mut() {
                *hv = kernels::gelu(*hv);
            }
            linear(model, &h, layer.ffn.w2, layer.ffn.b2, 1, d_ffn, d, &mut proj);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
        }
        ln_row(model, &x, &model.layout.dec_lnf, &mut norm);
        let vsz = model.config.vocab_size;
        let mut logits = vec![0.0; vsz];
        let w = &model.params[model.layout.out_proj].data;
        kernels::matvec_row(&norm, w, d, vsz, &mut logits);
        logits
    }
}

fn linear(model: &Model, x: &[f64], w: usize, b: usize, m: usize, kdim: usize, n: usize, out: &mut [f64]) {
    kernels::matmul(x, &model.params[w].data, m, kdim, n, out);
    let bias = &model.params[b].data;
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] += bias[j];
        }
    }
}

fn ln_row(model: &Model, x: &[f64], ids: &LnIds, out: &mut [f64]) {
    kernels::layer_norm_row(x, &model.params[ids.g].data, &model.params[ids.b].data, LN_EPS, out);
}

/// Multi-head attention for one query row against cached keys/values
/// ([t x d], head-sliced by column range). Accumulation order matches the
/// slice/transpose/matmul composition on the graph path.
fn mha_row(q: &[f64], kcache: &[f64], vcache: &[f64], t: usize, d: usize, heads: usize, scale: f64, out: &mut [f64]) {
    let dh = d / heads;
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..dh {
                acc += q[off + p] * kcache[j * d + off + p];
            }
            *s = acc * scale;
        }
        kernels::softmax_row(&mut scores);
        for c in 0..dh {
            let mut acc = 0.0;
            for (j, s) in scores.iter().enumerate() {
                acc += s * vcache[j * d + off + c];
            }
            out[off + c] = acc;
        }
    }
}

// ---- checkpoint io -----------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"PLCKPT01";

impl Model {
    /// Serializes config + named parameter arrays; stable across runs.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u8).to_le_bytes());
            for &s in &p.shape {
                buf.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::report::atomic_write(path, &buf).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Model, ModelError> {
        let buf = std::fs::read(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut r = Reader { buf: &buf, pos: 0 };
        let magic = r.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let mut model = Model::build(config)?;
        let n = r.u32()? as usize;
        if n != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count {n} does not match config ({})",
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Checkpoint("bad name".into()))?;
            if name != p.name {
                return Err(ModelError::Checkpoint(format!(
                    "parameter order mismatch: {name} vs {}",
                    p.name
                )));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape != p.shape {
                return Err(ModelError::Checkpoint(format!("shape mismatch for {name}")));
            }
            for v in p.data.iter_mut() {
                *v = r.f64()?;
            }
        }
        Ok(model)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
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
            seed: 7,
        }
    }

    fn frames(t: usize, d_in: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(vec![t, d_in], (0..t * d_in).map(|_| normal.sample(&mut rng)).collect())
    }

    fn bits(model: &Model) -> Vec<u64> {
        model.params.iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn overfit_model_memorizes_and_decodes_training_targets() {
        // a small dataset driven to near-zero loss is decoded back exactly
        let task = crate::task::generate(&crate::task::TaskSpec {
            seed: 5,
            n_train: 16,
            n_test: 8,
            t_min: 2,
            t_max: 3,
            vocab_size: 12,
            d_in: 4,
            frames_per_token: 2,
            sigma_clean: 0.3,
            sigma_other: 0.9,
        })
        .unwrap();
        let mut model = Model::build(ModelConfig {
            enc_layers: 3,
            dec_layers: 3,
            ..tiny_config()
        })
        .unwrap();
        let curve = model.train(&task.train.items, 2000, 0.8, 16, 42).unwrap();
        assert!(
            *curve.last().unwrap() < 0.1,
            "final mean NLL {} should be below 0.1 nats",
            curve.last().unwrap()
        );
        for (frames, target) in &task.train.items {
            assert_eq!(&model.greedy_decode(frames, 5).unwrap(), target);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(tiny_config()).unwrap();
        let b = Model::build(tiny_config()).unwrap();
        assert_eq!(bits(&a), bits(&b));
        let c = Model::build(ModelConfig { seed: 8, ..tiny_config() }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let model = Model::build(cfg.clone()).unwrap();
        let (d, f, v, k) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.conv_kernel);
        let attn = 4 * d * d + 4 * d;
        let ffn = 2 * d * f + f + d;
        let ln = 2 * d;
        let enc_layer = 2 * ln + attn + ffn;
        let dec_layer = 3 * ln + 2 * attn + ffn;
        let expected = (k * cfg.d_in * d + d)
            + (k * d * d + d)
            + cfg.enc_layers * enc_layer
            + ln
            + v * d
            + cfg.max_tgt_len * d
            + cfg.dec_layers * dec_layer
            + ln
            + d * v;
        assert_eq!(model.total_params(), expected);
    }

    #[test]
    fn registry_covers_all_kinds_and_partitions() {
        let model = Model::build(ModelConfig::default()).unwrap();
        let reg = model.registry();
        for kind in Kind::ALL {
            assert!(
                reg.entries.iter().any(|e| e.tag.kind == kind),
                "missing kind {kind}"
            );
        }
        assert_eq!(reg.total_count(), model.total_params());
        for (i, e) in reg.entries.iter().enumerate() {
            assert_eq!(e.id, i);
            assert_eq!(e.count, model.params[i].data.len());
        }
    }

    #[test]
    fn decoder_share_exceeds_encoder_share() {
        let model = Model::build(ModelConfig::default()).unwrap();
        let reg = model.registry();
        let side_count = |s: Side| -> usize {
            reg.entries.iter().filter(|e| e.tag.side == s).map(|e| e.count).sum()
        };
        assert!(side_count(Side::Decoder) > side_count(Side::Encoder));
    }

    #[test]
    fn causal_prefix_invariance() {
        let model = Model::build(tiny_config()).unwrap();
        let x = frames(6, 4, 3);
        let bos = model.config.bos_id();
        let short = model.forward(&x, &[bos, 1, 2]).unwrap();
        let long = model.forward(&x, &[bos, 1, 2, 3, 4]).unwrap();
        let v = model.config.vocab_size;
        for i in 0..3 * v {
            assert_eq!(short.data[i].to_bits(), long.data[i].to_bits(), "logit {i}");
        }
    }

    #[test]
    fn incremental_decode_matches_graph_logits_bitwise() {
        let model = Model::build(tiny_config()).unwrap();
        let x = frames(6, 4, 9);
        let bos = model.config.bos_id();
        let tokens = [bos, 3, 1, 4];
        let graph_logits = model.forward(&x, &tokens).unwrap();
        let enc = model.encode(&x).unwrap();
        let mut state = DecodeState::new(&model, &enc);
        let v = model.config.vocab_size;
        for (pos, &tok) in tokens.iter().enumerate() {
            let row = state.step(&model, tok, pos);
            for j in 0..v {
                assert_eq!(
                    row[j].to_bits(),
                    graph_logits.data[pos * v + j].to_bits(),
                    "pos {pos} logit {j}"
                );
            }
        }
    }

    #[test]
    fn zeroed_cross_attn_ignores_frames() {
        let mut model = Model::build(tiny_config()).unwrap();
        for p in model.params.iter_mut() {
            if p.name.contains("cross_attn.wo") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let bos = model.config.bos_id();
        let a = model.forward(&frames(6, 4, 1), &[bos, 2, 5]).unwrap();
        let b = model.forward(&frames(6, 4, 2), &[bos, 2, 5]).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn training_reduces_loss_and_zero_lr_is_identity() {
        let mut model = Model::build(tiny_config()).unwrap();
        let items: Vec<(Tensor, Vec<usize>)> =
            (0..6).map(|i| (frames(6, 4, 100 + i), vec![(i as usize) % 10, 1, 2])).collect();
        let before = bits(&model);
        let curve = model.train(&items, 5, 0.0, 4, 11).unwrap();
        assert_eq!(bits(&model), before, "lr=0 must not move weights");
        assert_eq!(curve.len(), 5);
        let curve = model.train(&items, 40, 0.5, 4, 11).unwrap();
        let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut model = Model::build(tiny_config()).unwrap();
        let snap = model.snapshot();
        let before = bits(&model);
        model.params[3].data.iter_mut().for_each(|v| *v += 1.0);
        assert_ne!(bits(&model), before);
        model.restore(&snap).unwrap();
        assert_eq!(bits(&model), before);
        let mut other = Model::build(ModelConfig::default()).unwrap();
        assert!(matches!(other.restore(&snap), Err(ModelError::SnapshotMismatch)));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::build(tiny_config()).unwrap();
        let items = vec![(frames(6, 4, 5), vec![1usize, 2])];
        model.train(&items, 3, 0.5, 2, 1).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(bits(&model), bits(&loaded));
        assert_eq!(model.config, loaded.config);
    }

    #[test]
    fn greedy_decode_is_bounded_and_content_only() {
        let model = Model::build(tiny_config()).unwrap();
        let out = model.greedy_decode(&frames(6, 4, 4), 5).unwrap();
        assert!(out.len() <= 5);
        for &t in &out {
            assert!(t < model.config.vocab_size);
            assert_ne!(t, model.config.eos_id());
        }
        assert!(matches!(
            model.greedy_decode(&frames(6, 4, 4), 7),
            Err(ModelError::TooLong { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_bad_dims() {
        assert!(ModelConfig { n_heads: 3, ..tiny_config() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 2, ..tiny_config() }.validate().is_err());
        assert!(ModelConfig { conv_kernel: 2, ..tiny_config() }.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn sinusoidal_table_first_position() {
        let d = 8;
        let table = sinusoidal_table(4, d);
        for i in 0..d / 2 {
            assert_eq!(table[2 * i], 0.0, "sin(0)");
            assert_eq!(table[2 * i + 1], 1.0, "cos(0)");
        }
        // every entry bounded
        assert!(table.iter().all(|v| v.abs() <= 1.0));
    }
}

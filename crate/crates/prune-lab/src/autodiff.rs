//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Graph`] is a linear tape: every op computes its value eagerly and
//! records enough to replay the chain rule in reverse insertion order.
//! Gradient accumulation order is fixed by that traversal, so repeated runs
//! on identical inputs are bit-identical.

use thiserror::Error;

use crate::kernels;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("target id {id} out of range for vocab {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid node id {0}")]
    InvalidNode(usize),
}

/// Dense row-major tensor. 1-D tensors have shape [n], matrices [rows, cols].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// (rows, cols) view: 1-D tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type NodeId = usize;

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// [m x n] plus a length-n row, broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    /// Row-wise softmax over the last axis.
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // (mean, inv_std) per row, saved from forward.
        stats: Vec<(f64, f64)>,
    },
    Gelu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. One forward/backward pass is confined to a
/// single thread; the graph owns all intermediate values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, ka) = self.nodes[a].value.dims2();
        let (kb, n) = self.nodes[b].value.dims2();
        if ka != kb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].value.shape.clone(),
                rhs: self.nodes[b].value.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a].value.data, &self.nodes[b].value.data, m, ka, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.nodes[a].value.shape != self.nodes[b].value.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].value.shape.clone(),
                rhs: self.nodes[b].value.shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data
            .iter()
            .zip(&self.nodes[b].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data), Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.nodes[a].value.dims2();
        if self.nodes[row].value.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a].value.shape.clone(),
                rhs: self.nodes[row].value.shape.clone(),
            });
        }
        let rowv = self.nodes[row].value.data.clone();
        let mut data = self.nodes[a].value.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rowv[j];
            }
        }
        let shape = self.nodes[a].value.shape.clone();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(shape, data), Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a].value.data.iter().map(|x| x * k).collect();
        let shape = self.nodes[a].value.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Scale(a, k), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.nodes[a].value.dims2();
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(a), rg)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.nodes[a].value.dims2();
        let mut data = self.nodes[a].value.data.clone();
        for i in 0..m {
            kernels::softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let shape = self.nodes[a].value.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Softmax(a), rg)
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.nodes[x].value.dims2();
        if self.nodes[gamma].value.len() != n || self.nodes[beta].value.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x].value.shape.clone(),
                rhs: self.nodes[gamma].value.shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let s = kernels::layer_norm_row(
                &self.nodes[x].value.data[i * n..(i + 1) * n],
                &self.nodes[gamma].value.data,
                &self.nodes[beta].value.data,
                eps,
                &mut data[i * n..(i + 1) * n],
            );
            stats.push(s);
        }
        let shape = self.nodes[x].value.shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, data),
            Op::LayerNorm { x, gamma, beta, stats },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].value.data.iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.nodes[a].value.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Gelu(a), rg)
    }

    /// Gather rows of `table` ([v x d]) by id; output is [ids.len() x d].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let (v, d) = self.nodes[table].value.dims2();
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::TargetOutOfRange { id, vocab: v });
            }
        }
        let mut data = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            data[t * d..(t + 1) * d]
                .copy_from_slice(&self.nodes[table].value.data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Same-padded 1-D convolution over time. w is [k x c_in x c_out]
    /// (shape stored as [k*c_in, c_out]), b is [c_out].
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (t_in, c_in) = self.nodes[x].value.dims2();
        let (kc, c_out) = self.nodes[w].value.dims2();
        if kc != kernel * c_in || self.nodes[b].value.len() != c_out {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                lhs: self.nodes[x].value.shape.clone(),
                rhs: self.nodes[w].value.shape.clone(),
            });
        }
        let t_out = kernels::conv1d_out_len(t_in, stride);
        let mut out = vec![0.0; t_out * c_out];
        kernels::conv1d(
            &self.nodes[x].value.data,
            &self.nodes[w].value.data,
            &self.nodes[b].value.data,
            t_in,
            c_in,
            c_out,
            kernel,
            stride,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![t_out, c_out], out),
            Op::Conv1d { x, w, b, stride },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.nodes[x].value.dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[x].value.data[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { x, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let m = self.nodes[parts[0]].value.dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.dims2().1).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..m {
                data[i * n + off..i * n + off + w]
                    .copy_from_slice(&self.nodes[p].value.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![m, n], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of logits.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, AutodiffError> {
        let (t, v) = self.nodes[logits].value.dims2();
        if targets.len() != t {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        for &y in targets {
            if y >= v {
                return Err(AutodiffError::TargetOutOfRange { id: y, vocab: v });
            }
        }
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &self.nodes[logits].value.data[i * v..(i + 1) * v];
            let mut max = f64::NEG_INFINITY;
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = 0.0;
            for &x in row {
                sum += (x - max).exp();
            }
            loss += max + sum.ln() - row[y];
        }
        loss /= t as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients indexed by
    /// NodeId; nodes that do not require grad (or are unreachable) have `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        if loss >= self.nodes.len() {
            return Err(AutodiffError::InvalidNode(loss));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[loss].value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn ensure<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        if grads[id].is_none() {
            grads[id] = Some(vec![0.0; self.nodes[id].value.len()]);
        }
        grads[id].as_mut()
    }

    fn accumulate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2();
                let n = self.nodes[*b].value.dims2().1;
                if self.rg(*a) {
                    // dA = dC * B^T
                    let bdat = &self.nodes[*b].value.data;
                    let da = self.ensure(grads, *a).unwrap();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bdat[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                if self.rg(*b) {
                    // dB = A^T * dC
                    let adat = &self.nodes[*a].value.data;
                    let db = self.ensure(grads, *b).unwrap();
                    for p in 0..k {
                        for i in 0..m {
                            let av = adat[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &src in &[*a, *b] {
                    if let Some(d) = self.ensure(grads, src) {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.nodes[*a].value.dims2();
                if let Some(d) = self.ensure(grads, *a) {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if let Some(d) = self.ensure(grads, *row) {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(d) = self.ensure(grads, *a) {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += k * gv;
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[*a].value.dims2();
                if let Some(d) = self.ensure(grads, *a) {
                    // output is [n x m]
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let (m, n) = self.nodes[*a].value.dims2();
                let y = &self.nodes[id].value.data;
                if let Some(d) = self.ensure(grads, *a) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..n {
                            d[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (m, n) = self.nodes[*x].value.dims2();
                let xd = &self.nodes[*x].value.data;
                let gm = &self.nodes[*gamma].value.data;
                for i in 0..m {
                    let (mean, inv_std) = stats[i];
                    let xr = &xd[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    // xhat and dxhat for this row
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    if self.rg(*beta) {
                        let d = self.ensure(grads, *beta).unwrap();
                        for j in 0..n {
                            d[j] += gr[j];
                        }
                    }
                    if self.rg(*gamma) {
                        let d = self.ensure(grads, *gamma).unwrap();
                        for j in 0..n {
                            d[j] += gr[j] * xhat[j];
                        }
                    }
                    if self.rg(*x) {
                        let dxhat: Vec<f64> = (0..n).map(|j| gr[j] * gm[j]).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let d = self.ensure(grads, *x).unwrap();
                        for j in 0..n {
                            d[i * n + j] +=
                                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xd = &self.nodes[*a].value.data;
                if let Some(d) = self.ensure(grads, *a) {
                    for j in 0..xd.len() {
                        d[j] += g[j] * kernels::gelu_grad(xd[j]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d_model = self.nodes[*table].value.dims2().1;
                if let Some(d) = self.ensure(grads, *table) {
                    for (t, &idx) in ids.iter().enumerate() {
                        for j in 0..d_model {
                            d[idx * d_model + j] += g[t * d_model + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let (t_in, c_in) = self.nodes[*x].value.dims2();
                let (kc, c_out) = self.nodes[*w].value.dims2();
                let kernel = kc / c_in;
                let t_out = kernels::conv1d_out_len(t_in, *stride);
                let pad = (kernel - 1) / 2;
                let xd = &self.nodes[*x].value.data;
                let wd = &self.nodes[*w].value.data;
                if self.rg(*b) {
                    let d = self.ensure(grads, *b).unwrap();
                    for t in 0..t_out {
                        for co in 0..c_out {
                            d[co] += g[t * c_out + co];
                        }
                    }
                }
                if self.rg(*w) {
                    let d = self.ensure(grads, *w).unwrap();
                    for t in 0..t_out {
                        for dk in 0..kernel {
                            let it = (t * stride + dk) as isize - pad as isize;
                            if it < 0 || it as usize >= t_in {
                                continue;
                            }
                            let it = it as usize;
                            for ci in 0..c_in {
                                let xv = xd[it * c_in + ci];
                                for co in 0..c_out {
                                    d[(dk * c_in + ci) * c_out + co] += xv * g[t * c_out + co];
                                }
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    let d = self.ensure(grads, *x).unwrap();
                    for t in 0..t_out {
                        for dk in 0..kernel {
                            let it = (t * stride + dk) as isize - pad as isize;
                            if it < 0 || it as usize >= t_in {
                                continue;
                            }
                            let it = it as usize;
                            for ci in 0..c_in {
                                let mut acc = 0.0;
                                for co in 0..c_out {
                                    acc += wd[(dk * c_in + ci) * c_out + co] * g[t * c_out + co];
                                }
                                d[it * c_in + ci] += acc;
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.nodes[*x].value.dims2();
                if let Some(d) = self.ensure(grads, *x) {
                    for i in 0..m {
                        for j in 0..*len {
                            d[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[parts[0]].value.dims2().0;
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.dims2().1).collect();
                let n: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(d) = self.ensure(grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += g[i * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (t, v) = self.nodes[*logits].value.dims2();
                let xd = &self.nodes[*logits].value.data;
                let gl = g[0] / t as f64;
                if let Some(d) = self.ensure(grads, *logits) {
                    for (i, &y) in targets.iter().enumerate() {
                        let row = &xd[i * v..(i + 1) * v];
                        let mut max = f64::NEG_INFINITY;
                        for &x in row {
                            if x > max {
                                max = x;
                            }
                        }
                        let mut sum = 0.0;
                        for &x in row {
                            sum += (x - max).exp();
                        }
                        for j in 0..v {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * v + j] += gl * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Result of a backward pass: per-node gradient buffers.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a node; zeros if the node was never reached.
    pub fn get(&self, id: NodeId, len: usize) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }
}

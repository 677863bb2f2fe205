//! Minimal reverse-mode differentiation engine.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`]
//! replays them in reverse, accumulating gradients for every node marked
//! `requires_grad` (and anything those nodes feed). Coverage is exactly what
//! the adapter, the classification heads, and a one-layer Transformer
//! encoder need: matmul, add, bias add, relu, sigmoid, means, concat, row
//! extraction, scaling, softmax, layer norm, fused multi-head attention, and
//! the two logit losses.
//!
//! Determinism: reductions run left-to-right single-threaded, so a fixed
//! graph and fixed inputs give bit-identical values and gradients.

pub mod adam;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use adam::{AdamConfig, AdamState};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    Concat(Vec<NodeId>),
    Row(NodeId, usize),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Box<Tensor>,
        mask: Option<Box<Tensor>>,
    },
    CrossEntropy {
        logits: NodeId,
        classes: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Cached forward intermediates needed by backward (attention softmax
    /// matrices, layer-norm row statistics, loss denominators).
    aux: Vec<f64>,
}

/// Computation graph for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Checked graph: every op verifies its output is finite.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
        }
    }

    /// Graph without finiteness checks (saturation tests, benchmarks).
    pub fn unchecked() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: false,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad, Vec::new())
            .expect("leaf values are not checked")
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone())
                .expect("grad matches value shape")
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Result<NodeId> {
        if self.checked && !matches!(op, Op::Leaf) && !value.all_finite() {
            return Err(Error::Numeric("non-finite value in forward pass".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- primitive ops ----

    /// `[r,k] x [k,c] -> [r,c]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (r, k, c) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = mm_nn(av.data(), bv.data(), r, k, c);
        let req = self.requires(&[a, b]);
        self.push(Tensor::matrix(r, c, out)?, Op::MatMul(a, b), req, Vec::new())
    }

    /// Elementwise add of identically shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = av.shape().to_vec();
        let req = self.requires(&[a, b]);
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), req, Vec::new())
    }

    /// `[r,c] + [c]`: add a bias vector to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if xv.shape().len() != 2 || bv.shape().len() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "add_bias {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xv.data()[i * c + j] + bv.data()[j]);
            }
        }
        let req = self.requires(&[x, bias]);
        self.push(Tensor::matrix(r, c, data)?, Op::AddBias(x, bias), req, Vec::new())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        // f64::max would swallow NaN; propagate it so checked mode can see it
        let data: Vec<f64> = xv
            .data()
            .iter()
            .map(|&v| if v.is_nan() { v } else { v.max(0.0) })
            .collect();
        let shape = xv.shape().to_vec();
        let req = self.requires(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Relu(x), req, Vec::new())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = xv.shape().to_vec();
        let req = self.requires(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Sigmoid(x), req, Vec::new())
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let req = self.requires(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), req, Vec::new())
    }

    /// Column means: `[r,c] -> [1,c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 || xv.shape()[0] == 0 {
            return Err(Error::Shape(format!("mean_rows on {:?}", xv.shape())));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xv.data()[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let req = self.requires(&[x]);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(x), req, Vec::new())
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let c = self.nodes[parts[0].0].value.shape().get(1).copied();
        let mut rows = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 2 || s.get(1).copied() != c {
                return Err(Error::Shape(format!("concat with incompatible shape {s:?}")));
            }
            rows += s[0];
        }
        let c = c.unwrap();
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let req = self.requires(parts);
        self.push(
            Tensor::matrix(rows, c, data)?,
            Op::Concat(parts.to_vec()),
            req,
            Vec::new(),
        )
    }

    /// Extract row `r` of a matrix as `[1,c]`.
    pub fn row(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 || r >= xv.shape()[0] {
            return Err(Error::Shape(format!("row {r} of {:?}", xv.shape())));
        }
        let c = xv.shape()[1];
        let data = xv.data()[r * c..(r + 1) * c].to_vec();
        let req = self.requires(&[x]);
        self.push(Tensor::matrix(1, c, data)?, Op::Row(x, r), req, Vec::new())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        let req = self.requires(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Scale(x, factor), req, Vec::new())
    }

    /// Row-wise softmax on a matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 {
            return Err(Error::Shape(format!("softmax on {:?}", xv.shape())));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![0.0; r * c];
        softmax_rows(xv.data(), &mut data, r, c);
        let req = self.requires(&[x]);
        self.push(Tensor::matrix(r, c, data)?, Op::Softmax(x), req, Vec::new())
    }

    /// Per-row layer normalization with learned gain/bias over the columns.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        if xv.shape().len() != 2
            || gv.shape() != [xv.shape()[1]]
            || bv.shape() != [xv.shape()[1]]
        {
            return Err(Error::Shape(format!(
                "layer_norm x={:?} gamma={:?} beta={:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![0.0; r * c];
        let mut aux = Vec::with_capacity(2 * r); // per row: mean, 1/sqrt(var+eps)
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mu) * inv * gv.data()[j] + bv.data()[j];
            }
            aux.push(mu);
            aux.push(inv);
        }
        let req = self.requires(&[x, gamma, beta]);
        self.push(
            Tensor::matrix(r, c, data)?,
            Op::LayerNorm { x, gamma, beta },
            req,
            aux,
        )
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[T,d]` with `d % heads == 0`; each head attends over
    /// its own `d/heads` slice and the head outputs are re-concatenated.
    pub fn scaled_dot_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let shape = qv.shape().to_vec();
        if shape.len() != 2 || kv.shape() != shape.as_slice() || vv.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "attention q={:?} k={:?} v={:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || shape[1] % heads != 0 {
            return Err(Error::Shape(format!(
                "attention dim {} not divisible by {heads} heads",
                shape[1]
            )));
        }
        let (t, d) = (shape[0], shape[1]);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; t * d];
        let mut aux = vec![0.0; heads * t * t]; // softmax matrices, one per head
        let mut scores = vec![0.0; t * t];
        for h in 0..heads {
            let off = h * dk;
            for i in 0..t {
                for j in 0..t {
                    let mut dot = 0.0;
                    for x in 0..dk {
                        dot += qv.data()[i * d + off + x] * kv.data()[j * d + off + x];
                    }
                    scores[i * t + j] = dot * scale;
                }
            }
            let attn = &mut aux[h * t * t..(h + 1) * t * t];
            softmax_rows(&scores, attn, t, t);
            for i in 0..t {
                for j in 0..t {
                    let a = attn[i * t + j];
                    for x in 0..dk {
                        out[i * d + off + x] += a * vv.data()[j * d + off + x];
                    }
                }
            }
        }
        let req = self.requires(&[q, k, v]);
        self.push(
            Tensor::matrix(t, d, out)?,
            Op::Attention { q, k, v, heads },
            req,
            aux,
        )
    }

    /// Mean binary cross-entropy over logits with multi-hot targets,
    /// in the overflow-free log-sum form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        self.bce_impl(logits, targets, None)
    }

    /// Masked BCE: mean over elements where `mask` is 1. Targets and mask
    /// must match the logits shape; the mask must select at least one element.
    pub fn bce_with_logits_masked(
        &mut self,
        logits: NodeId,
        targets: &Tensor,
        mask: &Tensor,
    ) -> Result<NodeId> {
        self.bce_impl(logits, targets, Some(mask))
    }

    fn bce_impl(&mut self, logits: NodeId, targets: &Tensor, mask: Option<&Tensor>) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        if targets.shape() != lv.shape() {
            return Err(Error::Shape(format!(
                "bce logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        if let Some(m) = mask {
            if m.shape() != lv.shape() {
                return Err(Error::Shape(format!(
                    "bce logits {:?} vs mask {:?}",
                    lv.shape(),
                    m.shape()
                )));
            }
        }
        let denom = match mask {
            None => lv.len() as f64,
            Some(m) => m.data().iter().sum::<f64>(),
        };
        if denom <= 0.0 {
            return Err(Error::Shape("bce mask selects no elements".into()));
        }
        let mut total = 0.0;
        for (i, (&x, &t)) in lv.data().iter().zip(targets.data()).enumerate() {
            let w = mask.map_or(1.0, |m| m.data()[i]);
            if w == 0.0 {
                continue;
            }
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            let l = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            total += w * l;
        }
        let req = self.requires(&[logits]);
        self.push(
            Tensor::scalar(total / denom),
            Op::BceWithLogits {
                logits,
                targets: Box::new(targets.clone()),
                mask: mask.map(|m| Box::new(m.clone())),
            },
            req,
            vec![denom],
        )
    }

    /// Mean cross-entropy of row-wise softmax against integer class targets.
    pub fn cross_entropy(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        if lv.shape().len() != 2 || classes.len() != lv.shape()[0] {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} vs {} classes",
                lv.shape(),
                classes.len()
            )));
        }
        let (r, c) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = classes.iter().find(|&&cl| cl >= c) {
            return Err(Error::Shape(format!("class {bad} out of range for {c} logits")));
        }
        let mut total = 0.0;
        for i in 0..r {
            let row = &lv.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[classes[i]];
        }
        let req = self.requires(&[logits]);
        self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropy {
                logits,
                classes: classes.to_vec(),
            },
            req,
            Vec::new(),
        )
    }

    // ---- backward ----

    /// Accumulate gradients of a scalar `loss` into every contributing node
    /// with `requires_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.shape() != [1] {
            return Err(Error::Shape("backward target must be scalar".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let upstream = self.grads[idx].take().unwrap();
            self.propagate(idx, &upstream)?;
            self.grads[idx] = Some(upstream);
        }
        if self.checked {
            for (i, g) in self.grads.iter().enumerate() {
                if let Some(g) = g {
                    if g.iter().any(|v| !v.is_finite()) {
                        let _ = i;
                        return Err(Error::Numeric("non-finite gradient in backward pass".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (r, k, c) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let da = mm_nt(dy, bv.data(), r, c, k);
                let db = mm_tn(av.data(), dy, r, k, c);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, dy);
                self.accumulate(b, dy);
            }
            &Op::AddBias(x, bias) => {
                let c = self.nodes[bias.0].value.len();
                let r = dy.len() / c;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += dy[i * c + j];
                    }
                }
                self.accumulate(x, dy);
                self.accumulate(bias, &db);
            }
            &Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::Sigmoid(x) => {
                let yv = self.nodes[idx].value.data();
                let dx: Vec<f64> = yv.iter().zip(dy).map(|(&y, &d)| d * y * (1.0 - y)).collect();
                self.accumulate(x, &dx);
            }
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let dx = vec![dy[0] / n as f64; n];
                self.accumulate(x, &dx);
            }
            &Op::MeanRows(x) => {
                let xv = &self.nodes[x.0].value;
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j] / r as f64;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    let slice = dy[offset..offset + n].to_vec();
                    self.accumulate(p, &slice);
                    offset += n;
                }
            }
            &Op::Row(x, r) => {
                let xv = &self.nodes[x.0].value;
                let c = xv.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                dx[r * c..(r + 1) * c].copy_from_slice(dy);
                self.accumulate(x, &dx);
            }
            &Op::Scale(x, factor) => {
                let dx: Vec<f64> = dy.iter().map(|&d| d * factor).collect();
                self.accumulate(x, &dx);
            }
            &Op::Softmax(x) => {
                let yv = self.nodes[idx].value.data();
                let (r, c) = (
                    self.nodes[idx].value.shape()[0],
                    self.nodes[idx].value.shape()[1],
                );
                let mut dx = vec![0.0; r * c];
                softmax_backward(yv, dy, &mut dx, r, c);
                self.accumulate(x, &dx);
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gamma.0].value.data().to_vec();
                let (r, c) = (
                    self.nodes[x.0].value.shape()[0],
                    self.nodes[x.0].value.shape()[1],
                );
                let aux = self.nodes[idx].aux.clone();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let mu = aux[2 * i];
                    let inv = aux[2 * i + 1];
                    let row = &xv[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    // xhat, then the two row means the gradient needs
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = dyr[j] * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += dyr[j] * xhat[j];
                        dbeta[j] += dyr[j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            &Op::Attention { q, k, v, heads } => {
                let qv = self.nodes[q.0].value.data().to_vec();
                let kv = self.nodes[k.0].value.data().to_vec();
                let vv = self.nodes[v.0].value.data().to_vec();
                let (t, d) = (
                    self.nodes[q.0].value.shape()[0],
                    self.nodes[q.0].value.shape()[1],
                );
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let aux = self.nodes[idx].aux.clone();
                let mut dq = vec![0.0; t * d];
                let mut dkm = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                for h in 0..heads {
                    let off = h * dk;
                    let attn = &aux[h * t * t..(h + 1) * t * t];
                    // dA = dOh Vh^T ; dVh = A^T dOh
                    let mut dattn = vec![0.0; t * t];
                    for i in 0..t {
                        for j in 0..t {
                            let mut dot = 0.0;
                            for x in 0..dk {
                                dot += dy[i * d + off + x] * vv[j * d + off + x];
                            }
                            dattn[i * t + j] = dot;
                        }
                    }
                    for j in 0..t {
                        for i in 0..t {
                            let a = attn[i * t + j];
                            for x in 0..dk {
                                dv[j * d + off + x] += a * dy[i * d + off + x];
                            }
                        }
                    }
                    // through the row softmax, then into Q and K
                    let mut dscores = vec![0.0; t * t];
                    softmax_backward(attn, &dattn, &mut dscores, t, t);
                    for i in 0..t {
                        for j in 0..t {
                            let ds = dscores[i * t + j] * scale;
                            for x in 0..dk {
                                dq[i * d + off + x] += ds * kv[j * d + off + x];
                                dkm[j * d + off + x] += ds * qv[i * d + off + x];
                            }
                        }
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dkm);
                self.accumulate(v, &dv);
            }
            Op::BceWithLogits { logits, targets, mask } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let denom = self.nodes[idx].aux[0];
                let lv = self.nodes[logits.0].value.data();
                let mut dx = vec![0.0; lv.len()];
                for (i, (&x, &t)) in lv.iter().zip(targets.data()).enumerate() {
                    let w = mask.as_ref().map_or(1.0, |m| m.data()[i]);
                    if w == 0.0 {
                        continue;
                    }
                    dx[i] = dy[0] * w * (stable_sigmoid(x) - t) / denom;
                }
                self.accumulate(logits, &dx);
            }
            Op::CrossEntropy { logits, classes } => {
                let logits = *logits;
                let classes = classes.clone();
                let lv = self.nodes[logits.0].value.data().to_vec();
                let (r, c) = (
                    self.nodes[logits.0].value.shape()[0],
                    self.nodes[logits.0].value.shape()[1],
                );
                let mut dx = vec![0.0; r * c];
                softmax_rows(&lv, &mut dx, r, c);
                for i in 0..r {
                    dx[i * c + classes[i]] -= 1.0;
                }
                for v in &mut dx {
                    *v *= dy[0] / r as f64;
                }
                self.accumulate(logits, &dx);
            }
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[r,k] @ b[k,c]`.
fn mm_nn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * c..(kk + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a[r,c] @ b[k,c]^T -> [r,k]` (dot products of rows).
fn mm_nt(a: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let arow = &a[i * c..(i + 1) * c];
        for j in 0..k {
            let brow = &b[j * c..(j + 1) * c];
            let mut dot = 0.0;
            for x in 0..c {
                dot += arow[x] * brow[x];
            }
            out[i * k + j] = dot;
        }
    }
    out
}

/// `a[r,k]^T @ b[r,c] -> [k,c]`.
fn mm_tn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * c..(kk + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], out: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
}

/// Given softmax output `y` and upstream `dy`, write `dx = y * (dy - sum(dy*y))` per row.
fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        let yr = &y[i * c..(i + 1) * c];
        let dyr = &dy[i * c..(i + 1) * c];
        let mut s = 0.0;
        for j in 0..c {
            s += dyr[j] * yr[j];
        }
        for j in 0..c {
            dx[i * c + j] = yr[j] * (dyr[j] - s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_forward_small() {
        let mut g = Graph::new();
        let a = g.leaf(t(2, 2, vec![1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(t(2, 2, vec![5.0, 6.0, 7.0, 8.0]), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(t(2, 3, vec![0.0; 6]), false);
        let b = g.leaf(t(2, 3, vec![0.0; 6]), false);
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_backward_dead_region() {
        let mut g = Graph::new();
        let x = g.leaf(t(1, 2, vec![-1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        let loss = g.mean(y).unwrap();
        g.backward(loss).unwrap();
        let dx = g.grad(x).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::StreamRng::new(3);
        let data: Vec<f64> = (0..5 * 7).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
        let mut g = Graph::new();
        let x = g.leaf(t(5, 7, data), false);
        let y = g.softmax(x).unwrap();
        for i in 0..5 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-7, "row {i} sums to {s}");
        }
    }

    #[test]
    fn bce_logit_zero_target_one_is_ln2() {
        let mut g = Graph::new();
        let x = g.leaf(t(1, 1, vec![0.0]), false);
        let targets = t(1, 1, vec![1.0]);
        let loss = g.bce_with_logits(x, &targets).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_logit_is_finite() {
        let mut g = Graph::new();
        let x = g.leaf(t(1, 2, vec![100.0, -100.0]), false);
        let targets = t(1, 2, vec![1.0, 0.0]);
        let loss = g.bce_with_logits(x, &targets).unwrap();
        let l = g.value(loss).item();
        assert!(l.is_finite());
        assert!(l < 1e-10, "saturated loss should vanish, got {l}");
    }

    #[test]
    fn bce_matches_naive_clamped_form() {
        let mut rng = crate::rng::StreamRng::new(17);
        let logits: Vec<f64> = (0..32).map(|_| rng.uniform_in(-6.0, 6.0)).collect();
        let targets: Vec<f64> = (0..32).map(|_| (rng.next_u64() % 2) as f64).collect();
        let mut g = Graph::new();
        let x = g.leaf(t(4, 8, logits.clone()), false);
        let tt = t(4, 8, targets.clone());
        let loss = g.bce_with_logits(x, &tt).unwrap();
        // naive -[t log s + (1-t) log(1-s)] with clamping
        let mut naive = 0.0;
        for (&x, &t) in logits.iter().zip(&targets) {
            let s = stable_sigmoid(x).clamp(1e-12, 1.0 - 1e-12);
            naive += -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
        }
        naive /= 32.0;
        assert!((g.value(loss).item() - naive).abs() < 1e-9);
    }

    #[test]
    fn bce_mask_restricts_mean() {
        let mut g = Graph::new();
        let x = g.leaf(t(1, 4, vec![0.0, 50.0, 0.0, -50.0]), true);
        let targets = t(1, 4, vec![1.0, 0.0, 1.0, 1.0]);
        let mask = t(1, 4, vec![1.0, 0.0, 1.0, 0.0]);
        let loss = g.bce_with_logits_masked(x, &targets, &mask).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        g.backward(loss).unwrap();
        let dx = g.grad(x).unwrap();
        assert_eq!(dx.data()[1], 0.0);
        assert_eq!(dx.data()[3], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(t(2, 4, vec![0.0; 8]), false);
        let loss = g.cross_entropy(x, &[1, 3]).unwrap();
        assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_and_row_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(t(1, 3, vec![1.0, 2.0, 3.0]), false);
        let b = g.leaf(t(2, 3, vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0]), false);
        let cat = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), &[3, 3]);
        let r = g.row(cat, 1).unwrap();
        assert_eq!(g.value(r).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn checked_graph_rejects_nan() {
        let mut g = Graph::new();
        let x = g.leaf(t(1, 1, vec![f64::NAN]), false);
        // the leaf itself is not checked, but the first op on it is
        assert!(matches!(g.relu(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn attention_identity_value_rows_mix() {
        // two equal key/query rows: attention weights are uniform, so each
        // output row is the mean of the value rows
        let mut g = Graph::new();
        let q = g.leaf(t(2, 2, vec![0.0; 4]), false);
        let k = g.leaf(t(2, 2, vec![0.0; 4]), false);
        let v = g.leaf(t(2, 2, vec![2.0, 4.0, 6.0, 8.0]), false);
        let out = g.scaled_dot_attention(q, k, v, 1).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, 6.0, 4.0, 6.0]);
    }
}

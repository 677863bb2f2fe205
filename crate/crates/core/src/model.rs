//! Trainable architecture: the bottleneck adapter, pre-training task heads,
//! and the two downstream evaluation heads.
//!
//! Parameters live in a [`ParamSet`] under dotted names; forward passes bind
//! them as graph leaves so the same builders serve training (with gradients)
//! and frozen evaluation. Linear layers compute `y = x W + b` with
//! `W: [d_in, d_out]`.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::ParamSet;
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::Result;

pub const ADAPTER_IN: usize = 512;
pub const ADAPTER_HIDDEN: usize = 128;
pub const TRANSFORMER_HEADS: usize = 8;
pub const TRANSFORMER_FFN: usize = 1024;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform fan-in initialization: W, b ~ U(−1/√d_in, 1/√d_in).
pub fn init_linear(params: &mut ParamSet, rng: &mut StreamRng, prefix: &str, d_in: usize, d_out: usize) {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w: Vec<f64> = (0..d_in * d_out)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    let b: Vec<f64> = (0..d_out).map(|_| rng.uniform_in(-bound, bound)).collect();
    params.insert(&format!("{prefix}.w"), Tensor::matrix(d_in, d_out, w).unwrap());
    params.insert(&format!("{prefix}.b"), Tensor::vector(b));
}

/// 512 → 128 → 512 bottleneck with ReLU between.
pub fn init_adapter(params: &mut ParamSet, rng: &mut StreamRng, prefix: &str, d_in: usize, d_hidden: usize) {
    init_linear(params, rng, &format!("{prefix}.down"), d_in, d_hidden);
    init_linear(params, rng, &format!("{prefix}.up"), d_hidden, d_in);
}

///// Hidden widths of a task head: d_h1 = ⌊d_out/4⌋, d_h2 = ⌊d_out/2⌋,
/// both clamped to at least 1 so tiny test spaces stay well-formed.
pub fn head_dims(d_out: usize) -> (usize, usize) {
    ((d_out / 4).max(1), (d_out / 2).max(1))
}

/// Three-layer pre-training head d_in → d_h1 → d_h2 → d_out.
pub fn init_head(params: &mut ParamSet, rng: &mut StreamRng, prefix: &str, d_in: usize, d_out: usize) {
    let (h1, h2) = head_dims(d_out);
    init_linear(params, rng, &format!("{prefix}.l1"), d_in, h1);
    init_linear(params, rng, &format!("{prefix}.l2"), h1, h2);
    init_linear(params, rng, &format!("{prefix}.l3"), h2, d_out);
}

/// Two-layer downstream classifier d_in → d_hidden → n_classes.
pub fn init_downstream_mlp(params: &mut ParamSet, rng: &mut StreamRng, prefix: &str, d_in: usize, d_hidden: usize, n_classes: usize) {
    init_linear(params, rng, &format!("{prefix}.l1"), d_in, d_hidden);
    init_linear(params, rng, &format!("{prefix}.l2"), d_hidden, n_classes);
}

/// One post-norm Transformer encoder layer plus CLS token and classifier.
pub fn init_transformer(params: &mut ParamSet, rng: &mut StreamRng, prefix: &str, d: usize, d_hidden: usize, n_classes: usize) {
    init_linear(params, rng, &format!("{prefix}.q"), d, d);
    init_linear(params, rng, &format!("{prefix}.k"), d, d);
    init_linear(params, rng, &format!("{prefix}.v"), d, d);
    init_linear(params, rng, &format!("{prefix}.o"), d, d);
    init_linear(params, rng, &format!("{prefix}.ffn1"), d, TRANSFORMER_FFN);
    init_linear(params, rng, &format!("{prefix}.ffn2"), TRANSFORMER_FFN, d);
    params.insert(&format!("{prefix}.ln1.g"), Tensor::vector(vec![1.0; d]));
    params.insert(&format!("{prefix}.ln1.b"), Tensor::vector(vec![0.0; d]));
    params.insert(&format!("{prefix}.ln2.g"), Tensor::vector(vec![1.0; d]));
    params.insert(&format!("{prefix}.ln2.b"), Tensor::vector(vec![0.0; d]));
    let cls: Vec<f64> = (0..d)
        .map(|_| rng.uniform_in(-1.0 / (d as f64).sqrt(), 1.0 / (d as f64).sqrt()))
        .collect();
    params.insert(&format!("{prefix}.cls"), Tensor::matrix(1, d, cls).unwrap());
    init_downstream_mlp(params, rng, &format!("{prefix}.clf"), d, d_hidden, n_classes);
}

/// Leaf node ids for bound parameters.
pub struct Binding {
    pub ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }
}

/// Insert every parameter as a gradient-tracked leaf.
pub fn bind(g: &mut Graph, params: &ParamSet) -> Binding {
    let mut ids = BTreeMap::new();
    for (name, tensor) in params.iter() {
        ids.insert(name.clone(), g.leaf(tensor.clone(), true));
    }
    Binding { ids }
}

/// Collect gradients for every bound parameter. Missing gradients (params
/// not reached by the loss) are skipped.
pub fn grads_of(g: &Graph, binding: &Binding) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, id) in &binding.ids {
        if let Some(grad) = g.grad(*id) {
            out.insert(name.clone(), grad);
        }
    }
    out
}

pub fn linear(g: &mut Graph, b: &Binding, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, b.id(&format!("{prefix}.w")))?;
    g.add_bias(h, b.id(&format!("{prefix}.b")))
}

/// up(relu(down(x))); input and output are `[B, 512]`.
pub fn adapter_forward(g: &mut Graph, b: &Binding, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, b, &format!("{prefix}.down"), x)?;
    let h = g.relu(h)?;
    linear(g, b, &format!("{prefix}.up"), h)
}

/// Three linear layers with ReLU between; returns raw logits.
pub fn head_forward(g: &mut Graph, b: &Binding, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, b, &format!("{prefix}.l1"), x)?;
    let h = g.relu(h)?;
    let h = linear(g, b, &format!("{prefix}.l2"), h)?;
    let h = g.relu(h)?;
    linear(g, b, &format!("{prefix}.l3"), h)
}

/// Fixed sinusoidal absolute positional encoding, `[len, d]`.
pub fn sinusoidal_posenc(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f64; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).unwrap()
}

/// Layer order of the downstream MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MlpOrder {
    /// Positional encoding → ReLU → pool → linear → linear.
    #[default]
    Literal,
    /// Positional encoding → pool → linear → ReLU → linear.
    Standard,
}

/// Downstream MLP over a `[T, d]` sequence: positional encoding, then the
/// configured layer order; sequences mean-pool over time before the first
/// linear layer. Returns `[1, n_classes]` logits.
pub fn mlp_forward(g: &mut Graph, b: &Binding, prefix: &str, seq: NodeId, order: MlpOrder) -> Result<NodeId> {
    let (t, d) = {
        let s = g.value(seq).shape();
        (s[0], s[1])
    };
    let pe = g.constant(sinusoidal_posenc(t, d));
    let x = g.add(seq, pe)?;
    match order {
        MlpOrder::Literal => {
            let x = g.relu(x)?;
            let x = g.mean_rows(x)?;
            let x = linear(g, b, &format!("{prefix}.l1"), x)?;
            linear(g, b, &format!("{prefix}.l2"), x)
        }
        MlpOrder::Standard => {
            let x = g.mean_rows(x)?;
            let x = linear(g, b, &format!("{prefix}.l1"), x)?;
            let x = g.relu(x)?;
            linear(g, b, &format!("{prefix}.l2"), x)
        }
    }
}

/// One-layer post-norm Transformer encoder over a `[T, d]` sequence.
/// Positional encoding is added first, the learnable CLS row is prepended,
/// and the classifier MLP reads the CLS output (no second positional
/// encoding on that single row). Returns `[1, n_classes]` logits.
pub fn transformer_forward(g: &mut Graph, b: &Binding, prefix: &str, seq: NodeId) -> Result<NodeId> {
    let (t, d) = {
        let s = g.value(seq).shape();
        (s[0], s[1])
    };
    let pe = g.constant(sinusoidal_posenc(t, d));
    let x = g.add(seq, pe)?;
    let x = g.concat(&[b.id(&format!("{prefix}.cls")), x])?;
    let q = linear(g, b, &format!("{prefix}.q"), x)?;
    let k = linear(g, b, &format!("{prefix}.k"), x)?;
    let v = linear(g, b, &format!("{prefix}.v"), x)?;
    let attn = g.scaled_dot_attention(q, k, v, TRANSFORMER_HEADS)?;
    let attn = linear(g, b, &format!("{prefix}.o"), attn)?;
    let x = g.add(x, attn)?;
    let x = g.layer_norm(
        x,
        b.id(&format!("{prefix}.ln1.g")),
        b.id(&format!("{prefix}.ln1.b")),
        LAYER_NORM_EPS,
    )?;
    let h = linear(g, b, &format!("{prefix}.ffn1"), x)?;
    let h = g.relu(h)?;
    let h = linear(g, b, &format!("{prefix}.ffn2"), h)?;
    let x = g.add(x, h)?;
    let x = g.layer_norm(
        x,
        b.id(&format!("{prefix}.ln2.g")),
        b.id(&format!("{prefix}.ln2.b")),
        LAYER_NORM_EPS,
    )?;
    let cls = g.row(x, 0)?;
    let h = g.relu(cls)?;
    let h = linear(g, b, &format!("{prefix}.clf.l1"), h)?;
    linear(g, b, &format!("{prefix}.clf.l2"), h)
}

/// Multi-hot target row: ones at `ids`, zeros elsewhere.
pub fn multi_hot(ids: &[usize], d: usize) -> Tensor {
    let mut data = vec![0.0f64; d];
    for &i in ids {
        data[i] = 1.0;
    }
    Tensor::matrix(1, d, data).unwrap()
}

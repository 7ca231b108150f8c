//! Layers built from graph operations.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Fully connected layer `y = x · W + b`, `W` shaped `[fan_in, fan_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, seed: u64) -> Result<Self> {
        let weight = store.add_glorot(&format!("{name}.weight"), fan_in, fan_out, seed)?;
        let bias = if bias {
            Some(store.add_zeros(&format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Stack of linear layers with ReLU (and dropout) between them; the last
/// layer is left linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    /// `dims` lists every width from input to output, so `dims.len() - 1`
    /// layers are created, named `{name}.fc{i}`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], dropout: f64, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(TensorError::Invalid(format!("mlp `{name}` needs at least two widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], true, seed))
            .collect::<Result<_>>()?;
        Ok(Self { layers, dropout })
    }

    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| Linear::param_count(w[0], w[1], true)).sum()
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = g.dropout(g.relu(h), self.dropout)?;
            }
        }
        Ok(h)
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √D) V`.
///
/// `q` is `[n_q, D]`, `k` and `v` are `[n_k, D]`. `mask` marks valid keys,
/// either one flag per key or one per (query, key) pair. A query with no
/// valid key receives a zero row.
pub fn attention<'g>(g: &'g Graph, q: Var<'g>, k: Var<'g>, v: Var<'g>, mask: Option<&[bool]>) -> Result<Var<'g>> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(TensorError::Shape(format!("attention q {qs:?} k {ks:?}")));
    }
    let dim = qs[1];
    if dim == 0 {
        return Err(TensorError::Invalid("attention with D = 0".into()));
    }
    g.count_scores(qs[0] * ks[0]);
    let scores = g.scale(g.matmul_t(q, k)?, 1.0 / (dim as f64).sqrt());
    let alpha = g.softmax(scores, mask)?;
    g.matmul(alpha, v)
}

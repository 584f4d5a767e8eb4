//! Shared/specific split of the three unimodal representations.
//!
//! `S = (h_t + h_v + h_a) / 3` and `i_m = h_m - S`. The split has no
//! weights; the only trainable pieces here are the compaction layers that
//! shrink `i_m` and `h_m` before fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    pub shared: Var,
    /// `i_t, i_v, i_a`
    pub specific: [Var; 3],
}

/// Works on single vectors or on `[B×N]` batches; all three inputs must
/// have the same shape.
pub fn self_decouple(g: &mut Graph, h: [Var; 3]) -> Result<Decomposition> {
    let shape = g.shape(h[0]).to_vec();
    for &other in &h[1..] {
        if g.shape(other) != shape.as_slice() {
            return Err(Error::shape("self_decouple", &shape, g.shape(other)));
        }
    }
    // Computed as h_t + ((h_v - h_t) + (h_a - h_t)) / 3, so that identical
    // inputs give residuals that are exactly zero.
    let dv = g.sub(h[1], h[0])?;
    let da = g.sub(h[2], h[0])?;
    let spread = g.add(dv, da)?;
    let offset = g.scale(spread, 1.0 / 3.0)?;
    let shared = g.add(h[0], offset)?;
    let specific = [
        g.sub(h[0], shared)?,
        g.sub(h[1], shared)?,
        g.sub(h[2], shared)?,
    ];
    Ok(Decomposition { shared, specific })
}

/// Fully connected layer with tanh, used to compact `i_m` and `h_m`.
#[derive(Clone, Debug)]
pub struct Compactor {
    w: ParamId,
    b: ParamId,
    input_dim: usize,
    output_dim: usize,
}

impl Compactor {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_uniform(format!("{name}.w"), output_dim, input_dim, rng),
            b: store.add_zeros(format!("{name}.b"), &[output_dim]),
            input_dim,
            output_dim,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_scalars(&self) -> usize {
        self.output_dim * (self.input_dim + 1)
    }

    pub fn apply(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let width = g.shape(x).last().copied().unwrap_or(0);
        if width != self.input_dim {
            return Err(Error::shape("compact", &[self.input_dim], g.shape(x)));
        }
        let y = g.linear(x, p.var(self.w), Some(p.var(self.b)))?;
        g.tanh(y)
    }
}

/// Mean over samples of `|u·v|`.
pub fn dependency_metric<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (u, v) in pairs {
        if u.len() != v.len() {
            return Err(Error::shape("dependency_metric", &[u.len()], &[v.len()]));
        }
        total += u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument {
            op: "dependency_metric",
            msg: "empty dataset".into(),
        });
    }
    Ok(total / n as f64)
}

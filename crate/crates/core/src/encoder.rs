//! Per-modality utterance encoders: two stacked bidirectional GRU layers and
//! a fully connected projection to the shared representation width.
//!
//! Samples are processed as a batch of rows. Sequences shorter than the
//! batch maximum are zero-padded; a per-row mask freezes the hidden state
//! on padded steps, so the forward scan ends on step `len - 1` and the
//! backward scan begins there. Held rows are copied, not recomputed, which
//! makes the output bit-identical for any amount of padding.

use rand::Rng;

use crate::data::{Modality, Sequence};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Weights of one GRU cell. Input matrices are `[H×D_in]`, recurrent
/// matrices `[H×H]`, biases `[H]`.
#[derive(Clone, Debug)]
pub struct GruCellParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCellParams {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut w = |gate: &str| store.add_uniform(format!("{prefix}.w_{gate}"), hidden, input_dim, rng);
        let (w_z, w_r, w_n) = (w("z"), w("r"), w("n"));
        let mut u = |gate: &str| store.add_uniform(format!("{prefix}.u_{gate}"), hidden, hidden, rng);
        let (u_z, u_r, u_n) = (u("z"), u("r"), u("n"));
        let mut b = |gate: &str| store.add_zeros(format!("{prefix}.b_{gate}"), &[hidden]);
        let (b_z, b_r, b_n) = (b("z"), b("r"), b("n"));
        Self {
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z,
            b_r,
            b_n,
            input_dim,
            hidden,
        }
    }

    pub fn num_scalars(&self) -> usize {
        3 * self.hidden * (self.input_dim + self.hidden + 1)
    }
}

/// One GRU update on a batch of rows (or a single vector):
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
pub fn gru_step(g: &mut Graph, p: &Bindings, cell: &GruCellParams, x: Var, h: Var) -> Result<Var> {
    let xz = g.linear(x, p.var(cell.w_z), Some(p.var(cell.b_z)))?;
    let hz = g.linear(h, p.var(cell.u_z), None)?;
    let pre_z = g.add(xz, hz)?;
    let z = g.sigmoid(pre_z)?;

    let xr = g.linear(x, p.var(cell.w_r), Some(p.var(cell.b_r)))?;
    let hr = g.linear(h, p.var(cell.u_r), None)?;
    let pre_r = g.add(xr, hr)?;
    let r = g.sigmoid(pre_r)?;

    let xn = g.linear(x, p.var(cell.w_n), Some(p.var(cell.b_n)))?;
    let rh = g.mul(r, h)?;
    let hn = g.linear(rh, p.var(cell.u_n), None)?;
    let pre_n = g.add(xn, hn)?;
    let n = g.tanh(pre_n)?;

    let keep = g.one_minus(z)?;
    let fresh = g.mul(keep, n)?;
    let carried = g.mul(z, h)?;
    g.add(fresh, carried)
}

#[derive(Clone, Debug)]
struct BiGru {
    fwd: GruCellParams,
    bwd: GruCellParams,
}

struct LayerOutput {
    /// `[B×2H]` per step: forward state then backward state.
    steps: Vec<Var>,
    last_fwd: Var,
    last_bwd: Var,
}

impl BiGru {
    fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fwd: GruCellParams::new(store, &format!("{prefix}.fwd"), input_dim, hidden, rng),
            bwd: GruCellParams::new(store, &format!("{prefix}.bwd"), input_dim, hidden, rng),
        }
    }

    fn run(&self, g: &mut Graph, p: &Bindings, inputs: &[Var], lens: &[usize]) -> Result<LayerOutput> {
        let (fwd, last_fwd) = scan(g, p, &self.fwd, inputs, lens, false)?;
        let (bwd, last_bwd) = scan(g, p, &self.bwd, inputs, lens, true)?;
        let steps = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| g.concat(&[f, b], 1))
            .collect::<Result<_>>()?;
        Ok(LayerOutput {
            steps,
            last_fwd,
            last_bwd,
        })
    }
}

/// Masked unidirectional scan. Returns the state after every step and the
/// final state.
fn scan(
    g: &mut Graph,
    p: &Bindings,
    cell: &GruCellParams,
    inputs: &[Var],
    lens: &[usize],
    reverse: bool,
) -> Result<(Vec<Var>, Var)> {
    let rows = lens.len();
    let mut h = g.input(Tensor::zeros(&[rows, cell.hidden]));
    let mut states = vec![h; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        let mask: Vec<bool> = lens.iter().map(|&l| t < l).collect();
        if mask.iter().any(|&m| m) {
            let next = gru_step(g, p, cell, inputs[t], h)?;
            h = if mask.iter().all(|&m| m) {
                next
            } else {
                g.select_rows(&mask, next, h)?
            };
        }
        states[t] = h;
    }
    Ok((states, h))
}

/// Encoder `E_m` for one modality.
#[derive(Clone, Debug)]
pub struct UnimodalEncoder {
    modality: Modality,
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    layer1: BiGru,
    layer2: BiGru,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl UnimodalEncoder {
    pub fn new(
        store: &mut ParamStore,
        modality: Modality,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let prefix = format!("enc.{}", modality.tag());
        let layer1 = BiGru::new(store, &format!("{prefix}.l1"), input_dim, hidden, rng);
        let layer2 = BiGru::new(store, &format!("{prefix}.l2"), 2 * hidden, hidden, rng);
        let proj_w = store.add_uniform(format!("{prefix}.proj.w"), output_dim, 2 * hidden, rng);
        let proj_b = store.add_zeros(format!("{prefix}.proj.b"), &[output_dim]);
        Self {
            modality,
            input_dim,
            hidden,
            output_dim,
            layer1,
            layer2,
            proj_w,
            proj_b,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_scalars(&self) -> usize {
        let cells = [&self.layer1, &self.layer2]
            .iter()
            .map(|l| l.fwd.num_scalars() + l.bwd.num_scalars())
            .sum::<usize>();
        cells + self.output_dim * (2 * self.hidden + 1)
    }

    /// Encodes a batch of sequences into `[B×output_dim]`.
    pub fn encode_batch(&self, g: &mut Graph, p: &Bindings, seqs: &[&Sequence]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "encode",
                msg: "empty batch".into(),
            });
        }
        if let Some(bad) = seqs.iter().find(|s| s.dim() != self.input_dim) {
            return Err(Error::shape("encode", &[self.input_dim], &[bad.dim()]));
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut steps = Vec::with_capacity(max_len);
        for t in 0..max_len {
            let mut rows = vec![0.0; seqs.len() * self.input_dim];
            for (r, s) in seqs.iter().enumerate() {
                if t < s.len() {
                    rows[r * self.input_dim..(r + 1) * self.input_dim].copy_from_slice(s.step(t));
                }
            }
            steps.push(g.input(Tensor::from_parts(vec![seqs.len(), self.input_dim], rows)));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.encode_steps(g, p, &steps, &lens)
    }

    /// Encodes one `[L×D]` sequence whose positions `>= mask_len` are padding.
    pub fn encode(&self, g: &mut Graph, p: &Bindings, seq: &Tensor, mask_len: usize) -> Result<Var> {
        let (len, dim) = match seq.shape() {
            [l, d] => (*l, *d),
            s => {
                return Err(Error::Rank {
                    op: "encode",
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        if dim != self.input_dim {
            return Err(Error::shape("encode", &[self.input_dim], &[dim]));
        }
        if mask_len == 0 || mask_len > len {
            return Err(Error::InvalidArgument {
                op: "encode",
                msg: format!("mask_len {mask_len} outside 1..={len}"),
            });
        }
        let steps: Vec<Var> = (0..len)
            .map(|t| {
                let row = seq.data()[t * dim..(t + 1) * dim].to_vec();
                g.input(Tensor::from_parts(vec![1, dim], row))
            })
            .collect();
        let out = self.encode_steps(g, p, &steps, &[mask_len])?;
        g.reshape(out, &[self.output_dim])
    }

    fn encode_steps(&self, g: &mut Graph, p: &Bindings, steps: &[Var], lens: &[usize]) -> Result<Var> {
        let l1 = self.layer1.run(g, p, steps, lens)?;
        let l2 = self.layer2.run(g, p, &l1.steps, lens)?;
        let last = g.concat(&[l2.last_fwd, l2.last_bwd], 1)?;
        let proj = g.linear(last, p.var(self.proj_w), Some(p.var(self.proj_b)))?;
        g.tanh(proj)
    }
}

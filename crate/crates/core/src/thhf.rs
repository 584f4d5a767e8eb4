//! Text-dominated hierarchical high-order fusion.
//!
//! A block takes two compact vectors `a, b` of width `c`, forms their outer
//! product `[c×c]`, max-pools it to `[c/2 × c/2]`, flattens and maps it back
//! to width `c`. A *dominated* block turns that into a sigmoid gate on `a`:
//!
//! ```text
//! dominated(a, b) = a ⊙ σ(FC(flatten(pool(a ⊗ b))))
//! flat(a, b)      = FC(flatten(pool(a ⊗ b)))
//! ```
//!
//! A branch runs `x_dv = dominated(x_d, x_v)`, `x_da = dominated(x_d, x_a)`
//! and `flat(x_da, x_dv)` for a dominant modality `d` (text by default).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Var};

/// How a block combines its two inputs before the FC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    /// Outer product, 2×2 max pooling, flatten.
    OuterPool,
    /// Plain concatenation `[a, b]`.
    Concat,
}

/// Intermediate values of one block application.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    /// `[c×c]`, absent for [`Interaction::Concat`].
    pub outer: Option<Var>,
    /// `[c/2 × c/2]`, absent for [`Interaction::Concat`].
    pub pooled: Option<Var>,
    /// FC input.
    pub features: Var,
    /// FC output, before any gate.
    pub projected: Var,
    /// Sigmoid gate, for dominated blocks.
    pub gate: Option<Var>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    w: ParamId,
    b: ParamId,
    width: usize,
    gated: bool,
    interaction: Interaction,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        gated: bool,
        interaction: Interaction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width == 0 || (interaction == Interaction::OuterPool && width % 2 != 0) {
            return Err(Error::Config(format!("fusion width {width} must be positive and even")));
        }
        let features = Self::feature_width(width, interaction);
        Ok(Self {
            w: store.add_uniform(format!("{name}.w"), width, features, rng),
            b: store.add_zeros(format!("{name}.b"), &[width]),
            width,
            gated,
            interaction,
        })
    }

    fn feature_width(width: usize, interaction: Interaction) -> usize {
        match interaction {
            Interaction::OuterPool => (width / 2) * (width / 2),
            Interaction::Concat => 2 * width,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn is_gated(&self) -> bool {
        self.gated
    }

    pub fn num_scalars(&self) -> usize {
        self.width * (Self::feature_width(self.width, self.interaction) + 1)
    }

    pub fn apply(&self, g: &mut Graph, p: &Bindings, a: Var, b: Var) -> Result<Var> {
        Ok(self.trace(g, p, a, b)?.output)
    }

    /// Inputs are `[c]` vectors or `[B×c]` batches of matching shape.
    pub fn trace(&self, g: &mut Graph, p: &Bindings, a: Var, b: Var) -> Result<BlockTrace> {
        let shape = g.shape(a).to_vec();
        if shape.last() != Some(&self.width) || shape.len() > 2 || g.shape(b) != shape.as_slice() {
            let expect = match shape.len() {
                2 => vec![shape[0], self.width],
                _ => vec![self.width],
            };
            let bad = if shape == expect { g.shape(b).to_vec() } else { shape };
            return Err(Error::shape("fusion", &expect, &bad));
        }
        let batched = shape.len() == 2;

        let (outer, pooled, features) = match self.interaction {
            Interaction::OuterPool => {
                let outer = g.outer(a, b)?;
                let pooled = g.maxpool2d(outer)?;
                let flat = if batched {
                    g.flatten_batch(pooled)?
                } else {
                    g.flatten(pooled)?
                };
                (Some(outer), Some(pooled), flat)
            }
            Interaction::Concat => (None, None, g.concat(&[a, b], shape.len() - 1)?),
        };
        let projected = g.linear(features, p.var(self.w), Some(p.var(self.b)))?;
        let (gate, output) = if self.gated {
            let gate = g.sigmoid(projected)?;
            (Some(gate), g.mul(a, gate)?)
        } else {
            (None, projected)
        };
        Ok(BlockTrace {
            outer,
            pooled,
            features,
            projected,
            gate,
            output,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// Dominant fused with the two other modalities, in (t, v, a) order of
    /// the non-dominant one. For text: `[x_tv, x_ta]`.
    pub pair: [Var; 2],
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Branch {
    dominant: Modality,
    others: [Modality; 2],
    pair: [FusionBlock; 2],
    flat: FusionBlock,
}

impl Branch {
    /// `gated = false` replaces the two dominated blocks with flat ones.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dominant: Modality,
        width: usize,
        gated: bool,
        interaction: Interaction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut rest = Modality::ALL.into_iter().filter(|m| *m != dominant);
        let others = [rest.next().expect("three modalities"), rest.next().expect("three modalities")];
        let mut block = |o: Modality| {
            let name = format!("{prefix}.{}{}", dominant.tag(), o.tag());
            FusionBlock::new(store, &name, width, gated, interaction, rng)
        };
        let pair = [block(others[0])?, block(others[1])?];
        let flat = FusionBlock::new(store, &format!("{prefix}.flat"), width, false, interaction, rng)?;
        Ok(Self {
            dominant,
            others,
            pair,
            flat,
        })
    }

    pub fn dominant(&self) -> Modality {
        self.dominant
    }

    pub fn blocks(&self) -> [&FusionBlock; 3] {
        [&self.pair[0], &self.pair[1], &self.flat]
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|b| b.num_scalars()).sum()
    }

    /// `reps` are the branch inputs in (t, v, a) order.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, reps: [Var; 3]) -> Result<BranchOutput> {
        let d = reps[self.dominant.index()];
        let first = self.pair[0].apply(g, p, d, reps[self.others[0].index()])?;
        let second = self.pair[1].apply(g, p, d, reps[self.others[1].index()])?;
        let fused = self.flat.apply(g, p, second, first)?;
        Ok(BranchOutput {
            pair: [first, second],
            fused,
        })
    }
}

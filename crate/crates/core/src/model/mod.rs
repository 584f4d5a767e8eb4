//! The assembled model: encoders, decoupling, fusion branches and the
//! prediction head, plus losses, training and checkpoints.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, HeadLayout, HeadPart, ModelConfig};
pub use train::{evaluate_loss, train, train_with, Adam, EpochRecord, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::data::{Label, Modality, Task, UtteranceSample};
use crate::decouple::{self_decouple, Compactor};
use crate::encoder::UnimodalEncoder;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, Tensor, Var};
use crate::thhf::{Branch, BranchOutput};

/// Graph handles for every named intermediate of one batched forward pass.
/// Each is `[B×width]`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub h: [Var; 3],
    pub shared: Var,
    pub specific: [Var; 3],
    pub specific_compact: Option<[Var; 3]>,
    pub full_compact: Option<[Var; 3]>,
    pub specific_branch: Option<BranchOutput>,
    pub full_branch: Option<BranchOutput>,
    pub fused: Var,
    pub predictions: Var,
}

/// Plain-value copy of [`ForwardVars`] for one sample. Components the
/// active ablation does not build are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSet {
    /// `h_t, h_v, h_a`
    pub h: [Vec<f64>; 3],
    /// `S`
    pub shared: Vec<f64>,
    /// `i_t, i_v, i_a`
    pub specific: [Vec<f64>; 3],
    /// `ĩ_t, ĩ_v, ĩ_a`
    pub specific_compact: Option<[Vec<f64>; 3]>,
    /// `h̃_t, h̃_v, h̃_a`
    pub full_compact: Option<[Vec<f64>; 3]>,
    /// `ĩ_tv, ĩ_ta` (dominant first)
    pub specific_pair: Option<[Vec<f64>; 2]>,
    /// `h̃_tv, h̃_ta`
    pub full_pair: Option<[Vec<f64>; 2]>,
    /// `I`
    pub specific_interaction: Option<Vec<f64>>,
    /// `M`
    pub full_interaction: Option<Vec<f64>>,
    /// Head input (`F0` for the full model).
    pub fused: Vec<f64>,
}

impl ForwardVars {
    pub fn representations(&self, g: &Graph) -> Vec<RepresentationSet> {
        let rows = g.shape(self.predictions)[0];
        let row = |v: Var, i: usize| g.value(v).row(i).to_vec();
        let tri = |v: [Var; 3], i: usize| v.map(|x| row(x, i));
        (0..rows)
            .map(|i| RepresentationSet {
                h: tri(self.h, i),
                shared: row(self.shared, i),
                specific: tri(self.specific, i),
                specific_compact: self.specific_compact.map(|v| tri(v, i)),
                full_compact: self.full_compact.map(|v| tri(v, i)),
                specific_pair: self.specific_branch.map(|b| b.pair.map(|x| row(x, i))),
                full_pair: self.full_branch.map(|b| b.pair.map(|x| row(x, i))),
                specific_interaction: self.specific_branch.map(|b| row(b.fused, i)),
                full_interaction: self.full_branch.map(|b| row(b.fused, i)),
                fused: row(self.fused, i),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Head {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// A configured model together with its parameters.
#[derive(Clone, Debug)]
pub struct InterMulti {
    config: ModelConfig,
    params: ParamStore,
    encoders: [Option<UnimodalEncoder>; 3],
    specific_compact: Option<[Compactor; 3]>,
    full_compact: Option<[Compactor; 3]>,
    specific_branch: Option<Branch>,
    full_branch: Option<Branch>,
    head: Head,
}

impl InterMulti {
    /// Builds the architecture and initializes parameters from
    /// `config.seed`. Components the ablation does not use are not created.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::Init);
        let mut params = ParamStore::new();
        let c = &config;

        let encoders = Modality::ALL.map(|m| {
            (!c.is_dropped(m)).then(|| {
                UnimodalEncoder::new(&mut params, m, c.input_dims[m.index()], c.gru_hidden, c.rep_dim, &mut rng)
            })
        });

        let layout = c.ablation.head_layout();
        let uses = |part: HeadPart| match layout {
            HeadLayout::Parts(parts) => parts.contains(&part),
            HeadLayout::Unfused => false,
        };
        let unfused = layout == HeadLayout::Unfused;
        let (want_specific, want_full) = (uses(HeadPart::Specific), uses(HeadPart::Full));

        let mut compactors = |stream_name: &str| {
            Modality::ALL.map(|m| {
                let name = format!("decouple.{stream_name}.{}", m.tag());
                Compactor::new(&mut params, &name, c.rep_dim, c.compact_dim, &mut rng)
            })
        };
        let specific_compact = (want_specific || unfused).then(|| compactors("spec"));
        let full_compact = (want_full || unfused).then(|| compactors("full"));

        let mut branch = |prefix: &str| {
            let (dominant, gated, interaction) = (c.ablation.dominant(), c.ablation.gated(), c.ablation.interaction());
            Branch::new(&mut params, prefix, dominant, c.compact_dim, gated, interaction, &mut rng)
        };
        let specific_branch = want_specific.then(|| branch("thhf.spec")).transpose()?;
        let full_branch = want_full.then(|| branch("thhf.full")).transpose()?;

        let head_in = c.head_input_dim();
        let out = c.task.output_dim();
        let head = Head {
            w1: params.add_uniform("head.fc1.w", c.head_hidden, head_in, &mut rng),
            b1: params.add_zeros("head.fc1.b", &[c.head_hidden]),
            w2: params.add_uniform("head.fc2.w", out, c.head_hidden, &mut rng),
            b2: params.add_zeros("head.fc2.b", &[out]),
        };

        Ok(Self {
            config,
            params,
            encoders,
            specific_compact,
            full_compact,
            specific_branch,
            full_branch,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encoder(&self, m: Modality) -> Option<&UnimodalEncoder> {
        self.encoders[m.index()].as_ref()
    }

    pub fn branches(&self) -> [Option<&Branch>; 2] {
        [self.specific_branch.as_ref(), self.full_branch.as_ref()]
    }

    pub fn compactors(&self) -> [Option<&[Compactor; 3]>; 2] {
        [self.specific_compact.as_ref(), self.full_compact.as_ref()]
    }

    /// Batched forward pass. Parameters come from `p`, which must have been
    /// bound from [`Self::params`] (or an equally shaped store).
    pub fn forward(&self, g: &mut Graph, p: &Bindings, batch: &[&UtteranceSample]) -> Result<ForwardVars> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument {
                op: "forward",
                msg: "empty batch".into(),
            });
        }
        for s in batch {
            if s.dims() != self.config.input_dims {
                return Err(Error::shape("forward", &self.config.input_dims, &s.dims()));
            }
        }
        let rows = batch.len();
        let cfg = &self.config;

        let mut h = [None; 3];
        for m in Modality::ALL {
            h[m.index()] = Some(match &self.encoders[m.index()] {
                Some(enc) => {
                    let seqs: Vec<_> = batch.iter().map(|s| s.sequence(m)).collect();
                    enc.encode_batch(g, p, &seqs)?
                }
                None => g.input(Tensor::zeros(&[rows, cfg.rep_dim])),
            });
        }
        let h = h.map(|v| v.expect("every modality produces h"));

        let dec = self_decouple(g, h)?;
        let compact = |g: &mut Graph, cs: &Option<[Compactor; 3]>, xs: [Var; 3]| -> Result<Option<[Var; 3]>> {
            match cs {
                Some(cs) => Ok(Some([
                    cs[0].apply(g, p, xs[0])?,
                    cs[1].apply(g, p, xs[1])?,
                    cs[2].apply(g, p, xs[2])?,
                ])),
                None => Ok(None),
            }
        };
        let specific_compact = compact(g, &self.specific_compact, dec.specific)?;
        let full_compact = compact(g, &self.full_compact, h)?;

        let run = |g: &mut Graph, br: &Option<Branch>, xs: Option<[Var; 3]>| -> Result<Option<BranchOutput>> {
            match (br, xs) {
                (Some(br), Some(xs)) => Ok(Some(br.forward(g, p, xs)?)),
                _ => Ok(None),
            }
        };
        let specific_branch = run(g, &self.specific_branch, specific_compact)?;
        let full_branch = run(g, &self.full_branch, full_compact)?;

        let segments: Vec<Var> = match cfg.ablation.head_layout() {
            HeadLayout::Parts(parts) => parts
                .iter()
                .map(|part| match part {
                    HeadPart::Shared => dec.shared,
                    HeadPart::Specific => specific_branch.expect("specific branch built").fused,
                    HeadPart::Full => full_branch.expect("full branch built").fused,
                })
                .collect(),
            HeadLayout::Unfused => {
                let (i, hc) = (specific_compact.expect("built"), full_compact.expect("built"));
                vec![i[0], i[1], i[2], hc[0], hc[1], hc[2], dec.shared]
            }
        };
        let fused = if segments.len() == 1 {
            segments[0]
        } else {
            g.concat(&segments, 1)?
        };

        let hidden = g.linear(fused, p.var(self.head.w1), Some(p.var(self.head.b1)))?;
        let hidden = g.relu(hidden)?;
        let predictions = g.linear(hidden, p.var(self.head.w2), Some(p.var(self.head.b2)))?;

        Ok(ForwardVars {
            h,
            shared: dec.shared,
            specific: dec.specific,
            specific_compact,
            full_compact,
            specific_branch,
            full_branch,
            fused,
            predictions,
        })
    }

    /// MSE for regression, mean cross-entropy for classification.
    pub fn loss(&self, g: &mut Graph, predictions: Var, labels: &[Label]) -> Result<Var> {
        task_loss(g, self.config.task, predictions, labels)
    }

    /// Predictions (one row per sample) and representations, without
    /// building any backward state beyond the forward graph.
    pub fn infer(&self, samples: &[UtteranceSample]) -> Result<(Vec<Vec<f64>>, Vec<RepresentationSet>)> {
        let mut preds = Vec::with_capacity(samples.len());
        let mut reps = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size) {
            let batch: Vec<&UtteranceSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let out = self.forward(&mut g, &p, &batch)?;
            let pv = g.value(out.predictions);
            preds.extend((0..chunk.len()).map(|i| pv.row(i).to_vec()));
            reps.extend(out.representations(&g));
        }
        Ok((preds, reps))
    }

    pub fn predict(&self, samples: &[UtteranceSample]) -> Result<Vec<Vec<f64>>> {
        let mut preds = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size) {
            let batch: Vec<&UtteranceSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let out = self.forward(&mut g, &p, &batch)?;
            let pv = g.value(out.predictions);
            preds.extend((0..chunk.len()).map(|i| pv.row(i).to_vec()));
        }
        Ok(preds)
    }
}

pub fn task_loss(g: &mut Graph, task: Task, predictions: Var, labels: &[Label]) -> Result<Var> {
    let rows = g.shape(predictions)[0];
    if labels.len() != rows {
        return Err(Error::shape("loss", &[rows], &[labels.len()]));
    }
    match task {
        Task::Regression => {
            let targets = labels
                .iter()
                .map(|l| match l {
                    Label::Intensity(y) => Ok(*y),
                    Label::Class(_) => Err(Error::data("class label given to a regression loss")),
                })
                .collect::<Result<Vec<_>>>()?;
            let t = g.input(Tensor::matrix(rows, 1, targets)?);
            g.mse(predictions, t)
        }
        Task::Classification { .. } => {
            let classes = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c as usize),
                    Label::Intensity(_) => Err(Error::data("intensity label given to a classification loss")),
                })
                .collect::<Result<Vec<_>>>()?;
            g.softmax_cross_entropy(predictions, &classes)
        }
    }
}

//! Utterance samples, the on-disk feature container, the synthetic
//! planted-interaction benchmark, and evaluation metrics.

mod container;
pub mod metrics;
mod synthetic;

pub use container::{load_dataset, read_manifest, read_samples, write_dataset, write_samples, ManifestEntry, MAGIC, VERSION};
pub use metrics::{metrics, BinaryScores, ClassificationMetrics, MetricReport, RegressionMetrics};
pub use synthetic::{generate_synthetic, planted_label, SyntheticSpec, SyntheticSplits};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression labels live in this closed interval.
pub const INTENSITY_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
    Acoustic,
}

impl Modality {
    /// Canonical `(t, v, a)` order used everywhere, including on disk.
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Acoustic];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Visual => "v",
            Modality::Acoustic => "a",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A `[len×dim]` row-major feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    len: usize,
    dim: usize,
    values: Vec<f64>,
}

impl Sequence {
    pub fn new(len: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::data(format!("empty sequence ({len}×{dim})")));
        }
        if values.len() != len * dim {
            return Err(Error::data(format!(
                "sequence {len}×{dim} needs {} values, got {}",
                len * dim,
                values.len()
            )));
        }
        Ok(Self { len, dim, values })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Mean feature vector over time.
    pub fn time_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in 0..self.len {
            for (o, v) in out.iter_mut().zip(self.step(t)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.len as f64);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Intensity(f64),
    Class(u16),
}

/// One utterance: a feature sequence per modality plus its label.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceSample {
    /// Indexed by [`Modality::index`].
    pub sequences: [Sequence; 3],
    pub label: Label,
}

impl UtteranceSample {
    pub fn sequence(&self, m: Modality) -> &Sequence {
        &self.sequences[m.index()]
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.sequences[i].dim())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

impl Task {
    /// Width of the prediction head.
    pub fn output_dim(self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { num_classes } => num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split `{other}`"))),
        }
    }
}

/// A validated, immutable set of samples from one split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    samples: Vec<UtteranceSample>,
    dims: [usize; 3],
    task: Task,
    split: Split,
}

impl FeatureDataset {
    /// Validates shared dims, a single label kind, and the intensity range.
    /// For classification the class count is `max id + 1`.
    pub fn new(samples: Vec<UtteranceSample>, split: Split) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::data(format!("split `{split}` has no samples")))?;
        let dims = first.dims();
        let is_class = matches!(first.label, Label::Class(_));
        let mut max_class = 0usize;
        for (i, s) in samples.iter().enumerate() {
            let bad = |msg: String| Error::Data {
                sample: Some(i),
                msg,
            };
            if s.dims() != dims {
                return Err(bad(format!("feature dims {:?}, expected {dims:?}", s.dims())));
            }
            match s.label {
                Label::Intensity(y) if !is_class => {
                    if !(INTENSITY_RANGE.0..=INTENSITY_RANGE.1).contains(&y) {
                        return Err(bad(format!("label {y} outside [-3, 3]")));
                    }
                }
                Label::Class(c) if is_class => max_class = max_class.max(c as usize),
                _ => return Err(bad("mixed label kinds".into())),
            }
        }
        let task = if is_class {
            Task::Classification {
                num_classes: max_class + 1,
            }
        } else {
            Task::Regression
        };
        Ok(Self {
            samples,
            dims,
            task,
            split,
        })
    }

    pub fn samples(&self) -> &[UtteranceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Checks that labels fit `task` (kind and class range).
    pub fn check_task(&self, task: Task) -> Result<()> {
        match (self.task, task) {
            (Task::Regression, Task::Regression) => Ok(()),
            (Task::Classification { num_classes: seen }, Task::Classification { num_classes }) => {
                if seen > num_classes {
                    Err(Error::data(format!(
                        "split `{}` has class id {} but the task has {num_classes} classes",
                        self.split,
                        seen - 1
                    )))
                } else {
                    Ok(())
                }
            }
            (have, want) => Err(Error::data(format!(
                "split `{}` labels are {have:?}, task is {want:?}",
                self.split
            ))),
        }
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| match s.label {
                Label::Intensity(y) => y,
                Label::Class(c) => f64::from(c),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dims: [usize; 3], label: Label) -> UtteranceSample {
        UtteranceSample {
            sequences: dims.map(|d| Sequence::new(2, d, vec![0.5; 2 * d]).unwrap()),
            label,
        }
    }

    #[test]
    fn dataset_rejects_out_of_range_and_mixed_labels() {
        let ok = sample([3, 2, 1], Label::Intensity(3.0));
        let bad = sample([3, 2, 1], Label::Intensity(3.5));
        let err = FeatureDataset::new(vec![ok.clone(), bad], Split::Train).unwrap_err();
        assert!(matches!(err, Error::Data { sample: Some(1), .. }));

        let class = sample([3, 2, 1], Label::Class(0));
        assert!(FeatureDataset::new(vec![ok.clone(), class], Split::Train).is_err());

        let other_dims = sample([4, 2, 1], Label::Intensity(0.0));
        assert!(FeatureDataset::new(vec![ok, other_dims], Split::Train).is_err());
        assert!(FeatureDataset::new(vec![], Split::Val).is_err());
    }

    #[test]
    fn class_count_is_inferred() {
        let d = FeatureDataset::new(
            vec![sample([1, 1, 1], Label::Class(0)), sample([1, 1, 1], Label::Class(3))],
            Split::Test,
        )
        .unwrap();
        assert_eq!(d.task(), Task::Classification { num_classes: 4 });
        assert!(d.check_task(Task::Classification { num_classes: 4 }).is_ok());
        assert!(d.check_task(Task::Classification { num_classes: 3 }).is_err());
        assert!(d.check_task(Task::Regression).is_err());
    }

    #[test]
    fn time_mean_averages_steps() {
        let s = Sequence::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(s.time_mean(), vec![2.0, 4.0]);
        assert!(Sequence::new(0, 2, vec![]).is_err());
        assert!(Sequence::new(2, 2, vec![1.0]).is_err());
    }
}

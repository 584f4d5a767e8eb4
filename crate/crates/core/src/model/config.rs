use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Modality, Task};
use crate::error::{Error, Result};
use crate::thhf::Interaction;

/// Ablation variants. `A0` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    A0,
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
    A7,
    A8,
    A9,
    A10,
    A11,
    A12,
    A13,
    A14,
    A15,
    A16,
}

/// One segment of the head input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPart {
    /// `S`, at the representation width.
    Shared,
    /// `I`, output of the modality-specific branch.
    Specific,
    /// `M`, output of the modality-full branch.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadLayout {
    Parts(&'static [HeadPart]),
    /// No fusion: `[ĩ_t, ĩ_v, ĩ_a, h̃_t, h̃_v, h̃_a, S]`.
    Unfused,
}

impl Ablation {
    pub const ALL: [Ablation; 17] = [
        Ablation::A0,
        Ablation::A1,
        Ablation::A2,
        Ablation::A3,
        Ablation::A4,
        Ablation::A5,
        Ablation::A6,
        Ablation::A7,
        Ablation::A8,
        Ablation::A9,
        Ablation::A10,
        Ablation::A11,
        Ablation::A12,
        Ablation::A13,
        Ablation::A14,
        Ablation::A15,
        Ablation::A16,
    ];

    pub fn description(self) -> &'static str {
        match self {
            Ablation::A0 => "full model",
            Ablation::A1 => "S + M",
            Ablation::A2 => "S + I",
            Ablation::A3 => "M + I",
            Ablation::A4 => "S only",
            Ablation::A5 => "M only",
            Ablation::A6 => "I only",
            Ablation::A7 => "without text",
            Ablation::A8 => "without visual",
            Ablation::A9 => "without acoustic",
            Ablation::A10 => "orthogonality-loss decoupling",
            Ablation::A11 => "no high-order fusion",
            Ablation::A12 => "concatenation instead of outer product",
            Ablation::A13 => "no dominant modality",
            Ablation::A14 => "co-attention fusion",
            Ablation::A15 => "visual-dominated fusion",
            Ablation::A16 => "acoustic-dominated fusion",
        }
    }

    pub fn is_implemented(self) -> bool {
        !matches!(self, Ablation::A10 | Ablation::A14)
    }

    pub fn dropped(self) -> Option<Modality> {
        match self {
            Ablation::A7 => Some(Modality::Text),
            Ablation::A8 => Some(Modality::Visual),
            Ablation::A9 => Some(Modality::Acoustic),
            _ => None,
        }
    }

    pub fn head_layout(self) -> HeadLayout {
        use HeadPart::*;
        match self {
            Ablation::A1 => HeadLayout::Parts(&[Shared, Full]),
            Ablation::A2 => HeadLayout::Parts(&[Shared, Specific]),
            Ablation::A3 => HeadLayout::Parts(&[Full, Specific]),
            Ablation::A4 => HeadLayout::Parts(&[Shared]),
            Ablation::A5 => HeadLayout::Parts(&[Full]),
            Ablation::A6 => HeadLayout::Parts(&[Specific]),
            Ablation::A11 => HeadLayout::Unfused,
            _ => HeadLayout::Parts(&[Shared, Specific, Full]),
        }
    }

    pub fn dominant(self) -> Modality {
        match self {
            Ablation::A15 => Modality::Visual,
            Ablation::A16 => Modality::Acoustic,
            _ => Modality::Text,
        }
    }

    /// Whether the two pairwise blocks of each branch gate the dominant input.
    pub fn gated(self) -> bool {
        self != Ablation::A13
    }

    pub fn interaction(self) -> Interaction {
        if self == Ablation::A12 {
            Interaction::Concat
        } else {
            Interaction::OuterPool
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown ablation id `{s}` (expected A0..A16)")))
    }
}

/// Every dimension, switch and training hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature widths `(D_t, D_v, D_a)`.
    pub input_dims: [usize; 3],
    pub gru_hidden: usize,
    pub rep_dim: usize,
    pub compact_dim: usize,
    pub head_hidden: usize,
    pub task: Task,
    pub ablation: Ablation,
    /// Modalities whose representation is replaced by zeros. Merged with the
    /// one implied by `A7`..`A9`.
    pub dropped_modalities: Vec<Modality>,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [8, 6, 4],
            gru_hidden: 32,
            rep_dim: 64,
            compact_dim: 16,
            head_hidden: 32,
            task: Task::Regression,
            ablation: Ablation::A0,
            dropped_modalities: Vec::new(),
            lr: 1e-4,
            batch_size: 64,
            patience: 10,
            max_epochs: 100,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.ablation.is_implemented() {
            return Err(Error::NotImplemented(format!(
                "{} ({})",
                self.ablation,
                self.ablation.description()
            )));
        }
        if self.input_dims.contains(&0) {
            return bad(format!("input_dims must be positive, got {:?}", self.input_dims));
        }
        for (name, v) in [
            ("gru_hidden", self.gru_hidden),
            ("rep_dim", self.rep_dim),
            ("compact_dim", self.compact_dim),
            ("head_hidden", self.head_hidden),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.compact_dim % 2 != 0 {
            return bad(format!("compact_dim must be even for 2×2 pooling, got {}", self.compact_dim));
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return bad(format!("classification needs at least 2 classes, got {num_classes}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if self.dropped().len() == 3 {
            return bad("cannot drop every modality".into());
        }
        Ok(())
    }

    /// Dropped modalities in (t, v, a) order, without duplicates.
    pub fn dropped(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.dropped_modalities.contains(m) || self.ablation.dropped() == Some(*m))
            .collect()
    }

    pub fn is_dropped(&self, m: Modality) -> bool {
        self.dropped().contains(&m)
    }

    /// Width of the concatenated head input.
    pub fn head_input_dim(&self) -> usize {
        match self.ablation.head_layout() {
            HeadLayout::Parts(parts) => parts
                .iter()
                .map(|p| match p {
                    HeadPart::Shared => self.rep_dim,
                    HeadPart::Specific | HeadPart::Full => self.compact_dim,
                })
                .sum(),
            HeadLayout::Unfused => 6 * self.compact_dim + self.rep_dim,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_ids_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("a12".parse::<Ablation>().unwrap(), Ablation::A12);
        assert!(matches!("A17".parse::<Ablation>(), Err(Error::Config(_))));
    }

    #[test]
    fn head_widths() {
        let widths: Vec<usize> = Ablation::ALL
            .iter()
            .map(|&ablation| ModelConfig { ablation, ..Default::default() }.head_input_dim())
            .collect();
        assert_eq!(widths, [96, 80, 80, 32, 64, 16, 16, 96, 96, 96, 96, 160, 96, 96, 96, 96, 96]);
    }

    #[test]
    fn unimplemented_ablations_are_rejected() {
        for ablation in [Ablation::A10, Ablation::A14] {
            let err = ModelConfig { ablation, ..Default::default() }.validate().unwrap_err();
            assert!(err.to_string().contains("not implemented"), "{err}");
        }
    }

    #[test]
    fn json_defaults_and_diagnostics() {
        let cfg = ModelConfig::from_json(r#"{"ablation": "A4", "task": {"kind": "classification", "num_classes": 3}}"#).unwrap();
        assert_eq!(cfg.ablation, Ablation::A4);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.task.output_dim(), 3);

        let err = ModelConfig::from_json("{\n  \"lr\": 0.1,\n  \"bogus\": 1\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("bogus"), "{msg}");
        assert!(ModelConfig::from_json(r#"{"compact_dim": 15}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"dropped_modalities": ["text", "visual", "acoustic"]}"#).is_err());
    }

    #[test]
    fn dropped_merges_ablation() {
        let cfg = ModelConfig {
            ablation: Ablation::A8,
            dropped_modalities: vec![Modality::Acoustic, Modality::Visual],
            ..Default::default()
        };
        assert_eq!(cfg.dropped(), [Modality::Visual, Modality::Acoustic]);
    }
}

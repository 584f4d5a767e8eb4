//! Planted-interaction benchmark.
//!
//! Each sample draws a shared latent `z` and one specific latent per
//! modality `z_t, z_v, z_a`, all standard normal. Every time step of
//! modality `m` is `A_m · (z, z_m) + σ·ε` for a fixed random embedding
//! `A_m: [D_m × 2]`. The label is
//!
//! ```text
//! s = α·z + γ·z_t·z_v + β_t·z_t + β_v·z_v + β_a·z_a
//! y = 3·tanh(s / 3)
//! ```
//!
//! The `γ` term is a cross-modal product that no linear map of the
//! features can represent.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureDataset, Label, Sequence, Split, UtteranceSample};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Maximum sequence length per modality; each sample draws its length
    /// uniformly from `ceil(max/2)..=max`.
    pub seq_lens: [usize; 3],
    pub dims: [usize; 3],
    /// Weight of the shared latent.
    pub alpha: f64,
    /// Weights of the modality-specific latents `(t, v, a)`.
    pub beta: [f64; 3],
    /// Weight of the `z_t·z_v` interaction.
    pub gamma: f64,
    /// Feature noise standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            seq_lens: [6, 5, 4],
            dims: [8, 6, 4],
            alpha: 0.5,
            beta: [1.0, 0.3, 0.3],
            gamma: 1.0,
            sigma: 0.1,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.gamma, self.beta[0], self.beta[1], self.beta[2]];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("synthetic weights must be finite and >= 0".into()));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one synthetic weight must be positive".into()));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config("sigma must be finite and >= 0".into()));
        }
        if self.seq_lens.contains(&0) || self.dims.contains(&0) {
            return Err(Error::Config("sequence lengths and dims must be positive".into()));
        }
        let (train, val, test) = self.split_sizes();
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Config(format!(
                "n_samples = {} leaves an empty split",
                self.n_samples
            )));
        }
        Ok(())
    }

    /// 70/15/15, remainder to test.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = self.n_samples * 70 / 100;
        let val = self.n_samples * 15 / 100;
        (train, val, self.n_samples - train - val)
    }
}

/// Label for latents `[z, z_t, z_v, z_a]`.
pub fn planted_label(spec: &SyntheticSpec, latents: [f64; 4]) -> f64 {
    let [z, zt, zv, za] = latents;
    let s = spec.alpha * z
        + spec.gamma * zt * zv
        + spec.beta[0] * zt
        + spec.beta[1] * zv
        + spec.beta[2] * za;
    3.0 * (s / 3.0).tanh()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
    /// `[z, z_t, z_v, z_a]` per sample, in (train, val, test) order.
    pub latents: [Vec<[f64; 4]>; 3],
}

impl SyntheticSplits {
    pub fn split(&self, s: Split) -> &FeatureDataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synthetic);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let embeddings: Vec<Vec<f64>> = spec
        .dims
        .iter()
        .map(|&d| {
            (0..d * 2)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut latents = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let lat: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let lens: [usize; 3] = std::array::from_fn(|m| {
            let max = spec.seq_lens[m];
            rng.random_range(max.div_ceil(2)..=max)
        });
        let sequences: [Sequence; 3] = std::array::from_fn(|m| {
            let (len, dim, emb) = (lens[m], spec.dims[m], &embeddings[m]);
            let (z, zm) = (lat[0], lat[m + 1]);
            let mut values = Vec::with_capacity(len * dim);
            for _ in 0..len {
                for d in 0..dim {
                    let noise: f64 = rng.sample(StandardNormal);
                    values.push(emb[2 * d] * z + emb[2 * d + 1] * zm + spec.sigma * noise);
                }
            }
            Sequence::new(len, dim, values).expect("positive extents")
        });
        samples.push(UtteranceSample {
            sequences,
            label: Label::Intensity(planted_label(spec, lat)),
        });
        latents.push(lat);
    }

    let (n_train, n_val, _) = spec.split_sizes();
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    let lat_test = latents.split_off(n_train + n_val);
    let lat_val = latents.split_off(n_train);
    Ok(SyntheticSplits {
        train: FeatureDataset::new(samples, Split::Train)?,
        val: FeatureDataset::new(val, Split::Val)?,
        test: FeatureDataset::new(test, Split::Test)?,
        latents: [latents, lat_val, lat_test],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 200,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_are_70_15_15() {
        let d = generate_synthetic(&small()).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (140, 30, 30));
        assert_eq!(d.train.dims(), [8, 6, 4]);
        for s in d.train.samples() {
            assert!((3..=6).contains(&s.sequences[0].len()));
            assert!((3..=5).contains(&s.sequences[1].len()));
            assert!((2..=4).contains(&s.sequences[2].len()));
        }
    }

    #[test]
    fn labels_follow_latents_and_stay_in_range() {
        let spec = small();
        let d = generate_synthetic(&spec).unwrap();
        for (s, lat) in d.train.samples().iter().zip(&d.latents[0]) {
            let Label::Intensity(y) = s.label else { panic!() };
            assert_eq!(y, planted_label(&spec, *lat));
            assert!(y.abs() < 3.0);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SyntheticSpec { alpha: -1.0, ..small() },
            SyntheticSpec { alpha: 0.0, beta: [0.0; 3], gamma: 0.0, ..small() },
            SyntheticSpec { sigma: f64::NAN, ..small() },
            SyntheticSpec { n_samples: 5, ..small() },
            SyntheticSpec { dims: [0, 1, 1], ..small() },
        ];
        for spec in bad {
            assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn noiseless_steps_repeat() {
        let spec = SyntheticSpec { sigma: 0.0, ..small() };
        let d = generate_synthetic(&spec).unwrap();
        let seq = &d.train.samples()[0].sequences[0];
        for t in 1..seq.len() {
            assert_eq!(seq.step(t), seq.step(0));
        }
    }

    /// Nodes and weights for expectations under N(0, 1).
    fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
        let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) == 1 {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = jacobi.symmetric_eigen();
        (0..n)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
            .collect()
    }

    #[test]
    fn label_mean_matches_quadrature() {
        let spec = SyntheticSpec {
            n_samples: 10_000,
            ..SyntheticSpec::default()
        };
        // s = sqrt(α² + β_a²)·u + γ·z_t·z_v + β_t·z_t + β_v·z_v
        let spread = (spec.alpha.powi(2) + spec.beta[2].powi(2)).sqrt();
        let nodes = gauss_hermite(60);
        let (mut m1, mut m2) = (0.0, 0.0);
        for &(u, wu) in &nodes {
            for &(zt, wt) in &nodes {
                for &(zv, wv) in &nodes {
                    let s = spread * u + spec.gamma * zt * zv + spec.beta[0] * zt + spec.beta[1] * zv;
                    let y = 3.0 * (s / 3.0).tanh();
                    let w = wu * wt * wv;
                    m1 += w * y;
                    m2 += w * y * y;
                }
            }
        }
        let sd = (m2 - m1 * m1).sqrt();

        let d = generate_synthetic(&spec).unwrap();
        let labels: Vec<f64> = [&d.train, &d.val, &d.test].iter().flat_map(|s| s.intensities()).collect();
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        assert!((mean - m1).abs() < 3.0 * sd / n.sqrt(), "empirical {mean}, expected {m1} ± {}", 3.0 * sd / n.sqrt());
    }
}

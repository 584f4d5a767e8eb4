//! Experiment plumbing shared by the CLI and the acceptance suite: run
//! records, the least-squares baseline, dependency tables and the ablation
//! grid.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{metrics, FeatureDataset, Label, MetricReport, Split, Task};
use crate::decouple::dependency_metric;
use crate::error::{Error, Result};
use crate::model::{evaluate_loss, train_with, Ablation, EpochRecord, InterMulti, ModelConfig, RepresentationSet};

/// `E|u·v|` for the six decoupled pairs, on the 64-wide `i_m` and `S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyTable {
    pub ia_it: f64,
    pub ia_iv: f64,
    pub it_iv: f64,
    #[serde(rename = "ia_S")]
    pub ia_s: f64,
    #[serde(rename = "it_S")]
    pub it_s: f64,
    #[serde(rename = "iv_S")]
    pub iv_s: f64,
}

impl DependencyTable {
    /// Mean over the three `i`–`i` pairs.
    pub fn specific_pair_mean(&self) -> f64 {
        (self.ia_it + self.ia_iv + self.it_iv) / 3.0
    }
}

/// The same statistic on the undecoupled `h_m`, as a reference point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTable {
    pub ha_ht: f64,
    pub ha_hv: f64,
    pub ht_hv: f64,
}

impl ControlTable {
    pub fn pair_mean(&self) -> f64 {
        (self.ha_ht + self.ha_hv + self.ht_hv) / 3.0
    }
}

pub fn dependency_tables(reps: &[RepresentationSet]) -> Result<(DependencyTable, ControlTable)> {
    let dep = |f: &dyn Fn(&RepresentationSet) -> (&[f64], &[f64])| dependency_metric(reps.iter().map(f));
    let table = DependencyTable {
        ia_it: dep(&|r| (&r.specific[2], &r.specific[0]))?,
        ia_iv: dep(&|r| (&r.specific[2], &r.specific[1]))?,
        it_iv: dep(&|r| (&r.specific[0], &r.specific[1]))?,
        ia_s: dep(&|r| (&r.specific[2], &r.shared))?,
        it_s: dep(&|r| (&r.specific[0], &r.shared))?,
        iv_s: dep(&|r| (&r.specific[1], &r.shared))?,
    };
    let control = ControlTable {
        ha_ht: dep(&|r| (&r.h[2], &r.h[0]))?,
        ha_hv: dep(&|r| (&r.h[2], &r.h[1]))?,
        ht_hv: dep(&|r| (&r.h[0], &r.h[1]))?,
    };
    Ok((table, control))
}

/// Least-squares fit of the label on `[mean_t, mean_v, mean_a, 1]`, where
/// `mean_m` is the time-averaged feature vector of modality `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub weights: Vec<f64>,
    pub train_mse: f64,
    pub val_mse: f64,
}

pub fn mean_features(data: &FeatureDataset) -> DMatrix<f64> {
    let width: usize = data.dims().iter().sum::<usize>() + 1;
    DMatrix::from_fn(data.len(), width, |i, j| {
        let s = &data.samples()[i];
        let mut k = j;
        for seq in &s.sequences {
            if k < seq.dim() {
                return seq.time_mean()[k];
            }
            k -= seq.dim();
        }
        1.0
    })
}

pub fn linear_baseline(train: &FeatureDataset, val: &FeatureDataset) -> Result<LinearBaseline> {
    if train.task() != Task::Regression {
        return Err(Error::Config("the linear baseline needs a regression task".into()));
    }
    let x = mean_features(train);
    let y = DVector::from_vec(train.intensities());
    let w = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::InvalidArgument {
            op: "linear_baseline",
            msg: e.to_string(),
        })?;
    let mse = |x: &DMatrix<f64>, y: &DVector<f64>| (x * &w - y).norm_squared() / y.len() as f64;
    let xv = mean_features(val);
    let yv = DVector::from_vec(val.intensities());
    Ok(LinearBaseline {
        train_mse: mse(&x, &y),
        val_mse: mse(&xv, &yv),
        weights: w.iter().copied().collect(),
    })
}

/// Train/validation data plus an optional test split.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a FeatureDataset,
    pub val: &'a FeatureDataset,
    pub test: Option<&'a FeatureDataset>,
}

impl<'a> Splits<'a> {
    fn iter(&self) -> impl Iterator<Item = &'a FeatureDataset> {
        [Some(self.train), Some(self.val), self.test].into_iter().flatten()
    }
}

/// Everything a training run produced, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ModelConfig,
    pub seed: u64,
    pub num_parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val_loss: f64,
    pub metrics: BTreeMap<Split, MetricReport>,
    /// Computed on the test split when present, else validation.
    pub dependency: DependencyTable,
    pub dependency_control: ControlTable,
    /// Absent for classification tasks.
    pub linear_baseline_val_mse: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    /// JSON with the wall-clock field zeroed, for reproducibility checks.
    pub fn to_json_masked(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        serde_json::to_string_pretty(&r).expect("record serializes")
    }

    pub fn val_metrics(&self) -> Option<&MetricReport> {
        self.metrics.get(&Split::Val)
    }
}

/// Scores a model on every split and builds the dependency tables.
pub fn evaluate(model: &InterMulti, splits: Splits<'_>) -> Result<(BTreeMap<Split, MetricReport>, DependencyTable, ControlTable)> {
    let mut out = BTreeMap::new();
    let mut dep = None;
    for data in splits.iter() {
        let (preds, reps) = model.infer(data.samples())?;
        let labels: Vec<Label> = data.samples().iter().map(|s| s.label).collect();
        out.insert(data.split(), metrics(&preds, &labels, model.config().task)?);
        if data.split() == Split::Test || (splits.test.is_none() && data.split() == Split::Val) {
            dep = Some(dependency_tables(&reps)?);
        }
    }
    let (table, control) = dep.expect("validation split always present");
    Ok((out, table, control))
}

/// Trains a fresh model from `config` and records the outcome.
pub fn run_experiment(
    config: &ModelConfig,
    splits: Splits<'_>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(InterMulti, RunRecord)> {
    let start = Instant::now();
    let mut model = InterMulti::new(config.clone())?;
    let outcome = train_with(&mut model, splits.train, splits.val, on_epoch)?;
    let val_loss = evaluate_loss(&model, splits.val)?;
    let (metrics, dependency, dependency_control) = evaluate(&model, splits)?;
    let linear_baseline_val_mse = match config.task {
        Task::Regression => Some(linear_baseline(splits.train, splits.val)?.val_mse),
        Task::Classification { .. } => None,
    };
    let record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        num_parameters: model.num_parameters(),
        epochs: outcome.epochs,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        val_loss,
        metrics,
        dependency,
        dependency_control,
        linear_baseline_val_mse,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, record))
}

/// Trains one model per ablation id on a pool of `workers` threads. Results
/// are returned in `ids` order.
pub fn ablate(
    base: &ModelConfig,
    ids: &[Ablation],
    splits: Splits<'_>,
    workers: usize,
) -> Result<Vec<(InterMulti, RunRecord)>> {
    for &ablation in ids {
        ModelConfig { ablation, ..base.clone() }.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        ids.par_iter()
            .map(|&ablation| run_experiment(&ModelConfig { ablation, ..base.clone() }, splits, |_| {}))
            .collect()
    })
}

/// One line of the ablation table, scored on the test split when present,
/// else validation. Fields that do not apply to the task are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub description: String,
    pub val_loss: f64,
    pub mae: Option<f64>,
    pub corr: Option<f64>,
    pub acc7: Option<f64>,
    pub acc2_non_negative: Option<f64>,
    pub f1_non_negative: Option<f64>,
    pub acc2_positive: Option<f64>,
    pub f1_positive: Option<f64>,
    pub accuracy: Option<f64>,
}

impl AblationRow {
    pub fn new(r: &RunRecord) -> Self {
        let mut row = AblationRow {
            ablation: r.config.ablation,
            description: r.config.ablation.description().to_string(),
            val_loss: r.val_loss,
            mae: None,
            corr: None,
            acc7: None,
            acc2_non_negative: None,
            f1_non_negative: None,
            acc2_positive: None,
            f1_positive: None,
            accuracy: None,
        };
        match r.metrics.get(&Split::Test).or(r.val_metrics()) {
            Some(MetricReport::Regression(m)) => {
                row.mae = Some(m.mae);
                row.corr = m.corr;
                row.acc7 = Some(m.acc7);
                row.acc2_non_negative = Some(m.non_negative.accuracy);
                row.f1_non_negative = Some(m.non_negative.f1);
                row.acc2_positive = m.positive.as_ref().map(|p| p.accuracy);
                row.f1_positive = m.positive.as_ref().map(|p| p.f1);
            }
            Some(MetricReport::Classification(m)) => row.accuracy = Some(m.accuracy),
            None => {}
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Sequence, SyntheticSpec, UtteranceSample};

    #[test]
    fn baseline_residual_is_orthogonal_to_features() {
        let d = generate_synthetic(&SyntheticSpec {
            n_samples: 400,
            ..Default::default()
        })
        .unwrap();
        let fit = linear_baseline(&d.train, &d.val).unwrap();
        let x = mean_features(&d.train);
        let y = DVector::from_vec(d.train.intensities());
        let w = DVector::from_vec(fit.weights.clone());
        let normal = x.transpose() * (y - &x * w);
        assert!(normal.amax() < 1e-9, "{normal}");
        assert_eq!(fit.weights.len(), 8 + 6 + 4 + 1);
    }

    #[test]
    fn baseline_is_exact_in_the_shared_only_regime() {
        let spec = SyntheticSpec {
            n_samples: 400,
            alpha: 1.0,
            beta: [0.0; 3],
            gamma: 0.0,
            sigma: 0.0,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        // y = 3 tanh(z/3) is not linear in z, so fit on z itself to confirm
        // that z is recoverable from the features.
        let x = mean_features(&d.train);
        let z = DVector::from_iterator(d.train.len(), d.latents[0].iter().map(|l| l[0]));
        let w = x.clone().svd(true, true).solve(&z, 1e-12).unwrap();
        assert!((x * w - z).amax() < 1e-9);
    }

    #[test]
    fn identical_modalities_have_zero_dependency() {
        let mut model = InterMulti::new(ModelConfig {
            input_dims: [3, 3, 3],
            ..Default::default()
        })
        .unwrap();
        // Tie the three encoders so identical features give identical h_m.
        let text: Vec<(String, crate::tensor::Tensor)> = model
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("enc.t."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (name, t) in text {
            for tag in ["v", "a"] {
                let id = model.params().id(&name.replacen("enc.t.", &format!("enc.{tag}."), 1)).unwrap();
                *model.params_mut().get_mut(id) = t.clone();
            }
        }
        let seq = Sequence::new(2, 3, vec![0.5, -0.2, 0.1, 0.9, 0.3, -0.4]).unwrap();
        let sample = UtteranceSample {
            sequences: [seq.clone(), seq.clone(), seq],
            label: Label::Intensity(0.0),
        };
        let (_, reps) = model.infer(&[sample.clone(), sample]).unwrap();
        assert!(reps[0].specific.iter().flatten().all(|v| *v == 0.0));
        let (t, c) = dependency_tables(&reps).unwrap();
        assert_eq!(t.specific_pair_mean(), 0.0);
        assert_eq!((t.ia_s, t.it_s, t.iv_s), (0.0, 0.0, 0.0));
        assert!(c.pair_mean() > 0.0);

        let json = serde_json::to_value(&t).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["ia_S", "ia_it", "ia_iv", "it_S", "it_iv", "iv_S"]);
    }
}

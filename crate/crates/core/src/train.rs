//! Adam training with validation-selected checkpoints, and the multi-seed
//! and block-count protocols built on top of it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Binarize, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::params::{GradBuffer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_SEED_COUNT: usize = 5;

/// `train.*` configuration keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Reshuffle the training split every epoch.
    pub shuffle: bool,
    /// Runs averaged by the multi-seed protocol.
    pub num_seeds: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.001,
            batch_size: 12,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle: true,
            num_seeds: DEFAULT_SEED_COUNT,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.num_seeds == 0 {
            return bad("num_seeds must be positive");
        }
        Ok(())
    }

    /// `seed, seed + 1, …` for the multi-seed protocol.
    pub fn default_seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

/// Adam with bias-corrected moments.
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    step: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, hyper: &Hyperparams) -> Self {
        let zeros: Vec<Matrix<T>> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Adam {
            lr: T::of(hyper.learning_rate),
            beta1: T::of(hyper.beta1),
            beta2: T::of(hyper.beta2),
            epsilon: T::of(hyper.epsilon),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let one = T::one();
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id);
            for (((pv, &gv), mv), vv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean joint loss over training samples (training mode).
    pub train_loss: f64,
    pub validation: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest validation MAE (first one on ties).
    pub best_epoch: usize,
}

impl RunHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

pub struct TrainedRun<T> {
    /// Parameters from `history.best_epoch`.
    pub best: Model<T>,
    /// Parameters after the last epoch.
    pub last: Model<T>,
    pub history: RunHistory,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains a freshly initialised model (init seed = `hyper.seed`).
pub fn train<T: Scalar>(
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
    model_cfg: &ModelConfig,
    hyper: &Hyperparams,
    binarize: Binarize,
) -> Result<TrainedRun<T>> {
    let model = Model::new(model_cfg.clone(), hyper.seed)?;
    train_model(model, train_split, val_split, hyper, binarize)
}

/// Trains `model` in place. Per-sample gradients of a batch are computed in
/// parallel and summed in batch order, so results do not depend on the
/// thread count.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
    hyper: &Hyperparams,
    binarize: Binarize,
) -> Result<TrainedRun<T>> {
    hyper.validate()?;
    let dims = (model.config().input.d_text, model.config().input.d_audio);
    for split in [train_split, val_split] {
        split.validate()?;
        if split.dims() != dims {
            return Err(Error::Config(format!(
                "{} split has feature widths {:?}, model expects {:?}",
                split.role,
                split.dims(),
                dims
            )));
        }
    }

    let mut adam = Adam::new(model.params(), hyper);
    let mut epochs = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, usize, Model<T>)> = None;

    for epoch in 1..=hyper.epochs {
        let shuffle = hyper.shuffle.then(|| mix(hyper.seed, epoch as u64, 0));
        let batches = make_batches(train_split, hyper.batch_size, shuffle)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let scale = T::one() / T::of_usize(batch.len());
            let batch_seed = mix(hyper.seed, epoch as u64, bi as u64 + 1);
            let per_sample: Vec<(T, GradBuffer<T>)> = (0..batch.len())
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
                    rng.set_stream(i as u64);
                    model.sample_loss_grad(&batch.text[i], &batch.audio[i], batch.labels[i], scale, Some(rng))
                })
                .collect::<Result<_>>()?;
            let mut grads = GradBuffer::zeros_like(model.params());
            for (loss, g) in &per_sample {
                loss_sum += loss.as_f64();
                grads.merge(g);
            }
            if !loss_sum.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.step(model.params_mut(), &grads);
        }
        let train_loss = loss_sum / train_split.len() as f64;

        let preds = model.predict_split(val_split)?;
        if preds.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let validation = compute_metrics(&preds, &val_split.labels(), binarize)?;
        let improved = best.as_ref().is_none_or(|(mae, _, _)| validation.mae < *mae);
        if improved {
            best = Some((validation.mae, epoch, model.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation,
        });
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainedRun {
        best: best_model,
        last: model,
        history: RunHistory {
            seed: hyper.seed,
            epochs,
            best_epoch,
        },
    })
}

pub fn evaluate<T: Scalar>(model: &Model<T>, split: &DatasetSplit, binarize: Binarize) -> Result<MetricsReport> {
    let preds = model.predict_split(split)?;
    compute_metrics(&preds, &split.labels(), binarize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    pub mean: MetricsReport,
}

pub struct Splits<'a> {
    pub train: &'a DatasetSplit,
    pub validation: &'a DatasetSplit,
    pub test: &'a DatasetSplit,
}

/// One full train + test evaluation per seed, averaged. Runs are independent
/// and may execute in parallel; results stay in seed order.
pub fn multi_seed<T: Scalar>(
    splits: &Splits<'_>,
    model_cfg: &ModelConfig,
    hyper: &Hyperparams,
    binarize: Binarize,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Config("multi-seed protocol needs at least one seed".into()));
    }
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&seed| {
            let h = Hyperparams { seed, ..hyper.clone() };
            let wrap = |e: Error| Error::Seed {
                seed,
                source: Box::new(e),
            };
            let run = train::<T>(splits.train, splits.validation, model_cfg, &h, binarize).map_err(wrap)?;
            let test = evaluate(&run.best, splits.test, binarize).map_err(wrap)?;
            Ok(SeedRun {
                seed,
                best_epoch: run.history.best_epoch,
                test,
            })
        })
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.test.clone()).collect();
    Ok(MultiSeedReport {
        mean: MetricsReport::mean(&reports)?,
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Total crossmodal blocks per stream, over both stages.
    pub n: usize,
    pub blocks_per_stage: usize,
    pub result: MultiSeedReport,
}

/// Total block count `n` to blocks per stage; `n` must be positive and even.
pub fn blocks_per_stage(n: usize) -> Result<usize> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "block count {n} must be a positive even number (two equal stages)"
        )));
    }
    Ok(n / 2)
}

pub fn sweep_blocks<T: Scalar>(
    splits: &Splits<'_>,
    model_cfg: &ModelConfig,
    hyper: &Hyperparams,
    binarize: Binarize,
    seeds: &[u64],
    n_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if n_values.is_empty() {
        return Err(Error::Config("sweep needs at least one block count".into()));
    }
    let per_stage = n_values
        .iter()
        .map(|&n| blocks_per_stage(n))
        .collect::<Result<Vec<_>>>()?;
    n_values
        .iter()
        .zip(per_stage)
        .map(|(&n, blocks)| {
            let mut cfg = model_cfg.clone();
            cfg.xadjust.blocks_per_stage = blocks;
            let result = multi_seed::<T>(splits, &cfg, hyper, binarize, seeds)?;
            Ok(SweepRow {
                n,
                blocks_per_stage: blocks,
                result,
            })
        })
        .collect()
}

/// CSV with header `n,acc7,acc2,f1,mae,corr`; undefined correlation is left empty.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "acc7", "acc2", "f1", "mae", "corr"])?;
    for row in rows {
        let m = &row.result.mean;
        w.write_record([
            row.n.to_string(),
            m.acc7.to_string(),
            m.acc2.to_string(),
            m.f1.to_string(),
            m.mae.to_string(),
            m.corr.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let h = Hyperparams::default();
        assert_eq!((h.batch_size, h.epochs, h.learning_rate), (12, 20, 0.001));
        assert_eq!(h.default_seeds(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn block_counts() {
        assert_eq!(blocks_per_stage(10).unwrap(), 5);
        assert_eq!(blocks_per_stage(2).unwrap(), 1);
        assert!(blocks_per_stage(3).is_err());
        assert!(blocks_per_stage(0).is_err());
    }

    #[test]
    fn adam_with_zero_rate_is_inert() {
        let mut store = ParamStore::<f32>::new();
        let id = store.push("p", "g", Matrix::filled(2, 2, 0.5));
        let mut grads = GradBuffer::zeros_like(&store);
        grads.accumulate(id, &Matrix::filled(2, 2, 3.0));
        let h = Hyperparams {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut adam = Adam::new(&store, &h);
        adam.step(&mut store, &grads);
        assert_eq!(store.value(id), &Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.push("p", "g", Matrix::filled(1, 2, 0.0));
        let mut grads = GradBuffer::zeros_like(&store);
        grads.accumulate(id, &Matrix::from_rows(&[[2.0, -0.5]]).unwrap());
        let mut adam = Adam::new(&store, &Hyperparams::default());
        adam.step(&mut store, &grads);
        let v = store.value(id);
        assert!((v[(0, 0)] + 0.001).abs() < 1e-9);
        assert!((v[(0, 1)] - 0.001).abs() < 1e-9);
    }
}

//! Training loop, run metrics and the multi-seed experiment runner.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{clip_global_norm, Scalar, Tensor};
use crate::grid::{GridSpec, HierarchicalVocabulary};
use crate::hier_embedding::Method;
use crate::model::{evaluate, AttributeSizes, Batch, ModelConfig, ModelError, NextPlaceModel};
use crate::stats::{mean, std_dev, welch_t_test};
use crate::trajectories::{
    observed_cells, split_dataset, tokenize_all, BucketConfig, DataError, DatasetSplit,
    RawTrajectory, TokenizedTrajectory,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("training diverged at epoch {epoch}, step {step}: {what} = {value}")]
    Divergence {
        epoch: usize,
        step: u64,
        what: String,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) with the lowest validation loss; its weights are kept.
    pub selected_epoch: usize,
    pub test_loss: f64,
    /// Not part of the deterministic record.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunMetrics {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.selected_epoch - 1].val_loss
    }
}

/// Inputs shared by every training session of an experiment.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab: Arc<HierarchicalVocabulary>,
    pub attrs: AttributeSizes,
    pub split: DatasetSplit,
}

impl TrainData {
    /// Builds the vocabulary from every observed cell, tokenizes the
    /// trajectories into pieces of at most `max_len` stays and splits them.
    pub fn prepare(
        trajs: &[RawTrajectory],
        spec: &GridSpec,
        buckets: &BucketConfig,
        max_len: usize,
        ratios: [f64; 3],
        split_seed: u64,
    ) -> Result<Self, DataError> {
        let cells = observed_cells(trajs, spec)?;
        let vocab = Arc::new(HierarchicalVocabulary::build(cells, spec)?);
        let tokens = tokenize_all(trajs, &vocab, buckets, max_len)?;
        Ok(Self {
            attrs: AttributeSizes::from(buckets),
            split: split_dataset(tokens, ratios, split_seed)?,
            vocab,
        })
    }
}

/// Mean batch loss, in multiples of ln|V|, treated as divergence.
pub const EXPLODE_FACTOR: f64 = 50.0;

fn diverged(epoch: usize, step: u64, what: &str, value: f64) -> TrainError {
    TrainError::Divergence {
        epoch,
        step,
        what: what.to_string(),
        value,
    }
}

/// Trains one model and returns it with its best-validation weights restored.
///
/// Model initialization and batch order come from separate streams of the
/// seeded generator. Slice averaging runs right after initialization, after
/// every `avg_interval` optimizer steps and at the end of each epoch, so every
/// evaluated and returned model satisfies the region uniformity invariant.
pub fn train<F: Scalar>(
    cfg: &ModelConfig,
    data: &TrainData,
    seed: u64,
    config_hash: &str,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NextPlaceModel<F>, RunMetrics), TrainError> {
    let started = Instant::now();
    let split = &data.split;
    if split.train.iter().all(|s| s.predictions() == 0) {
        return Err(TrainError::EmptyTrain);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);

    let mut model = NextPlaceModel::<F>::new(cfg, data.vocab.clone(), data.attrs, &mut init_rng)?;
    model.places.average_slices().map_err(ModelError::from)?;

    // A uniform prediction costs ln|V| per target; far beyond that the
    // parameters have blown up even if the arithmetic is still finite.
    let explode_at = EXPLODE_FACTOR * (data.vocab.len().max(2) as f64).ln();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut steps: u64 = 0;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor<F>>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&TokenizedTrajectory> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch = Batch::new(&seqs)?;
            let n = batch.predictions();
            if n == 0 {
                continue;
            }
            model.zero_grad();
            let loss = model.loss_and_grad(&batch, 1.0 / n as f64)?;
            if !loss.is_finite() || loss / n as f64 > explode_at {
                return Err(diverged(epoch, steps, "batch loss", loss / n as f64));
            }
            let mut params = model.parameters_mut();
            clip_global_norm(&mut params, cfg.clip_norm);
            cfg.optimizer
                .step(&mut params)
                .map_err(|_| diverged(epoch, steps, "gradient norm", f64::NAN))?;
            steps += 1;
            if steps % cfg.avg_interval as u64 == 0 {
                model.places.average_slices().map_err(ModelError::from)?;
            }
            total += loss;
            count += n;
        }
        model.places.average_slices().map_err(ModelError::from)?;

        let train_loss = total / count as f64;
        let val_loss = if split.validation.is_empty() {
            train_loss
        } else {
            evaluate(&model, &split.validation)?
        };
        if !val_loss.is_finite() {
            return Err(diverged(epoch, steps, "validation loss", val_loss));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&record);
        records.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.snapshot()));
        }
    }

    let (_, selected_epoch, weights) = best.expect("at least one epoch");
    model.restore(&weights);
    let test_loss = if split.test.is_empty() {
        f64::NAN
    } else {
        evaluate(&model, &split.test)?
    };
    let metrics = RunMetrics {
        method: cfg.method,
        seed,
        config_hash: config_hash.to_string(),
        epochs: records,
        selected_epoch,
        test_loss,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((model, metrics))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    /// Welch p-value against the next row; `None` for the last row.
    pub p_vs_next: Option<f64>,
}

/// Per-method test loss statistics, best (lowest mean) first.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        let mut methods: Vec<Method> = Vec::new();
        for r in runs {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let losses = |m: Method| -> Vec<f64> {
            runs.iter()
                .filter(|r| r.method == m)
                .map(|r| r.test_loss)
                .collect()
        };
        let mut rows: Vec<(SummaryRow, Vec<f64>)> = methods
            .into_iter()
            .map(|m| {
                let l = losses(m);
                let row = SummaryRow {
                    method: m,
                    mean: mean(&l),
                    std: std_dev(&l),
                    p_vs_next: None,
                };
                (row, l)
            })
            .collect();
        rows.sort_by(|a, b| a.0.mean.total_cmp(&b.0.mean));
        for i in 0..rows.len().saturating_sub(1) {
            let p = welch_t_test(&rows[i].1, &rows[i + 1].1).map(|w| w.p);
            rows[i].0.p_vs_next = p;
        }
        Self {
            rows: rows.into_iter().map(|(r, _)| r).collect(),
        }
    }

    pub fn row(&self, method: Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean,std,p_vs_next\n");
        for r in &self.rows {
            let p = r.p_vs_next.map(|p| format!("{p:.6e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.6},{:.6},{}\n", r.method, r.mean, r.std, p));
        }
        out
    }
}

/// One session of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Session {
    pub method: Method,
    pub seed: u64,
}

/// All (method, seed) sessions in method-major order.
pub fn sessions(methods: &[Method], seeds: &[u64]) -> Vec<Session> {
    methods
        .iter()
        .flat_map(|&method| seeds.iter().map(move |&seed| Session { method, seed }))
        .collect()
}

/// Runs `job` for every session on a pool of `threads` workers and returns
/// the results in session order.
pub fn run_sessions<T, E, J>(sessions: &[Session], threads: usize, job: J) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    J: Fn(Session) -> Result<T, E> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| sessions.par_iter().map(|&s| job(s)).collect())
}

/// Trains every (method, seed) pair at 32-bit precision and summarizes test losses.
pub fn run_experiment(
    base: &ModelConfig,
    data: &TrainData,
    methods: &[Method],
    seeds: &[u64],
    threads: usize,
    config_hash: &str,
) -> Result<(Vec<RunMetrics>, Summary), TrainError> {
    let runs = run_sessions(&sessions(methods, seeds), threads, |s| {
        let cfg = ModelConfig {
            method: s.method,
            ..base.clone()
        };
        train::<f32>(&cfg, data, s.seed, config_hash, |_| {}).map(|(_, m)| m)
    })?;
    let summary = Summary::from_runs(&runs);
    Ok((runs, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellIndex, GridSpec};
    use crate::trajectories::{BucketConfig, Step};

    fn toy_vocab(n: u32) -> Arc<HierarchicalVocabulary> {
        let spec = GridSpec::default();
        let cells = (0..n).map(|i| CellIndex::new(2, i % 20, i / 20));
        Arc::new(HierarchicalVocabulary::build(cells, &spec).unwrap())
    }

    fn seq(places: &[u32]) -> TokenizedTrajectory {
        TokenizedTrajectory {
            steps: places
                .iter()
                .map(|&p| Step {
                    place: p,
                    dow: 0,
                    tod: 0,
                    dur: 0,
                })
                .collect(),
        }
    }

    fn small_cfg(method: Method, epochs: usize) -> ModelConfig {
        ModelConfig {
            method,
            d: 8,
            readout: 8,
            hidden: 8,
            dow_dim: 2,
            tod_dim: 2,
            dur_dim: 2,
            epochs,
            batch_size: 4,
            optimizer: crate::engine::Adam {
                lr: 1e-2,
                ..Default::default()
            },
            ..ModelConfig::default()
        }
    }

    fn data(vocab: Arc<HierarchicalVocabulary>, train: Vec<TokenizedTrajectory>) -> TrainData {
        TrainData {
            attrs: AttributeSizes::from(&BucketConfig::default()),
            split: DatasetSplit {
                validation: train.clone(),
                test: train.clone(),
                train,
            },
            vocab,
        }
    }

    #[test]
    fn single_place_loss_vanishes() {
        let d = data(toy_vocab(1), vec![seq(&[0; 6]); 8]);
        let (_, m) = train::<f32>(&small_cfg(Method::Nonhier, 5), &d, 0, "h", |_| {}).unwrap();
        assert!(m.test_loss < 1e-6, "{}", m.test_loss);
    }

    #[test]
    fn deterministic_and_selects_best_epoch() {
        let seqs: Vec<_> = (0..12u32)
            .map(|i| seq(&[i % 7, (i + 1) % 7, (i + 3) % 7, i % 5]))
            .collect();
        let d = data(toy_vocab(7), seqs);
        let cfg = small_cfg(Method::Hier, 6);
        let mut seen = Vec::new();
        let (m1, mut a) = train::<f32>(&cfg, &d, 3, "h", |r| seen.push(*r)).unwrap();
        let (_, mut b) = train::<f32>(&cfg, &d, 3, "h", |_| {}).unwrap();
        a.wall_time_s = 0.0;
        b.wall_time_s = 0.0;
        assert_eq!(a, b);
        assert_eq!(seen, a.epochs);
        let min = a
            .epochs
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_loss(), min);
        assert!(m1.places.max_region_spread() == 0.0);
        let (_, c) = train::<f32>(&cfg, &d, 4, "h", |_| {}).unwrap();
        assert_ne!(a.test_loss, c.test_loss);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let d = data(toy_vocab(3), vec![seq(&[1])]);
        let err = train::<f32>(&small_cfg(Method::Nonhier, 1), &d, 0, "h", |_| {}).unwrap_err();
        assert_eq!(err, TrainError::EmptyTrain);
    }

    #[test]
    fn divergence_is_reported() {
        let d = data(toy_vocab(5), vec![seq(&[0, 1, 2, 3]); 4]);
        let mut cfg = small_cfg(Method::Nonhier, 2);
        cfg.optimizer.lr = f64::MAX;
        cfg.clip_norm = f64::MAX;
        let err = train::<f32>(&cfg, &d, 0, "h", |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn summary_orders_and_tests() {
        let run = |method, seed, test_loss| RunMetrics {
            method,
            seed,
            config_hash: String::new(),
            epochs: vec![],
            selected_epoch: 1,
            test_loss,
            wall_time_s: 0.0,
        };
        let mut runs = Vec::new();
        for s in 0..5u64 {
            let e = s as f64 * 0.01;
            runs.push(run(Method::Nonhier, s, 8.0 + e));
            runs.push(run(Method::Hier, s, 7.0 + e));
        }
        let summary = Summary::from_runs(&runs);
        assert_eq!(summary.rows[0].method, Method::Hier);
        assert!((summary.rows[0].mean - 7.02).abs() < 1e-12);
        assert!(summary.rows[0].p_vs_next.unwrap() < 1e-6);
        assert_eq!(summary.rows[1].p_vs_next, None);
        let csv = summary.to_csv();
        assert!(csv.starts_with("method,mean,std,p_vs_next\nhier,7.020000,"));
        assert!(csv.ends_with("nonhier,8.020000,0.015811,\n"), "{csv}");
    }

    #[test]
    fn sessions_keep_order_across_threads() {
        let s = sessions(&[Method::Hier, Method::Nonhier], &[0, 1, 2]);
        assert_eq!(s.len(), 6);
        let a: Vec<u64> =
            run_sessions::<_, (), _>(&s, 3, |x| Ok(x.seed * 10 + x.method as u64)).unwrap();
        let b: Vec<u64> =
            run_sessions::<_, (), _>(&s, 1, |x| Ok(x.seed * 10 + x.method as u64)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[3], 3);
    }
}

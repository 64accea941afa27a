//! Continual training over a stream: per-event early stopping, post-event
//! evaluation, ablations and checkpoints.

mod config;
mod model;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Dims, ExpertSelection, TrainConfig, SWEEPABLE};
pub use model::{LossBreakdown, Model, Objective, ParamId, StepInputs};

use crate::error::{Error, Result};
use crate::io::{derived_rng, write_atomic};
use crate::metrics::{classification_metrics, ClassificationMetrics, ForgettingMatrix};
use crate::moe::Expansion;
use crate::stream::{Batch, Sample, Split, Stream};

const TAG_VAL_SPLIT: u64 = 3;
const TAG_VAL_ENV: u64 = 4;
const TAG_TEST_ENV: u64 = 5;

pub const LOG_FORMAT: &str = "contlab-eval-log";
pub const CHECKPOINT_FORMAT: &str = "contlab-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Mean losses and validation score of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventHistory {
    pub event: usize,
    pub epochs: Vec<EpochRecord>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub event: usize,
    pub epoch: usize,
    pub batch: usize,
    pub expert: usize,
    pub scores: Vec<f64>,
}

/// Everything a continual run reports. Contains no timing, so identical
/// inputs give identical logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub num_events: usize,
    pub has_future: bool,
    /// `accuracy[k][j]` after training through event `k + 1`, on event `j + 1`.
    pub accuracy: ForgettingMatrix,
    /// Full metrics behind `accuracy`, same indexing.
    pub metrics: Vec<Vec<ClassificationMetrics>>,
    /// Future-split metrics after each event.
    pub future: Vec<ClassificationMetrics>,
    /// Final model on the pooled test splits of events `1..=K`.
    pub overall: ClassificationMetrics,
    pub events: Vec<EventHistory>,
    pub expansions: Vec<ExpansionRecord>,
    pub expert_count: usize,
}

impl EvalLog {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let log: EvalLog = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if log.format != LOG_FORMAT {
            return Err(Error::Validation(format!(
                "not an evaluation log: {}",
                log.format
            )));
        }
        Ok(log)
    }

    /// Metrics the comparison tables rank by: the final future split when
    /// the stream has one, else the pooled test splits.
    pub fn headline(&self) -> ClassificationMetrics {
        match (self.has_future, self.future.last()) {
            (true, Some(f)) => *f,
            _ => self.overall,
        }
    }

    /// Expert count minus the first one.
    pub fn new_experts(&self) -> usize {
        self.expert_count.saturating_sub(1)
    }
}

/// Output of [`train_continual`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Model,
    pub log: EvalLog,
    /// Wall-clock seconds per event.
    pub seconds: Vec<f64>,
}

fn check_stream(stream: &Stream, config: &TrainConfig) -> Result<()> {
    let m = &stream.manifest;
    if m.d_t != config.dims.d_t {
        return Err(Error::Validation(format!(
            "dims.d_t = {} but the stream has d_t = {}",
            config.dims.d_t, m.d_t
        )));
    }
    if m.d_v != config.dims.d_v {
        return Err(Error::Validation(format!(
            "dims.d_v = {} but the stream has d_v = {}",
            config.dims.d_v, m.d_v
        )));
    }
    Ok(())
}

/// Trains event `k` with early stopping on validation macro F1 and restores
/// the best epoch.
pub fn train_event(
    model: &mut Model,
    train: &[&Sample],
    k: usize,
    expansions: &mut Vec<ExpansionRecord>,
) -> Result<EventHistory> {
    let c = model.config.clone();
    if train.len() < 10 {
        return Err(Error::Input(format!(
            "event {k} has {} training samples, need at least 10",
            train.len()
        )));
    }
    model.begin_event(k)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut derived_rng(c.seed, &[TAG_VAL_SPLIT, k as u64]));
    let n_val = (train.len() as f64 * c.val_fraction).round() as usize;
    if n_val == 0 || n_val == train.len() {
        return Err(Error::Config(format!(
            "val_fraction {} leaves an empty split for event {k}",
            c.val_fraction
        )));
    }
    let pick = |idx: &[usize]| -> Vec<&Sample> { idx.iter().map(|&i| train[i]).collect() };
    let val = Batch::from_samples(&pick(&order[..n_val]))?;
    let fit = Batch::from_samples(&pick(&order[n_val..]))?;

    let mut history = EventHistory {
        event: k,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, Model, usize)> = None;
    let mut pending = Vec::new();
    let mut bad_epochs = 0;
    for epoch in 0..c.max_epochs {
        let mut sum = LossBreakdown::default();
        let batches = crate::stream::batch_iter(fit.len(), c.batch_size, c.seed, k, epoch)?;
        let mut counted = 0;
        for (b, idx) in batches.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (loss, inputs) = model.train_step(&fit.select(idx))?;
            if let (Some(Expansion::Created(expert)), Some(scores)) =
                (inputs.expansion, inputs.scores)
            {
                // snapshots from before the expansion would undo it
                best = None;
                pending.push(ExpansionRecord {
                    event: k,
                    epoch,
                    batch: b,
                    expert,
                    scores,
                });
            }
            sum.vp += loss.vp;
            sum.cl += loss.cl;
            sum.vg += loss.vg;
            sum.dm += loss.dm;
            sum.total += loss.total;
            counted += 1;
        }
        let n = counted.max(1) as f64;
        let mean = LossBreakdown {
            vp: sum.vp / n,
            cl: sum.cl / n,
            vg: sum.vg / n,
            dm: sum.dm / n,
            total: sum.total / n,
        };
        let mut rng = derived_rng(c.seed, &[TAG_VAL_ENV, k as u64]);
        let f1 = model.evaluate(&val, k as f64, &mut rng)?.macro_f1;
        history.epochs.push(EpochRecord {
            epoch,
            loss: mean,
            val_macro_f1: f1,
        });
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, model.clone(), pending.len()));
            history.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= c.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, snapshot, kept)) = best {
        *model = snapshot;
        pending.truncate(kept);
    }
    expansions.extend(pending);
    Ok(history)
}

/// Recomputes the initial state from event 1's training split with the
/// current parameters and freezes it.
pub fn freeze_initial_state(model: &mut Model, event1_train: &[&Sample]) -> Result<()> {
    model.init_state.reset();
    for chunk in event1_train.chunks(model.config.batch_size) {
        model.accumulate_initial_state(&Batch::from_samples(chunk)?)?;
    }
    model.init_state.freeze();
    Ok(())
}

/// Time label used for event `j`'s test split.
pub fn tau_for(config: &TrainConfig, stream: &Stream, j: usize) -> f64 {
    if j > stream.num_events() {
        config.future_tau.unwrap_or(j as f64)
    } else {
        j as f64
    }
}

/// Predicted fake probabilities on event `j`'s test split, with the `ê` draws
/// seeded by `(row, j)`.
pub fn test_predictions(
    model: &Model,
    stream: &Stream,
    row: usize,
    j: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let batch = stream.batch_of(j, Split::Test)?;
    let mut rng = derived_rng(model.config.seed, &[TAG_TEST_ENV, row as u64, j as u64]);
    let p = model.predict_proba(&batch, tau_for(&model.config, stream, j), &mut rng)?;
    Ok((p, batch.y.iter().map(|&y| y as u8).collect()))
}

/// Metrics of `model` on every test split, as row `row` of the forgetting
/// matrix, plus the future split and the pooled training-event splits.
pub fn evaluate_row(
    model: &Model,
    stream: &Stream,
    row: usize,
) -> Result<(
    Vec<ClassificationMetrics>,
    Option<ClassificationMetrics>,
    ClassificationMetrics,
)> {
    let k_events = stream.num_events();
    let mut per_event = Vec::with_capacity(k_events);
    let (mut all_p, mut all_y) = (Vec::new(), Vec::new());
    for j in 1..=k_events {
        let (p, y) = test_predictions(model, stream, row, j)?;
        per_event.push(classification_metrics(&p, &y)?);
        all_p.extend(p);
        all_y.extend(y);
    }
    let future = match stream.manifest.future_event() {
        Some(f) => {
            let (p, y) = test_predictions(model, stream, row, f)?;
            Some(classification_metrics(&p, &y)?)
        }
        None => None,
    };
    Ok((per_event, future, classification_metrics(&all_p, &all_y)?))
}

/// Trains on events `1..=K` in order, evaluating after each one.
pub fn train_continual(stream: &Stream, config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    check_stream(stream, config)?;
    let k_events = stream.num_events();
    let has_future = stream.manifest.future;
    let mut model = Model::new(config.clone())?;
    let mut accuracy = ForgettingMatrix::new(k_events, has_future);
    let mut metrics = Vec::new();
    let mut future = Vec::new();
    let mut events = Vec::new();
    let mut expansions = Vec::new();
    let mut seconds = Vec::new();
    let mut overall = None;
    for k in 1..=k_events {
        let start = Instant::now();
        let train = stream.samples_of(k, Split::Train);
        events.push(train_event(&mut model, &train, k, &mut expansions)?);
        if k == 1 && config.use_env_feature {
            freeze_initial_state(&mut model, &train)?;
        }
        let (row, fut, pooled) = evaluate_row(&model, stream, k)?;
        for (j, m) in row.iter().enumerate() {
            accuracy.set(k - 1, j, m.accuracy);
        }
        if let Some(f) = fut {
            accuracy.set(k - 1, k_events, f.accuracy);
            future.push(f);
        }
        metrics.push(row);
        overall = Some(pooled);
        seconds.push(start.elapsed().as_secs_f64());
    }
    let log = EvalLog {
        format: LOG_FORMAT.into(),
        version: FORMAT_VERSION,
        config: config.clone(),
        num_events: k_events,
        has_future,
        accuracy,
        metrics,
        future,
        overall: overall.ok_or_else(|| Error::Input("stream has no events".into()))?,
        events,
        expansions,
        expert_count: model.dpm.num_experts(),
    };
    Ok(RunOutput {
        model,
        log,
        seconds,
    })
}

/// The four model variants compared by [`run_ablations`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDpm,
    NoSharedExpert,
    NoEnvFeature,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoDpm,
        Variant::NoSharedExpert,
        Variant::NoEnvFeature,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDpm => "no_dpm",
            Variant::NoSharedExpert => "no_shared_expert",
            Variant::NoEnvFeature => "no_env_feature",
        }
    }

    pub fn apply(&self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoDpm => c.use_dpm = false,
            Variant::NoSharedExpert => c.use_shared_expert = false,
            Variant::NoEnvFeature => c.use_env_feature = false,
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub output: RunOutput,
}

/// Trains every variant for every seed, in parallel. Results come back in
/// variant-major, seed-minor order.
pub fn run_ablations(
    stream: &Stream,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let mut c = variant.apply(config);
            c.seed = seed;
            Ok(AblationRun {
                variant,
                seed,
                output: train_continual(stream, &c)?,
            })
        })
        .collect()
}

/// Per-variant mean and standard deviation of the pooled metrics, with the
/// mean change against the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean: [f64; 5],
    pub std: [f64; 5],
    /// Mean over the five metrics of `variant − full`.
    pub avg_delta: f64,
}

pub fn ablation_table(runs: &[(Variant, ClassificationMetrics)]) -> Result<Vec<AblationRow>> {
    let stats = |v: Variant| -> Option<([f64; 5], [f64; 5])> {
        let vals: Vec<[f64; 5]> = runs
            .iter()
            .filter(|(x, _)| *x == v)
            .map(|(_, m)| m.as_array())
            .collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for i in 0..5 {
            mean[i] = vals.iter().map(|a| a[i]).sum::<f64>() / n;
            std[i] = (vals.iter().map(|a| (a[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt();
        }
        Some((mean, std))
    };
    let (full_mean, _) = stats(Variant::Full)
        .ok_or_else(|| Error::Input("ablation table needs the full variant".into()))?;
    Ok(Variant::ALL
        .iter()
        .filter_map(|&v| {
            let (mean, std) = stats(v)?;
            let avg_delta = mean.iter().zip(&full_mean).map(|(a, b)| a - b).sum::<f64>() / 5.0;
            Some(AblationRow {
                variant: v,
                mean,
                std,
                avg_delta,
            })
        })
        .collect())
}

/// Serialized model state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.model.config.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

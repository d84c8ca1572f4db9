//! Deterministic training and teacher-forced evaluation.
//!
//! Each sequence gets its own tape; gradients are accumulated over a batch
//! of sequences and averaged before one Adam step. All randomness (shuffle
//! order, latent noise, history dropout) comes from one seeded stream, so a
//! run is fully determined by the corpus, the configuration and the seed.

use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AutodiffError, Gradients, RngStream, Tape};
use crate::hash::fnv1a;
use crate::models::{HeadSizes, LatentMode, Model, ModelConfig, ModelKind, PassOptions};
use crate::tokenizer::TokenTrack;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<u64>,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub kl_anneal_steps: u64,
    pub history_dropout_p: f64,
    pub seed: u64,
    pub eval_split_fraction: f64,
    /// Evaluations without sufficient improvement before stopping.
    pub patience: usize,
    pub eval_every: u64,
    /// Improvement in nats required to reset patience.
    pub min_improvement: f64,
    pub clip_norm: f64,
    /// Stop as soon as train cross-entropy drops below this value.
    pub stop_below_train_ce: Option<f64>,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        TrainConfig {
            model: ModelConfig::new(kind),
            learning_rate: 1e-3,
            epochs: 100,
            max_steps: None,
            batch_size: 16,
            kl_anneal_steps: 2000,
            history_dropout_p: 0.3,
            seed: 0,
            eval_split_fraction: 0.1,
            patience: 5,
            eval_every: 200,
            min_improvement: 0.005,
            clip_norm: 5.0,
            stop_below_train_ce: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = TrainError::InvalidConfig;
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(bad("learning_rate must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.history_dropout_p) {
            return Err(bad("history_dropout_p must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.eval_split_fraction) {
            return Err(bad("eval_split_fraction must be in [0, 1)"));
        }
        if self.kl_anneal_steps == 0 {
            return Err(bad("kl_anneal_steps must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.epochs == 0 {
            return Err(bad("batch_size, eval_every and epochs must be positive"));
        }
        if self.model.hidden == 0 {
            return Err(bad("hidden must be positive"));
        }
        if self.patience == 0 {
            return Err(bad("patience must be positive"));
        }
        Ok(())
    }
}

/// Linear KL warm-up: `min(1, step / anneal_steps)`.
pub fn kl_weight(step: u64, anneal_steps: u64) -> f64 {
    if step >= anneal_steps {
        1.0
    } else {
        step as f64 / anneal_steps as f64
    }
}

/// Whether a track belongs to the validation split. Depends only on the
/// track id, so regenerating a corpus keeps its split.
pub fn is_validation(source: &str, fraction: f64) -> bool {
    let bucket = fnv1a(source.as_bytes()) % 10_000;
    (bucket as f64) < fraction * 10_000.0
}

pub fn split_tracks(tracks: &[TokenTrack], fraction: f64) -> (Vec<TokenTrack>, Vec<TokenTrack>) {
    tracks.iter().cloned().partition(|t| !is_validation(&t.source, fraction))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

/// Teacher-forced metrics, averaged over tracks of per-note means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub ce_total: f64,
    pub ce_pitch: f64,
    pub ce_octave: f64,
    pub ce_delay: f64,
    pub kl: f64,
    /// Fraction of predicted positions whose every head is right.
    pub accuracy: f64,
    pub tracks: usize,
}

/// Noise-free evaluation (`z = mu`, no history dropout).
pub fn evaluate(model: &Model, tracks: &[TokenTrack]) -> Result<EvalResult, TrainError> {
    let mut sums = [0.0f64; 5];
    let mut correct = 0usize;
    let mut positions = 0usize;
    for track in tracks {
        let mut tape = Tape::new(&model.store);
        let loss = model.track_loss(&mut tape, track, &mut PassOptions::eval())?;
        let n = loss.notes as f64;
        sums[0] += loss.recon_sum / n;
        sums[1] += loss.head_sums[0] / n;
        sums[2] += loss.head_sums[1] / n;
        sums[3] += loss.head_sums[2] / n;
        sums[4] += loss.kl;
        correct += loss.correct;
        positions += loss.positions;
    }
    let k = tracks.len() as f64;
    Ok(EvalResult {
        ce_total: sums[0] / k,
        ce_pitch: sums[1] / k,
        ce_octave: sums[2] / k,
        ce_delay: sums[3] / k,
        kl: sums[4] / k,
        accuracy: correct as f64 / positions.max(1) as f64,
        tracks: tracks.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: Split,
    pub ce_total: f64,
    pub ce_pitch: f64,
    pub ce_octave: f64,
    pub ce_delay: f64,
    pub kl: f64,
    pub beta: f64,
}

impl MetricRow {
    fn new(step: u64, split: Split, e: &EvalResult, beta: f64) -> Self {
        MetricRow {
            step,
            split,
            ce_total: e.ce_total,
            ce_pitch: e.ce_pitch,
            ce_octave: e.ce_octave,
            ce_delay: e.ce_delay,
            kl: e.kl,
            beta,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn last(&self, split: Split) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn at(&self, step: u64, split: Split) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.step == step && r.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Plateau,
    TargetReached,
    StepLimit,
    EpochLimit,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the lowest monitored CE.
    pub best: Model,
    pub best_step: u64,
    pub last: Model,
    pub steps: u64,
    pub log: MetricLog,
    pub stop: StopReason,
    pub train_tracks: usize,
    pub valid_tracks: usize,
}

struct Monitor {
    best_value: f64,
    best_step: u64,
    best: Option<Model>,
    plateau_ref: f64,
    stale: usize,
}

/// Train one model on `tracks`.
///
/// `on_eval` is called with the rows of every evaluation as they are logged.
pub fn train(tracks: &[TokenTrack], sizes: HeadSizes, config: &TrainConfig, on_eval: &mut dyn FnMut(&[MetricRow])) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if tracks.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (train_set, valid_set) = split_tracks(tracks, config.eval_split_fraction);
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    let root = RngStream::new(config.seed);
    let mut init_rng = root.fork(1);
    let mut rng = root.fork(2);
    let mut model = Model::new(config.model, sizes, &mut init_rng)?;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let dropout = match config.model.kind {
        ModelKind::Vrash => config.history_dropout_p,
        _ => 0.0,
    };

    let mut grads = Gradients::zeros_like(&model.store);
    let mut log = MetricLog::default();
    let mut monitor = Monitor {
        best_value: f64::INFINITY,
        best_step: 0,
        best: None,
        plateau_ref: f64::INFINITY,
        stale: 0,
    };
    let mut step: u64 = 0;
    let mut last_eval: Option<u64> = None;
    let mut stop = StopReason::EpochLimit;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for _epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let beta = kl_weight(step, config.kl_anneal_steps);
            grads.reset();
            for &i in batch {
                let tape_store = &model.store;
                let mut tape = Tape::new(tape_store);
                let mut opts = PassOptions {
                    beta,
                    latent: LatentMode::Sample(&mut rng),
                    history_dropout: dropout,
                };
                let loss = model.track_loss(&mut tape, &train_set[i], &mut opts)?;
                if !tape.scalar(loss.objective).is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                tape.backward(loss.objective)?.accumulate_params(&tape, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            grads.clip_global_norm(config.clip_norm);
            adam_step(&mut model.store, &grads, &adam)?;
            step += 1;

            let at_limit = config.max_steps.is_some_and(|m| step >= m);
            if step % config.eval_every == 0 || at_limit {
                last_eval = Some(step);
                if let Some(reason) = eval_and_log(&model, &train_set, &valid_set, step, config, &mut log, &mut monitor, on_eval)? {
                    stop = reason;
                    break 'epochs;
                }
            }
            if at_limit {
                stop = StopReason::StepLimit;
                break 'epochs;
            }
        }
    }
    if last_eval != Some(step) {
        if let Some(reason) = eval_and_log(&model, &train_set, &valid_set, step, config, &mut log, &mut monitor, on_eval)? {
            stop = reason;
        }
    }

    Ok(TrainOutcome {
        best: monitor.best.unwrap_or_else(|| model.clone()),
        best_step: monitor.best_step,
        last: model,
        steps: step,
        log,
        stop,
        train_tracks: train_set.len(),
        valid_tracks: valid_set.len(),
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_and_log(
    model: &Model,
    train_set: &[TokenTrack],
    valid_set: &[TokenTrack],
    step: u64,
    config: &TrainConfig,
    log: &mut MetricLog,
    monitor: &mut Monitor,
    on_eval: &mut dyn FnMut(&[MetricRow]),
) -> Result<Option<StopReason>, TrainError> {
    let beta = kl_weight(step, config.kl_anneal_steps);
    let tr = evaluate(model, train_set)?;
    let start = log.rows.len();
    log.rows.push(MetricRow::new(step, Split::Train, &tr, beta));
    let watched = if valid_set.is_empty() {
        tr.ce_total
    } else {
        let va = evaluate(model, valid_set)?;
        log.rows.push(MetricRow::new(step, Split::Valid, &va, beta));
        va.ce_total
    };
    on_eval(&log.rows[start..]);
    if !tr.ce_total.is_finite() || !watched.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }

    if watched < monitor.best_value {
        monitor.best_value = watched;
        monitor.best_step = step;
        monitor.best = Some(model.clone());
    }
    if watched < monitor.plateau_ref - config.min_improvement {
        monitor.plateau_ref = watched;
        monitor.stale = 0;
    } else {
        monitor.stale += 1;
    }
    if config.stop_below_train_ce.is_some_and(|t| tr.ce_total < t) {
        return Ok(Some(StopReason::TargetReached));
    }
    if monitor.stale >= config.patience {
        return Ok(Some(StopReason::Plateau));
    }
    Ok(None)
}

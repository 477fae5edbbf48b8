//! Mini-batch training with best-validation checkpointing, evaluation over a
//! split, and the matched-config epoch-time benchmark.

use crate::data::{Dataset, Label, MultimodalSample};
use crate::error::{Error, Result};
use crate::metrics::{emotion_metrics, sentiment_metrics, EmotionMetrics, SentimentMetrics};
use crate::model::{sample_loss, Architecture, ModelBundle, ModelConfig, OutputKind};
use crate::tensor::{Algorithm, OptimizerState, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Algorithm,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    /// Early-stop patience on validation loss, in epochs.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            optimizer: Algorithm::Adam,
            lr: 1e-3,
            clip_norm: Some(0.8),
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub mean_grad_norm: f64,
    pub seconds: f64,
    /// Shuffled sample indices consumed this epoch (bench fairness evidence;
    /// not serialized).
    #[serde(skip)]
    pub sample_order: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

fn check_compatible(bundle: &ModelBundle, data: &Dataset) -> Result<()> {
    if data.manifest.dims != bundle.config.input_dims {
        return Err(Error::DimMismatch(format!(
            "dataset dims {:?} vs model {:?}",
            data.manifest.dims, bundle.config.input_dims
        )));
    }
    if data.manifest.label_kind != bundle.config.output.label_kind() {
        return Err(Error::DimMismatch(
            "dataset label kind does not match the model output".into(),
        ));
    }
    Ok(())
}

fn tape_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch.wrapping_mul(0x85eb_ca77_c2b2_ae63))
        .wrapping_add(batch)
}

struct EpochStats {
    loss: f64,
    mean_grad_norm: f64,
    seconds: f64,
    order: Vec<u32>,
}

/// One pass over the training split: shuffle, batch, forward/backward,
/// optimizer step.
fn run_epoch(
    bundle: &mut ModelBundle,
    samples: &[MultimodalSample],
    opt: &mut OptimizerState,
    tc: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let start = Instant::now();
    let n = samples.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut loss_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
        let mut tape = Tape::seeded(tape_seed(tc.seed, epoch as u64, b as u64));
        let (bound, binder) = bundle.bind(&mut tape);
        let mut batch_loss = None;
        let non_finite = |e: Error, stage: &str| match e {
            Error::NonFinite(what) => Error::NonFiniteLoss(format!(
                "epoch {epoch}, batch {b}, {stage}: {what}"
            )),
            other => other,
        };
        for &idx in chunk {
            let s = &samples[idx as usize];
            let out = bundle
                .run(&mut tape, &bound, s, true)
                .map_err(|e| non_finite(e, "forward"))?;
            let l = sample_loss(&mut tape, out, &s.label)?;
            batch_loss = Some(match batch_loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = batch_loss.expect("non-empty batch");
        let mean = tape.scale(total, 1.0 / chunk.len() as f64)?;
        loss_sum += tape.value(mean)[0] * chunk.len() as f64;
        tape.backward(mean).map_err(|e| non_finite(e, "backward"))?;
        bundle.write_grads(&tape, &binder)?;
        let norm = opt
            .step(&mut bundle.params_mut())
            .map_err(|e| non_finite(e, "optimizer step"))?;
        norm_sum += norm;
        batches += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / n as f64,
        mean_grad_norm: norm_sum / batches as f64,
        seconds: start.elapsed().as_secs_f64(),
        order,
    })
}

/// Mean loss over a split in eval mode (no dropout, no gradients).
pub fn split_loss(bundle: &ModelBundle, samples: &[MultimodalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let (bound, _) = bundle.bind(&mut tape);
        for s in chunk {
            let out = bundle.run(&mut tape, &bound, s, false)?;
            let l = sample_loss(&mut tape, out, &s.label)?;
            sum += tape.value(l)[0];
        }
    }
    Ok(sum / samples.len() as f64)
}

/// Train in place; the parameters left in `bundle` are the best-validation
/// checkpoint. Identical seed and config give a bit-identical loss
/// trajectory.
pub fn train(bundle: &mut ModelBundle, data: &Dataset, tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    check_compatible(bundle, data)?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let mut opt = OptimizerState::new(tc.optimizer, tc.lr).with_clip(tc.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_valid = f64::INFINITY;
    let mut best_params: Option<ModelBundle> = None;
    let mut stopped_early = false;
    for epoch in 0..tc.epochs {
        let stats = run_epoch(bundle, &data.train, &mut opt, tc, epoch, &mut rng)?;
        let valid_loss = split_loss(bundle, &data.valid)?;
        log.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            valid_loss,
            mean_grad_norm: stats.mean_grad_norm,
            seconds: stats.seconds,
            sample_order: stats.order,
        });
        if valid_loss < best_valid {
            best_valid = valid_loss;
            best_epoch = epoch;
            best_params = Some(bundle.clone());
        }
        if epoch - best_epoch >= tc.patience {
            stopped_early = true;
            break;
        }
    }
    if let Some(best) = best_params {
        *bundle = best;
    }
    Ok(TrainReport {
        epochs: log,
        best_epoch,
        best_valid_loss: best_valid,
        stopped_early,
    })
}

/// Metric bundle produced by [`evaluate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvalMetrics {
    Sentiment(SentimentMetrics),
    Emotions(EmotionMetrics),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub loss: f64,
    pub metrics: EvalMetrics,
}

/// Eval-mode predictions plus the metric suite for the model's output kind.
pub fn evaluate(bundle: &ModelBundle, samples: &[MultimodalSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let mut loss_sum = 0.0;
    let mut preds: Vec<f64> = Vec::new();
    let mut logits: Vec<Vec<f64>> = Vec::new();
    let mut sentiments: Vec<f64> = Vec::new();
    let mut emotions: Vec<[u8; 4]> = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let (bound, _) = bundle.bind(&mut tape);
        for s in chunk {
            let out = bundle.run(&mut tape, &bound, s, false)?;
            let l = sample_loss(&mut tape, out, &s.label)?;
            loss_sum += tape.value(l)[0];
            match (&s.label, bundle.config.output) {
                (Label::Sentiment(y), OutputKind::Regression) => {
                    preds.push(tape.value(out)[0]);
                    sentiments.push(*y);
                }
                (Label::Emotions(bits), OutputKind::Emotions) => {
                    logits.push(tape.value(out).to_vec());
                    emotions.push(*bits);
                }
                _ => {
                    return Err(Error::DimMismatch(
                        "sample label kind does not match the model output".into(),
                    ))
                }
            }
        }
    }
    let metrics = match bundle.config.output {
        OutputKind::Regression => EvalMetrics::Sentiment(sentiment_metrics(&preds, &sentiments)?),
        OutputKind::Emotions => EvalMetrics::Emotions(emotion_metrics(&logits, &emotions)?),
    };
    Ok(Evaluation {
        n: samples.len(),
        loss: loss_sum / samples.len() as f64,
        metrics,
    })
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// The full evaluation bundle emitted on the CLI: metric suite plus loss,
/// parameter count, and wall-clock per-epoch statistics when available.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub arch: String,
    pub param_count: usize,
    pub n: usize,
    pub loss: f64,
    pub metrics: EvalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_seconds_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_seconds_std: Option<f64>,
}

impl MetricsReport {
    pub fn new(bundle: &ModelBundle, eval: Evaluation, log: Option<&TrainReport>) -> Self {
        let timing = log.map(|r| {
            let secs: Vec<f64> = r.epochs.iter().map(|e| e.seconds).collect();
            let mean = secs.iter().sum::<f64>() / secs.len() as f64;
            let var = if secs.len() > 1 {
                secs.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                    / (secs.len() - 1) as f64
            } else {
                0.0
            };
            (mean, var.sqrt())
        });
        MetricsReport {
            schema_version: METRICS_SCHEMA_VERSION,
            arch: bundle.arch.to_string(),
            param_count: bundle.param_count(),
            n: eval.n,
            loss: eval.loss,
            metrics: eval.metrics,
            epoch_seconds_mean: timing.map(|t| t.0),
            epoch_seconds_std: timing.map(|t| t.1),
        }
    }
}

/// Epoch-time table for one architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchResult {
    pub arch: String,
    pub param_count: usize,
    pub epoch_seconds: Vec<f64>,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

/// Wall-clock seconds per training epoch, matched config and batch order
/// across architectures, one warmup epoch excluded, `repeats` timed epochs.
pub fn bench_epoch_time(
    archs: &[Architecture],
    data: &Dataset,
    config: &ModelConfig,
    tc: &TrainConfig,
    repeats: usize,
) -> Result<Vec<BenchResult>> {
    if repeats < 3 {
        return Err(Error::InvalidRange(format!(
            "bench needs >= 3 repeats, got {repeats}"
        )));
    }
    if archs.is_empty() {
        return Err(Error::Usage("bench needs at least one architecture".into()));
    }
    let mut results = Vec::with_capacity(archs.len());
    let mut reference_orders: Option<Vec<Vec<u32>>> = None;
    for &arch in archs {
        let mut bundle = ModelBundle::build(arch, config, tc.seed)?;
        check_compatible(&bundle, data)?;
        let mut opt = OptimizerState::new(tc.optimizer, tc.lr).with_clip(tc.clip_norm);
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut orders = Vec::with_capacity(repeats + 1);
        let mut seconds = Vec::with_capacity(repeats);
        for epoch in 0..=repeats {
            let stats = run_epoch(&mut bundle, &data.train, &mut opt, tc, epoch, &mut rng)?;
            orders.push(stats.order);
            if epoch > 0 {
                seconds.push(stats.seconds);
            }
        }
        // identical seeds must consume identical sample orders (fairness)
        match &reference_orders {
            None => reference_orders = Some(orders),
            Some(reference) => {
                if reference != &orders {
                    return Err(Error::InvalidConfig(
                        "bench consumed different sample orders across architectures".into(),
                    ));
                }
            }
        }
        let mean = seconds.iter().sum::<f64>() / seconds.len() as f64;
        let var = seconds
            .iter()
            .map(|s| (s - mean) * (s - mean))
            .sum::<f64>()
            / (seconds.len() - 1) as f64;
        results.push(BenchResult {
            arch: arch.to_string(),
            param_count: bundle.param_count(),
            epoch_seconds: seconds,
            mean_seconds: mean,
            std_seconds: var.sqrt(),
        });
    }
    Ok(results)
}

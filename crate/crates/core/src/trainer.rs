//! Batching, Adam, and the epoch loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::model::{MergeScore, ModelConfig, ModelParams, Objective, ParamTensor};
use crate::objectives::{batch_loss, BatchOptions, CeNormalization};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub dim: usize,
    pub channels: usize,
    pub channel_width: usize,
    pub objective: Objective,
    pub seed: u64,
    pub max_len: usize,
    pub dropout_p: f64,
    pub tied: bool,
    pub merge_score: MergeScore,
    pub ce_normalization: CeNormalization,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this. Off by default.
    pub clip_norm: Option<f64>,
    /// Threads for per-sentence work; results do not depend on it.
    pub workers: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 15,
            batch_size: 512,
            tau: 1.2,
            dim: 256,
            channels: 128,
            channel_width: 2,
            objective: Objective::Ceco,
            seed: 0,
            max_len: crate::data::DEFAULT_MAX_LEN,
            dropout_p: 0.1,
            tied: false,
            merge_score: MergeScore::Flattened,
            ce_normalization: CeNormalization::Token,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            workers: 1,
            checkpoint_dir: None,
            metrics_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("tau", self.tau), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.model_config(2).map(|_| ())
    }

    /// Model configuration for a vocabulary of `vocab_size` tokens.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            dim: self.dim,
            channels: self.channels,
            channel_width: self.channel_width,
            tied: self.tied,
            tau: self.tau,
            objective: self.objective,
            dropout_p: self.dropout_p,
            merge_score: self.merge_score,
            init: Default::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam moments, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    if let Some((tensor, index)) = grads.find_non_finite() {
        return Err(Error::NonFinite { tensor, index });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for which in ParamTensor::ALL {
        let Some(g) = grads.tensor(which) else { continue };
        let p = params.tensor_mut(which).ok_or_else(|| Error::shape(which, "missing tensor"))?;
        let m = state.m.tensor_mut(which).expect("moments mirror params");
        let v = state.v.tensor_mut(which).expect("moments mirror params");
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Sentence indices for one epoch: a permutation seeded by `(seed, epoch)`,
/// cut into chunks of `batch_size` (the last may be shorter).
pub fn make_batches(n_sentences: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n_sentences == 0 {
        return Err(Error::Config("corpus is empty after filtering".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n_sentences).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32 | batch as u64)
}

fn global_norm(g: &ModelParams) -> f64 {
    g.tensors().flat_map(|(_, t)| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Batch losses averaged with weights proportional to batch size.
    pub mean_loss: f64,
    pub ce_part: Option<f64>,
    pub contrastive_part: Option<f64>,
    pub evals: Vec<(String, f64)>,
    pub seconds: f64,
}

/// Zero-shot evaluation run after every epoch; returns `(name, score)` pairs.
pub type EvalHook<'a> = dyn FnMut(&ModelParams, &ModelConfig) -> Result<Vec<(String, f64)>> + 'a;

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
    header_written: bool,
}

impl MetricsLog {
    fn create(path: &Path, config: &TrainConfig) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            header_written: false,
        };
        let json = serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        log.write(&format!("# config: {json}"))?;
        Ok(log)
    }

    fn write(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        if !self.header_written {
            let mut header = String::from("epoch,mean_loss,ce_part,contrastive_part");
            for (name, _) in &m.evals {
                header.push(',');
                header.push_str(name);
            }
            self.write(&header)?;
            self.header_written = true;
        }
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut line = format!("{},{},{},{}", m.epoch, m.mean_loss, opt(m.ce_part), opt(m.contrastive_part));
        for (_, score) in &m.evals {
            line.push_str(&format!(",{score}"));
        }
        self.write(&line)
    }
}

/// Trains a fresh model on `corpus` (token-id sentences over a vocabulary of
/// `vocab_size`). With one worker, or any number of workers, the result is a
/// pure function of the inputs.
pub fn train(
    config: &TrainConfig,
    vocab_size: usize,
    vocab_fingerprint: &str,
    corpus: &[Vec<usize>],
    mut eval: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = config.model_config(vocab_size)?;
    if let Some(bad) = corpus.iter().flatten().find(|&&t| t >= vocab_size) {
        return Err(Error::Vocabulary { id: *bad, vocab_size });
    }
    let mut params = ModelParams::new(&model_config, config.seed)?;
    let mut state = AdamState::with_betas(&params, config.beta1, config.beta2, config.eps);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = config
        .metrics_path
        .as_deref()
        .map(|p| MetricsLog::create(p, config))
        .transpose()?;
    let checkpoint = |params: &ModelParams, state: &AdamState, epoch: usize| Checkpoint {
        meta: CheckpointMeta {
            config: model_config.clone(),
            vocab_fingerprint: vocab_fingerprint.to_string(),
            seed: config.seed,
            epoch,
            adam: Some([state.beta1, state.beta2, state.eps]),
        },
        params: params.clone(),
        optimizer: Some(state.clone()),
    };

    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let batches = make_batches(corpus.len(), config.batch_size, config.seed, epoch)?;
        let (mut loss_sum, mut ce_sum, mut cont_sum) = (0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let sentences: Vec<Vec<usize>> = batch.iter().map(|&i| corpus[i].clone()).collect();
            let opts = BatchOptions {
                workers: config.workers,
                dropout_seed: dropout_seed(config.seed, epoch, b),
                ce_normalization: config.ce_normalization,
                fault: None,
            };
            let out = pool.install(|| batch_loss(&params, &model_config, &sentences, &opts))?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {} batch {}",
                    out.loss,
                    epoch + 1,
                    b + 1
                )));
            }
            let w = batch.len() as f64;
            loss_sum += w * out.loss;
            ce_sum += w * out.ce_part.unwrap_or(0.0);
            cont_sum += w * out.contrastive_part.unwrap_or(0.0);
            let mut grads = out.grads.to_dense(&params);
            if let Some(limit) = config.clip_norm {
                let norm = global_norm(&grads);
                if norm > limit {
                    let s = limit / norm;
                    for which in ParamTensor::ALL {
                        if let Some(t) = grads.tensor_mut(which) {
                            t.iter_mut().for_each(|x| *x *= s);
                        }
                    }
                }
            }
            adam_step(&mut params, &grads, &mut state, config.lr).map_err(|e| match e {
                Error::NonFinite { tensor, index } => Error::Numeric(format!(
                    "non-finite gradient in {tensor} at entry {index} (epoch {} batch {})",
                    epoch + 1,
                    b + 1
                )),
                other => other,
            })?;
        }
        let n = corpus.len() as f64;
        let evals = match eval.as_mut() {
            Some(hook) => hook(&params, &model_config)?,
            None => Vec::new(),
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            mean_loss: loss_sum / n,
            ce_part: config.objective.uses_dembedding().then_some(ce_sum / n),
            contrastive_part: (config.objective != Objective::Ce).then_some(cont_sum / n),
            evals,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}/{}: loss {:.6} ({:.1}s)",
            m.epoch,
            config.epochs,
            m.mean_loss,
            m.seconds
        );
        if let Some(log) = log.as_mut() {
            log.record(&m)?;
        }
        if let Some(dir) = &config.checkpoint_dir {
            save_checkpoint(dir.join(format!("epoch-{:03}.ssae", epoch + 1)), &checkpoint(&params, &state, epoch + 1))?;
        }
        metrics.push(m);
    }
    let last = checkpoint(&params, &state, config.epochs);
    if let Some(dir) = &config.checkpoint_dir {
        save_checkpoint(dir.join("final.ssae"), &last)?;
    }
    Ok(TrainOutcome {
        checkpoint: last,
        metrics,
    })
}

//! Optimisation: warmup schedule, Adam, clipping, accumulation, checkpoints.

use crate::data::{derive_seed, shuffled_batches, spec_augment, AugmentPolicy, Utterance};
use crate::decoding::{DecodeConfig, Method, Recognizer};
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::lexicon::SememeLexicon;
use crate::losses::{
    combined_loss, ctc_loss, label_smoothed_ce, sememe_bce_logits, sememe_targets, LossBreakdown,
};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }

    /// Model shape for this profile.
    pub fn model_config(self) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::default(),
            Profile::Paper => ModelConfig {
                d_model: 256,
                heads: 4,
                encoder_blocks: 12,
                decoder_blocks: 6,
                d_ffn: 2048,
                ..ModelConfig::default()
            },
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::config(format!("unknown profile {s:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Optimisation settings. The model mode and dropout rate live in [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub profile: Profile,
    pub lr: f64,
    pub warmup: u64,
    pub clip: f64,
    /// Batches per optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Checkpoints averaged into the final model.
    pub average_k: usize,
    pub adam: AdamConfig,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            lr: 0.002,
            warmup: 25_000,
            clip: 5.0,
            accumulation: 4,
            epochs: 240,
            batch_size: 12,
            lambda: 0.3,
            alpha: 0.3,
            label_smoothing: 0.1,
            seed: 1,
            average_k: 30,
            adam: AdamConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            lr: 0.002,
            warmup: 500,
            clip: 5.0,
            accumulation: 1,
            epochs: 20,
            batch_size: 8,
            average_k: 5,
            augment: AugmentPolicy {
                enabled: true,
                freq_masks: 2,
                max_freq_width: 8,
                time_masks: 1,
                max_time_width: 5,
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("warmup", self.warmup as usize),
            ("accumulation", self.accumulation),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("average_k", self.average_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("train.{name} must be at least 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr = {} must be positive", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config(format!("train.clip = {} must be positive", self.clip)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "train.label_smoothing = {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("train.adam needs betas in [0, 1) and eps > 0"));
        }
        crate::losses::effective_alpha(self.lambda, self.alpha, true).map(|_| ())
    }
}

/// `base · min(step/warmup, sqrt(warmup/step))`.
pub fn lr_schedule(step: u64, base: f64, warmup: u64) -> f64 {
    assert!(step >= 1 && warmup >= 1, "lr_schedule needs step ≥ 1 and warmup ≥ 1");
    let (s, w) = (step as f64, warmup as f64);
    base * (s / w).min((w / s).sqrt())
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the applied factor.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::arg(format!("clip norm {max_norm} must be positive")));
    }
    if let Some((_, p)) = store
        .iter()
        .find(|(_, p)| p.trainable && p.grad.data().iter().any(|g| !g.is_finite()))
    {
        return Err(Error::Numeric(format!("non-finite gradient in parameter {}", p.name)));
    }
    let norm = store.grad_norm();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    Ok(scale)
}

/// Adam with bias correction; one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Forward pass of the training objective for one utterance. Returns the
/// mixer root (when gradients are wanted) and the loss terms.
pub fn utterance_objective(
    model: &Model,
    g: &mut Graph<'_>,
    features: &Tensor,
    tokens: &[usize],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let mc = &model.config;
    let h = model.encode(g, features, features.rows())?;
    let lp = model.ctc_head(g, h);
    let ctc = ctc_loss(g.value(lp), tokens)?;
    let (ctc_value, ctc_grad) = if ctc.feasible {
        (ctc.loss, ctc.grad)
    } else {
        log::warn!("CTC infeasible for {} labels over {} frames; term skipped", tokens.len(), g.value(lp).rows());
        (0.0, Tensor::zeros(g.value(lp).shape()))
    };
    let ctc_node = g.scalar_loss(lp, ctc_value, ctc_grad);

    let mut tokens_in = Vec::with_capacity(tokens.len() + 1);
    tokens_in.push(mc.sos());
    tokens_in.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(mc.eos());
    let mask = vec![true; targets.len()];
    let dv = model.decode_tokens(g, h, &tokens_in)?;
    let ce = label_smoothed_ce(g.value(dv.logits), &targets, cfg.label_smoothing, &mask)?;
    let aed_node = g.scalar_loss(dv.logits, ce.loss, ce.grad);

    let mut nodes = vec![ctc_node, aed_node];
    let mut se = 0.0;
    if let Some(s) = dv.sememe_logits {
        let y = sememe_targets(&model.lexicon, &targets, mc.eos())?;
        let bce = sememe_bce_logits(g.value(s), &y, &mask)?;
        se = bce.loss;
        nodes.push(g.scalar_loss(s, bce.loss, bce.grad));
    }
    let sp = mc.predicts_sememes();
    if [ctc_value, ce.loss, se].iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss (ctc {ctc_value}, aed {}, se {se})",
            ce.loss
        )));
    }
    let breakdown = combined_loss(ctc_value, ce.loss, se, cfg.lambda, cfg.alpha, sp)?;
    let (wc, wa, ws) = breakdown.weights();
    let root = g.weighted_sum(&nodes, &[wc, wa, ws][..nodes.len()]);
    Ok((root, breakdown))
}

/// Per-step metrics line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub ctc: f64,
    pub aed: f64,
    pub se: f64,
    pub combined: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub dev_loss: f64,
    pub dev_cer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Step(StepMetrics),
    Epoch(EpochMetrics),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub step: u64,
    pub dev_loss: f64,
    pub dev_cer: f64,
    pub path: PathBuf,
}

/// Model plus optimiser state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.params, config.adam);
        Ok(Self { model, config, adam })
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    /// Accumulates gradients over `micro_batches` and applies one update.
    /// Every utterance is weighted by one over the total utterance count, so
    /// the update equals one step on the concatenated batch. `aug_seed`
    /// seeds dropout and augmentation.
    pub fn optimizer_step(&mut self, micro_batches: &[Vec<&Utterance>], aug_seed: u64) -> Result<StepMetrics> {
        let total: usize = micro_batches.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::arg("optimizer step without utterances"));
        }
        let step = self.adam.steps() + 1;
        self.model.params.zero_grads();
        let scale = 1.0 / total as f64;
        let mut sums = [0.0; 4];
        let mut k = 0u64;
        for (j, batch) in micro_batches.iter().enumerate() {
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(aug_seed, &[j as u64, 2]));
            let grads = {
                let mut g = Graph::new(&self.model.params).with_dropout(rng);
                let mut roots = Vec::with_capacity(batch.len());
                for utt in batch {
                    let feats = spec_augment(&utt.features, &self.config.augment, derive_seed(aug_seed, &[k, 1]));
                    k += 1;
                    let (root, b) = utterance_objective(&self.model, &mut g, &feats, &utt.tokens, &self.config)
                        .map_err(|e| halt(step, &utt.id, e))?;
                    for (s, v) in sums.iter_mut().zip([b.ctc, b.aed, b.se, b.combined]) {
                        *s += v * scale;
                    }
                    roots.push(root);
                }
                let ones = vec![1.0; roots.len()];
                let root = g.weighted_sum(&roots, &ones);
                g.backward(root)
            };
            grads.accumulate_into(&mut self.model.params, scale);
        }
        let grad_norm = self.model.params.grad_norm();
        let clip_scale = clip_gradients(&mut self.model.params, self.config.clip).map_err(|e| halt(step, "batch", e))?;
        let lr = lr_schedule(step, self.config.lr, self.config.warmup);
        self.adam.step(&mut self.model.params, lr);
        Ok(StepMetrics {
            step,
            lr,
            ctc: sums[0],
            aed: sums[1],
            se: sums[2],
            combined: sums[3],
            grad_norm,
            clip_scale,
        })
    }

    /// Mean combined loss (no dropout or augmentation) and attention-rescoring CER.
    pub fn evaluate(&self, dev: &[Utterance], decode: &DecodeConfig) -> Result<(f64, f64)> {
        if dev.is_empty() {
            return Err(Error::arg("empty dev set"));
        }
        let rec = Recognizer::new(&self.model, *decode);
        let (mut loss, mut errors, mut len) = (0.0, 0, 0);
        for utt in dev {
            let mut g = Graph::new(&self.model.params);
            let (_, b) = utterance_objective(&self.model, &mut g, &utt.features, &utt.tokens, &self.config)?;
            loss += b.combined;
            let h = self.model.encode_features(&utt.features)?;
            let hyp = rec.recognize_encoded(&h, Method::AttentionRescoring)?;
            errors += edit_distance(&utt.tokens, &hyp.tokens).distance;
            len += utt.tokens.len();
        }
        Ok((loss / dev.len() as f64, errors as f64 / len.max(1) as f64))
    }
}

fn halt(step: u64, what: &str, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step} ({what}): {msg}")),
        other => other,
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<CheckpointRecord>,
    pub metrics_path: PathBuf,
    pub last_step: u64,
}

/// Runs `config.epochs` epochs over `train`, writing `metrics.jsonl` and one
/// checkpoint per epoch under `out_dir/checkpoints`.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    decode: &DecodeConfig,
    lexicon: SememeLexicon,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    model_config.validate()?;
    let model = Model::new(model_config.clone(), lexicon, derive_seed(config.seed, &[1]))?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut records: Vec<CheckpointRecord> = Vec::new();

    for epoch in 1..=config.epochs {
        let groups = shuffled_batches(train_set.len(), config.batch_size, derive_seed(config.seed, &[2, epoch as u64]));
        for chunk in groups.chunks(config.accumulation) {
            let micro: Vec<Vec<&Utterance>> = chunk
                .iter()
                .map(|idx| idx.iter().map(|&i| &train_set[i]).collect())
                .collect();
            let aug_seed = derive_seed(config.seed, &[3, trainer.steps() + 1]);
            let m = trainer.optimizer_step(&micro, aug_seed);
            let m = m.map_err(|e| halted(e, &records, &mut metrics))?;
            writeln!(metrics, "{}", serde_json::to_string(&MetricsRecord::Step(m))?)?;
        }
        let dev = trainer.evaluate(dev_set, decode).and_then(|(loss, cer)| {
            if loss.is_finite() {
                Ok((loss, cer))
            } else {
                Err(Error::Numeric(format!("non-finite dev loss after epoch {epoch}")))
            }
        });
        let (dev_loss, dev_cer) = dev.map_err(|e| halted(e, &records, &mut metrics))?;
        let step = trainer.steps();
        let e = EpochMetrics {
            epoch,
            step,
            dev_loss,
            dev_cer,
        };
        writeln!(metrics, "{}", serde_json::to_string(&MetricsRecord::Epoch(e))?)?;
        metrics.flush()?;
        let path = ckpt_dir.join(format!("epoch-{epoch:03}.ckpt"));
        save_checkpoint(&trainer.model, &path)?;
        log::info!("epoch {epoch}: step {step}, dev loss {dev_loss:.4}, dev CER {dev_cer:.4}");
        records.push(CheckpointRecord {
            epoch,
            step,
            dev_loss,
            dev_cer,
            path,
        });
    }
    Ok(TrainOutcome {
        records,
        metrics_path,
        last_step: trainer.steps(),
    })
}

/// Adds the last good checkpoint to a numeric failure.
fn halted(e: Error, records: &[CheckpointRecord], metrics: &mut impl std::io::Write) -> Error {
    let _ = metrics.flush();
    match e {
        Error::Numeric(msg) => {
            let last = records
                .last()
                .map_or_else(|| "none".to_string(), |r| r.path.display().to_string());
            Error::Numeric(format!("{msg}; last good checkpoint: {last}"))
        }
        other => other,
    }
}

/// Mean of the `K` checkpoints with the lowest dev loss (ties: earlier epoch).
pub fn average_checkpoints(
    records: &[CheckpointRecord],
    k: usize,
    expected: &ModelConfig,
    lexicon: &SememeLexicon,
) -> Result<Model> {
    if records.is_empty() {
        return Err(Error::arg("no checkpoints to average"));
    }
    if k == 0 {
        return Err(Error::arg("checkpoint average K must be at least 1"));
    }
    if k > records.len() {
        log::warn!("average K = {k} exceeds {} available checkpoints; averaging all", records.len());
    }
    let mut ranked: Vec<&CheckpointRecord> = records.iter().collect();
    ranked.sort_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss).then(a.epoch.cmp(&b.epoch)));
    ranked.truncate(k);
    let mut avg = load_checkpoint(&ranked[0].path, Some(expected), lexicon.clone())?;
    for (n, rec) in ranked.iter().enumerate().skip(1) {
        let next = load_checkpoint(&rec.path, Some(expected), lexicon.clone())?;
        let inv = 1.0 / (n + 1) as f64;
        for ((_, src), dst) in next.params.iter().zip(avg.params.iter_mut()) {
            for (a, x) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *a += (x - *a) * inv;
            }
        }
    }
    Ok(avg)
}

/// Parses a metrics log back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests;

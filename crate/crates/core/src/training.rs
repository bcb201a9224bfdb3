//! Two-phase training: cross-entropy only, then joint cross-entropy plus
//! compression loss with the feature extractor in the loop.
//!
//! Phase 1 trains encoder and decoder through the channel with no masking
//! (the extractor stays frozen because it is never bound to a graph). Phase
//! 2 resumes from the phase-1 checkpoint and optimizes
//! `omega1 * L_ce + omega2 * L_rho` end to end, with straight-through
//! gradients flowing into the extractor. Batches are task-pure and
//! round-robin over the training tasks; every batch draws a fresh SNR and
//! every sample a fresh fading gain.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelRealization};
use crate::fem::{FemConfig, FemParams};
use crate::model::{Model, ModelConfig, ModelError};
use crate::nn::{Param, ParamBinder};
use crate::tasks::{Corpus, TaskId, TaskSample, PAD_ID};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "semcom-checkpoint v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at phase {phase} step {step}")]
    NonFiniteLoss { phase: u8, step: u64 },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint version mismatch: found `{found}`")]
    VersionMismatch { found: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("tensor `{tensor}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Cross-entropy weight in the phase-2 loss.
    pub omega1: f32,
    /// Compression-ratio weight in the phase-2 loss.
    pub omega2: f32,
    /// Per-batch SNR draw range, dB.
    pub snr_range_db: (f32, f32),
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 30,
            phase2_epochs: 30,
            learning_rate: 3e-4,
            batch_size: 32,
            omega1: 1e3,
            omega2: 10.0,
            snr_range_db: (-5.0, 25.0),
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !self.omega1.is_finite() || !self.omega2.is_finite() {
            return Err(TrainError::Config("loss weights must be finite".into()));
        }
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(TrainError::Config("empty SNR range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn tag(&self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Per-step loss record; one line of the training trace.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub step: u64,
    pub phase: u8,
    pub l_ce: f64,
    pub l_rho: f64,
    pub combined: f64,
    pub rho: f64,
    pub snr_db: f32,
    pub task: TaskId,
}

pub fn write_trace_csv<W: Write>(reports: &[LossReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# schema=semcom.trace.v1")?;
    writeln!(w, "step,phase,l_ce,l_rho,rho,snr_db,task")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.2},{}",
            r.step,
            r.phase,
            r.l_ce,
            r.l_rho,
            r.rho,
            r.snr_db,
            r.task.name()
        )?;
    }
    Ok(())
}

/// Mean over target positions of the negative log probability of the target
/// token. Probabilities are clamped at 1e-9 before the log; the flag reports
/// whether any clamp fired.
pub fn cross_entropy(probs: &Tensor, targets: &[usize]) -> (Tensor, bool) {
    assert_eq!(
        probs.rows(),
        targets.len(),
        "dimension error: {} probability rows for {} targets",
        probs.rows(),
        targets.len()
    );
    let cols: Vec<usize> = targets.iter().map(|&t| t - 1).collect();
    let picked = probs.pick_per_row(&cols);
    let clamped = picked.values().iter().any(|&p| p < 1e-9);
    let loss = picked.clamp_min(1e-9).log().mean_all().neg();
    (loss, clamped)
}

/// Adam with decoupled weight decay. Moments are keyed by parameter
/// identity; a step with any non-finite gradient is skipped and counted.
pub struct AdamW {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    skipped: u64,
    moments: HashMap<u64, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(learning_rate: f32, weight_decay: f32) -> AdamW {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            skipped: 0,
            moments: HashMap::new(),
        }
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    /// Applies one update to every parameter present in `grads`. Returns
    /// false when the step was skipped because of a non-finite gradient.
    pub fn apply(&mut self, params: &mut [(String, &mut Param)], grads: &HashMap<u64, Vec<f32>>) -> bool {
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (_, p) in params.iter_mut() {
            let Some(g) = grads.get(&p.id()) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.values[i]);
            }
        }
        true
    }
}

/// How the mask stage behaves in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Phase 1: no extractor in the graph, every row transmitted.
    Bypass,
    /// Phase 2: extractor scores and straight-through threshold.
    Fem,
    /// Extractor bypassed by a literal all-ones mask (diagnostics).
    ForcedOnes,
}

/// Scalar pieces of one sample's forward pass.
pub struct SampleLoss {
    pub ce: Tensor,
    pub l_rho: Option<Tensor>,
    pub rho: f64,
    pub clamp_fired: bool,
    pub deep_fade: bool,
}

/// What the receiver sees for one prompt, plus the mask bookkeeping.
pub struct PipelineOutput {
    pub received: Tensor,
    pub rho: f64,
    pub l_rho: Option<Tensor>,
    pub deep_fade: bool,
}

/// Transmitter and channel half of the pipeline: encoder -> mask -> filter
/// -> symbolize -> fade -> equalize -> feature matrix at the receiver.
pub fn pipeline_features(
    model: &Model,
    fem: &FemParams,
    prompt_ids: &[usize],
    snr_db: f32,
    realization: &ChannelRealization,
    noise_rng: &mut ChaCha8Rng,
    mode: MaskMode,
    binder: &ParamBinder,
) -> Result<PipelineOutput, TrainError> {
    let z = model.encode(prompt_ids, binder)?;
    let (compressed, rho, l_rho) = match mode {
        MaskMode::Bypass => (z, 1.0, None),
        MaskMode::ForcedOnes => {
            let ones = Tensor::ones(z.rows(), 1);
            let masked = z.mul(&ones);
            let (kept, _) = channel::filter(&masked, &ones);
            (kept, 1.0, Some(ones.mean_all()))
        }
        MaskMode::Fem => {
            let mask = fem.forward(&z, snr_db, binder);
            let masked = z.mul(&mask.hard);
            let (kept, _) = channel::filter(&masked, &mask.hard);
            let rho = crate::fem::compression_ratio(&mask.hard) as f64;
            (kept, rho, Some(mask.hard.mean_all()))
        }
    };
    let (received, deep_fade) = channel::apply_channel(&compressed, realization, noise_rng);
    Ok(PipelineOutput {
        received,
        rho,
        l_rho,
        deep_fade,
    })
}

/// Encoder -> mask -> filter -> channel -> teacher-forced decoder -> CE.
pub fn sample_forward(
    model: &Model,
    fem: &FemParams,
    sample: &TaskSample,
    snr_db: f32,
    realization: &ChannelRealization,
    noise_rng: &mut ChaCha8Rng,
    mode: MaskMode,
    binder: &ParamBinder,
) -> Result<SampleLoss, TrainError> {
    let out = pipeline_features(
        model,
        fem,
        &sample.prompt.ids,
        snr_db,
        realization,
        noise_rng,
        mode,
        binder,
    )?;
    let mut prefix = vec![PAD_ID];
    prefix.extend_from_slice(&sample.target.ids[..sample.target.len() - 1]);
    let probs = model.decoder_probs(&out.received, &prefix, binder)?;
    let (ce, clamp_fired) = cross_entropy(&probs, &sample.target.ids);
    Ok(SampleLoss {
        ce,
        l_rho: out.l_rho,
        rho: out.rho,
        clamp_fired,
        deep_fade: out.deep_fade,
    })
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(c.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct BatchOutcome {
    grads: HashMap<u64, Vec<f32>>,
    l_ce: f64,
    l_rho: f64,
    rho: f64,
}

pub struct Trainer {
    pub model: Model,
    pub fem: FemParams,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, fem: FemParams, config: TrainConfig) -> Result<Trainer, TrainError> {
        config.validate()?;
        Ok(Trainer { model, fem, config })
    }

    /// Fresh model and extractor from seeds derived from the train seed.
    pub fn init(
        model_cfg: ModelConfig,
        fem_cfg: FemConfig,
        config: TrainConfig,
    ) -> Result<Trainer, TrainError> {
        let model = Model::new(model_cfg, mix(config.seed, 1, 0))?;
        let fem = FemParams::new(model.config.dim, fem_cfg, mix(config.seed, 2, 0));
        Trainer::new(model, fem, config)
    }

    /// One forward/backward over a batch, gradients merged in sample order.
    fn batch_pass(
        &self,
        batch: &[&TaskSample],
        snr_db: f32,
        phase: Phase,
        step: u64,
    ) -> Result<BatchOutcome, TrainError> {
        let mode = match phase {
            Phase::One => MaskMode::Bypass,
            Phase::Two => MaskMode::Fem,
        };
        let inv_batch = 1.0 / batch.len() as f32;
        let per_sample: Vec<Result<_, TrainError>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let sample_seed = mix(self.config.seed, step, i as u64);
                let mut chan_rng = ChaCha8Rng::seed_from_u64(sample_seed);
                let realization = channel::sample_channel(snr_db, &mut chan_rng);
                let binder = ParamBinder::new();
                let loss = sample_forward(
                    &self.model,
                    &self.fem,
                    sample,
                    snr_db,
                    &realization,
                    &mut chan_rng,
                    mode,
                    &binder,
                )?;
                let combined = match (phase, &loss.l_rho) {
                    (Phase::One, _) => loss.ce.clone(),
                    (Phase::Two, Some(l_rho)) => loss
                        .ce
                        .scale(self.config.omega1)
                        .add(&l_rho.scale(self.config.omega2)),
                    (Phase::Two, None) => unreachable!("phase 2 always produces a mask loss"),
                };
                combined.backward_seeded(inv_batch);
                let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
                for (_, p) in self.model.named_params() {
                    if let Some(g) = binder.grad_of(p) {
                        grads.insert(p.id(), g);
                    }
                }
                for (_, p) in self.fem.named_params() {
                    if let Some(g) = binder.grad_of(p) {
                        grads.insert(p.id(), g);
                    }
                }
                Ok((
                    grads,
                    loss.ce.value() as f64,
                    loss.l_rho.as_ref().map_or(1.0, |t| t.value() as f64),
                    loss.rho,
                ))
            })
            .collect();

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        let mut l_ce = 0.0;
        let mut l_rho = 0.0;
        let mut rho = 0.0;
        for res in per_sample {
            let (g, ce, lr, r) = res?;
            for (id, gv) in g {
                match grads.get_mut(&id) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&gv) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.insert(id, gv);
                    }
                }
            }
            l_ce += ce;
            l_rho += lr;
            rho += r;
        }
        let n = batch.len() as f64;
        Ok(BatchOutcome {
            grads,
            l_ce: l_ce / n,
            l_rho: l_rho / n,
            rho: rho / n,
        })
    }

    fn run_phase(
        &mut self,
        corpus: &Corpus,
        phase: Phase,
        epochs: usize,
    ) -> Result<Vec<LossReport>, TrainError> {
        let mut optimizer = AdamW::new(self.config.learning_rate, self.config.weight_decay);
        let mut reports = Vec::new();
        let mut step: u64 = phase.tag() as u64 * 1_000_000;
        let mut snr_rng =
            ChaCha8Rng::seed_from_u64(mix(self.config.seed, 3, phase.tag() as u64));
        for epoch in 0..epochs {
            let mut per_task: Vec<(TaskId, Vec<Vec<&TaskSample>>)> = Vec::new();
            for task in TaskId::TRAIN {
                let samples = corpus
                    .train
                    .get(&task)
                    .ok_or_else(|| TrainError::Config(format!("no training split for {task}")))?;
                let mut order: Vec<&TaskSample> = samples.iter().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix(
                    self.config.seed,
                    4 + phase.tag() as u64,
                    epoch as u64 * 16 + task as u64,
                ));
                order.shuffle(&mut rng);
                let batches = order
                    .chunks(self.config.batch_size)
                    .map(|c| c.to_vec())
                    .collect();
                per_task.push((task, batches));
            }
            let rounds = per_task.iter().map(|(_, b)| b.len()).max().unwrap_or(0);
            for round in 0..rounds {
                for (task, batches) in &per_task {
                    let Some(batch) = batches.get(round) else {
                        continue;
                    };
                    let snr_db = snr_rng
                        .gen_range(self.config.snr_range_db.0..=self.config.snr_range_db.1);
                    let outcome = self.batch_pass(batch, snr_db, phase, step)?;
                    let combined = match phase {
                        Phase::One => outcome.l_ce,
                        Phase::Two => self.config.omega1 as f64 * outcome.l_ce
                            + self.config.omega2 as f64 * outcome.l_rho,
                    };
                    if !combined.is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            phase: phase.tag(),
                            step,
                        });
                    }
                    let mut params = self.model.named_params_mut();
                    if phase == Phase::Two {
                        params.extend(self.fem.named_params_mut());
                    }
                    optimizer.apply(&mut params, &outcome.grads);
                    reports.push(LossReport {
                        step,
                        phase: phase.tag(),
                        l_ce: outcome.l_ce,
                        l_rho: outcome.l_rho,
                        combined,
                        rho: outcome.rho,
                        snr_db,
                        task: *task,
                    });
                    step += 1;
                }
            }
        }
        Ok(reports)
    }

    /// Phase 1: encoder/decoder training with no compression. The extractor
    /// parameters are untouched.
    pub fn phase1_train(&mut self, corpus: &Corpus) -> Result<Vec<LossReport>, TrainError> {
        self.run_phase(corpus, Phase::One, self.config.phase1_epochs)
    }

    /// Phase 2: joint loss with the extractor active; updates encoder,
    /// extractor, and decoder parameters.
    pub fn phase2_train(&mut self, corpus: &Corpus) -> Result<Vec<LossReport>, TrainError> {
        self.run_phase(corpus, Phase::Two, self.config.phase2_epochs)
    }

    /// Batch-mean cross-entropy on a frozen batch with fixed channel seeds;
    /// used for the phase-boundary continuity check.
    pub fn frozen_batch_ce(
        &self,
        batch: &[&TaskSample],
        snr_db: f32,
        mode: MaskMode,
        channel_seed: u64,
    ) -> Result<f64, TrainError> {
        let mut total = 0.0f64;
        for (i, sample) in batch.iter().enumerate() {
            let mut chan_rng = ChaCha8Rng::seed_from_u64(mix(channel_seed, 7, i as u64));
            let realization = channel::sample_channel(snr_db, &mut chan_rng);
            let binder = ParamBinder::new();
            let loss = sample_forward(
                &self.model,
                &self.fem,
                sample,
                snr_db,
                &realization,
                &mut chan_rng,
                mode,
                &binder,
            )?;
            total += loss.ce.value() as f64;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<(), TrainError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(&self.model, &self.fem, &mut w)
    }
}

fn config_lines(model_cfg: &ModelConfig, fem_cfg: &FemConfig) -> Vec<String> {
    vec![
        format!("config.model.layers {}", model_cfg.layers),
        format!("config.model.dim {}", model_cfg.dim),
        format!("config.model.heads {}", model_cfg.heads),
        format!("config.model.experts {}", model_cfg.experts),
        format!("config.model.top_k {}", model_cfg.top_k),
        format!("config.model.vocab {}", model_cfg.vocab),
        format!("config.model.max_seq {}", model_cfg.max_seq),
        format!("config.model.ffn_hidden {}", model_cfg.ffn_hidden),
        format!("config.model.activation {}", model_cfg.activation),
        format!("config.model.tied_embeddings {}", model_cfg.tied_embeddings),
        format!("config.fem.extractors {}", fem_cfg.extractors),
        format!("config.fem.threshold {}", fem_cfg.threshold),
        format!("config.fem.feature_hidden {}", fem_cfg.feature_hidden),
        format!("config.fem.snr_hidden {}", fem_cfg.snr_hidden),
        format!("config.fem.activation {}", fem_cfg.activation),
    ]
}

/// Textual header (version, config, tensor manifest with offsets) followed
/// by length-prefixed little-endian f32 payloads.
pub fn write_checkpoint<W: Write>(
    model: &Model,
    fem: &FemParams,
    w: &mut W,
) -> Result<(), TrainError> {
    let mut named: Vec<(String, &Param)> = model.named_params();
    named.extend(fem.named_params());

    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    for line in config_lines(&model.config, &fem.config) {
        writeln!(w, "{line}")?;
    }
    let mut offset = 0u64;
    for (name, p) in &named {
        writeln!(w, "tensor {name} {} {} {offset}", p.rows(), p.cols())?;
        offset += 4 + 4 * p.len() as u64;
    }
    writeln!(w, "end-header")?;
    for (_, p) in &named {
        let bytes = (4 * p.len()) as u32;
        w.write_all(&bytes.to_le_bytes())?;
        for v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn parse_kv<'a>(map: &'a HashMap<String, String>, key: &str) -> Result<&'a str, TrainError> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| TrainError::Integrity(format!("missing header field {key}")))
}

fn parse_field<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
) -> Result<T, TrainError> {
    parse_kv(map, key)?
        .parse::<T>()
        .map_err(|_| TrainError::Integrity(format!("unparsable header field {key}")))
}

/// Reads a checkpoint back into a freshly built model and extractor.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<(Model, FemParams), TrainError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model, FemParams), TrainError> {
    let header_end = find_header_end(bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end.0])
        .map_err(|_| TrainError::Integrity("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    let magic = lines
        .next()
        .ok_or_else(|| TrainError::Integrity("empty checkpoint".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::VersionMismatch {
            found: magic.to_string(),
        });
    }
    let mut kv = HashMap::new();
    let mut manifest: Vec<(String, usize, usize, u64)> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(TrainError::Integrity(format!("bad manifest line `{line}`")));
            }
            let rows = parts[1]
                .parse()
                .map_err(|_| TrainError::Integrity(format!("bad rows in `{line}`")))?;
            let cols = parts[2]
                .parse()
                .map_err(|_| TrainError::Integrity(format!("bad cols in `{line}`")))?;
            let off = parts[3]
                .parse()
                .map_err(|_| TrainError::Integrity(format!("bad offset in `{line}`")))?;
            manifest.push((parts[0].to_string(), rows, cols, off));
        } else if let Some((k, v)) = line.split_once(' ') {
            kv.insert(k.to_string(), v.to_string());
        }
    }

    let model_cfg = ModelConfig {
        layers: parse_field(&kv, "config.model.layers")?,
        dim: parse_field(&kv, "config.model.dim")?,
        heads: parse_field(&kv, "config.model.heads")?,
        experts: parse_field(&kv, "config.model.experts")?,
        top_k: parse_field(&kv, "config.model.top_k")?,
        vocab: parse_field(&kv, "config.model.vocab")?,
        max_seq: parse_field(&kv, "config.model.max_seq")?,
        ffn_hidden: parse_field(&kv, "config.model.ffn_hidden")?,
        activation: parse_field(&kv, "config.model.activation")?,
        tied_embeddings: parse_field(&kv, "config.model.tied_embeddings")?,
    };
    let fem_cfg = FemConfig {
        extractors: parse_field(&kv, "config.fem.extractors")?,
        threshold: parse_field(&kv, "config.fem.threshold")?,
        feature_hidden: parse_field(&kv, "config.fem.feature_hidden")?,
        snr_hidden: parse_field(&kv, "config.fem.snr_hidden")?,
        activation: parse_field(&kv, "config.fem.activation")?,
    };

    let mut model = Model::new(model_cfg, 0).map_err(|e| TrainError::Integrity(e.to_string()))?;
    let mut fem = FemParams::new(model.config.dim, fem_cfg, 0);
    let payload = &bytes[header_end.1..];

    let mut by_name: HashMap<String, (usize, usize, u64)> = HashMap::new();
    for (name, rows, cols, off) in manifest {
        by_name.insert(name, (rows, cols, off));
    }
    let mut targets = model.named_params_mut();
    targets.extend(fem.named_params_mut());
    for (name, p) in targets.iter_mut() {
        let (rows, cols, off) = *by_name
            .get(name.as_str())
            .ok_or_else(|| TrainError::Integrity(format!("tensor `{name}` missing from manifest")))?;
        if (rows, cols) != p.shape() {
            return Err(TrainError::ShapeMismatch {
                tensor: name.clone(),
                expected: p.shape(),
                found: (rows, cols),
            });
        }
        let off = off as usize;
        if payload.len() < off + 4 {
            return Err(TrainError::Integrity(format!("truncated before `{name}`")));
        }
        let len = u32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as usize;
        if len != 4 * p.len() {
            return Err(TrainError::Integrity(format!(
                "tensor `{name}` payload length {len} != {}",
                4 * p.len()
            )));
        }
        if payload.len() < off + 4 + len {
            return Err(TrainError::Integrity(format!("truncated payload for `{name}`")));
        }
        let mut cursor = &payload[off + 4..off + 4 + len];
        for v in p.values.iter_mut() {
            let mut buf = [0u8; 4];
            cursor.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        by_name.remove(name.as_str());
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(TrainError::Integrity(format!(
            "manifest lists unknown tensor `{extra}`"
        )));
    }
    Ok((model, fem))
}

fn find_header_end(bytes: &[u8]) -> Result<(usize, usize), TrainError> {
    let marker = b"end-header\n";
    let mut i = 0;
    while i + marker.len() <= bytes.len() {
        if &bytes[i..i + marker.len()] == marker && (i == 0 || bytes[i - 1] == b'\n') {
            return Ok((i, i + marker.len()));
        }
        i += 1;
    }
    Err(TrainError::Integrity("no end-header marker".into()))
}

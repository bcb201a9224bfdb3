//! Experiment harness: SNR sweeps, expert/extractor ablations, analytic
//! cost tables, and their CSV emitters.
//!
//! Each reported figure family maps to exactly one emitter: per-task
//! accuracy-vs-SNR (with mean compression ratio) comes from `run_sweep`,
//! expert-count and extractor-count ablations from `ablation_rows`, and the
//! parameter/FLOPs table from `table1_rows`. CSV output is versioned and
//! byte-stable under a fixed seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_answer, CodecConfig};
use crate::channel::{self};
use crate::fem::FemParams;
use crate::model::{count_flops_per_token, count_params, Model, ModelConfig};
use crate::nn::ParamBinder;
use crate::tasks::{exact_match, Corpus, TaskId, Vocabulary};
use crate::training::{pipeline_features, MaskMode, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFilter {
    Train,
    HeldOut,
    All,
}

impl TaskFilter {
    pub fn tasks(&self) -> Vec<TaskId> {
        match self {
            TaskFilter::Train => TaskId::TRAIN.to_vec(),
            TaskFilter::HeldOut => TaskId::HELD_OUT.to_vec(),
            TaskFilter::All => TaskId::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// SNR grid in dB; must be nonempty and ascending.
    pub snr_grid_db: Vec<f32>,
    pub samples_per_point: usize,
    pub tasks: TaskFilter,
    pub seed: u64,
    /// Run the extractor mask (phase-2 pipeline) instead of sending all rows.
    pub use_fem: bool,
    /// Generation length budget.
    pub l_max: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snr_grid_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            samples_per_point: 500,
            tasks: TaskFilter::All,
            seed: 0,
            use_fem: true,
            l_max: 6,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.snr_grid_db.is_empty() {
            return Err(TrainError::Config("empty SNR grid".into()));
        }
        if self.snr_grid_db.windows(2).any(|w| w[0] > w[1]) {
            return Err(TrainError::Config("SNR grid must be sorted".into()));
        }
        if self.samples_per_point == 0 || self.l_max == 0 {
            return Err(TrainError::Config(
                "samples per point and l_max must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One (task, SNR) cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub task: TaskId,
    pub snr_db: f32,
    pub samples: usize,
    pub exact_match: f64,
    pub mean_rho: f64,
    pub ci_half_width: f64,
}

/// Normal-approximation 95% half-width for a proportion.
pub fn ci_half_width(p: f64, n: usize) -> f64 {
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(c.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Full-pipeline greedy evaluation of one sample at one SNR draw.
/// Returns (hit, rho).
fn eval_one(
    model: &Model,
    fem: &FemParams,
    vocab: &Vocabulary,
    sample: &crate::tasks::TaskSample,
    snr_db: f32,
    l_max: usize,
    use_fem: bool,
    seed: u64,
) -> (u32, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let realization = channel::sample_channel(snr_db, &mut rng);
    let binder = ParamBinder::new();
    let mode = if use_fem { MaskMode::Fem } else { MaskMode::Bypass };
    let out = match pipeline_features(
        model,
        fem,
        &sample.prompt.ids,
        snr_db,
        &realization,
        &mut rng,
        mode,
        &binder,
    ) {
        Ok(out) => out,
        Err(_) => return (0, 1.0),
    };
    let answer = match model.generate(&out.received, l_max) {
        Ok(g) => vocab.render_generation(&g.ids),
        Err(_) => String::new(),
    };
    (exact_match(&answer, &sample.target_text), out.rho)
}

/// Accuracy and mean compression ratio per (task, SNR) cell over the eval
/// split. Items cycle through the split; every item gets its own seeded
/// channel draw, so reruns are byte-identical.
pub fn run_sweep(
    model: &Model,
    fem: &FemParams,
    vocab: &Vocabulary,
    corpus: &Corpus,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>, TrainError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for task in cfg.tasks.tasks() {
        let samples = corpus
            .eval
            .get(&task)
            .ok_or_else(|| TrainError::Config(format!("no eval split for {task}")))?;
        if samples.is_empty() {
            return Err(TrainError::Config(format!("empty eval split for {task}")));
        }
        for (gi, &snr_db) in cfg.snr_grid_db.iter().enumerate() {
            let outcomes: Vec<(u32, f64)> = (0..cfg.samples_per_point)
                .into_par_iter()
                .map(|i| {
                    let sample = &samples[i % samples.len()];
                    let seed = mix(cfg.seed, (task as u64) << 8 | gi as u64, i as u64);
                    eval_one(model, fem, vocab, sample, snr_db, cfg.l_max, cfg.use_fem, seed)
                })
                .collect();
            let hits: u64 = outcomes.iter().map(|(h, _)| *h as u64).sum();
            let rho_sum: f64 = outcomes.iter().map(|(_, r)| r).sum();
            let p = hits as f64 / cfg.samples_per_point as f64;
            rows.push(SweepRow {
                task,
                snr_db,
                samples: cfg.samples_per_point,
                exact_match: p,
                mean_rho: rho_sum / cfg.samples_per_point as f64,
                ci_half_width: ci_half_width(p, cfg.samples_per_point),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# schema=semcom.sweep.v1")?;
    writeln!(w, "task,snr_db,samples,exact_match,mean_rho,ci_half_width")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.2},{},{:.6},{:.6},{:.6}",
            r.task.name(),
            r.snr_db,
            r.samples,
            r.exact_match,
            r.mean_rho,
            r.ci_half_width
        )?;
    }
    Ok(())
}

/// Mean held-out accuracy per SNR for one ablation point, or an explicit
/// gap when the point has no trained checkpoint.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: usize,
    pub snr_db: f32,
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub mean_rho: Option<f64>,
    pub flops_per_token: u64,
    pub total_params: u64,
}

/// Aggregates a sweep into per-SNR means over the held-out tasks for one
/// ablation value. `missing` rows carry the analytic columns only.
pub fn ablation_rows(
    axis: &'static str,
    value: usize,
    model_cfg: &ModelConfig,
    sweep: Option<&[SweepRow]>,
    snr_grid_db: &[f32],
) -> Vec<AblationRow> {
    let flops = count_flops_per_token(model_cfg);
    let params = count_params(model_cfg);
    snr_grid_db
        .iter()
        .map(|&snr_db| {
            let cells: Vec<&SweepRow> = sweep
                .map(|rows| {
                    rows.iter()
                        .filter(|r| (r.snr_db - snr_db).abs() < 1e-6)
                        .collect()
                })
                .unwrap_or_default();
            let (accuracy, mean_rho, samples) = if cells.is_empty() {
                (None, None, 0)
            } else {
                let n = cells.len() as f64;
                (
                    Some(cells.iter().map(|r| r.exact_match).sum::<f64>() / n),
                    Some(cells.iter().map(|r| r.mean_rho).sum::<f64>() / n),
                    cells.iter().map(|r| r.samples).sum(),
                )
            };
            AblationRow {
                axis,
                value,
                snr_db,
                samples,
                accuracy,
                mean_rho,
                flops_per_token: flops,
                total_params: params,
            }
        })
        .collect()
}

pub fn write_ablation_csv<W: std::io::Write>(
    rows: &[AblationRow],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "# schema=semcom.ablation.v1")?;
    writeln!(
        w,
        "axis,value,snr_db,samples,accuracy,mean_rho,flops_per_token,total_params,status"
    )?;
    for r in rows {
        match (r.accuracy, r.mean_rho) {
            (Some(a), Some(m)) => writeln!(
                w,
                "{},{},{:.2},{},{:.6},{:.6},{},{},ok",
                r.axis, r.value, r.snr_db, r.samples, a, m, r.flops_per_token, r.total_params
            )?,
            _ => writeln!(
                w,
                "{},{},{:.2},0,,,{},{},missing",
                r.axis, r.value, r.snr_db, r.flops_per_token, r.total_params
            )?,
        }
    }
    Ok(())
}

/// One line of the cost table: analytic totals for a named configuration.
#[derive(Clone, Debug)]
pub struct Table1Row {
    pub label: String,
    pub experts: usize,
    pub total_params: u64,
    pub flops_per_token: u64,
}

/// The published-architecture configuration used for the analytic check
/// rows: 12 layers per stack, width 768, 12 heads, hidden 3072, a 32128-token
/// vocabulary at context 512, untied head.
pub fn published_base_config(experts: usize) -> ModelConfig {
    ModelConfig {
        layers: 12,
        dim: 768,
        heads: 12,
        experts,
        top_k: 1,
        vocab: 32128,
        max_seq: 512,
        ffn_hidden: 3072,
        activation: crate::nn::Activation::Gelu,
        tied_embeddings: false,
    }
}

pub fn table1_rows(configs: &[(String, ModelConfig)]) -> Vec<Table1Row> {
    configs
        .iter()
        .map(|(label, cfg)| Table1Row {
            label: label.clone(),
            experts: cfg.experts,
            total_params: count_params(cfg),
            flops_per_token: count_flops_per_token(cfg),
        })
        .collect()
}

pub fn write_table1_csv<W: std::io::Write>(rows: &[Table1Row], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# schema=semcom.table1.v1")?;
    writeln!(w, "model,experts,total_params,flops_per_token")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.label, r.experts, r.total_params, r.flops_per_token
        )?;
    }
    Ok(())
}

/// Per-SNR text recovery and task accuracy of the classical link.
#[derive(Clone, Debug)]
pub struct BaselineRow {
    pub snr_db: f32,
    pub samples: usize,
    pub text_recovery: f64,
    pub answer_accuracy: f64,
    pub mean_symbols: f64,
}

pub fn run_baseline_eval(
    model: &Model,
    fem: &FemParams,
    vocab: &Vocabulary,
    corpus: &Corpus,
    cfg: &SweepConfig,
    codec: &CodecConfig,
) -> Result<Vec<BaselineRow>, TrainError> {
    cfg.validate()?;
    let tasks = cfg.tasks.tasks();
    let mut pool = Vec::new();
    for task in &tasks {
        let samples = corpus
            .eval
            .get(task)
            .ok_or_else(|| TrainError::Config(format!("no eval split for {task}")))?;
        pool.extend(samples.iter());
    }
    if pool.is_empty() {
        return Err(TrainError::Config("empty evaluation pool".into()));
    }
    let mut rows = Vec::new();
    for (gi, &snr_db) in cfg.snr_grid_db.iter().enumerate() {
        let outcomes: Vec<(bool, bool, usize)> = (0..cfg.samples_per_point)
            .into_par_iter()
            .map(|i| {
                let sample = pool[i % pool.len()];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xba5e ^ gi as u64, i as u64));
                let out = baseline_answer(
                    model, fem, vocab, sample, snr_db, cfg.l_max, &mut rng, codec,
                );
                (out.text_exact, out.answer_exact, out.symbols)
            })
            .collect();
        let n = cfg.samples_per_point as f64;
        rows.push(BaselineRow {
            snr_db,
            samples: cfg.samples_per_point,
            text_recovery: outcomes.iter().filter(|(t, _, _)| *t).count() as f64 / n,
            answer_accuracy: outcomes.iter().filter(|(_, a, _)| *a).count() as f64 / n,
            mean_symbols: outcomes.iter().map(|(_, _, s)| *s as f64).sum::<f64>() / n,
        });
    }
    Ok(rows)
}

pub fn write_baseline_csv<W: std::io::Write>(
    rows: &[BaselineRow],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "# schema=semcom.baseline.v1")?;
    writeln!(w, "snr_db,samples,text_recovery,answer_accuracy,mean_symbols")?;
    for r in rows {
        writeln!(
            w,
            "{:.2},{},{:.6},{:.6},{:.1}",
            r.snr_db, r.samples, r.text_recovery, r.answer_accuracy, r.mean_symbols
        )?;
    }
    Ok(())
}

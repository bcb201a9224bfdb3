//! Multi-task feature extraction module.
//!
//! Scores every feature row for task relevance given the feedback SNR. The
//! feature matrix and the SNR (in dB) each pass through a small MLP; their
//! concatenation feeds one of B linear extractor modules, chosen per
//! sentence by a top-1 gate over the mean-pooled fused representation. A
//! sigmoid turns the chosen extractor's output into soft keep scores, and a
//! fixed threshold with straight-through gradients produces the hard 0/1
//! mask. If every score falls below the threshold the highest-scoring row is
//! retained anyway, so a transmission is never empty.
//!
//! The gate itself receives no gradient (its argmax is not differentiable);
//! extractors specialize through which inputs the frozen gate routes to them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Linear, Param, ParamBinder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FemConfig {
    /// Extractor modules (B).
    pub extractors: usize,
    /// Keep threshold in (0, 1).
    pub threshold: f32,
    /// Width of the feature representation F_z.
    pub feature_hidden: usize,
    /// Width of the SNR representation F_gamma.
    pub snr_hidden: usize,
    pub activation: Activation,
}

impl Default for FemConfig {
    fn default() -> Self {
        FemConfig {
            extractors: 4,
            threshold: 0.5,
            feature_hidden: 64,
            snr_hidden: 16,
            activation: Activation::Gelu,
        }
    }
}

impl FemConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.extractors == 0 {
            return Err("need at least one extractor".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(format!("threshold {} outside (0, 1)", self.threshold));
        }
        Ok(())
    }
}

/// Soft scores, hard mask, and which extractor produced them.
pub struct MaskPair {
    /// Soft scores in [0, 1], one row per feature row.
    pub soft: Tensor,
    /// Hard 0/1 mask with straight-through gradients, same shape.
    pub hard: Tensor,
    pub extractor_index: usize,
}

impl MaskPair {
    pub fn retained_indices(&self) -> Vec<usize> {
        self.hard
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn retained_count(&self) -> usize {
        self.hard.values().iter().filter(|&&v| v != 0.0).count()
    }
}

pub struct FemParams {
    pub config: FemConfig,
    pub feature_in: Linear,
    pub feature_out: Linear,
    pub snr_in: Linear,
    pub snr_out: Linear,
    /// Top-1 gate weights; never updated (no gradient path through argmax).
    pub gate: Param,
    pub extractors: Vec<Linear>,
}

impl FemParams {
    pub fn new(dim: usize, config: FemConfig, seed: u64) -> FemParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fused = config.snr_hidden + config.feature_hidden;
        let mut extractors: Vec<Linear> = (0..config.extractors)
            .map(|_| Linear::new(fused, 1, &mut rng))
            .collect();
        // Start saturated toward "keep": sigmoid(2) ~ 0.88, so the mask is
        // all-ones until the compression loss pushes scores down.
        for e in &mut extractors {
            e.b.values[0] = 2.0;
        }
        FemParams {
            feature_in: Linear::new(dim, config.feature_hidden, &mut rng),
            feature_out: Linear::new(config.feature_hidden, config.feature_hidden, &mut rng),
            snr_in: Linear::new(1, config.snr_hidden, &mut rng),
            snr_out: Linear::new(config.snr_hidden, config.snr_hidden, &mut rng),
            gate: Param::randn(fused, config.extractors, &mut rng),
            extractors,
            config,
        }
    }

    /// F_gamma broadcast to every row, concatenated with F_z.
    fn fuse(&self, features: &Tensor, snr_db: f32, binder: &ParamBinder) -> Tensor {
        let act = self.config.activation;
        let f_z = self
            .feature_out
            .forward(&act.apply(&self.feature_in.forward(features, binder)), binder);
        let gamma = Tensor::from_vec(1, 1, vec![snr_db]);
        let f_gamma = self
            .snr_out
            .forward(&act.apply(&self.snr_in.forward(&gamma, binder)), binder);
        let rows = vec![0usize; features.rows()];
        Tensor::concat_cols(&[f_gamma.gather_rows(&rows), f_z])
    }

    fn pick_extractor(&self, fused: &Tensor) -> usize {
        let pooled = fused.mean_rows();
        let mut best = 0usize;
        let mut best_score = f32::NEG_INFINITY;
        for k in 0..self.config.extractors {
            let mut score = 0.0f32;
            for (j, &p) in pooled.values().iter().enumerate() {
                score += p * self.gate.values[j * self.config.extractors + k];
            }
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        best
    }

    /// Soft scores and STE-thresholded hard mask for the feature rows of one
    /// sentence, with the never-empty adjustment.
    pub fn forward(&self, features: &Tensor, snr_db: f32, binder: &ParamBinder) -> MaskPair {
        assert!(features.rows() >= 1, "dimension error: no feature rows");
        assert!(snr_db.is_finite(), "SNR must be finite");
        let fused = self.fuse(features, snr_db, binder);
        let k = self.pick_extractor(&fused);
        let soft = self.extractors[k].forward(&fused, binder).sigmoid();
        let mut keep: Vec<bool> = soft
            .values()
            .iter()
            .map(|&v| v >= self.config.threshold)
            .collect();
        if keep.iter().all(|&k| !k) {
            keep[crate::model::argmax(soft.values())] = true;
        }
        MaskPair {
            hard: soft.ste_mask(&keep),
            soft,
            extractor_index: k,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = vec![
            ("fem.feature_in.w".into(), &self.feature_in.w),
            ("fem.feature_in.b".into(), &self.feature_in.b),
            ("fem.feature_out.w".into(), &self.feature_out.w),
            ("fem.feature_out.b".into(), &self.feature_out.b),
            ("fem.snr_in.w".into(), &self.snr_in.w),
            ("fem.snr_in.b".into(), &self.snr_in.b),
            ("fem.snr_out.w".into(), &self.snr_out.w),
            ("fem.snr_out.b".into(), &self.snr_out.b),
            ("fem.gate".into(), &self.gate),
        ];
        for (i, e) in self.extractors.iter().enumerate() {
            out.push((format!("fem.extractor{i}.w"), &e.w));
            out.push((format!("fem.extractor{i}.b"), &e.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = vec![
            ("fem.feature_in.w".into(), &mut self.feature_in.w),
            ("fem.feature_in.b".into(), &mut self.feature_in.b),
            ("fem.feature_out.w".into(), &mut self.feature_out.w),
            ("fem.feature_out.b".into(), &mut self.feature_out.b),
            ("fem.snr_in.w".into(), &mut self.snr_in.w),
            ("fem.snr_in.b".into(), &mut self.snr_in.b),
            ("fem.snr_out.w".into(), &mut self.snr_out.w),
            ("fem.snr_out.b".into(), &mut self.snr_out.b),
            ("fem.gate".into(), &mut self.gate),
        ];
        for (i, e) in self.extractors.iter_mut().enumerate() {
            out.push((format!("fem.extractor{i}.w"), &mut e.w));
            out.push((format!("fem.extractor{i}.b"), &mut e.b));
        }
        out
    }
}

/// Hard threshold with pass-through gradient: forward is the indicator
/// `soft >= threshold`, backward hands the incoming gradient to `soft`
/// unchanged. No never-empty adjustment here.
pub fn ste_threshold(soft: &Tensor, threshold: f32) -> Tensor {
    let keep: Vec<bool> = soft.values().iter().map(|&v| v >= threshold).collect();
    soft.ste_mask(&keep)
}

/// Retained rows over total rows. The mask must contain at least one 1.
pub fn compression_ratio(hard: &Tensor) -> f32 {
    assert!(!hard.is_empty(), "contract violation: empty mask");
    let ones = hard.values().iter().filter(|&&v| v != 0.0).count();
    assert!(
        ones > 0,
        "contract violation: all-zero mask reached compression_ratio"
    );
    ones as f32 / hard.len() as f32
}

//! Trainable parameters and the small layer vocabulary the model is built
//! from.
//!
//! Parameters live outside the autodiff graph as plain value buffers. Each
//! forward pass binds the parameters it touches through a [`ParamBinder`],
//! which hands out one leaf tensor per parameter and step; gradients from
//! every use (and every sample of a batch) accumulate on that leaf until the
//! optimizer harvests them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A named, trainable value buffer.
#[derive(Clone)]
pub struct Param {
    id: u64,
    rows: usize,
    cols: usize,
    pub values: Vec<f32>,
}

impl Param {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Param {
        assert_eq!(values.len(), rows * cols);
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            rows,
            cols,
            values,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Param {
        Param::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: f32) -> Param {
        Param::new(rows, cols, vec![v; rows * cols])
    }

    /// Gaussian init, std 0.02.
    pub fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Param {
        let values = (0..rows * cols).map(|_| 0.02 * gauss(rng)).collect();
        Param::new(rows, cols, values)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Binds parameters to graph leaves for one training or evaluation step.
///
/// Binding the same parameter twice (shared embeddings, batched samples)
/// returns the same leaf, so gradient contributions accumulate.
#[derive(Default)]
pub struct ParamBinder {
    leaves: RefCell<HashMap<u64, Tensor>>,
}

impl ParamBinder {
    pub fn new() -> ParamBinder {
        ParamBinder::default()
    }

    pub fn bind(&self, p: &Param) -> Tensor {
        self.leaves
            .borrow_mut()
            .entry(p.id)
            .or_insert_with(|| Tensor::from_slice(p.rows, p.cols, &p.values))
            .clone()
    }

    /// Gradient accumulated on the leaf for `p`, if it was bound and reached
    /// by a backward pass.
    pub fn grad_of(&self, p: &Param) -> Option<Vec<f32>> {
        self.leaves.borrow().get(&p.id).and_then(|t| t.grad())
    }

    pub fn bound_count(&self) -> usize {
        self.leaves.borrow().len()
    }
}

/// Dense affine map with bias.
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Linear {
        Linear {
            w: Param::randn(input, output, rng),
            b: Param::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Tensor, binder: &ParamBinder) -> Tensor {
        x.matmul(&binder.bind(&self.w)).add(&binder.bind(&self.b))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn param_count(&self) -> u64 {
        (self.w.len() + self.b.len()) as u64
    }
}

/// Per-row layer normalization with learned gain and bias.
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(width: usize) -> LayerNorm {
        LayerNorm {
            gain: Param::full(1, width, 1.0),
            bias: Param::zeros(1, width),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, binder: &ParamBinder) -> Tensor {
        x.layer_norm(&binder.bind(&self.gain), &binder.bind(&self.bias), self.eps)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Feed-forward activation used inside experts and the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Gelu => write!(f, "gelu"),
            Activation::Relu => write!(f, "relu"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

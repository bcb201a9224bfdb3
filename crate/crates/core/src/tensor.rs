//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Every value in the pipeline is a row-major `rows x cols` matrix of f32;
//! vectors are 1xN or Nx1. Each op records its parents so that `backward`
//! can traverse the DAG in reverse creation order and accumulate gradients.
//! A graph is owned by the thread that built it; parameters live outside the
//! graph (see `nn::Param`) and independent graphs may run on separate threads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Finite stand-in for negative infinity. Softmax treats any entry at or
/// below `NEG_SENTINEL / 2` as excluded and produces an exact zero there.
pub const NEG_SENTINEL: f32 = f32::MIN;

const SENTINEL_CUTOFF: f32 = f32::MIN / 2.0;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("values", &self.inner.values)
            .finish()
    }
}

struct Inner {
    id: u64,
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    grad: RefCell<Option<Vec<f32>>>,
    op: Op,
}

enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f32),
    /// Constant offset folded into the output; backward is the identity.
    AddValues(Tensor),
    /// Complex multiply of consecutive (re, im) pairs by a constant.
    ComplexScale(Tensor, [f32; 2]),
    Relu(Tensor),
    Gelu(Tensor),
    Sigmoid(Tensor),
    Log(Tensor),
    ClampMin(Tensor, f32),
    SoftmaxRows(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        eps: f32,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Tensor,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Tensor,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Tensor,
        start: usize,
    },
    ConcatCols(Vec<Tensor>),
    ConcatRows(Vec<Tensor>),
    MeanRows(Tensor),
    MeanAll(Tensor),
    SumAll(Tensor),
    Reshape(Tensor),
    PickPerRow {
        x: Tensor,
        idx: Vec<usize>,
    },
    /// Replaces dropped entries with `NEG_SENTINEL`; their gradient is zero.
    SentinelMask {
        x: Tensor,
        keep: Vec<bool>,
    },
    /// Hard 0/1 mask in the forward pass, identity in the backward pass.
    SteMask(Tensor),
}

impl Tensor {
    fn from_op(rows: usize, cols: usize, values: Vec<f32>, op: Op) -> Tensor {
        debug_assert_eq!(values.len(), rows * cols);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                rows,
                cols,
                values,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f32>) -> Tensor {
        assert_eq!(
            values.len(),
            rows * cols,
            "dimension error: {} values for a {rows}x{cols} tensor",
            values.len()
        );
        Tensor::from_op(rows, cols, values, Op::Leaf)
    }

    pub fn from_slice(rows: usize, cols: usize, values: &[f32]) -> Tensor {
        Tensor::from_vec(rows, cols, values.to_vec())
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::from_op(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    pub fn ones(rows: usize, cols: usize) -> Tensor {
        Tensor::from_op(rows, cols, vec![1.0; rows * cols], Op::Leaf)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_op(1, 1, vec![v], Op::Leaf)
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    pub fn len(&self) -> usize {
        self.inner.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.inner.values
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.inner.values[r * self.inner.cols + c]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn value(&self) -> f32 {
        assert_eq!(self.len(), 1, "dimension error: value() on a non-scalar");
        self.inner.values[0]
    }

    /// Accumulated gradient, if `backward` has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_finite_values(&self) -> bool {
        self.inner.values.iter().all(|v| v.is_finite())
    }

    // ---- forward ops ----

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = self.shape();
        let (k2, n) = rhs.shape();
        assert_eq!(
            k, k2,
            "dimension error: matmul {m}x{k} . {k2}x{n}, inner dimensions differ"
        );
        let mut out = vec![0.0f32; m * n];
        let a = self.values();
        let b = rhs.values();
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Tensor::from_op(m, n, out, Op::Matmul(self.clone(), rhs.clone()))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.inner.values[i * c + j];
            }
        }
        Tensor::from_op(c, r, out, Op::Transpose(self.clone()))
    }

    /// Elementwise add; a 1xC right-hand side broadcasts over rows.
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        let (r, c) = self.shape();
        let out = if rhs.shape() == (r, c) {
            self.values()
                .iter()
                .zip(rhs.values())
                .map(|(a, b)| a + b)
                .collect()
        } else if rhs.shape() == (1, c) {
            let b = rhs.values();
            self.values()
                .iter()
                .enumerate()
                .map(|(i, a)| a + b[i % c])
                .collect()
        } else {
            panic!(
                "dimension error: add {r}x{c} + {}x{}",
                rhs.rows(),
                rhs.cols()
            );
        };
        Tensor::from_op(r, c, out, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        let (r, c) = self.shape();
        assert_eq!(
            rhs.shape(),
            (r, c),
            "dimension error: sub {r}x{c} - {}x{}",
            rhs.rows(),
            rhs.cols()
        );
        let out = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(r, c, out, Op::Sub(self.clone(), rhs.clone()))
    }

    /// Elementwise multiply; an Rx1 right-hand side broadcasts over columns.
    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        let (r, c) = self.shape();
        let out = if rhs.shape() == (r, c) {
            self.values()
                .iter()
                .zip(rhs.values())
                .map(|(a, b)| a * b)
                .collect()
        } else if rhs.shape() == (r, 1) {
            let b = rhs.values();
            self.values()
                .iter()
                .enumerate()
                .map(|(i, a)| a * b[i / c])
                .collect()
        } else {
            panic!(
                "dimension error: mul {r}x{c} * {}x{}",
                rhs.rows(),
                rhs.cols()
            );
        };
        Tensor::from_op(r, c, out, Op::Mul(self.clone(), rhs.clone()))
    }

    pub fn neg(&self) -> Tensor {
        let out = self.values().iter().map(|v| -v).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let out = self.values().iter().map(|v| v * c).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::Scale(self.clone(), c))
    }

    /// Adds a constant offset vector (one entry per element). The offset is
    /// not part of the graph; backward passes gradients through unchanged.
    pub fn add_values(&self, offset: &[f32]) -> Tensor {
        assert_eq!(
            offset.len(),
            self.len(),
            "dimension error: add_values offset length {} vs {} elements",
            offset.len(),
            self.len()
        );
        let out = self
            .values()
            .iter()
            .zip(offset)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::AddValues(self.clone()))
    }

    /// Multiplies consecutive (re, im) pairs by the complex constant `c`.
    pub fn complex_scale(&self, c: [f32; 2]) -> Tensor {
        assert!(
            self.len() % 2 == 0,
            "dimension error: complex_scale needs an even element count, got {}",
            self.len()
        );
        let v = self.values();
        let mut out = vec![0.0f32; v.len()];
        for p in 0..v.len() / 2 {
            let (re, im) = (v[2 * p], v[2 * p + 1]);
            out[2 * p] = c[0] * re - c[1] * im;
            out[2 * p + 1] = c[1] * re + c[0] * im;
        }
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            Op::ComplexScale(self.clone(), c),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out = self.values().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::Relu(self.clone()))
    }

    pub fn gelu(&self) -> Tensor {
        let out = self.values().iter().map(|&v| gelu_fwd(v)).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::Gelu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self
            .values()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::Sigmoid(self.clone()))
    }

    pub fn log(&self) -> Tensor {
        let out = self.values().iter().map(|&v| v.ln()).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::Log(self.clone()))
    }

    pub fn clamp_min(&self, lo: f32) -> Tensor {
        let out = self.values().iter().map(|&v| v.max(lo)).collect();
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            Op::ClampMin(self.clone(), lo),
        )
    }

    /// Softmax along `axis`: 1 normalizes each row, 0 each column. Entries at
    /// the exclusion sentinel come out exactly zero and receive no gradient.
    ///
    /// Panics with an invalid-gate error when every entry of a row (or
    /// column) is excluded.
    pub fn softmax(&self, axis: usize) -> Tensor {
        match axis {
            1 => self.softmax_rows(),
            0 => self.transpose().softmax_rows().transpose(),
            _ => panic!("dimension error: softmax axis {axis} on a 2-D tensor"),
        }
    }

    fn softmax_rows(&self) -> Tensor {
        let (r, c) = self.shape();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.inner.values[i * c..(i + 1) * c];
            let max = row
                .iter()
                .copied()
                .filter(|&v| v > SENTINEL_CUTOFF)
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(
                max.is_finite(),
                "invalid gate: softmax row {i} has every entry excluded"
            );
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0f32;
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                *o = if v > SENTINEL_CUTOFF {
                    (v - max).exp()
                } else {
                    0.0
                };
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Tensor::from_op(r, c, out, Op::SoftmaxRows(self.clone()))
    }

    /// Per-row layer normalization with learned gain and bias (both 1xC).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Tensor {
        let (r, c) = self.shape();
        assert_eq!(gain.shape(), (1, c), "dimension error: layer_norm gain");
        assert_eq!(bias.shape(), (1, c), "dimension error: layer_norm bias");
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.inner.values[i * c..(i + 1) * c];
            let (mu, var) = row_moments(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * inv * gain.values()[j] + bias.values()[j];
            }
        }
        Tensor::from_op(
            r,
            c,
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
        )
    }

    /// Row lookup: output row `l` is `table[ids[l]]` (0-based rows).
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Tensor {
        let (v, d) = table.shape();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "dimension error: embedding row {id} >= {v}");
            out.extend_from_slice(&table.values()[id * d..(id + 1) * d]);
        }
        Tensor::from_op(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        )
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (r, c) = self.shape();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "dimension error: gather_rows index {i} >= {r}");
            out.extend_from_slice(&self.inner.values[i * c..(i + 1) * c]);
        }
        Tensor::from_op(
            idx.len(),
            c,
            out,
            Op::GatherRows {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        )
    }

    /// Inverse of `gather_rows`: row `r` of `self` lands at `idx[r]` of an
    /// otherwise-zero `out_rows x cols` output. Indices must be distinct.
    pub fn scatter_rows(&self, idx: &[usize], out_rows: usize) -> Tensor {
        let (r, c) = self.shape();
        assert_eq!(idx.len(), r, "dimension error: scatter_rows index count");
        let mut out = vec![0.0f32; out_rows * c];
        let mut seen = vec![false; out_rows];
        for (src, &dst) in idx.iter().enumerate() {
            assert!(
                dst < out_rows && !seen[dst],
                "dimension error: scatter_rows target {dst} out of range or repeated"
            );
            seen[dst] = true;
            out[dst * c..(dst + 1) * c]
                .copy_from_slice(&self.inner.values[src * c..(src + 1) * c]);
        }
        Tensor::from_op(
            out_rows,
            c,
            out,
            Op::ScatterRows {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Tensor {
        let (r, c) = self.shape();
        assert!(
            start + width <= c,
            "dimension error: slice_cols {start}..{} of {c}",
            start + width
        );
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.inner.values[i * c + start..i * c + start + width]);
        }
        Tensor::from_op(
            r,
            width,
            out,
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "dimension error: concat_cols of nothing");
        let r = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                assert_eq!(p.rows(), r, "dimension error: concat_cols row mismatch");
                out.extend_from_slice(&p.values()[i * p.cols()..(i + 1) * p.cols()]);
            }
        }
        Tensor::from_op(r, total, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "dimension error: concat_rows of nothing");
        let c = parts[0].cols();
        let total: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(total * c);
        for p in parts {
            assert_eq!(p.cols(), c, "dimension error: concat_rows col mismatch");
            out.extend_from_slice(p.values());
        }
        Tensor::from_op(total, c, out, Op::ConcatRows(parts.to_vec()))
    }

    /// Column means: NxC -> 1xC.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = self.shape();
        let mut acc = vec![0.0f64; c];
        for i in 0..r {
            for j in 0..c {
                acc[j] += self.inner.values[i * c + j] as f64;
            }
        }
        let out = acc.iter().map(|&v| (v / r as f64) as f32).collect();
        Tensor::from_op(1, c, out, Op::MeanRows(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let sum: f64 = self.values().iter().map(|&v| v as f64).sum();
        Tensor::from_op(
            1,
            1,
            vec![(sum / self.len() as f64) as f32],
            Op::MeanAll(self.clone()),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let sum: f64 = self.values().iter().map(|&v| v as f64).sum();
        Tensor::from_op(1, 1, vec![sum as f32], Op::SumAll(self.clone()))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(
            rows * cols,
            self.len(),
            "dimension error: reshape {}x{} -> {rows}x{cols}",
            self.rows(),
            self.cols()
        );
        Tensor::from_op(rows, cols, self.values().to_vec(), Op::Reshape(self.clone()))
    }

    /// NxC -> Nx1, selecting column `idx[r]` in each row.
    pub fn pick_per_row(&self, idx: &[usize]) -> Tensor {
        let (r, c) = self.shape();
        assert_eq!(idx.len(), r, "dimension error: pick_per_row index count");
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < c, "dimension error: pick_per_row column {j} >= {c}");
            out.push(self.inner.values[i * c + j]);
        }
        Tensor::from_op(
            r,
            1,
            out,
            Op::PickPerRow {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        )
    }

    /// Keeps flagged entries, replaces the rest with `NEG_SENTINEL`.
    pub fn sentinel_mask(&self, keep: &[bool]) -> Tensor {
        assert_eq!(keep.len(), self.len(), "dimension error: sentinel_mask");
        let out = self
            .values()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { NEG_SENTINEL })
            .collect();
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            Op::SentinelMask {
                x: self.clone(),
                keep: keep.to_vec(),
            },
        )
    }

    /// Hard 0/1 values chosen by `hard`, with the straight-through backward
    /// rule: the incoming gradient flows to `self` unchanged.
    pub fn ste_mask(&self, hard: &[bool]) -> Tensor {
        assert_eq!(hard.len(), self.len(), "dimension error: ste_mask");
        let out = hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        Tensor::from_op(self.rows(), self.cols(), out, Op::SteMask(self.clone()))
    }

    // ---- backward ----

    /// Backpropagates from this scalar with seed gradient `seed`.
    pub fn backward_seeded(&self, seed: f32) {
        assert_eq!(self.len(), 1, "dimension error: backward from a non-scalar");
        let mut nodes: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.inner.id) {
                continue;
            }
            t.inner.op.for_each_parent(&mut |p| stack.push(p.clone()));
            nodes.insert(t.inner.id, t);
        }
        // Creation order is a topological order of the DAG.
        let mut order: Vec<&Tensor> = nodes.values().collect();
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        accumulate(self, &[seed]);
        for t in order {
            let grad = t.inner.grad.borrow();
            if let Some(g) = grad.as_ref() {
                t.inner.op.backprop(t, g);
            }
        }
    }

    pub fn backward(&self) {
        self.backward_seeded(1.0);
    }
}

fn row_moments(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mu = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / n;
    (mu, var)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn accumulate(t: &Tensor, g: &[f32]) {
    let mut slot = t.inner.grad.borrow_mut();
    match slot.as_mut() {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

impl Op {
    fn for_each_parent(&self, f: &mut dyn FnMut(&Tensor)) {
        match self {
            Op::Leaf => {}
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(a);
                f(b);
            }
            Op::Transpose(x)
            | Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddValues(x)
            | Op::ComplexScale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::ClampMin(x, _)
            | Op::SoftmaxRows(x)
            | Op::MeanRows(x)
            | Op::MeanAll(x)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::SteMask(x) => f(x),
            Op::LayerNorm { x, gain, bias, .. } => {
                f(x);
                f(gain);
                f(bias);
            }
            Op::Embedding { table, .. } => f(table),
            Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PickPerRow { x, .. }
            | Op::SentinelMask { x, .. } => f(x),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                for p in parts {
                    f(p);
                }
            }
        }
    }

    fn backprop(&self, out: &Tensor, g: &[f32]) {
        match self {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = a.shape();
                let n = b.cols();
                // a.grad += g . b^T
                let mut ga = vec![0.0f32; m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let brow = &b.values()[kk * n..(kk + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut acc = 0.0f32;
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc += gv * bv;
                        }
                        ga[i * k + kk] = acc;
                    }
                }
                accumulate(a, &ga);
                // b.grad += a^T . g
                let mut gb = vec![0.0f32; k * n];
                for i in 0..m {
                    let arow = &a.values()[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (kk, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[kk * n..(kk + 1) * n];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                accumulate(b, &gb);
            }
            Op::Transpose(x) => {
                let (r, c) = x.shape();
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(x, &gx);
            }
            Op::Add(a, b) => {
                accumulate(a, g);
                if b.shape() == a.shape() {
                    accumulate(b, g);
                } else {
                    let c = b.cols();
                    let mut gb = vec![0.0f32; c];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                    accumulate(b, &gb);
                }
            }
            Op::Sub(a, b) => {
                accumulate(a, g);
                let gb: Vec<f32> = g.iter().map(|v| -v).collect();
                accumulate(b, &gb);
            }
            Op::Mul(a, b) => {
                let (r, c) = a.shape();
                if b.shape() == (r, c) {
                    let ga: Vec<f32> = g.iter().zip(b.values()).map(|(g, b)| g * b).collect();
                    accumulate(a, &ga);
                    let gb: Vec<f32> = g.iter().zip(a.values()).map(|(g, a)| g * a).collect();
                    accumulate(b, &gb);
                } else {
                    let ga: Vec<f32> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * b.values()[i / c])
                        .collect();
                    accumulate(a, &ga);
                    let mut gb = vec![0.0f32; r];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i / c] += gv * a.values()[i];
                    }
                    accumulate(b, &gb);
                }
            }
            Op::Neg(x) => {
                let gx: Vec<f32> = g.iter().map(|v| -v).collect();
                accumulate(x, &gx);
            }
            Op::Scale(x, c) => {
                let gx: Vec<f32> = g.iter().map(|v| v * c).collect();
                accumulate(x, &gx);
            }
            Op::AddValues(x) | Op::SteMask(x) | Op::Reshape(x) => accumulate(x, g),
            Op::ComplexScale(x, c) => {
                // Jacobian transpose of multiplication by c is multiplication
                // by conj(c).
                let mut gx = vec![0.0f32; g.len()];
                for p in 0..g.len() / 2 {
                    let (gr, gi) = (g[2 * p], g[2 * p + 1]);
                    gx[2 * p] = c[0] * gr + c[1] * gi;
                    gx[2 * p + 1] = -c[1] * gr + c[0] * gi;
                }
                accumulate(x, &gx);
            }
            Op::Relu(x) => {
                let gx: Vec<f32> = g
                    .iter()
                    .zip(x.values())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(x, &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f32> = g
                    .iter()
                    .zip(x.values())
                    .map(|(g, &v)| g * gelu_bwd(v))
                    .collect();
                accumulate(x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f32> = g
                    .iter()
                    .zip(out.values())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                accumulate(x, &gx);
            }
            Op::Log(x) => {
                let gx: Vec<f32> = g.iter().zip(x.values()).map(|(g, &v)| g / v).collect();
                accumulate(x, &gx);
            }
            Op::ClampMin(x, lo) => {
                let gx: Vec<f32> = g
                    .iter()
                    .zip(x.values())
                    .map(|(g, &v)| if v >= *lo { *g } else { 0.0 })
                    .collect();
                accumulate(x, &gx);
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = x.shape();
                let y = out.values();
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(x, &gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, c) = x.shape();
                let mut gx = vec![0.0f32; r * c];
                let mut ggain = vec![0.0f32; c];
                let mut gbias = vec![0.0f32; c];
                for i in 0..r {
                    let row = &x.values()[i * c..(i + 1) * c];
                    let (mu, var) = row_moments(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = &g[i * c..(i + 1) * c];
                    let mut dy = vec![0.0f32; c];
                    let mut mean_dy = 0.0f32;
                    let mut mean_dyy = 0.0f32;
                    for j in 0..c {
                        let yj = (row[j] - mu) * inv;
                        ggain[j] += gr[j] * yj;
                        gbias[j] += gr[j];
                        dy[j] = gr[j] * gain.values()[j];
                        mean_dy += dy[j];
                        mean_dyy += dy[j] * yj;
                    }
                    mean_dy /= c as f32;
                    mean_dyy /= c as f32;
                    for j in 0..c {
                        let yj = (row[j] - mu) * inv;
                        gx[i * c + j] = inv * (dy[j] - mean_dy - yj * mean_dyy);
                    }
                }
                accumulate(x, &gx);
                accumulate(gain, &ggain);
                accumulate(bias, &gbias);
            }
            Op::Embedding { table, ids } => {
                let d = table.cols();
                let mut gt = vec![0.0f32; table.len()];
                for (l, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[l * d + j];
                    }
                }
                accumulate(table, &gt);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = x.shape();
                let mut gx = vec![0.0f32; r * c];
                for (src, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[src * c + j];
                    }
                }
                accumulate(x, &gx);
            }
            Op::ScatterRows { x, idx } => {
                let c = x.cols();
                let mut gx = vec![0.0f32; x.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    gx[src * c..(src + 1) * c].copy_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                accumulate(x, &gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = x.shape();
                let w = out.cols();
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w]
                        .copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(x, &gx);
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = p.cols();
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(p, &gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for p in parts {
                    let n = p.rows() * c;
                    accumulate(p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = x.shape();
                let scale = 1.0 / r as f32;
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j] * scale;
                    }
                }
                accumulate(x, &gx);
            }
            Op::MeanAll(x) => {
                let scale = g[0] / x.len() as f32;
                accumulate(x, &vec![scale; x.len()]);
            }
            Op::SumAll(x) => {
                accumulate(x, &vec![g[0]; x.len()]);
            }
            Op::PickPerRow { x, idx } => {
                let (r, c) = x.shape();
                let mut gx = vec![0.0f32; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * c + j] = g[i];
                }
                accumulate(x, &gx);
            }
            Op::SentinelMask { x, keep } => {
                let gx: Vec<f32> = g
                    .iter()
                    .zip(keep)
                    .map(|(g, &k)| if k { *g } else { 0.0 })
                    .collect();
                accumulate(x, &gx);
            }
        }
    }
}

/// Max over coordinates of `|analytic - central difference| / (|analytic| + eps)`
/// for the scalar function `f` at `x`. The differences are accumulated in f64.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> f32
where
    F: Fn(&Tensor) -> Tensor,
{
    grad_check_step(f, x, eps, 1e-2)
}

/// `grad_check` with an explicit central-difference step.
pub fn grad_check_step<F>(f: F, x: &Tensor, eps: f32, step: f32) -> f32
where
    F: Fn(&Tensor) -> Tensor,
{
    let leaf = Tensor::from_slice(x.rows(), x.cols(), x.values());
    let y = f(&leaf);
    y.backward();
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);

    let mut worst = 0.0f32;
    for i in 0..x.len() {
        let h = step * x.values()[i].abs().max(1.0);
        let mut plus = x.values().to_vec();
        plus[i] += h;
        let mut minus = x.values().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(x.rows(), x.cols(), plus)).value() as f64;
        let fm = f(&Tensor::from_vec(x.rows(), x.cols(), minus)).value() as f64;
        let numeric = ((fp - fm) / (2.0 * h as f64)) as f32;
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + eps);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

//! Filter, symbol mapping, and the Rayleigh block-fading AWGN channel.
//!
//! Retained feature rows are flattened row-major, paired into complex
//! symbols, and normalized to unit average power (the scale rides along as
//! metadata). One fading gain h ~ CN(0,1) applies to a whole transmission;
//! sigma^2 = 10^(-gamma/10) realizes the target average SNR under unit
//! transmit power. The receiver equalizes with perfect CSI (zero-forcing)
//! before reshaping back to a feature matrix, and learns the retained row
//! count through error-free side metadata.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Below this gain magnitude a transmission is flagged as a deep fade
/// (still processed).
pub const DEEP_FADE_GAIN: f32 = 1e-6;

/// One block-fading draw: complex gain, noise variance, target average SNR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: [f32; 2],
    pub sigma2: f32,
    pub snr_db: f32,
}

impl ChannelRealization {
    /// Noiseless unit channel: h = 1, sigma^2 = 0.
    pub fn noiseless() -> ChannelRealization {
        ChannelRealization {
            h: [1.0, 0.0],
            sigma2: 0.0,
            snr_db: f32::INFINITY,
        }
    }

    pub fn gain_power(&self) -> f32 {
        self.h[0] * self.h[0] + self.h[1] * self.h[1]
    }
}

/// sigma^2 for a target average SNR under unit transmit power and
/// E[|h|^2] = 1.
pub fn noise_variance(snr_db: f32) -> f32 {
    10f32.powf(-snr_db / 10.0)
}

/// Draws h ~ CN(0,1) and sets sigma^2 from the target SNR.
pub fn sample_channel(snr_db: f32, rng: &mut ChaCha8Rng) -> ChannelRealization {
    ChannelRealization {
        h: [gauss(rng) * 0.5f32.sqrt(), gauss(rng) * 0.5f32.sqrt()],
        sigma2: noise_variance(snr_db),
        snr_db,
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Keeps the rows where the mask is 1, in ascending original order.
/// Returns the compressed matrix and the retained index set.
pub fn filter(masked: &Tensor, hard_mask: &Tensor) -> (Tensor, Vec<usize>) {
    assert_eq!(
        hard_mask.len(),
        masked.rows(),
        "dimension error: mask length vs feature rows"
    );
    let retained: Vec<usize> = hard_mask
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, _)| i)
        .collect();
    assert!(
        !retained.is_empty(),
        "contract violation: all-zero mask reached the filter"
    );
    (masked.gather_rows(&retained), retained)
}

/// A flattened complex-symbol view of a feature matrix, normalized to unit
/// average symbol power. `scale` is metadata for the receiver.
pub struct SymbolStream {
    /// 1 x (rows * cols) tensor of interleaved (re, im) pairs.
    pub data: Tensor,
    pub scale: f32,
    pub rows: usize,
    pub cols: usize,
}

impl SymbolStream {
    pub fn symbol_count(&self) -> usize {
        self.data.len() / 2
    }
}

/// Pairs consecutive reals into complex symbols and normalizes average
/// symbol power to 1. Requires an even feature width. An all-zero input
/// keeps unit scale.
pub fn symbolize(compressed: &Tensor) -> SymbolStream {
    let (rows, cols) = compressed.shape();
    assert!(cols % 2 == 0, "configuration error: feature width {cols} is odd");
    let flat = compressed.reshape(1, rows * cols);
    let power: f64 = flat.values().iter().map(|&v| (v as f64) * (v as f64)).sum();
    let mean_symbol_power = power / (rows * cols) as f64 * 2.0;
    let scale = if mean_symbol_power > 0.0 {
        (mean_symbol_power as f32).sqrt()
    } else {
        1.0
    };
    SymbolStream {
        data: flat.scale(1.0 / scale),
        scale,
        rows,
        cols,
    }
}

/// Undoes `symbolize`: restores the power scale and the matrix shape.
pub fn desymbolize(data: &Tensor, scale: f32, rows: usize, cols: usize) -> Tensor {
    assert_eq!(
        data.len(),
        rows * cols,
        "dimension error: stream length vs {rows}x{cols}"
    );
    data.scale(scale).reshape(rows, cols)
}

/// y = h z + n with n ~ CN(0, sigma^2 I). The gain and the noise draw are
/// constants of the graph; gradients flow to z only.
pub fn transmit(data: &Tensor, real: &ChannelRealization, rng: &mut ChaCha8Rng) -> Tensor {
    let faded = data.complex_scale(real.h);
    if real.sigma2 == 0.0 {
        return faded;
    }
    let per_component = (real.sigma2 / 2.0).sqrt();
    let noise: Vec<f32> = (0..data.len()).map(|_| per_component * gauss(rng)).collect();
    faded.add_values(&noise)
}

/// Zero-forcing equalization with perfect CSI: divide by h.
/// Returns the equalized stream and a deep-fade flag.
pub fn equalize(received: &Tensor, h: [f32; 2]) -> (Tensor, bool) {
    let power = h[0] * h[0] + h[1] * h[1];
    assert!(power > 0.0, "equalize with a zero gain");
    let inv = [h[0] / power, -h[1] / power];
    (received.complex_scale(inv), power.sqrt() < DEEP_FADE_GAIN)
}

/// Full channel hop for one compressed feature matrix: symbolize, fade, add
/// noise, equalize, desymbolize.
pub fn apply_channel(
    compressed: &Tensor,
    real: &ChannelRealization,
    rng: &mut ChaCha8Rng,
) -> (Tensor, bool) {
    let stream = symbolize(compressed);
    let received = transmit(&stream.data, real, rng);
    let (equalized, deep_fade) = equalize(&received, real.h);
    (
        desymbolize(&equalized, stream.scale, stream.rows, stream.cols),
        deep_fade,
    )
}

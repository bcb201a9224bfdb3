//! Classical transmit pipeline: UTF-8 source coding, rate-1/2
//! constraint-length-7 convolutional coding (generators 171/133 octal),
//! BPSK over the fading channel, soft-decision Viterbi decoding, then the
//! trained model answers the task from the recovered text over a noiseless
//! semantic stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{self, ChannelRealization};
use crate::model::Model;
use crate::nn::ParamBinder;
use crate::tasks::{TaskSample, Vocabulary};
use crate::tensor::Tensor;
use crate::training::MaskMode;

#[derive(Clone, Copy, Debug)]
pub struct CodecConfig {
    /// Generator polynomials, newest input bit at the most significant tap.
    pub generators: [u32; 2],
    pub constraint_length: usize,
    /// Symbols per channel use; 2 = BPSK.
    pub modulation_order: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            generators: [0o171, 0o133],
            constraint_length: 7,
            modulation_order: 2,
        }
    }
}

impl CodecConfig {
    pub fn tail_bits(&self) -> usize {
        self.constraint_length - 1
    }

    pub fn states(&self) -> usize {
        1 << (self.constraint_length - 1)
    }

    /// Coded bits for a message: rate 1/2 over message plus tail.
    pub fn coded_bits(&self, message_bits: usize) -> usize {
        2 * (message_bits + self.tail_bits())
    }

    /// Channel symbols required to carry `text`.
    pub fn symbols_for_text(&self, text: &str) -> usize {
        let bits = self.coded_bits(8 * text.len());
        bits / (self.modulation_order as f32).log2() as usize
    }
}

/// UTF-8 byte serialization, most significant bit first.
pub fn source_encode(text: &str) -> Vec<u8> {
    let mut bits = Vec::with_capacity(8 * text.len());
    for byte in text.as_bytes() {
        for i in (0..8).rev() {
            bits.push((byte >> i) & 1);
        }
    }
    bits
}

/// Rebuilds text from bits. Invalid byte sequences are replaced with the
/// replacement marker; the flag reports whether that happened.
pub fn source_decode(bits: &[u8]) -> (String, bool) {
    let bytes: Vec<u8> = bits
        .chunks_exact(8)
        .map(|b| b.iter().fold(0u8, |acc, &bit| (acc << 1) | bit))
        .collect();
    let text = String::from_utf8_lossy(&bytes);
    let lossy = text.contains(char::REPLACEMENT_CHARACTER);
    (text.into_owned(), lossy)
}

fn parity(v: u32) -> u8 {
    (v.count_ones() & 1) as u8
}

/// Feedforward convolutional encoding, terminated with tail zeros.
/// Output length is exactly `2 * (bits.len() + constraint_length - 1)`.
pub fn conv_encode(bits: &[u8], cfg: &CodecConfig) -> Vec<u8> {
    let k = cfg.constraint_length;
    let mut state: u32 = 0;
    let mut out = Vec::with_capacity(cfg.coded_bits(bits.len()));
    for &b in bits.iter().chain(std::iter::repeat(&0u8).take(cfg.tail_bits())) {
        let window = ((b as u32) << (k - 1)) | state;
        out.push(parity(window & cfg.generators[0]));
        out.push(parity(window & cfg.generators[1]));
        state = window >> 1;
    }
    out
}

fn bpsk(bit: u8) -> f32 {
    1.0 - 2.0 * bit as f32
}

/// Maximum-likelihood sequence decoding over soft symbol pairs (one pair of
/// received real values per trellis step). The encoder is assumed
/// terminated; the decoded tail is dropped.
///
/// Transition bookkeeping: window = (input << (k-1)) | pred, successor =
/// window >> 1. The successor's top bit IS the input, so the traceback only
/// stores the predecessor's lost low bit.
pub fn viterbi_decode(soft: &[f32], cfg: &CodecConfig) -> Vec<u8> {
    assert!(soft.len() % 2 == 0, "dimension error: odd soft-symbol count");
    let steps = soft.len() / 2;
    let tail = cfg.tail_bits();
    assert!(steps >= tail, "dimension error: fewer steps than tail bits");
    let states = cfg.states();
    let k = cfg.constraint_length;

    let mut metric = vec![f32::INFINITY; states];
    metric[0] = 0.0;
    let mut pred_lsb: Vec<Vec<u8>> = Vec::with_capacity(steps);

    for t in 0..steps {
        let (r0, r1) = (soft[2 * t], soft[2 * t + 1]);
        let mut next = vec![f32::INFINITY; states];
        let mut back = vec![0u8; states];
        for s in 0..states {
            if metric[s].is_infinite() {
                continue;
            }
            for b in 0..2u32 {
                let window = (b << (k - 1)) | s as u32;
                let c0 = bpsk(parity(window & cfg.generators[0]));
                let c1 = bpsk(parity(window & cfg.generators[1]));
                let cost = metric[s] + (r0 - c0).powi(2) + (r1 - c1).powi(2);
                let ns = (window >> 1) as usize;
                if cost < next[ns] {
                    next[ns] = cost;
                    back[ns] = (s & 1) as u8;
                }
            }
        }
        pred_lsb.push(back);
        metric = next;
    }

    // Terminated code: the survivor ends in state 0.
    let mut state = 0usize;
    let mut decoded = vec![0u8; steps];
    for t in (0..steps).rev() {
        decoded[t] = (state >> (k - 2)) as u8;
        state = ((state << 1) | pred_lsb[t][state] as usize) & (states - 1);
    }
    decoded.truncate(steps - tail);
    decoded
}

/// Hard bits -> one complex BPSK symbol per bit (imaginary part zero).
pub fn modulate(bits: &[u8]) -> Tensor {
    let mut values = Vec::with_capacity(2 * bits.len());
    for &b in bits {
        values.push(bpsk(b));
        values.push(0.0);
    }
    Tensor::from_vec(1, values.len(), values)
}

/// Real parts of the equalized symbol stream: the Viterbi soft inputs.
pub fn soft_demodulate(equalized: &Tensor) -> Vec<f32> {
    equalized.values().chunks(2).map(|p| p[0]).collect()
}

/// Classical link for one text: source code, channel code, BPSK, fading
/// channel at the target SNR, zero-forcing equalization, Viterbi, source
/// decode.
pub fn baseline_link(
    text: &str,
    snr_db: f32,
    rng: &mut ChaCha8Rng,
    cfg: &CodecConfig,
) -> (String, bool) {
    let bits = source_encode(text);
    let coded = conv_encode(&bits, cfg);
    let tx = modulate(&coded);
    let realization = channel::sample_channel(snr_db, rng);
    let received = channel::transmit(&tx, &realization, rng);
    let (equalized, _) = channel::equalize(&received, realization.h);
    let decoded = viterbi_decode(&soft_demodulate(&equalized), cfg);
    source_decode(&decoded)
}

/// Outcome of running one sample through the classical link plus the
/// trained receiver-side model.
pub struct BaselineOutcome {
    pub recovered_text: String,
    pub text_exact: bool,
    pub answer: String,
    pub answer_exact: bool,
    pub symbols: usize,
}

/// Classical link followed by the trained model answering the task from the
/// recovered prompt over a noiseless semantic stage. Undecodable prompts
/// give an empty answer.
pub fn baseline_answer(
    model: &Model,
    fem: &crate::fem::FemParams,
    vocab: &Vocabulary,
    sample: &TaskSample,
    snr_db: f32,
    l_max: usize,
    rng: &mut ChaCha8Rng,
    cfg: &CodecConfig,
) -> BaselineOutcome {
    let (recovered_text, _lossy) = baseline_link(&sample.prompt_text, snr_db, rng, cfg);
    let text_exact = crate::tasks::exact_match(&recovered_text, &sample.prompt_text) == 1;
    let ids = vocab.tokenize(&recovered_text).ids;
    let answer = if ids.is_empty() || ids.len() > model.config.max_seq {
        String::new()
    } else {
        let binder = ParamBinder::new();
        let mut noiseless = ChaCha8Rng::seed_from_u64(0);
        let features = crate::training::pipeline_features(
            model,
            fem,
            &ids,
            25.0,
            &ChannelRealization::noiseless(),
            &mut noiseless,
            MaskMode::Bypass,
            &binder,
        );
        match features {
            Ok(out) => match model.generate(&out.received, l_max) {
                Ok(g) => vocab.render_generation(&g.ids),
                Err(_) => String::new(),
            },
            Err(_) => String::new(),
        }
    };
    let answer_exact = crate::tasks::exact_match(&answer, &sample.target_text) == 1;
    BaselineOutcome {
        recovered_text,
        text_exact,
        answer,
        answer_exact,
        symbols: cfg.symbols_for_text(&sample.prompt_text),
    }
}

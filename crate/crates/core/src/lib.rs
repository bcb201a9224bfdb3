//! Task-oriented semantic communication over a simulated fading channel.
//!
//! The pipeline: a mixture-of-experts transformer encoder turns a prompt
//! into feature rows, an SNR-aware feature extraction module masks the rows
//! that the task does not need, the survivors cross a Rayleigh/AWGN channel
//! as unit-power complex symbols, and a matching decoder generates the task
//! answer autoregressively. Training happens in two phases: plain
//! cross-entropy first, then joint cross-entropy plus compression-ratio
//! loss with a straight-through estimator driving the binary mask.

pub mod baseline;
pub mod channel;
pub mod eval;
pub mod fem;
pub mod model;
pub mod nn;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use channel::{sample_channel, ChannelRealization, SymbolStream};
pub use eval::{run_sweep, SweepConfig, SweepRow, TaskFilter};
pub use fem::{compression_ratio, FemConfig, FemParams, MaskPair};
pub use model::{Generation, Model, ModelConfig};
pub use nn::{Param, ParamBinder};
pub use tasks::{build_corpus, Corpus, TaskId, TaskSample, Vocabulary};
pub use tensor::{grad_check, Tensor, NEG_SENTINEL};
pub use training::{cross_entropy, load_checkpoint, AdamW, Phase, TrainConfig, Trainer};

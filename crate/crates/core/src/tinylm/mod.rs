//! Desk-scale decoder-only transformer (RMSNorm, RoPE, grouped-query
//! attention, gated FFN) with LoRA adapters, a training loop and four
//! decoding strategies. All math is f64.

mod autograd;
pub mod decode;
pub mod io;
mod lora;
mod mat;
mod model;
mod ops;
mod train;

use log::warn;
use thiserror::Error;

use crate::agents::INSTRUCTION;

pub use autograd::{Tape, Var};
pub use decode::{
    decode, decode_beam, decode_contrastive, decode_greedy, decode_sample, sequence_log_prob, Adapted, NextToken,
    Strategy,
};
pub use lora::{lora_attach, lora_forward, AdapterKey, Adapters, LoraAdapter, Proj, LORA_A_STD};
pub use mat::Mat;
pub use model::{
    ffn, gqa_attention, gqa_attention_weights, BlockWeights, ForwardOutput, Model, ModelConfig, OutputHead,
    BASE_INIT_STD,
};
pub use ops::{log_softmax, rmsnorm, rope, silu, softmax};
pub use train::{adapter_gradients, dataset_loss, example_loss, train_lora, EpochLoss, TrainConfig, TrainExample, TrainReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TinyLmError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("LoRA rank {rank} exceeds min(d, k)/2 = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("model file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

/// The instruction template with the input slot filled and the output
/// slot left open for generation.
pub fn render_instruction(prompt: &str) -> String {
    format!("{INSTRUCTION}### Input: {prompt}\n### Output:")
}

/// `prompt`, one newline, `cot`.
pub fn concat_cot(prompt: &str, cot: &str) -> Result<String, TinyLmError> {
    if prompt.is_empty() || cot.is_empty() {
        return Err(TinyLmError::InvalidParameter("concat_cot needs a nonempty prompt and CoT".into()));
    }
    Ok(format!("{prompt}\n{cot}"))
}

/// [`concat_cot`] plus a warning when the result exceeds `budget` tokens.
pub fn concat_cot_checked(
    prompt: &str,
    cot: &str,
    budget: usize,
    count: &dyn Fn(&str) -> usize,
) -> Result<String, TinyLmError> {
    let s = concat_cot(prompt, cot)?;
    let n = count(&s);
    if n > budget {
        warn!("prompt with CoT is {n} tokens, over the model budget of {budget}");
    }
    Ok(s)
}

/// Bytes 0..=255 map to themselves; three specials follow.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: usize = 256;
    pub const EOS: usize = 257;
    pub const PAD: usize = 258;
    pub const VOCAB: usize = 259;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Drops special ids; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

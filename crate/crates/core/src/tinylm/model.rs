//! Decoder-only transformer: embedding, pre-norm GQA and SwiGLU-style FFN
//! blocks with residuals, final RMSNorm and vocabulary head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::{AdapterKey, Adapters, Proj};
use super::ops::{rmsnorm_rows, rope_rows, silu, softmax_rows};
use super::{Mat, TinyLmError};

/// Std of the Gaussian init of every base matrix.
pub const BASE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub n_layers: usize,
    pub rope_base: f64,
    pub eps: f64,
    pub max_seq_len: usize,
    pub eos_id: Option<usize>,
    /// Initialize f_vocab as a copy of the embedding matrix.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_kv_groups: 2,
            d_ff: 128,
            vocab: 259,
            n_layers: 2,
            rope_base: 10000.0,
            eps: 1e-6,
            max_seq_len: 512,
            eos_id: None,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TinyLmError> {
        let bad = |m: String| Err(TinyLmError::InvalidConfig(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_groups", self.n_kv_groups),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("n_layers", self.n_layers),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return bad(format!(
                "n_heads {} not divisible by n_kv_groups {}",
                self.n_heads, self.n_kv_groups
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dim {} must be even for RoPE", self.head_dim()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) || !(self.rope_base > 0.0) {
            return bad("eps must be >= 0 and rope_base > 0".into());
        }
        if self.eos_id.is_some_and(|e| e >= self.vocab) {
            return bad("eos_id outside the vocabulary".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_groups * self.head_dim()
    }
}

/// Matrices are stored out×in; a projection of row-stacked tokens is X·Wᵀ.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub f_q: Mat,
    pub f_k: Mat,
    pub f_v: Mat,
    pub f_o: Mat,
    pub g_attn: Vec<f64>,
    pub g_ffn: Vec<f64>,
    pub f_up: Mat,
    pub f_gate: Mat,
    pub f_down: Mat,
}

impl BlockWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, kv, ff) = (cfg.d_model, cfg.kv_dim(), cfg.d_ff);
        let mut g = |r, c| Mat::gaussian(r, c, BASE_INIT_STD, rng);
        Self {
            f_q: g(d, d),
            f_k: g(kv, d),
            f_v: g(kv, d),
            f_o: g(d, d),
            f_up: g(ff, d),
            f_gate: g(ff, d),
            f_down: g(d, ff),
            g_attn: vec![1.0; d],
            g_ffn: vec![1.0; d],
        }
    }

    pub fn proj(&self, p: Proj) -> &Mat {
        match p {
            Proj::Q => &self.f_q,
            Proj::K => &self.f_k,
            Proj::V => &self.f_v,
            Proj::O => &self.f_o,
            Proj::Up => &self.f_up,
            Proj::Gate => &self.f_gate,
            Proj::Down => &self.f_down,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Mat {
        match p {
            Proj::Q => &mut self.f_q,
            Proj::K => &mut self.f_k,
            Proj::V => &mut self.f_v,
            Proj::O => &mut self.f_o,
            Proj::Up => &mut self.f_up,
            Proj::Gate => &mut self.f_gate,
            Proj::Down => &mut self.f_down,
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), TinyLmError> {
        let (d, kv, ff) = (cfg.d_model, cfg.kv_dim(), cfg.d_ff);
        let expect = [(d, d), (kv, d), (kv, d), (d, d), (ff, d), (ff, d), (d, ff)];
        for (p, shape) in Proj::ALL.iter().zip(expect) {
            if self.proj(*p).shape() != shape {
                return Err(TinyLmError::Shape(format!(
                    "{} is {:?}, expected {shape:?}",
                    p.name(),
                    self.proj(*p).shape()
                )));
            }
        }
        if self.g_attn.len() != d || self.g_ffn.len() != d {
            return Err(TinyLmError::Shape("gain length differs from d_model".into()));
        }
        if self.g_attn.iter().chain(&self.g_ffn).any(|g| !g.is_finite()) {
            return Err(TinyLmError::NonFinite("block gains".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub g_final: Vec<f64>,
    /// vocab×d
    pub f_vocab: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab×d
    pub embed: Mat,
    pub blocks: Vec<BlockWeights>,
    pub head: OutputHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// N×vocab
    pub logits: Mat,
    /// N×vocab, each row sums to 1.
    pub probs: Mat,
    /// N×d final-norm hidden states fed to f_vocab.
    pub hidden: Mat,
}

/// Projections of one block, with adapters if any.
pub(crate) struct LayerView<'a> {
    pub w: &'a BlockWeights,
    pub adapters: Option<&'a Adapters>,
    pub layer: usize,
}

impl LayerView<'_> {
    pub fn apply(&self, proj: Proj, x: &Mat) -> Mat {
        let w0 = self.w.proj(proj);
        match self.adapters.and_then(|a| a.get(AdapterKey::Block { layer: self.layer, proj })) {
            Some(ad) => ad.apply_rows(x, w0),
            None => x.matmul_nt(w0),
        }
    }
}

/// Grouped-query attention over row-stacked inputs. Also returns each
/// head's attention matrix.
pub(crate) fn attention(x: &Mat, lv: &LayerView<'_>, cfg: &ModelConfig, causal: bool) -> (Mat, Vec<Mat>) {
    let hd = cfg.head_dim();
    let q = rope_rows(&lv.apply(Proj::Q, x), hd, cfg.rope_base, 1.0);
    let k = rope_rows(&lv.apply(Proj::K, x), hd, cfg.rope_base, 1.0);
    let v = lv.apply(Proj::V, x);
    let per_group = cfg.n_heads / cfg.n_kv_groups;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let g = h / per_group;
        let qh = q.col_slice(h * hd, hd);
        let kh = k.col_slice(g * hd, hd);
        let vh = v.col_slice(g * hd, hd);
        let a = softmax_rows(&qh.matmul_nt(&kh).scale(scale), causal);
        heads.push(a.matmul(&vh));
        probs.push(a);
    }
    (lv.apply(Proj::O, &Mat::concat_cols(&heads)), probs)
}

pub(crate) fn feed_forward(x: &Mat, lv: &LayerView<'_>) -> Mat {
    let up = lv.apply(Proj::Up, x);
    let gate = lv.apply(Proj::Gate, x).map(silu);
    lv.apply(Proj::Down, &up.zip_map(&gate, |a, b| a * b))
}

fn check_rows(x: &Mat, w: &BlockWeights, cfg: &ModelConfig) -> Result<(), TinyLmError> {
    w.check(cfg)?;
    if x.rows == 0 || x.cols != cfg.d_model {
        return Err(TinyLmError::Shape(format!(
            "input is {:?}, expected N×{} with N >= 1",
            x.shape(),
            cfg.d_model
        )));
    }
    Ok(())
}

/// Attention sublayer on its own (input already normalized).
pub fn gqa_attention(x: &Mat, w: &BlockWeights, cfg: &ModelConfig, causal: bool) -> Result<Mat, TinyLmError> {
    check_rows(x, w, cfg)?;
    let lv = LayerView { w, adapters: None, layer: 0 };
    Ok(attention(x, &lv, cfg, causal).0)
}

/// Per-head attention matrices of [`gqa_attention`].
pub fn gqa_attention_weights(x: &Mat, w: &BlockWeights, cfg: &ModelConfig, causal: bool) -> Result<Vec<Mat>, TinyLmError> {
    check_rows(x, w, cfg)?;
    let lv = LayerView { w, adapters: None, layer: 0 };
    Ok(attention(x, &lv, cfg, causal).1)
}

/// f_down(f_up(X) ⊙ SiLU(f_gate(X)))
pub fn ffn(x: &Mat, w: &BlockWeights, cfg: &ModelConfig) -> Result<Mat, TinyLmError> {
    check_rows(x, w, cfg)?;
    Ok(feed_forward(x, &LayerView { w, adapters: None, layer: 0 }))
}

impl Model {
    /// Seeded Gaussian (std 0.02) matrices, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, TinyLmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Mat::gaussian(config.vocab, config.d_model, BASE_INIT_STD, &mut rng);
        let blocks = (0..config.n_layers).map(|_| BlockWeights::init(&config, &mut rng)).collect();
        let f_vocab = if config.tie_embeddings {
            embed.clone()
        } else {
            Mat::gaussian(config.vocab, config.d_model, BASE_INIT_STD, &mut rng)
        };
        Ok(Self {
            head: OutputHead {
                g_final: vec![1.0; config.d_model],
                f_vocab,
            },
            config,
            embed,
            blocks,
        })
    }

    pub fn validate(&self) -> Result<(), TinyLmError> {
        let c = &self.config;
        c.validate()?;
        if self.blocks.len() != c.n_layers {
            return Err(TinyLmError::Shape("block count differs from n_layers".into()));
        }
        for b in &self.blocks {
            b.check(c)?;
        }
        let vd = (c.vocab, c.d_model);
        if self.embed.shape() != vd || self.head.f_vocab.shape() != vd || self.head.g_final.len() != c.d_model {
            return Err(TinyLmError::Shape("embedding or head shape".into()));
        }
        Ok(())
    }

    pub fn weight(&self, key: AdapterKey) -> &Mat {
        match key {
            AdapterKey::Block { layer, proj } => self.blocks[layer].proj(proj),
            AdapterKey::Vocab => &self.head.f_vocab,
        }
    }

    /// sha256 over every base parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        put(&self.embed.data);
        for b in &self.blocks {
            for p in Proj::ALL {
                put(&b.proj(p).data);
            }
            put(&b.g_attn);
            put(&b.g_ffn);
        }
        put(&self.head.g_final);
        put(&self.head.f_vocab.data);
        hex::encode(h.finalize())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<(), TinyLmError> {
        if tokens.is_empty() {
            return Err(TinyLmError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(TinyLmError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(TinyLmError::TokenOutOfVocab {
                token: t,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    pub(crate) fn embed_rows(&self, tokens: &[usize]) -> Mat {
        let mut x = Mat::zeros(tokens.len(), self.config.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embed.row(t));
        }
        x
    }

    /// Causal forward pass; per block X += GQA(RMSNorm(X)), then
    /// X += FFN(RMSNorm(X)); then softmax(f_vocab(RMSNorm(X))).
    pub fn forward(&self, tokens: &[usize], adapters: Option<&Adapters>) -> Result<ForwardOutput, TinyLmError> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let mut x = self.embed_rows(tokens);
        for (layer, w) in self.blocks.iter().enumerate() {
            let lv = LayerView { w, adapters, layer };
            let (att, _) = attention(&rmsnorm_rows(&x, &w.g_attn, c.eps), &lv, c, true);
            x.add_assign(&att);
            x.add_assign(&feed_forward(&rmsnorm_rows(&x, &w.g_ffn, c.eps), &lv));
        }
        let hidden = rmsnorm_rows(&x, &self.head.g_final, c.eps);
        let logits = match adapters.and_then(|a| a.get(AdapterKey::Vocab)) {
            Some(ad) => ad.apply_rows(&hidden, &self.head.f_vocab),
            None => hidden.matmul_nt(&self.head.f_vocab),
        };
        if !logits.is_finite() {
            return Err(TinyLmError::NonFinite("logits".into()));
        }
        let probs = softmax_rows(&logits, false);
        Ok(ForwardOutput { logits, probs, hidden })
    }
}

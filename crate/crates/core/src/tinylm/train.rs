//! LoRA fine-tuning: next-token cross-entropy on target tokens only,
//! AdamW on the A/B matrices, early stopping on validation loss.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autograd::{Tape, Var};
use super::lora::{AdapterKey, Adapters, Proj};
use super::ops::log_softmax;
use super::{Mat, Model, TinyLmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without improvement before stopping.
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay applied to A and B.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            early_stop_patience: 5,
            batch_size: 1,
            seed: 42,
            max_input_len: 256,
            max_output_len: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TinyLmError> {
        let bad = |m: &str| Err(TinyLmError::InvalidParameter(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return bad("epochs, batch_size and early_stop_patience must be >= 1");
        }
        if self.max_input_len == 0 || self.max_output_len == 0 {
            return bad("max lengths must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return bad("betas must lie in [0, 1) and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Instruction tokens followed by the tokens to be learned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl TrainExample {
    /// Concatenated sequence (after truncation) and per-position targets:
    /// position t predicts token t+1 when that token belongs to the target.
    fn layout(&self, cfg: &TrainConfig) -> (Vec<usize>, Vec<Option<usize>>) {
        let input = &self.input[..self.input.len().min(cfg.max_input_len)];
        let target = &self.target[..self.target.len().min(cfg.max_output_len)];
        let seq: Vec<usize> = input.iter().chain(target).copied().collect();
        let targets = (0..seq.len())
            .map(|t| (t + 1 >= input.len() && t + 1 < seq.len()).then(|| seq[t + 1]))
            .collect();
        (seq, targets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub valid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss before the first update.
    pub initial_train_loss: f64,
    /// Mean training loss of the returned adapters.
    pub final_train_loss: f64,
    pub history: Vec<EpochLoss>,
    /// Epoch (1-based) whose adapters are returned.
    pub best_epoch: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Mean target-token NLL of one example.
pub fn example_loss(model: &Model, adapters: Option<&Adapters>, ex: &TrainExample, cfg: &TrainConfig) -> Result<f64, TinyLmError> {
    let (seq, targets) = ex.layout(cfg);
    let out = model.forward(&seq, adapters)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            total -= log_softmax(out.logits.row(r))[t];
            n += 1;
        }
    }
    Ok(total / n as f64)
}

pub fn dataset_loss(model: &Model, adapters: Option<&Adapters>, data: &[TrainExample], cfg: &TrainConfig) -> Result<f64, TinyLmError> {
    let mut s = 0.0;
    for ex in data {
        s += example_loss(model, adapters, ex, cfg)?;
    }
    Ok(s / data.len() as f64)
}

/// Leaves for every A and B on a tape.
pub(crate) struct AdapterVars {
    pub vars: BTreeMap<AdapterKey, (Var, Var, f64)>,
}

fn linear(tape: &mut Tape, x: Var, w0: &Mat, key: AdapterKey, av: &AdapterVars) -> Var {
    let w = tape.constant(w0.clone());
    let base = tape.matmul_nt(x, w);
    match av.vars.get(&key) {
        Some(&(a, b, s)) => {
            let xa = tape.matmul_nt(x, a);
            let xab = tape.matmul_nt(xa, b);
            let d = tape.scale(xab, s);
            tape.add(base, d)
        }
        None => base,
    }
}

/// The model forward recorded on a tape; returns the loss node.
pub(crate) fn tape_loss(
    tape: &mut Tape,
    model: &Model,
    av: &AdapterVars,
    seq: &[usize],
    targets: &[Option<usize>],
) -> Var {
    let c = &model.config;
    let hd = c.head_dim();
    let per_group = c.n_heads / c.n_kv_groups;
    let mut x = tape.constant(model.embed_rows(seq));
    for (layer, w) in model.blocks.iter().enumerate() {
        let key = |proj| AdapterKey::Block { layer, proj };
        let xn = tape.rmsnorm(x, &w.g_attn, c.eps);
        let q = linear(tape, xn, &w.f_q, key(Proj::Q), av);
        let q = tape.rope(q, hd, c.rope_base);
        let k = linear(tape, xn, &w.f_k, key(Proj::K), av);
        let k = tape.rope(k, hd, c.rope_base);
        let v = linear(tape, xn, &w.f_v, key(Proj::V), av);
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let g = h / per_group;
            let qh = tape.col_slice(q, h * hd, hd);
            let kh = tape.col_slice(k, g * hd, hd);
            let vh = tape.col_slice(v, g * hd, hd);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let a = tape.causal_softmax(scores);
            heads.push(tape.matmul(a, vh));
        }
        let cat = tape.concat_cols(&heads);
        let att = linear(tape, cat, &w.f_o, key(Proj::O), av);
        x = tape.add(x, att);

        let xn = tape.rmsnorm(x, &w.g_ffn, c.eps);
        let up = linear(tape, xn, &w.f_up, key(Proj::Up), av);
        let gate = linear(tape, xn, &w.f_gate, key(Proj::Gate), av);
        let gate = tape.silu(gate);
        let hmid = tape.mul(up, gate);
        let down = linear(tape, hmid, &w.f_down, key(Proj::Down), av);
        x = tape.add(x, down);
    }
    let hidden = tape.rmsnorm(x, &model.head.g_final, c.eps);
    let logits = linear(tape, hidden, &model.head.f_vocab, AdapterKey::Vocab, av);
    tape.cross_entropy(logits, targets)
}

/// Loss and analytic gradients (dA, dB per adapter) for one example.
pub fn adapter_gradients(
    model: &Model,
    adapters: &Adapters,
    ex: &TrainExample,
    cfg: &TrainConfig,
) -> Result<(f64, BTreeMap<AdapterKey, (Mat, Mat)>), TinyLmError> {
    let (seq, targets) = ex.layout(cfg);
    model.check_tokens(&seq)?;
    if targets.iter().all(Option::is_none) {
        return Err(TinyLmError::InvalidParameter("example has no target tokens to learn".into()));
    }
    let mut tape = Tape::new();
    let mut av = AdapterVars { vars: BTreeMap::new() };
    for (key, ad) in &adapters.map {
        let a = tape.param(ad.a.clone());
        let b = tape.param(ad.b.clone());
        av.vars.insert(*key, (a, b, ad.scaling()));
    }
    let loss = tape_loss(&mut tape, model, &av, &seq, &targets);
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(TinyLmError::NonFinite(format!("training loss {value} on sequence of {} tokens", seq.len())));
    }
    let mut grads = tape.backward(loss);
    let mut out = BTreeMap::new();
    for (key, (a, b, _)) in av.vars {
        let ga = grads[a.0].take().unwrap_or_else(|| Mat::zeros(tape.value(a).rows, tape.value(a).cols));
        let gb = grads[b.0].take().unwrap_or_else(|| Mat::zeros(tape.value(b).rows, tape.value(b).cols));
        out.insert(key, (ga, gb));
    }
    Ok((value, out))
}

struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl AdamW {
    fn new(adapters: &Adapters) -> Self {
        let zeros: Vec<Mat> = adapters
            .map
            .values()
            .flat_map(|ad| [Mat::zeros(ad.a.rows, ad.a.cols), Mat::zeros(ad.b.rows, ad.b.cols)])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, adapters: &mut Adapters, grads: &BTreeMap<AdapterKey, (Mat, Mat)>, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let params = adapters.map.iter_mut().flat_map(|(k, ad)| {
            let (ga, gb) = &grads[k];
            [(&mut ad.a, ga), (&mut ad.b, gb)]
        });
        for ((p, g), (m, v)) in params.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= cfg.learning_rate * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * p.data[i]);
            }
        }
    }
}

/// Trains `adapters` in place and returns the loss history. The base
/// model is borrowed immutably, so W₀ cannot change. With a validation
/// set, early stopping and best-epoch selection use validation loss;
/// otherwise training loss.
pub fn train_lora(
    model: &Model,
    adapters: &mut Adapters,
    train: &[TrainExample],
    valid: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport, TinyLmError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TinyLmError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(adapters);
    let initial_train_loss = dataset_loss(model, Some(adapters), train, cfg)?;
    info!("initial training loss {initial_train_loss:.6}");

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, adapters.clone());
    let mut steps = 0usize;
    let mut stale = 0usize;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            // average gradients over the batch
            let mut acc: Option<BTreeMap<AdapterKey, (Mat, Mat)>> = None;
            for &i in batch {
                let (loss, g) = adapter_gradients(model, adapters, &train[i], cfg)?;
                epoch_loss += loss;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (k, (ga, gb)) in g {
                            let e = a.get_mut(&k).expect("same keys every step");
                            e.0.add_assign(&ga);
                            e.1.add_assign(&gb);
                        }
                    }
                }
            }
            let mut acc = acc.expect("batches are nonempty");
            if batch.len() > 1 {
                let s = 1.0 / batch.len() as f64;
                for (ga, gb) in acc.values_mut() {
                    *ga = ga.scale(s);
                    *gb = gb.scale(s);
                }
            }
            opt.step(adapters, &acc, cfg);
            steps += 1;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(dataset_loss(model, Some(adapters), valid, cfg)?)
        };
        debug!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:?}");
        history.push(EpochLoss {
            epoch,
            train: train_loss,
            valid: valid_loss,
        });
        let monitored = match valid_loss {
            Some(v) => v,
            None => dataset_loss(model, Some(adapters), train, cfg)?,
        };
        if monitored < best.0 {
            best = (monitored, epoch, adapters.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                info!("early stop after epoch {epoch}; best epoch {}", best.1);
                stopped_early = true;
                break;
            }
        }
    }
    *adapters = best.2;
    let final_train_loss = dataset_loss(model, Some(adapters), train, cfg)?;
    Ok(TrainReport {
        initial_train_loss,
        final_train_loss,
        history,
        best_epoch: best.1,
        steps,
        stopped_early,
    })
}

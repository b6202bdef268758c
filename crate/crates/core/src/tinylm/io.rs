//! Binary model/adapter files.
//!
//! Layout: `COTKITLM` magic, u32 format version, u64 header length, JSON
//! header (config, LoRA settings, tensor table), the tensors as
//! little-endian f64 in table order, then a sha256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::{AdapterKey, Adapters, LoraAdapter, Proj};
use super::model::{BlockWeights, OutputHead};
use super::{Mat, Model, ModelConfig, TinyLmError};

const MAGIC: &[u8; 8] = b"COTKITLM";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lora: Option<LoraHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraHeader {
    rank: usize,
    alpha: f64,
    keys: Vec<AdapterKey>,
}

fn vec_mat(v: &[f64]) -> Mat {
    Mat::from_vec(1, v.len(), v.to_vec())
}

fn tensors(model: &Model, adapters: Option<&Adapters>) -> Vec<(String, Mat)> {
    let mut out = vec![("embed".to_string(), model.embed.clone())];
    for (i, b) in model.blocks.iter().enumerate() {
        for p in Proj::ALL {
            out.push((format!("layers.{i}.{}", p.name()), b.proj(p).clone()));
        }
        out.push((format!("layers.{i}.g_attn"), vec_mat(&b.g_attn)));
        out.push((format!("layers.{i}.g_ffn"), vec_mat(&b.g_ffn)));
    }
    out.push(("head.g_final".into(), vec_mat(&model.head.g_final)));
    out.push(("head.f_vocab".into(), model.head.f_vocab.clone()));
    if let Some(ad) = adapters {
        for (k, a) in &ad.map {
            out.push((format!("lora.{}.A", k.name()), a.a.clone()));
            out.push((format!("lora.{}.B", k.name()), a.b.clone()));
        }
    }
    out
}

pub fn to_bytes(model: &Model, adapters: Option<&Adapters>) -> Vec<u8> {
    let ts = tensors(model, adapters);
    let header = Header {
        config: model.config.clone(),
        lora: adapters.map(|a| LoraHeader {
            rank: a.rank,
            alpha: a.alpha,
            keys: a.map.keys().copied().collect(),
        }),
        tensors: ts
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                shape: [m.rows, m.cols],
            })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    for (_, m) in &ts {
        for x in &m.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn fmt_err(m: impl Into<String>) -> TinyLmError {
    TinyLmError::Format(m.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Option<Adapters>), TinyLmError> {
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(fmt_err("not a cotkit model file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fmt_err("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt_err(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| fmt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..hend]).map_err(|e| fmt_err(format!("header: {e}")))?;
    header.config.validate()?;

    let mut pos = hend;
    let mut table = BTreeMap::new();
    for t in &header.tensors {
        let n = t.shape[0].checked_mul(t.shape[1]).ok_or_else(|| fmt_err("shape overflow"))?;
        let end = n.checked_mul(8).and_then(|b| pos.checked_add(b)).filter(|&e| e <= body.len());
        let end = end.ok_or_else(|| fmt_err(format!("tensor {} runs past the end", t.name)))?;
        let data = body[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        table.insert(t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data));
        pos = end;
    }
    if pos != body.len() {
        return Err(fmt_err("trailing bytes after tensors"));
    }
    let mut take = |name: String| table.remove(&name).ok_or_else(|| fmt_err(format!("missing tensor {name}")));
    let cfg = header.config;
    let embed = take("embed".into())?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let mut m = |p: &str| take(format!("layers.{i}.{p}"));
        blocks.push(BlockWeights {
            f_q: m("f_q")?,
            f_k: m("f_k")?,
            f_v: m("f_v")?,
            f_o: m("f_o")?,
            f_up: m("f_up")?,
            f_gate: m("f_gate")?,
            f_down: m("f_down")?,
            g_attn: m("g_attn")?.data,
            g_ffn: m("g_ffn")?.data,
        });
    }
    let head = OutputHead {
        g_final: take("head.g_final".into())?.data,
        f_vocab: take("head.f_vocab".into())?,
    };
    let model = Model {
        config: cfg,
        embed,
        blocks,
        head,
    };
    model.validate()?;
    let adapters = match header.lora {
        None => None,
        Some(l) => {
            let mut map = BTreeMap::new();
            for k in l.keys {
                let a = take(format!("lora.{}.A", k.name()))?;
                let b = take(format!("lora.{}.B", k.name()))?;
                let w = model.weight(k);
                if a.shape() != (l.rank, w.cols) || b.shape() != (w.rows, l.rank) {
                    return Err(fmt_err(format!("adapter {} has wrong shape", k.name())));
                }
                map.insert(k, LoraAdapter { a, b, alpha: l.alpha });
            }
            Some(Adapters {
                rank: l.rank,
                alpha: l.alpha,
                map,
            })
        }
    };
    Ok((model, adapters))
}

pub fn save(path: &Path, model: &Model, adapters: Option<&Adapters>) -> Result<(), TinyLmError> {
    std::fs::write(path, to_bytes(model, adapters)).map_err(|e| TinyLmError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(Model, Option<Adapters>), TinyLmError> {
    let bytes = std::fs::read(path).map_err(|e| TinyLmError::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

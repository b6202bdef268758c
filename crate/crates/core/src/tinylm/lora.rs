//! Low-rank adapters: W₀x + (alpha/r)·B·A·x with W₀ frozen.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mat, Model, TinyLmError};

/// Std of the Gaussian init of every A matrix.
pub const LORA_A_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Up, Proj::Gate, Proj::Down];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "f_q",
            Proj::K => "f_k",
            Proj::V => "f_v",
            Proj::O => "f_o",
            Proj::Up => "f_up",
            Proj::Gate => "f_gate",
            Proj::Down => "f_down",
        }
    }
}

/// Which frozen matrix an adapter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdapterKey {
    Block { layer: usize, proj: Proj },
    Vocab,
}

impl AdapterKey {
    pub fn name(self) -> String {
        match self {
            AdapterKey::Block { layer, proj } => format!("layers.{layer}.{}", proj.name()),
            AdapterKey::Vocab => "head.f_vocab".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// r×k, Gaussian at init.
    pub a: Mat,
    /// d×r, zero at init.
    pub b: Mat,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Adapter for a d×k matrix.
    pub fn new(d: usize, k: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self, TinyLmError> {
        let max = d.min(k) / 2;
        if rank == 0 || rank > max {
            return Err(TinyLmError::RankTooLarge { rank, max });
        }
        Ok(Self {
            a: Mat::gaussian(rank, k, LORA_A_STD, rng),
            b: Mat::zeros(d, rank),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// (alpha/r)·B·A
    pub fn delta(&self) -> Mat {
        self.b.matmul(&self.a).scale(self.scaling())
    }

    /// Row layout: X·W₀ᵀ + s·(X·Aᵀ)·Bᵀ.
    pub(crate) fn apply_rows(&self, x: &Mat, w0: &Mat) -> Mat {
        let base = x.matmul_nt(w0);
        if self.alpha == 0.0 {
            return base;
        }
        base.add(&x.matmul_nt(&self.a).matmul_nt(&self.b).scale(self.scaling()))
    }
}

/// W₀·x + (alpha/r)·B·(A·x) for one input vector.
pub fn lora_forward(x: &[f64], w0: &Mat, adapter: &LoraAdapter) -> Result<Vec<f64>, TinyLmError> {
    if w0.cols != x.len() || adapter.a.cols != w0.cols || adapter.b.rows != w0.rows || adapter.b.cols != adapter.rank() {
        return Err(TinyLmError::Shape(format!(
            "lora_forward: W0 {:?}, A {:?}, B {:?}, x {}",
            w0.shape(),
            adapter.a.shape(),
            adapter.b.shape(),
            x.len()
        )));
    }
    let xm = Mat::from_vec(1, x.len(), x.to_vec());
    Ok(adapter.apply_rows(&xm, w0).data)
}

/// One adapter per linear projection of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub rank: usize,
    pub alpha: f64,
    pub map: BTreeMap<AdapterKey, LoraAdapter>,
}

impl Adapters {
    pub fn get(&self, key: AdapterKey) -> Option<&LoraAdapter> {
        self.map.get(&key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.map.values().map(|a| a.a.data.len() + a.b.data.len()).sum()
    }
}

/// Attaches an adapter to f_q, f_k, f_v, f_o, f_up, f_gate, f_down of every
/// block and to f_vocab. A is drawn from one ChaCha8 stream in key order.
pub fn lora_attach(model: &Model, rank: usize, alpha: f64, seed: u64) -> Result<Adapters, TinyLmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<AdapterKey> = (0..model.config.n_layers)
        .flat_map(|layer| Proj::ALL.into_iter().map(move |proj| AdapterKey::Block { layer, proj }))
        .collect();
    keys.push(AdapterKey::Vocab);
    keys.sort();
    // validate every matrix before drawing anything
    for &key in &keys {
        let w = model.weight(key);
        let max = w.rows.min(w.cols) / 2;
        if rank == 0 || rank > max {
            return Err(TinyLmError::RankTooLarge { rank, max });
        }
    }
    let mut map = BTreeMap::new();
    for key in keys {
        let w = model.weight(key);
        map.insert(key, LoraAdapter::new(w.rows, w.cols, rank, alpha, &mut rng)?);
    }
    Ok(Adapters { rank, alpha, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let w0 = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let ad = LoraAdapter {
            a: Mat::from_rows(&[vec![1.0, 0.0]]),
            b: Mat::from_rows(&[vec![1.0], vec![1.0]]),
            alpha: 1.0,
        };
        let y = lora_forward(&[3.0, 5.0], &w0, &ad).unwrap();
        // W0·x = (13, 29); ΔW·x = (3, 3)
        assert_eq!(y, vec![16.0, 32.0]);
    }

    #[test]
    fn zero_b_and_zero_alpha_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = Mat::gaussian(4, 6, 1.0, &mut rng);
        let x = [0.5, -1.0, 2.0, 0.0, 3.0, 1.5];
        let base = Mat::from_vec(1, 6, x.to_vec()).matmul_nt(&w0).data;
        let mut ad = LoraAdapter::new(4, 6, 2, 16.0, &mut rng).unwrap();
        assert!(ad.b.data.iter().all(|v| *v == 0.0));
        assert_eq!(lora_forward(&x, &w0, &ad).unwrap(), base);
        ad.b = Mat::filled(4, 2, 1.0);
        ad.alpha = 0.0;
        assert_eq!(lora_forward(&x, &w0, &ad).unwrap(), base);
    }

    #[test]
    fn rank_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LoraAdapter::new(8, 4, 2, 4.0, &mut rng).is_ok());
        assert!(matches!(
            LoraAdapter::new(8, 4, 3, 4.0, &mut rng),
            Err(TinyLmError::RankTooLarge { rank: 3, max: 2 })
        ));
        assert!(LoraAdapter::new(8, 4, 0, 4.0, &mut rng).is_err());
    }
}

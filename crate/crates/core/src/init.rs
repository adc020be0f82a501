//! Weight initialization and the seeded random source shared by training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Counter-based generator. Cloning copies the position, so two clones
/// produce the same stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child generator; advances `self` by one draw.
    pub fn split(&mut self) -> Self {
        Self::from_seed(self.rng.next_u64())
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Xavier,
    He,
    Orthogonal,
    Normal,
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xavier" => Ok(Self::Xavier),
            "he" => Ok(Self::He),
            "orthogonal" | "ortho" => Ok(Self::Orthogonal),
            "normal" | "random" => Ok(Self::Normal),
            other => Err(Error::Config(format!("unknown weight_init {other:?}"))),
        }
    }
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Xavier => "xavier",
            Self::He => "he",
            Self::Orthogonal => "orthogonal",
            Self::Normal => "normal",
        })
    }
}

pub const NORMAL_STD: f64 = 0.01;

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [a, b, ..] => (*a, *b),
    }
}

/// Draws a weight tensor with the given scheme.
///
/// Fan-in and fan-out are `shape[0]` and `shape[1]`. Orthogonal requires a
/// rank-2 shape and yields orthonormal columns (tall) or rows (wide).
pub fn init_weight<T: Scalar>(method: InitMethod, shape: &[usize], rng: &mut RngState) -> Result<Tensor<T>> {
    if shape.contains(&0) {
        return Err(Error::Tensor(format!("zero extent in init shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    let (fan_in, fan_out) = fans(shape);
    let values: Vec<f64> = match method {
        InitMethod::Xavier => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * limit).collect()
        }
        InitMethod::He => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.normal() * std).collect()
        }
        InitMethod::Normal => (0..n).map(|_| rng.normal() * NORMAL_STD).collect(),
        InitMethod::Orthogonal => {
            if shape.len() != 2 {
                return Err(Error::Tensor(format!(
                    "orthogonal init needs a rank-2 shape, got {shape:?}"
                )));
            }
            orthogonal(shape[0], shape[1], rng)
        }
    };
    Tensor::from_f64(shape.to_vec(), &values)
}

/// Row-major `[rows, cols]` matrix with orthonormal columns when
/// `rows >= cols`, orthonormal rows otherwise.
fn orthogonal(rows: usize, cols: usize, rng: &mut RngState) -> Vec<f64> {
    let n = rows.max(cols);
    let a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
    let q = householder_q(&a, n);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            // tall: first `cols` columns of Q; wide: first `rows` columns, transposed
            out.push(if rows >= cols { q[i * n + j] } else { q[j * n + i] });
        }
    }
    out
}

/// Q factor of the QR decomposition of the square matrix `a`, with column
/// signs fixed so that diag(R) is positive.
fn householder_q(a: &[f64], n: usize) -> Vec<f64> {
    let mut r = a.to_vec();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[k * n + k] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        for i in k..n {
            v[i] = r[i * n + k];
        }
        v[k] -= alpha;
        let vnorm2: f64 = v[k..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- H R
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i] * r[i * n + j]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                r[i * n + j] -= f * v[i];
            }
        }
        // Q <- Q H
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| q[i * n + j] * v[j]).sum();
            let f = 2.0 * dot / vnorm2;
            for j in k..n {
                q[i * n + j] -= f * v[j];
            }
        }
    }
    for j in 0..n {
        if r[j * n + j] < 0.0 {
            for i in 0..n {
                q[i * n + j] = -q[i * n + j];
            }
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn orthogonal_square_is_orthonormal() {
        let mut rng = RngState::from_seed(3);
        let w: Tensor<f64> = init_weight(InitMethod::Orthogonal, &[4, 4], &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| w.get(&[k, i]) * w.get(&[k, j])).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({i},{j}) {dot}");
            }
        }
    }

    #[test]
    fn orthogonal_rectangular() {
        let mut rng = RngState::from_seed(9);
        let tall: Tensor<f64> = init_weight(InitMethod::Orthogonal, &[6, 3], &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..6).map(|k| tall.get(&[k, i]) * tall.get(&[k, j])).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        let wide: Tensor<f64> = init_weight(InitMethod::Orthogonal, &[2, 5], &mut rng).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let dot: f64 = (0..5).map(|k| wide.get(&[i, k]) * wide.get(&[j, k])).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn orthogonal_rejects_vectors() {
        let mut rng = RngState::from_seed(1);
        assert!(init_weight::<f64>(InitMethod::Orthogonal, &[4], &mut rng).is_err());
        assert!(init_weight::<f64>(InitMethod::Xavier, &[4, 0], &mut rng).is_err());
    }

    #[test]
    fn xavier_and_he_variance() {
        let mut rng = RngState::from_seed(11);
        let x: Tensor<f64> = init_weight(InitMethod::Xavier, &[100, 100], &mut rng).unwrap();
        let v = variance(x.data());
        assert!((v - 0.01).abs() < 0.2 * 0.01, "xavier var {v}");
        let limit = (6.0f64 / 200.0).sqrt();
        assert!(x.data().iter().all(|w| w.abs() <= limit));

        let h: Tensor<f64> = init_weight(InitMethod::He, &[100, 50], &mut rng).unwrap();
        let v = variance(h.data());
        assert!((v - 0.02).abs() < 0.2 * 0.02, "he var {v}");

        let n: Tensor<f64> = init_weight(InitMethod::Normal, &[100, 100], &mut rng).unwrap();
        let v = variance(n.data());
        assert!((v - 1e-4).abs() < 0.2 * 1e-4, "normal var {v}");
    }

    #[test]
    fn deterministic_per_seed() {
        for m in [InitMethod::Xavier, InitMethod::He, InitMethod::Orthogonal, InitMethod::Normal] {
            let a: Tensor<f32> = init_weight(m, &[5, 7], &mut RngState::from_seed(42)).unwrap();
            let b: Tensor<f32> = init_weight(m, &[5, 7], &mut RngState::from_seed(42)).unwrap();
            assert_eq!(a.data(), b.data(), "{m}");
        }
    }

    #[test]
    fn rng_state_serializes_position() {
        let mut rng = RngState::from_seed(5);
        rng.normal();
        let json = serde_json::to_string(&rng).unwrap();
        let mut back: RngState = serde_json::from_str(&json).unwrap();
        assert_eq!(rng.next_u64(), back.next_u64());
    }
}

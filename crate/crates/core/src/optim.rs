//! Optimizers, gradient clipping, gradient noise and the L2 penalty.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::RngState;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_CLIP: f64 = 5.0;
pub const DEFAULT_DECAY: f64 = 1e-5;
pub const DEFAULT_NOISE_ETA: f64 = 0.01;
pub const DEFAULT_NOISE_GAMMA: f64 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adadelta,
    Adam,
}

impl OptimizerKind {
    pub fn default_lrate(self) -> f64 {
        match self {
            Self::Sgd => 0.01,
            Self::Rmsprop => 0.001,
            Self::Adadelta => 1.0,
            Self::Adam => 0.0004,
        }
    }

    fn slot_names(self) -> &'static [&'static str] {
        match self {
            Self::Sgd => &[],
            Self::Rmsprop => &["acc"],
            Self::Adadelta => &["acc_grad", "acc_delta"],
            Self::Adam => &["m", "v"],
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "rmsprop" => Ok(Self::Rmsprop),
            "adadelta" => Ok(Self::Adadelta),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Rmsprop => "rmsprop",
            Self::Adadelta => "adadelta",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lrate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rho: f64,
}

impl Hyper {
    pub fn defaults(kind: OptimizerKind, lrate: f64) -> Self {
        let (eps, rho) = match kind {
            OptimizerKind::Adam => (1e-8, 0.95),
            _ => (1e-6, 0.95),
        };
        Self {
            lrate,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            rho,
        }
    }
}

/// Scalar part of an optimizer state, stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    /// Number of updates applied so far.
    pub step: u64,
    /// Per parameter, one tensor per slot name of `kind`.
    slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, hyper: Hyper, store: &ParamStore<T>) -> Result<Self> {
        let n = kind.slot_names().len();
        let slots = store
            .iter()
            .map(|(_, p)| (0..n).map(|_| Tensor::zeros(p.value.shape())).collect())
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            hyper,
            step: 0,
            slots,
        })
    }

    pub fn with_lrate(kind: OptimizerKind, lrate: f64, store: &ParamStore<T>) -> Result<Self> {
        Self::new(kind, Hyper::defaults(kind, lrate), store)
    }

    /// Applies one update using the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.slots.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.slots.len(),
                store.len()
            )));
        }
        let t = self.step + 1;
        let h = self.hyper;
        let lr: T = lit(h.lrate);
        let mut new_values = Vec::with_capacity(store.len());
        for (i, (_, p)) in store.iter().enumerate() {
            let grad = p.grad.data();
            if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at {bad}", p.name)));
            }
            let mut value = p.value.data().to_vec();
            let slots = &mut self.slots[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, &g) in value.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Rmsprop => {
                    let rho: T = lit(h.rho);
                    let eps: T = lit(h.eps);
                    let acc = slots[0].data_mut();
                    for ((v, &g), a) in value.iter_mut().zip(grad).zip(acc.iter_mut()) {
                        *a = rho * *a + (T::one() - rho) * g * g;
                        *v -= lr * g / (*a + eps).sqrt();
                    }
                }
                OptimizerKind::Adadelta => {
                    let rho: T = lit(h.rho);
                    let eps: T = lit(h.eps);
                    let (first, second) = slots.split_at_mut(1);
                    let acc_g = first[0].data_mut();
                    let acc_d = second[0].data_mut();
                    for (((v, &g), ag), ad) in value.iter_mut().zip(grad).zip(acc_g.iter_mut()).zip(acc_d.iter_mut()) {
                        *ag = rho * *ag + (T::one() - rho) * g * g;
                        let delta = (*ad + eps).sqrt() / (*ag + eps).sqrt() * g;
                        *ad = rho * *ad + (T::one() - rho) * delta * delta;
                        *v -= lr * delta;
                    }
                }
                OptimizerKind::Adam => {
                    let b1: T = lit(h.beta1);
                    let b2: T = lit(h.beta2);
                    let eps: T = lit(h.eps);
                    let c1 = T::one() - b1.powi(t as i32);
                    let c2 = T::one() - b2.powi(t as i32);
                    let (first, second) = slots.split_at_mut(1);
                    let m = first[0].data_mut();
                    let vv = second[0].data_mut();
                    for (((v, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(vv.iter_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *v -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("update of {} at {bad}", p.name)));
            }
            new_values.push(value);
        }
        for (p, value) in store.iter_mut().zip(new_values) {
            p.value.data_mut().copy_from_slice(&value);
        }
        self.step = t;
        Ok(())
    }

    pub fn meta(&self) -> OptimizerMeta {
        OptimizerMeta {
            kind: self.kind,
            hyper: self.hyper,
            step: self.step,
        }
    }

    /// Slot tensors named `opt.<slot>.<param name>`.
    pub fn named_slots<'a>(&'a self, store: &'a ParamStore<T>) -> Vec<(String, &'a Tensor<T>)> {
        let names = self.kind.slot_names();
        store
            .iter()
            .zip(&self.slots)
            .flat_map(|((_, p), slots)| {
                names
                    .iter()
                    .zip(slots)
                    .map(move |(s, t)| (format!("opt.{s}.{}", p.name), t))
            })
            .collect()
    }

    /// Rebuilds a state from [`Self::meta`] and [`Self::named_slots`] output.
    pub fn restore(meta: &OptimizerMeta, store: &ParamStore<T>, tensors: &HashMap<String, Tensor<T>>) -> Result<Self> {
        let names = meta.kind.slot_names();
        let mut slots = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            let mut per = Vec::with_capacity(names.len());
            for s in names {
                let key = format!("opt.{s}.{}", p.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer slot {key}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("optimizer slot {key} has wrong shape")));
                }
                per.push(t.clone());
            }
            slots.push(per);
        }
        Ok(Self {
            kind: meta.kind,
            hyper: meta.hyper,
            step: meta.step,
            slots,
        })
    }
}

/// Rescales all gradients by `c / norm` when their joint L2 norm exceeds
/// `c`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(store: &mut ParamStore<T>, c: f64) -> Result<f64> {
    if c <= 0.0 || !c.is_finite() {
        return Err(Error::Config(format!("clip threshold must be positive, got {c}")));
    }
    for (_, p) in store.iter() {
        if !p.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let norm = store.grad_norm();
    if norm > c {
        let scale: T = lit(c / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

/// Variance of the annealed gradient noise at update `t`.
pub fn noise_variance(eta: f64, gamma: f64, t: u64) -> f64 {
    eta / (1.0 + t as f64).powf(gamma)
}

/// Adds `N(0, eta / (1 + t)^gamma)` to every gradient element. Only
/// available together with Adam.
pub fn gradient_noise<T: Scalar>(
    store: &mut ParamStore<T>,
    kind: OptimizerKind,
    t: u64,
    eta: f64,
    gamma: f64,
    rng: &mut RngState,
) -> Result<()> {
    if kind != OptimizerKind::Adam {
        return Err(Error::Config(format!(
            "gradient noise is only available with adam, not {kind}"
        )));
    }
    if eta == 0.0 {
        return Ok(());
    }
    let std = noise_variance(eta, gamma, t).sqrt();
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g += lit::<T>(rng.normal() * std);
        }
    }
    Ok(())
}

/// `decay_c * sum of squared weights`, excluding biases and gains, as a
/// graph term. Returns `None` when `decay_c` is zero.
pub fn l2_penalty<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, decay_c: f64) -> Result<Option<Var>> {
    if decay_c < 0.0 {
        return Err(Error::Config(format!("decay_c must be non-negative, got {decay_c}")));
    }
    if decay_c == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (id, p) in store.iter() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let w = g.param(store, id);
        let sq = g.mul(w, w)?;
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total.map(|t| g.scale(t, lit(decay_c))))
}

/// Plain value of [`l2_penalty`].
pub fn l2_penalty_value<T: Scalar>(store: &ParamStore<T>, decay_c: f64) -> f64 {
    decay_c
        * store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(_, p)| p.value.sum_squares().as_f64())
            .sum::<f64>()
}

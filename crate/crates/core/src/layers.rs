//! Layer forward definitions built from [`Graph`] operations.
//!
//! Parameter-owning layers are described by small structs of [`ParamId`]s
//! created against a [`ParamStore`]; the forward functions bind them to a
//! graph on demand, so the same definitions serve training, decoding and
//! gradient checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::{init_weight, InitMethod, RngState};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// Initialization choices for one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub weight: InitMethod,
    /// Scheme for square hidden-to-hidden matrices.
    pub recurrent: InitMethod,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            weight: InitMethod::Xavier,
            recurrent: InitMethod::Orthogonal,
        }
    }
}

pub(crate) fn new_weight<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut RngState,
    name: &str,
    shape: &[usize],
    method: InitMethod,
) -> Result<ParamId> {
    // vectors are drawn as one orthonormal column
    let value = match (method, shape) {
        (InitMethod::Orthogonal, &[n]) => init_weight(method, &[n, 1], rng)?.reshape(vec![n])?,
        _ => init_weight(method, shape, rng)?,
    };
    store.add(name, ParamKind::Weight, value)
}

pub(crate) fn new_bias<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<ParamId> {
    store.add(name, ParamKind::Bias, Tensor::zeros(&[dim])?)
}

pub(crate) fn new_gain<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<ParamId> {
    store.add(name, ParamKind::Gain, Tensor::ones(&[dim])?)
}

/// `act(x W + b)`.
pub fn ff<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>, act: Activation) -> Result<Var> {
    let mut y = g.matmul(x, w)?;
    if let Some(b) = b {
        y = g.add_bias(y, b)?;
    }
    Ok(match act {
        Activation::Linear => y,
        Activation::Tanh => g.tanh(y),
    })
}

/// `t * tanh(x W_h + b_h) + (1 - t) * x` with `t = sigmoid(x W_t + b_t)`.
pub fn highway<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w_h: Var,
    b_h: Var,
    w_t: Var,
    b_t: Var,
) -> Result<Var> {
    for w in [w_h, w_t] {
        let s = g.shape(w);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("highway", g.shape(x), s));
        }
    }
    let h = ff(g, x, w_h, Some(b_h), Activation::Tanh)?;
    let t = ff(g, x, w_t, Some(b_t), Activation::Linear)?;
    let t = g.sigmoid(t);
    let carry = g.one_minus(t);
    let a = g.mul(t, h)?;
    let b = g.mul(carry, x)?;
    g.add(a, b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, a: Var, gain: Var, bias: Var) -> Result<Var> {
    g.layer_norm(a, gain, bias, lit(LAYER_NORM_EPS))
}

#[derive(Clone, Debug)]
pub struct GruLayerNorm {
    pub x_gain: ParamId,
    pub x_bias: ParamId,
    pub h_gain: ParamId,
    pub h_bias: ParamId,
}

/// Gate stack of one GRU. Input-to-hidden matrices are `[in_dim, hid]`,
/// hidden-to-hidden `[hid, hid]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub in_dim: usize,
    pub hid: usize,
    pub w: ParamId,
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub u: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub b: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub ln: Option<GruLayerNorm>,
}

impl GruParams {
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        prefix: &str,
        in_dim: usize,
        hid: usize,
        init: InitSpec,
        layer_norm: bool,
    ) -> Result<Self> {
        let mut weight = |store: &mut ParamStore<T>, name: &str, shape: &[usize], m| {
            new_weight(store, rng, &format!("{prefix}.{name}"), shape, m)
        };
        let w = weight(store, "W", &[in_dim, hid], init.weight)?;
        let w_r = weight(store, "W_r", &[in_dim, hid], init.weight)?;
        let w_z = weight(store, "W_z", &[in_dim, hid], init.weight)?;
        let u = weight(store, "U", &[hid, hid], init.recurrent)?;
        let u_r = weight(store, "U_r", &[hid, hid], init.recurrent)?;
        let u_z = weight(store, "U_z", &[hid, hid], init.recurrent)?;
        let b = new_bias(store, &format!("{prefix}.b"), hid)?;
        let b_r = new_bias(store, &format!("{prefix}.b_r"), hid)?;
        let b_z = new_bias(store, &format!("{prefix}.b_z"), hid)?;
        let ln = if layer_norm {
            Some(GruLayerNorm {
                x_gain: new_gain(store, &format!("{prefix}.ln_x.g"), 3 * hid)?,
                x_bias: new_bias(store, &format!("{prefix}.ln_x.b"), 3 * hid)?,
                h_gain: new_gain(store, &format!("{prefix}.ln_h.g"), 3 * hid)?,
                h_bias: new_bias(store, &format!("{prefix}.ln_h.b"), 3 * hid)?,
            })
        } else {
            None
        };
        Ok(Self {
            in_dim,
            hid,
            w,
            w_r,
            w_z,
            u,
            u_r,
            u_z,
            b,
            b_r,
            b_z,
            ln,
        })
    }

    /// Pre-activations `(r, z, candidate)` for the input path.
    fn input_preacts<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<[Var; 3]> {
        let (w_r, w_z, w) = (g.param(store, self.w_r), g.param(store, self.w_z), g.param(store, self.w));
        let parts = [g.matmul(x, w_r)?, g.matmul(x, w_z)?, g.matmul(x, w)?];
        match &self.ln {
            Some(ln) => self.normalize(g, store, parts, ln.x_gain, ln.x_bias),
            None => Ok(parts),
        }
    }

    fn hidden_preacts<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<[Var; 3]> {
        let (u_r, u_z, u) = (g.param(store, self.u_r), g.param(store, self.u_z), g.param(store, self.u));
        let parts = [g.matmul(h, u_r)?, g.matmul(h, u_z)?, g.matmul(h, u)?];
        match &self.ln {
            Some(ln) => self.normalize(g, store, parts, ln.h_gain, ln.h_bias),
            None => Ok(parts),
        }
    }

    fn normalize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        parts: [Var; 3],
        gain: ParamId,
        bias: ParamId,
    ) -> Result<[Var; 3]> {
        let cat = g.concat(&parts)?;
        let (gv, bv) = (g.param(store, gain), g.param(store, bias));
        let n = layer_norm(g, cat, gv, bv)?;
        let h = self.hid;
        Ok([g.slice(n, 0, h)?, g.slice(n, h, h)?, g.slice(n, 2 * h, h)?])
    }
}

/// Checks a per-row 0/1 mask and expands it to `[batch, dim]`.
fn expand_mask<T: Scalar>(mask: &Tensor<T>, batch: usize, dim: usize) -> Result<Option<Tensor<T>>> {
    if mask.shape() != [batch] {
        return Err(Error::shape("gru mask", mask.shape(), &[batch]));
    }
    if let Some(bad) = mask.data().iter().find(|&&m| m != T::zero() && m != T::one()) {
        return Err(Error::Data(format!("mask entries must be 0 or 1, found {bad}")));
    }
    if mask.data().iter().all(|&m| m == T::one()) {
        return Ok(None);
    }
    mask.expand_last(dim).map(Some)
}

/// One GRU transition in the dl4mt form:
///
/// ```text
/// r  = sigmoid(x W_r + h U_r + b_r)
/// z  = sigmoid(x W_z + h U_z + b_z)
/// h~ = tanh(x W + r * (h U) + b)
/// h' = z * h + (1 - z) * h~
/// ```
///
/// Rows whose mask entry is 0 keep `h_prev` unchanged.
pub fn gru_step<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &GruParams,
    x: Var,
    h_prev: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let batch = g.shape(h_prev)[0];
    let full_mask = match mask {
        Some(m) => expand_mask(m, batch, p.hid)?,
        None => None,
    };
    let [xr, xz, xh] = p.input_preacts(g, store, x)?;
    let [hr, hz, hh] = p.hidden_preacts(g, store, h_prev)?;
    let (b, b_r, b_z) = (g.param(store, p.b), g.param(store, p.b_r), g.param(store, p.b_z));

    let r = g.add(xr, hr)?;
    let r = g.add_bias(r, b_r)?;
    let r = g.sigmoid(r);
    let z = g.add(xz, hz)?;
    let z = g.add_bias(z, b_z)?;
    let z = g.sigmoid(z);
    let gated = g.mul(r, hh)?;
    let cand = g.add(xh, gated)?;
    let cand = g.add_bias(cand, b)?;
    let cand = g.tanh(cand);
    let keep = g.mul(z, h_prev)?;
    let one_minus_z = g.one_minus(z);
    let update = g.mul(one_minus_z, cand)?;
    let h = g.add(keep, update)?;

    match full_mask {
        None => Ok(h),
        Some(m) => {
            let inv = m.map(|v| T::one() - v);
            let (m, inv) = (g.constant(m), g.constant(inv));
            let a = g.mul(m, h)?;
            let b = g.mul(inv, h_prev)?;
            g.add(a, b)
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_att: ParamId,
    pub u_att: ParamId,
    pub v_att: ParamId,
    pub b_att: ParamId,
}

impl AttentionParams {
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        prefix: &str,
        dec_hid: usize,
        ctx_dim: usize,
        att_dim: usize,
        method: InitMethod,
    ) -> Result<Self> {
        if att_dim == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        Ok(Self {
            w_att: new_weight(store, rng, &format!("{prefix}.W_att"), &[dec_hid, att_dim], method)?,
            u_att: new_weight(store, rng, &format!("{prefix}.U_att"), &[ctx_dim, att_dim], method)?,
            v_att: new_weight(store, rng, &format!("{prefix}.v_att"), &[att_dim], method)?,
            b_att: new_bias(store, &format!("{prefix}.b_att"), att_dim)?,
        })
    }
}

/// Encoder annotations prepared for repeated attention queries.
#[derive(Clone, Debug)]
pub struct AttentionContext<T> {
    /// `[batch, src_len, ctx_dim]`
    pub enc: Var,
    /// `enc U_att + b_att`, `[batch, src_len, att_dim]`
    pub proj: Var,
    /// `[batch, src_len]`, 1 on valid positions
    pub mask: Tensor<T>,
}

impl<T: Scalar> AttentionContext<T> {
    pub fn new(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &AttentionParams,
        enc: Var,
        mask: Tensor<T>,
    ) -> Result<Self> {
        let s = g.shape(enc).to_vec();
        if s.len() != 3 || mask.shape() != &s[..2] {
            return Err(Error::shape("attention", &s, mask.shape()));
        }
        for b in 0..s[0] {
            if mask.row(b).iter().all(|&m| m == T::zero()) {
                return Err(Error::Data(format!("source row {b} is fully masked")));
            }
        }
        let (u_att, b_att) = (g.param(store, p.u_att), g.param(store, p.b_att));
        let proj = g.matmul(enc, u_att)?;
        let proj = g.add_bias(proj, b_att)?;
        Ok(Self { enc, proj, mask })
    }

    pub fn src_len(&self) -> usize {
        self.mask.shape()[1]
    }
}

/// Masked additive attention. Returns `(alpha [batch, src_len], context
/// [batch, ctx_dim])`; masked positions get exactly zero weight.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    dec_state: Var,
    ctx: &AttentionContext<T>,
) -> Result<(Var, Var)> {
    let (w_att, v_att) = (g.param(store, p.w_att), g.param(store, p.v_att));
    let len = ctx.src_len();
    let q = g.matmul(dec_state, w_att)?;
    let q = g.repeat(q, len)?;
    let pre = g.add(q, ctx.proj)?;
    let pre = g.tanh(pre);
    let scores = g.matmul(pre, v_att)?;
    let scores = g.masked_fill(scores, &ctx.mask, T::neg_infinity())?;
    let alpha = g.softmax(scores);
    let batch = ctx.mask.shape()[0];
    let a3 = g.reshape(alpha, vec![batch, 1, len])?;
    let c = g.matmul(a3, ctx.enc)?;
    let cdim = g.shape(ctx.enc)[2];
    let context = g.reshape(c, vec![batch, cdim])?;
    Ok((alpha, context))
}

#[derive(Clone, Debug)]
pub struct CgruParams {
    pub gru1: GruParams,
    pub att: AttentionParams,
    pub gru2: GruParams,
}

#[derive(Clone, Copy, Debug)]
pub struct CgruOutput {
    pub state: Var,
    pub context: Var,
    pub alpha: Var,
}

/// Conditional GRU: a GRU on the feedback embedding, attention queried with
/// the intermediate state, then a GRU on the attended context.
pub fn cgru_step<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &CgruParams,
    y_emb_prev: Var,
    s_prev: Var,
    ctx: &AttentionContext<T>,
    mask: Option<&Tensor<T>>,
) -> Result<CgruOutput> {
    let s_mid = gru_step(g, store, &p.gru1, y_emb_prev, s_prev, mask)?;
    let (alpha, context) = attention(g, store, &p.att, s_mid, ctx)?;
    let state = gru_step(g, store, &p.gru2, context, s_mid, mask)?;
    Ok(CgruOutput {
        state,
        context,
        alpha,
    })
}

#[derive(Clone, Debug)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: Mode,
    pub rng: RngState,
}

impl DropoutSpec {
    pub fn new(rate: f64, mode: Mode, rng: RngState) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self { rate, mode, rng })
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout: kept units are scaled by `1 / (1 - p)` in training so
/// the test-mode layer is the identity.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &mut DropoutSpec) -> Result<Var> {
    check_rate(spec.rate)?;
    dropout_with(g, x, spec.rate, spec.mode, &mut spec.rng)
}

pub(crate) fn dropout_with<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Var> {
    if mode == Mode::Test || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale: T = lit(1.0 / keep);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.uniform() < keep { scale } else { T::zero() })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Weight-tying mode for embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TiedEmb {
    #[default]
    #[serde(rename = "off")]
    Off,
    /// Output projection is the transposed target embedding.
    #[serde(rename = "2way")]
    TwoWay,
    /// Additionally, source and target share one embedding.
    #[serde(rename = "3way")]
    ThreeWay,
}

impl FromStr for TiedEmb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "False" | "false" | "off" | "0" | "None" => Ok(Self::Off),
            "2way" => Ok(Self::TwoWay),
            "3way" => Ok(Self::ThreeWay),
            other => Err(Error::Config(format!("unknown tied_emb mode {other:?}"))),
        }
    }
}

impl fmt::Display for TiedEmb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "False",
            Self::TwoWay => "2way",
            Self::ThreeWay => "3way",
        })
    }
}

/// Row lookup in an embedding table.
pub fn embed<T: Scalar>(g: &mut Graph<T>, table: Var, ids: &[usize]) -> Result<Var> {
    g.gather(table, ids)
}

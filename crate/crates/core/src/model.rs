//! Attentive encoder/decoder translation model and the GRU language model.
//!
//! Parameter names are dotted paths and stable across versions; they key
//! checkpoints and weight extraction.
//!
//! | prefix | contents |
//! |--------|----------|
//! | `emb.E_src`, `emb.E_trg` | embeddings (`emb.E_src` absent under 3-way tying) |
//! | `enc.fwd`, `enc.bwd` | bidirectional encoder GRUs |
//! | `enc.l{i}` | stacked unidirectional encoder GRUs |
//! | `dec.init` | decoder-state initializer (mean context only) |
//! | `dec.gru1`, `dec.att`, `dec.gru2` | conditional GRU |
//! | `out.W_s`, `out.W_y`, `out.W_c` | pre-softmax projection into embedding space |
//! | `out.W_o`, `out.b_o` | vocabulary projection (`out.W_o` absent when tied) |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::init::RngState;
use crate::layers::{
    self, cgru_step, dropout_with, embed, gru_step, new_bias, new_weight, AttentionContext,
    AttentionParams, CgruParams, GruParams, InitSpec, Mode, TiedEmb,
};
use crate::optim::l2_penalty;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitCgru {
    #[default]
    MeanCtx,
    Zero,
}

impl FromStr for InitCgru {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_ctx" => Ok(Self::MeanCtx),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown init_cgru {other:?}"))),
        }
    }
}

impl fmt::Display for InitCgru {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanCtx => "mean_ctx",
            Self::Zero => "zero",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelType {
    Attention,
    Rnnlm,
}

impl FromStr for ModelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "rnnlm" => Ok(Self::Rnnlm),
            other => Err(Error::Config(format!(
                "unknown model_type {other:?} (known: attention, rnnlm)"
            ))),
        }
    }
}

impl fmt::Display for ModelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Rnnlm => "rnnlm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub n_words_src: usize,
    pub n_words_trg: usize,
    pub embedding_dim: usize,
    pub rnn_dim: usize,
    pub layer_norm: bool,
    pub init_cgru: InitCgru,
    pub n_enc_layers: usize,
    pub tied_emb: TiedEmb,
    pub emb_dropout: f64,
    pub ctx_dropout: f64,
    pub out_dropout: f64,
    pub init: InitSpec,
}

impl ModelOptions {
    pub fn ctx_dim(&self) -> usize {
        2 * self.rnn_dim
    }

    pub fn att_dim(&self) -> usize {
        2 * self.rnn_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_words_src", self.n_words_src),
            ("n_words_trg", self.n_words_trg),
            ("embedding_dim", self.embedding_dim),
            ("rnn_dim", self.rnn_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.tied_emb == TiedEmb::ThreeWay && self.n_words_src != self.n_words_trg {
            return Err(Error::Config(format!(
                "tied_emb 3way needs a shared vocabulary, got {} source and {} target words",
                self.n_words_src, self.n_words_trg
            )));
        }
        for r in [self.emb_dropout, self.ctx_dropout, self.out_dropout] {
            layers::check_rate(r)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct NmtIds {
    e_src: ParamId,
    e_trg: ParamId,
    enc_fwd: GruParams,
    enc_bwd: GruParams,
    enc_stack: Vec<GruParams>,
    dec_init: Option<(ParamId, ParamId)>,
    cgru: CgruParams,
    w_s: ParamId,
    w_y: ParamId,
    w_c: ParamId,
    /// `None` when tied to `e_trg`
    w_o: Option<ParamId>,
    b_o: ParamId,
}

#[derive(Clone, Debug)]
pub struct NmtModel<T> {
    opts: ModelOptions,
    store: ParamStore<T>,
    ids: NmtIds,
}

/// Per-sentence decoder state. Encoder tensors are shared between clones.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    /// `[batch, rnn_dim]`
    pub s: Tensor<T>,
    /// `[batch, src_len, 2 rnn_dim]`
    pub enc: Tensor<T>,
    /// `[batch, src_len, att_dim]`
    pub proj: Tensor<T>,
    /// `[batch, src_len]`
    pub mask: Tensor<T>,
}

impl<T: Scalar> DecoderState<T> {
    pub fn batch(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn src_len(&self) -> usize {
        self.mask.shape()[1]
    }

    /// Rows of the state in the given order; rows may repeat.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            s: self.s.select_rows(rows)?,
            enc: self.enc.select_rows(rows)?,
            proj: self.proj.select_rows(rows)?,
            mask: self.mask.select_rows(rows)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// `[batch, n_words_trg]`
    pub log_probs: Tensor<T>,
    pub state: DecoderState<T>,
    /// `[batch, src_len]`
    pub alpha: Tensor<T>,
}

/// Training-graph result.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    /// mean masked NLL plus the L2 term
    pub loss: Var,
    /// `[batch * trg_len]` masked token NLL
    pub token_nll: Var,
    pub tokens: usize,
}

impl<T: Scalar> LossGraph<T> {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).item().as_f64()
    }
}

fn column_mask<T: Scalar>(mask: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let (b, len) = (mask.shape()[0], mask.shape()[1]);
    Tensor::new(vec![b], (0..b).map(|r| mask.data()[r * len + t]).collect())
}

fn count_tokens<T: Scalar>(mask: &Tensor<T>) -> usize {
    mask.data().iter().filter(|&&m| m != T::zero()).count()
}

/// Masked NLL over stacked `[b, len, d]` outputs, then averaged.
fn masked_nll<T: Scalar>(
    g: &mut Graph<T>,
    outputs: Var,
    w_o: Var,
    b_o: Var,
    trg_ids: &[Vec<usize>],
    trg_mask: &Tensor<T>,
) -> Result<(Var, Var, usize)> {
    let s = g.shape(outputs).to_vec();
    let (b, len, d) = (s[0], s[1], s[2]);
    let flat = g.reshape(outputs, vec![b * len, d])?;
    let logits = g.matmul(flat, w_o)?;
    let logits = g.add_bias(logits, b_o)?;
    let logp = g.log_softmax(logits);
    let ids: Vec<usize> = trg_ids.iter().flat_map(|r| r.iter().copied()).collect();
    let picked = g.pick(logp, &ids)?;
    let m = g.constant(trg_mask.reshape(vec![b * len])?);
    let lp = g.mul(picked, m)?;
    let token_nll = g.scale(lp, -T::one());
    let tokens = count_tokens(trg_mask);
    if tokens == 0 {
        return Err(Error::Data("batch has no target tokens".into()));
    }
    let total = g.sum(token_nll);
    let mean = g.scale(total, T::one() / T::from_usize(tokens).expect("usize fits"));
    Ok((mean, token_nll, tokens))
}

fn finish_loss<T: Scalar>(
    mut graph: Graph<T>,
    store: &ParamStore<T>,
    mean: Var,
    token_nll: Var,
    tokens: usize,
    decay_c: f64,
) -> Result<LossGraph<T>> {
    let loss = match l2_penalty(&mut graph, store, decay_c)? {
        Some(p) => graph.add(mean, p)?,
        None => mean,
    };
    if !graph.value(loss).all_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(LossGraph {
        graph,
        loss,
        token_nll,
        tokens,
    })
}

fn per_row_sums<T: Scalar>(token_nll: &Tensor<T>, batch: usize) -> Vec<f64> {
    let len = token_nll.len() / batch;
    (0..batch)
        .map(|b| token_nll.data()[b * len..(b + 1) * len].iter().map(|v| v.as_f64()).sum())
        .collect()
}

impl<T: Scalar> NmtModel<T> {
    pub fn init_params(opts: ModelOptions, rng: &mut RngState) -> Result<Self> {
        opts.validate()?;
        let mut store = ParamStore::new();
        let (v_src, v_trg, e, h) = (opts.n_words_src, opts.n_words_trg, opts.embedding_dim, opts.rnn_dim);
        let (c, init, ln) = (opts.ctx_dim(), opts.init, opts.layer_norm);
        let wm = init.weight;

        let e_trg = new_weight(&mut store, rng, "emb.E_trg", &[v_trg, e], wm)?;
        let e_src = if opts.tied_emb == TiedEmb::ThreeWay {
            e_trg
        } else {
            new_weight(&mut store, rng, "emb.E_src", &[v_src, e], wm)?
        };

        let enc_fwd = GruParams::create(&mut store, rng, "enc.fwd", e, h, init, ln)?;
        let enc_bwd = GruParams::create(&mut store, rng, "enc.bwd", e, h, init, ln)?;
        let enc_stack = (0..opts.n_enc_layers)
            .map(|i| GruParams::create(&mut store, rng, &format!("enc.l{i}"), c, c, init, ln))
            .collect::<Result<Vec<_>>>()?;

        let dec_init = match opts.init_cgru {
            InitCgru::MeanCtx => Some((
                new_weight(&mut store, rng, "dec.init.W", &[c, h], wm)?,
                new_bias(&mut store, "dec.init.b", h)?,
            )),
            InitCgru::Zero => None,
        };
        let cgru = CgruParams {
            gru1: GruParams::create(&mut store, rng, "dec.gru1", e, h, init, ln)?,
            att: AttentionParams::create(&mut store, rng, "dec.att", h, c, opts.att_dim(), wm)?,
            gru2: GruParams::create(&mut store, rng, "dec.gru2", c, h, init, ln)?,
        };

        let w_s = new_weight(&mut store, rng, "out.W_s", &[h, e], wm)?;
        let w_y = new_weight(&mut store, rng, "out.W_y", &[e, e], wm)?;
        let w_c = new_weight(&mut store, rng, "out.W_c", &[c, e], wm)?;
        let w_o = match opts.tied_emb {
            TiedEmb::Off => Some(new_weight(&mut store, rng, "out.W_o", &[e, v_trg], wm)?),
            TiedEmb::TwoWay | TiedEmb::ThreeWay => None,
        };
        let b_o = new_bias(&mut store, "out.b_o", v_trg)?;

        Ok(Self {
            opts,
            store,
            ids: NmtIds {
                e_src,
                e_trg,
                enc_fwd,
                enc_bwd,
                enc_stack,
                dec_init,
                cgru,
                w_s,
                w_y,
                w_c,
                w_o,
                b_o,
            },
        })
    }

    pub fn options(&self) -> &ModelOptions {
        &self.opts
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn output_weight(&self, g: &mut Graph<T>) -> Result<Var> {
        match self.ids.w_o {
            Some(id) => Ok(g.param(&self.store, id)),
            None => {
                let e = g.param(&self.store, self.ids.e_trg);
                g.transpose(e)
            }
        }
    }

    /// Bidirectional (then stacked) encoder over `[batch, src_len]` ids.
    /// Returns `[batch, src_len, 2 rnn_dim]`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        src_ids: &[Vec<usize>],
        src_mask: &Tensor<T>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<Var> {
        let (b, len) = (src_mask.shape()[0], src_mask.shape()[1]);
        if src_ids.len() != b || src_ids.iter().any(|r| r.len() != len) {
            return Err(Error::shape("encode", &[src_ids.len(), src_ids.first().map_or(0, Vec::len)], &[b, len]));
        }
        let h = self.opts.rnn_dim;
        let e_src = g.param(&self.store, self.ids.e_src);
        let mut xs = Vec::with_capacity(len);
        let mut masks = Vec::with_capacity(len);
        for t in 0..len {
            let col: Vec<usize> = src_ids.iter().map(|r| r[t]).collect();
            let x = embed(g, e_src, &col)?;
            xs.push(dropout_with(g, x, self.opts.emb_dropout, mode, rng)?);
            masks.push(column_mask(src_mask, t)?);
        }

        let h0 = g.constant(Tensor::zeros(&[b, h])?);
        let mut fwd = Vec::with_capacity(len);
        let mut state = h0;
        for t in 0..len {
            state = gru_step(g, &self.store, &self.ids.enc_fwd, xs[t], state, Some(&masks[t]))?;
            fwd.push(state);
        }
        let mut bwd = vec![h0; len];
        let mut state = h0;
        for t in (0..len).rev() {
            state = gru_step(g, &self.store, &self.ids.enc_bwd, xs[t], state, Some(&masks[t]))?;
            bwd[t] = state;
        }
        let mut layer: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &r)| g.concat(&[f, r]))
            .collect::<Result<_>>()?;

        for p in &self.ids.enc_stack {
            let mut state = g.constant(Tensor::zeros(&[b, p.hid])?);
            let mut next = Vec::with_capacity(len);
            for t in 0..len {
                state = gru_step(g, &self.store, p, layer[t], state, Some(&masks[t]))?;
                next.push(state);
            }
            layer = next;
        }
        let enc = g.stack(&layer)?;
        dropout_with(g, enc, self.opts.ctx_dropout, mode, rng)
    }

    /// `tanh(mean_valid(enc) W + b)` or zeros.
    pub fn init_decoder(&self, g: &mut Graph<T>, enc: Var, src_mask: &Tensor<T>) -> Result<Var> {
        let (b, len) = (src_mask.shape()[0], src_mask.shape()[1]);
        let mut weights = Vec::with_capacity(b * len);
        for r in 0..b {
            let row = src_mask.row(r);
            let n = row.iter().filter(|&&m| m != T::zero()).count();
            if n == 0 {
                return Err(Error::Data(format!("source row {r} is fully masked")));
            }
            let inv = T::one() / T::from_usize(n).expect("usize fits");
            weights.extend(row.iter().map(|&m| m * inv));
        }
        match self.ids.dec_init {
            None => Ok(g.constant(Tensor::zeros(&[b, self.opts.rnn_dim])?)),
            Some((w, bias)) => {
                let wts = g.constant(Tensor::new(vec![b, 1, len], weights)?);
                let mean = g.matmul(wts, enc)?;
                let mean = g.reshape(mean, vec![b, self.opts.ctx_dim()])?;
                let (w, bias) = (g.param(&self.store, w), g.param(&self.store, bias));
                layers::ff(g, mean, w, Some(bias), layers::Activation::Tanh)
            }
        }
    }

    /// `tanh(s W_s + y W_y + c W_c)`, in embedding space.
    fn readout(&self, g: &mut Graph<T>, s: Var, y_emb: Var, ctx: Var) -> Result<Var> {
        let w_s = g.param(&self.store, self.ids.w_s);
        let w_y = g.param(&self.store, self.ids.w_y);
        let w_c = g.param(&self.store, self.ids.w_c);
        let a = g.matmul(s, w_s)?;
        let b = g.matmul(y_emb, w_y)?;
        let c = g.matmul(ctx, w_c)?;
        let ab = g.add(a, b)?;
        let o = g.add(ab, c)?;
        Ok(g.tanh(o))
    }

    fn feedback(&self, g: &mut Graph<T>, batch: usize, y_prev: Option<&[usize]>) -> Result<Var> {
        match y_prev {
            None => Ok(g.constant(Tensor::zeros(&[batch, self.opts.embedding_dim])?)),
            Some(ids) => {
                let e = g.param(&self.store, self.ids.e_trg);
                embed(g, e, ids)
            }
        }
    }

    /// Teacher-forced training graph.
    pub fn forward_loss(
        &self,
        batch: &Batch<T>,
        mode: Mode,
        rng: &mut RngState,
        decay_c: f64,
    ) -> Result<LossGraph<T>> {
        let mut g = Graph::new();
        let (b, len) = (batch.size(), batch.trg_len());
        let enc = self.encode(&mut g, &batch.src_ids, &batch.src_mask, mode, rng)?;
        let mut s = self.init_decoder(&mut g, enc, &batch.src_mask)?;
        let ctx = AttentionContext::new(&mut g, &self.store, &self.ids.cgru.att, enc, batch.src_mask.clone())?;

        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let prev = if t == 0 { None } else { Some(batch.trg_column(t - 1)) };
            let y = self.feedback(&mut g, b, prev.as_deref())?;
            let m = column_mask(&batch.trg_mask, t)?;
            let step = cgru_step(&mut g, &self.store, &self.ids.cgru, y, s, &ctx, Some(&m))?;
            s = step.state;
            let o = self.readout(&mut g, s, y, step.context)?;
            outs.push(dropout_with(&mut g, o, self.opts.out_dropout, mode, rng)?);
        }
        let stacked = g.stack(&outs)?;
        let w_o = self.output_weight(&mut g)?;
        let b_o = g.param(&self.store, self.ids.b_o);
        let (mean, token_nll, tokens) = masked_nll(&mut g, stacked, w_o, b_o, &batch.trg_ids, &batch.trg_mask)?;
        finish_loss(g, &self.store, mean, token_nll, tokens, decay_c)
    }

    /// Summed NLL of each target row, evaluation mode.
    pub fn sentence_nll(&self, batch: &Batch<T>) -> Result<Vec<f64>> {
        let lg = self.forward_loss(batch, Mode::Test, &mut RngState::from_seed(0), 0.0)?;
        Ok(per_row_sums(lg.graph.value(lg.token_nll), batch.size()))
    }

    /// Encodes a source batch and prepares the first decoder state.
    pub fn start(&self, src_ids: &[Vec<usize>], src_mask: &Tensor<T>) -> Result<DecoderState<T>> {
        let mut g = Graph::new();
        let mut rng = RngState::from_seed(0);
        let enc = self.encode(&mut g, src_ids, src_mask, Mode::Test, &mut rng)?;
        let s = self.init_decoder(&mut g, enc, src_mask)?;
        let ctx = AttentionContext::new(&mut g, &self.store, &self.ids.cgru.att, enc, src_mask.clone())?;
        Ok(DecoderState {
            s: g.value(s).clone(),
            enc: g.value(enc).clone(),
            proj: g.value(ctx.proj).clone(),
            mask: src_mask.clone(),
        })
    }

    /// One decoder step. `y_prev` is `None` on the first step.
    pub fn decode_step(&self, state: &DecoderState<T>, y_prev: Option<&[usize]>) -> Result<StepOutput<T>> {
        let mut g = Graph::new();
        let b = state.batch();
        if y_prev.is_some_and(|y| y.len() != b) {
            return Err(Error::shape("decode_step", &[b], &[y_prev.map_or(0, <[usize]>::len)]));
        }
        let ctx = AttentionContext {
            enc: g.constant(state.enc.clone()),
            proj: g.constant(state.proj.clone()),
            mask: state.mask.clone(),
        };
        let s_prev = g.constant(state.s.clone());
        let y = self.feedback(&mut g, b, y_prev)?;
        let step = cgru_step(&mut g, &self.store, &self.ids.cgru, y, s_prev, &ctx, None)?;
        let o = self.readout(&mut g, step.state, y, step.context)?;
        let w_o = self.output_weight(&mut g)?;
        let b_o = g.param(&self.store, self.ids.b_o);
        let logits = g.matmul(o, w_o)?;
        let logits = g.add_bias(logits, b_o)?;
        let logp = g.log_softmax(logits);
        Ok(StepOutput {
            log_probs: g.value(logp).clone(),
            state: DecoderState {
                s: g.value(step.state).clone(),
                ..state.clone()
            },
            alpha: g.value(step.alpha).clone(),
        })
    }
}

/// GRU language model over target-side text.
#[derive(Clone, Debug)]
pub struct RnnLm<T> {
    opts: ModelOptions,
    store: ParamStore<T>,
    emb: ParamId,
    gru: GruParams,
    w_o: ParamId,
    b_o: ParamId,
}

impl<T: Scalar> RnnLm<T> {
    /// Uses `n_words_trg`, `embedding_dim`, `rnn_dim`, `layer_norm`, the
    /// init scheme and the embedding/output dropout rates.
    pub fn init_params(opts: ModelOptions, rng: &mut RngState) -> Result<Self> {
        opts.validate()?;
        let mut store = ParamStore::new();
        let (v, e, h) = (opts.n_words_trg, opts.embedding_dim, opts.rnn_dim);
        let emb = new_weight(&mut store, rng, "emb.E", &[v, e], opts.init.weight)?;
        let gru = GruParams::create(&mut store, rng, "lm.gru", e, h, opts.init, opts.layer_norm)?;
        let w_o = new_weight(&mut store, rng, "lm.out.W_o", &[h, v], opts.init.weight)?;
        let b_o = new_bias(&mut store, "lm.out.b_o", v)?;
        Ok(Self {
            opts,
            store,
            emb,
            gru,
            w_o,
            b_o,
        })
    }

    pub fn options(&self) -> &ModelOptions {
        &self.opts
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Predicts every target token from its prefix; the target side of
    /// `batch` is the text.
    pub fn forward_loss(
        &self,
        batch: &Batch<T>,
        mode: Mode,
        rng: &mut RngState,
        decay_c: f64,
    ) -> Result<LossGraph<T>> {
        let mut g = Graph::new();
        let (b, len) = (batch.size(), batch.trg_len());
        let emb = g.param(&self.store, self.emb);
        let mut h = g.constant(Tensor::zeros(&[b, self.opts.rnn_dim])?);
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let x = if t == 0 {
                g.constant(Tensor::zeros(&[b, self.opts.embedding_dim])?)
            } else {
                let x = embed(&mut g, emb, &batch.trg_column(t - 1))?;
                dropout_with(&mut g, x, self.opts.emb_dropout, mode, rng)?
            };
            let m = column_mask(&batch.trg_mask, t)?;
            h = gru_step(&mut g, &self.store, &self.gru, x, h, Some(&m))?;
            outs.push(dropout_with(&mut g, h, self.opts.out_dropout, mode, rng)?);
        }
        let stacked = g.stack(&outs)?;
        let w_o = g.param(&self.store, self.w_o);
        let b_o = g.param(&self.store, self.b_o);
        let (mean, token_nll, tokens) = masked_nll(&mut g, stacked, w_o, b_o, &batch.trg_ids, &batch.trg_mask)?;
        finish_loss(g, &self.store, mean, token_nll, tokens, decay_c)
    }

    pub fn sentence_nll(&self, batch: &Batch<T>) -> Result<Vec<f64>> {
        let lg = self.forward_loss(batch, Mode::Test, &mut RngState::from_seed(0), 0.0)?;
        Ok(per_row_sums(lg.graph.value(lg.token_nll), batch.size()))
    }
}

/// Registry of trainable architectures.
#[allow(clippy::large_enum_variant)] // one value per process; boxing buys nothing
#[derive(Clone, Debug)]
pub enum Model<T> {
    Nmt(NmtModel<T>),
    Lm(RnnLm<T>),
}

impl<T: Scalar> Model<T> {
    pub fn init(kind: ModelType, opts: ModelOptions, rng: &mut RngState) -> Result<Self> {
        Ok(match kind {
            ModelType::Attention => Self::Nmt(NmtModel::init_params(opts, rng)?),
            ModelType::Rnnlm => Self::Lm(RnnLm::init_params(opts, rng)?),
        })
    }

    pub fn kind(&self) -> ModelType {
        match self {
            Self::Nmt(_) => ModelType::Attention,
            Self::Lm(_) => ModelType::Rnnlm,
        }
    }

    pub fn options(&self) -> &ModelOptions {
        match self {
            Self::Nmt(m) => m.options(),
            Self::Lm(m) => m.options(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Self::Nmt(m) => m.store(),
            Self::Lm(m) => m.store(),
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Self::Nmt(m) => m.store_mut(),
            Self::Lm(m) => m.store_mut(),
        }
    }

    pub fn forward_loss(&self, batch: &Batch<T>, mode: Mode, rng: &mut RngState, decay_c: f64) -> Result<LossGraph<T>> {
        match self {
            Self::Nmt(m) => m.forward_loss(batch, mode, rng, decay_c),
            Self::Lm(m) => m.forward_loss(batch, mode, rng, decay_c),
        }
    }

    pub fn sentence_nll(&self, batch: &Batch<T>) -> Result<Vec<f64>> {
        match self {
            Self::Nmt(m) => m.sentence_nll(batch),
            Self::Lm(m) => m.sentence_nll(batch),
        }
    }

    pub fn as_nmt(&self) -> Result<&NmtModel<T>> {
        match self {
            Self::Nmt(m) => Ok(m),
            Self::Lm(_) => Err(Error::Config("operation needs an attention model, got rnnlm".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, ParallelCorpus, Vocabulary};
    use std::collections::HashMap;

    pub(crate) fn toy_opts(v: usize, e: usize, h: usize) -> ModelOptions {
        ModelOptions {
            n_words_src: v,
            n_words_trg: v,
            embedding_dim: e,
            rnn_dim: h,
            layer_norm: false,
            init_cgru: InitCgru::MeanCtx,
            n_enc_layers: 0,
            tied_emb: TiedEmb::Off,
            emb_dropout: 0.0,
            ctx_dropout: 0.0,
            out_dropout: 0.0,
            init: InitSpec::default(),
        }
    }

    fn toy_batch(v: usize) -> Batch<f64> {
        let words: HashMap<String, u64> = (2..v).map(|i| (format!("w{i}"), (v - i) as u64)).collect();
        let vocab = Vocabulary::from_counts(words, 0);
        let c = ParallelCorpus::from_lines(&["w2 w3 w4", "w5"], &["w3 w2", "w6 w4 w2"], &vocab, &vocab).unwrap();
        make_batch(&c, &[0, 1]).unwrap()
    }

    fn zero_param(store: &mut ParamStore<f64>, name: &str) {
        let id = store.id(name).unwrap();
        let p = store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape()).unwrap();
    }

    #[test]
    fn zero_output_layer_gives_log_v() {
        let mut m = NmtModel::<f64>::init_params(toy_opts(10, 4, 6), &mut RngState::from_seed(1)).unwrap();
        zero_param(m.store_mut(), "out.W_o");
        let lg = m.forward_loss(&toy_batch(10), Mode::Test, &mut RngState::from_seed(0), 0.0).unwrap();
        assert!((lg.loss_value() - 10f64.ln()).abs() < 1e-12);

        let mut lm = RnnLm::<f64>::init_params(toy_opts(10, 4, 6), &mut RngState::from_seed(1)).unwrap();
        zero_param(lm.store_mut(), "lm.out.W_o");
        let lg = lm.forward_loss(&toy_batch(10), Mode::Test, &mut RngState::from_seed(0), 0.0).unwrap();
        assert!((lg.loss_value() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_counted_parameters() {
        let (v, e, h) = (10, 4, 6);
        let gru = |i: usize, h: usize| 3 * i * h + 3 * h * h + 3 * h;
        let c = 2 * h;
        let want = 2 * v * e
            + 2 * gru(e, h)
            + (c * h + h)
            + gru(e, h)
            + (h * c + c * c + c + c)
            + gru(c, h)
            + (h * e + e * e + c * e)
            + (e * v + v);
        let m = NmtModel::<f64>::init_params(toy_opts(v, e, h), &mut RngState::from_seed(0)).unwrap();
        assert_eq!(m.store().num_elements(), want);

        let mut tied = toy_opts(v, e, h);
        tied.tied_emb = TiedEmb::TwoWay;
        let t = NmtModel::<f64>::init_params(tied, &mut RngState::from_seed(0)).unwrap();
        assert_eq!(t.store().num_elements(), want - v * e);
        assert!(t.store().id("out.W_o").is_none());
    }

    #[test]
    fn three_way_needs_shared_vocab() {
        let mut o = toy_opts(10, 4, 6);
        o.tied_emb = TiedEmb::ThreeWay;
        o.n_words_src = 11;
        assert!(NmtModel::<f64>::init_params(o, &mut RngState::from_seed(0)).is_err());
    }

    #[test]
    fn zero_init_cgru() {
        let mut o = toy_opts(10, 4, 6);
        o.init_cgru = InitCgru::Zero;
        let m = NmtModel::<f64>::init_params(o, &mut RngState::from_seed(0)).unwrap();
        let b = toy_batch(10);
        let st = m.start(&b.src_ids, &b.src_mask).unwrap();
        assert!(st.s.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn step_log_probs_normalize() {
        let m = NmtModel::<f64>::init_params(toy_opts(10, 4, 6), &mut RngState::from_seed(0)).unwrap();
        let b = toy_batch(10);
        let st = m.start(&b.src_ids, &b.src_mask).unwrap();
        let out = m.decode_step(&st, None).unwrap();
        for r in 0..2 {
            let s: f64 = out.log_probs.row(r).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // padded source position of row 1 gets no attention
        assert_eq!(out.alpha.get(&[1, 2]), 0.0);
        assert_eq!(out.alpha.get(&[1, 3]), 0.0);
    }
}

//! Beam search, parallel translation and n-best rescoring.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, ParallelCorpus, Vocabulary, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{DecoderState, NmtModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids without the terminating `<eos>`.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities, including the `<eos>` step when present.
    pub score: f64,
    /// False when force-finished at the length limit.
    pub ended_with_eos: bool,
    /// Per emitted token (`<eos>` step included when present), weights over
    /// source positions. Empty unless requested.
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub n_best: usize,
    /// `None` means `3 * src_len + 10`.
    pub max_len: Option<usize>,
    pub keep_alignments: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 12,
            n_best: 1,
            max_len: None,
            keep_alignments: false,
        }
    }
}

pub fn default_max_len(src_len: usize) -> usize {
    3 * src_len + 10
}

/// `log(mean_m exp(lp_m))` per row and column.
fn ensemble_log_probs<T: Scalar>(per_model: &[Tensor<T>]) -> Vec<f64> {
    if per_model.len() == 1 {
        return per_model[0].to_f64_vec();
    }
    let n = per_model[0].len();
    let ln_m = (per_model.len() as f64).ln();
    (0..n)
        .map(|i| {
            let xs: Vec<f64> = per_model.iter().map(|t| t.data()[i].as_f64()).collect();
            let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return mx;
            }
            mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() - ln_m
        })
        .collect()
}

fn mean_alpha<T: Scalar>(per_model: &[Tensor<T>], row: usize) -> Vec<f64> {
    let len = per_model[0].shape()[1];
    let mut out = vec![0.0; len];
    for a in per_model {
        for (o, v) in out.iter_mut().zip(a.row(row)) {
            *o += v.as_f64();
        }
    }
    let m = per_model.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    out
}

struct Live {
    tokens: Vec<usize>,
    score: f64,
    alphas: Vec<Vec<f64>>,
}

/// Beam search over one source sentence (ids ending in `<eos>`).
///
/// Every step keeps the `beam_size - finished` best extensions of the live
/// hypotheses. Ensembles average the models' probabilities.
pub fn beam_search<T: Scalar>(models: &[&NmtModel<T>], src: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if models.is_empty() {
        return Err(Error::Config("beam search needs at least one model".into()));
    }
    if src.is_empty() {
        return Err(Error::Data("empty source sentence".into()));
    }
    if cfg.beam_size == 0 || cfg.n_best == 0 || cfg.n_best > cfg.beam_size {
        return Err(Error::Config(format!(
            "need 1 <= n_best ({}) <= beam_size ({})",
            cfg.n_best, cfg.beam_size
        )));
    }
    let v = models[0].options().n_words_trg;
    if models.iter().any(|m| m.options().n_words_trg != v) {
        return Err(Error::Config("ensemble members disagree on target vocabulary size".into()));
    }
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(src.len()));
    let mask = Tensor::<T>::ones(&[1, src.len()])?;
    let mut states: Vec<DecoderState<T>> = models
        .iter()
        .map(|m| m.start(&[src.to_vec()], &mask))
        .collect::<Result<_>>()?;

    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        alphas: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let prev: Option<Vec<usize>> = (step > 0).then(|| live.iter().map(|h| *h.tokens.last().expect("non-empty")).collect());
        let outs = models
            .iter()
            .zip(&states)
            .map(|(m, s)| m.decode_step(s, prev.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let lps: Vec<Tensor<T>> = outs.iter().map(|o| o.log_probs.clone()).collect();
        let logp = ensemble_log_probs(&lps);

        let width = cfg.beam_size - finished.len();
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (i, h) in live.iter().enumerate() {
            for w in 0..v {
                let lp = logp[i * v + w];
                if lp > f64::NEG_INFINITY {
                    cands.push((h.score + lp, i, w));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);

        let alphas: Vec<Tensor<T>> = if cfg.keep_alignments {
            outs.iter().map(|o| o.alpha.clone()).collect()
        } else {
            Vec::new()
        };
        let mut next_live = Vec::new();
        let mut rows = Vec::new();
        for (score, i, w) in cands {
            let mut hist = live[i].alphas.clone();
            if cfg.keep_alignments {
                hist.push(mean_alpha(&alphas, i));
            }
            if w == EOS_ID {
                finished.push(Hypothesis {
                    tokens: live[i].tokens.clone(),
                    score,
                    ended_with_eos: true,
                    alphas: hist,
                });
            } else {
                let mut tokens = live[i].tokens.clone();
                tokens.push(w);
                next_live.push(Live {
                    tokens,
                    score,
                    alphas: hist,
                });
                rows.push(i);
            }
        }
        live = next_live;
        if finished.len() >= cfg.beam_size || live.is_empty() {
            break;
        }
        states = outs
            .iter()
            .map(|o| o.state.select(&rows))
            .collect::<Result<_>>()?;
    }
    finished.extend(live.into_iter().map(|h| Hypothesis {
        tokens: h.tokens,
        score: h.score,
        ended_with_eos: false,
        alphas: h.alphas,
    }));
    finished.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    finished.truncate(cfg.n_best);
    Ok(finished)
}

/// Runs `work` over `items` on `workers` threads and hands results to
/// `sink` in input order. The first failure, by sample index, aborts.
pub fn ordered_pool<I, O, W, S>(items: Vec<I>, workers: usize, work: W, mut sink: S) -> Result<()>
where
    I: Send,
    O: Send,
    W: Fn(usize, I) -> Result<O> + Sync,
    S: FnMut(usize, O) -> Result<()>,
{
    let workers = workers.max(1);
    let abort = AtomicBool::new(false);
    let (job_tx, job_rx) = mpsc::sync_channel::<(usize, I)>(2 * workers);
    let job_rx = Mutex::new(job_rx);
    let (res_tx, res_rx) = mpsc::channel::<(usize, Result<O>)>();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let res_tx = res_tx.clone();
            let (job_rx, abort, work) = (&job_rx, &abort, &work);
            scope.spawn(move || loop {
                let job = job_rx.lock().map(|rx| rx.recv());
                let Ok(Ok((idx, item))) = job else { break };
                if abort.load(Ordering::Relaxed) {
                    continue;
                }
                let out = match catch_unwind(AssertUnwindSafe(|| work(idx, item))) {
                    Ok(r) => r,
                    Err(panic) => Err(Error::Worker {
                        sample: idx,
                        msg: panic_message(&*panic),
                    }),
                };
                if out.is_err() {
                    abort.store(true, Ordering::Relaxed);
                }
                if res_tx.send((idx, out)).is_err() {
                    break;
                }
            });
        }
        drop(res_tx);

        let total = items.len();
        let abort_ref = &abort;
        scope.spawn(move || {
            for (idx, item) in items.into_iter().enumerate() {
                if abort_ref.load(Ordering::Relaxed) || job_tx.send((idx, item)).is_err() {
                    break;
                }
            }
        });

        let mut pending: BTreeMap<usize, O> = BTreeMap::new();
        let mut next = 0;
        let mut first_err: Option<(usize, Error)> = None;
        for (idx, res) in res_rx {
            match res {
                Ok(o) => {
                    pending.insert(idx, o);
                }
                Err(e) => {
                    if first_err.as_ref().is_none_or(|(i, _)| idx < *i) {
                        first_err = Some((idx, e));
                    }
                }
            }
            while let Some(o) = pending.remove(&next) {
                if first_err.is_none() {
                    if let Err(e) = sink(next, o) {
                        abort.store(true, Ordering::Relaxed);
                        first_err = Some((next, e));
                    }
                }
                next += 1;
            }
        }
        match first_err {
            Some((_, e)) => Err(e),
            None if next == total => Ok(()),
            None => Err(Error::Worker {
                sample: next,
                msg: "worker pool stopped early".into(),
            }),
        }
    })
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".into()
    }
}

/// Beam-searches every sentence on `workers` threads; results are in
/// input order.
pub fn translate_parallel<T: Scalar>(
    models: &[&NmtModel<T>],
    sources: &[Vec<usize>],
    workers: usize,
    cfg: &BeamConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    let mut out = Vec::with_capacity(sources.len());
    ordered_pool(
        sources.iter().collect(),
        workers,
        |idx, src: &Vec<usize>| {
            beam_search(models, src, cfg).map_err(|e| match e {
                e @ Error::Worker { .. } => e,
                other => Error::Worker {
                    sample: idx,
                    msg: other.to_string(),
                },
            })
        },
        |_, hyps| {
            out.push(hyps);
            Ok(())
        },
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub id: usize,
    pub text: String,
    pub score: f64,
}

impl NBestEntry {
    pub fn to_line(&self) -> String {
        format!("{} ||| {} ||| {:.6}", self.id, self.text, self.score)
    }

    pub fn parse(line: &str, origin: &str, line_no: usize) -> Result<Self> {
        let err = |msg: &str| Error::Parse {
            path: origin.to_owned(),
            line: line_no,
            msg: msg.to_owned(),
        };
        let parts: Vec<&str> = line.split(" ||| ").collect();
        if parts.len() < 2 {
            return Err(err("expected 'id ||| hypothesis ||| score'"));
        }
        let id = parts[0].trim().parse().map_err(|_| err("sample id is not an integer"))?;
        let score = match parts.get(2) {
            Some(s) => s.trim().parse().map_err(|_| err("score is not a number"))?,
            None => 0.0,
        };
        Ok(Self {
            id,
            text: parts[1].to_owned(),
            score,
        })
    }
}

pub fn nbest_entries(id: usize, hyps: &[Hypothesis], vocab: &Vocabulary) -> Vec<NBestEntry> {
    hyps.iter()
        .map(|h| NBestEntry {
            id,
            text: vocab.decode(&h.tokens),
            score: h.score,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub id: usize,
    pub src_tokens: Vec<String>,
    pub hyp_tokens: Vec<String>,
    /// `[hyp_tokens.len()][src_tokens.len()]`
    pub alphas: Vec<Vec<f64>>,
}

/// Alignment of the best hypothesis. Source tokens include `<eos>`; rows
/// cover the emitted tokens, then `<eos>` when the hypothesis ended with it.
pub fn alignment_record(id: usize, src: &[usize], best: &Hypothesis, src_vocab: &Vocabulary, trg_vocab: &Vocabulary) -> AlignmentRecord {
    let name = |v: &Vocabulary, i: usize| v.token(i).unwrap_or("<unk>").to_owned();
    let mut hyp_tokens: Vec<String> = best.tokens.iter().map(|&i| name(trg_vocab, i)).collect();
    if best.ended_with_eos {
        hyp_tokens.push(name(trg_vocab, EOS_ID));
    }
    AlignmentRecord {
        id,
        src_tokens: src.iter().map(|&i| name(src_vocab, i)).collect(),
        hyp_tokens,
        alphas: best.alphas.clone(),
    }
}

/// Teacher-forced NLL of `(src, hyp)` pairs, each ending in `<eos>`. Pairs
/// are scored in groups of `batch_size`; the ensemble value is the mean
/// over models.
pub fn score_pairs<T: Scalar>(
    models: &[&NmtModel<T>],
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::Config("rescoring needs at least one model".into()));
    }
    let corpus = ParallelCorpus {
        src: pairs.iter().map(|p| p.0.clone()).collect(),
        trg: pairs.iter().map(|p| p.1.clone()).collect(),
    };
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch::<T>(&corpus, chunk)?;
        let mut sums = vec![0.0; chunk.len()];
        for m in models {
            for (s, v) in sums.iter_mut().zip(m.sentence_nll(&batch)?) {
                *s += v;
            }
        }
        out.extend(sums.into_iter().map(|s| s / models.len() as f64));
    }
    Ok(out)
}

/// Rescores n-best entries against their sources. The new score is the
/// log-probability `-nll`, comparable with beam scores. Entries are grouped
/// by sample id so that a batch holds hypotheses of one sample.
pub fn rescore_nbest<T: Scalar>(
    models: &[&NmtModel<T>],
    sources: &[Vec<usize>],
    entries: &[NBestEntry],
    trg_vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Vec<NBestEntry>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if e.id >= sources.len() {
            return Err(Error::Data(format!(
                "n-best entry {} refers to sample {} but the source has {} lines",
                i + 1,
                e.id,
                sources.len()
            )));
        }
        groups.entry(e.id).or_default().push(i);
    }
    let mut out = entries.to_vec();
    for (id, members) in groups {
        let pairs: Vec<_> = members
            .iter()
            .map(|&i| (sources[id].clone(), trg_vocab.encode(&entries[i].text)))
            .collect();
        let scores = score_pairs(models, &pairs, batch_size)?;
        for (&i, s) in members.iter().zip(scores) {
            out[i].score = -s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::RngState;
    use crate::layers::{InitSpec, TiedEmb};
    use crate::model::{InitCgru, ModelOptions};

    fn toy_model(seed: u64) -> NmtModel<f64> {
        let opts = ModelOptions {
            n_words_src: 6,
            n_words_trg: 5,
            embedding_dim: 3,
            rnn_dim: 4,
            layer_norm: false,
            init_cgru: InitCgru::MeanCtx,
            n_enc_layers: 0,
            tied_emb: TiedEmb::Off,
            emb_dropout: 0.0,
            ctx_dropout: 0.0,
            out_dropout: 0.0,
            init: InitSpec::default(),
        };
        NmtModel::init_params(opts, &mut RngState::from_seed(seed)).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = toy_model(3);
        let src = vec![2, 3, 4, 0];
        let cfg = BeamConfig {
            beam_size: 1,
            n_best: 1,
            max_len: Some(6),
            keep_alignments: false,
        };
        let hyp = &beam_search(&[&m], &src, &cfg).unwrap()[0];

        let mask = Tensor::ones(&[1, 4]).unwrap();
        let mut st = m.start(std::slice::from_ref(&src), &mask).unwrap();
        let mut prev: Option<Vec<usize>> = None;
        let mut tokens = Vec::new();
        let mut score = 0.0;
        for _ in 0..6 {
            let out = m.decode_step(&st, prev.as_deref()).unwrap();
            let row = out.log_probs.row(0);
            let (w, lp) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            score += lp;
            if w == EOS_ID {
                break;
            }
            tokens.push(w);
            st = out.state;
            prev = Some(vec![w]);
        }
        assert_eq!(hyp.tokens, tokens);
        assert!((hyp.score - score).abs() < 1e-12);
    }

    #[test]
    fn identical_ensemble_matches_single() {
        let m = toy_model(4);
        let cfg = BeamConfig {
            beam_size: 3,
            n_best: 3,
            max_len: Some(5),
            keep_alignments: true,
        };
        let one = beam_search(&[&m], &[2, 5, 0], &cfg).unwrap();
        let three = beam_search(&[&m, &m, &m], &[2, 5, 0], &cfg).unwrap();
        assert_eq!(one.len(), three.len());
        for (a, b) in one.iter().zip(&three) {
            assert_eq!(a.tokens, b.tokens);
            assert!((a.score - b.score).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_preserves_order_and_reports_failures() {
        let items: Vec<usize> = (0..50).collect();
        let mut seen = Vec::new();
        ordered_pool(items.clone(), 4, |_, x| Ok(x * 2), |i, o| {
            assert_eq!(o, i * 2);
            seen.push(i);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, items);

        let err = ordered_pool(items, 3, |i, x| {
            if i == 17 {
                panic!("boom");
            }
            Ok(x)
        }, |_, _| Ok(()))
        .unwrap_err();
        match err {
            Error::Worker { sample, msg } => {
                assert_eq!(sample, 17);
                assert!(msg.contains("boom"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nbest_line_format() {
        let e = NBestEntry {
            id: 3,
            text: "a b".into(),
            score: -1.5,
        };
        let line = e.to_line();
        assert_eq!(line, "3 ||| a b ||| -1.500000");
        assert_eq!(NBestEntry::parse(&line, "f", 1).unwrap(), e);
        let err = NBestEntry::parse("x ||| a", "f", 7).unwrap_err();
        assert!(err.to_string().starts_with("f:7:"));
    }
}

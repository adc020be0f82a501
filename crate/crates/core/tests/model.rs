mod common;

use nmtkit::data::{make_batch, ParallelCorpus, EOS_ID};
use nmtkit::decode::{beam_search, score_pairs, BeamConfig};
use nmtkit::init::RngState;
use nmtkit::layers::{Mode, TiedEmb};
use nmtkit::model::{InitCgru, Model, ModelOptions, ModelType, NmtModel};

use common::{options, random_sentences, symbol_vocab, trained_copy_model};

fn variants() -> Vec<ModelOptions> {
    let mut out = Vec::new();
    for ln in [false, true] {
        for ic in [InitCgru::MeanCtx, InitCgru::Zero] {
            for tied in [TiedEmb::Off, TiedEmb::TwoWay, TiedEmb::ThreeWay] {
                for layers in [0, 1] {
                    let mut o = options(9, 9, 4, 5);
                    o.layer_norm = ln;
                    o.init_cgru = ic;
                    o.tied_emb = tied;
                    o.n_enc_layers = layers;
                    out.push(o);
                }
            }
        }
    }
    out
}

fn toy_corpus(seed: u64, n: usize) -> ParallelCorpus {
    let vocab = symbol_vocab(7);
    let mut rng = RngState::from_seed(seed);
    let src = random_sentences(&mut rng, n, 7, 1, 5);
    let trg = random_sentences(&mut rng, n, 7, 1, 5);
    ParallelCorpus::from_lines(&src, &trg, &vocab, &vocab).unwrap()
}

/// Sentence NLL accumulated one decoder step at a time.
fn stepwise_nll(m: &NmtModel<f64>, src: &[usize], trg: &[usize]) -> (f64, Vec<f64>) {
    let mask = nmtkit::Tensor::ones(&[1, src.len()]).unwrap();
    let mut state = m.start(&[src.to_vec()], &mask).unwrap();
    let mut nll = 0.0;
    let mut alpha_sums = Vec::new();
    let mut prev: Option<usize> = None;
    for &y in trg {
        let out = m.decode_step(&state, prev.as_ref().map(std::slice::from_ref)).unwrap();
        let lp = out.log_probs.row(0);
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        nll -= lp[y];
        alpha_sums.push(out.alpha.row(0).iter().sum());
        state = out.state;
        prev = Some(y);
    }
    (nll, alpha_sums)
}

#[test]
fn sequential_decoding_matches_unrolled_loss() {
    let corpus = toy_corpus(1, 4);
    for (k, o) in variants().into_iter().enumerate() {
        let label = format!("{o:?}");
        let m = NmtModel::<f64>::init_params(o, &mut RngState::from_seed(k as u64)).unwrap();
        let batch = make_batch::<f64>(&corpus, &[0, 1, 2, 3]).unwrap();
        let batched = m.sentence_nll(&batch).unwrap();
        for ((src, trg), &want) in corpus.src.iter().zip(&corpus.trg).zip(&batched) {
            let (nll, alphas) = stepwise_nll(&m, src, trg);
            assert!((nll - want).abs() < 1e-9, "{label}: {nll} vs {want}");
            for a in alphas {
                assert!((a - 1.0).abs() < 1e-12, "{label}");
            }
        }
    }
}

#[test]
fn padded_positions_are_inert() {
    let corpus = toy_corpus(2, 6);
    let mut rng = RngState::from_seed(5);
    for o in variants() {
        let m = NmtModel::<f64>::init_params(o, &mut rng).unwrap();
        let batch = make_batch::<f64>(&corpus, &[0, 1, 2, 3, 4, 5]).unwrap();
        let base = m.forward_loss(&batch, Mode::Test, &mut RngState::from_seed(0), 0.0).unwrap().loss_value();
        let mut noisy = batch.clone();
        for (ids, mask) in [(&mut noisy.src_ids, &batch.src_mask), (&mut noisy.trg_ids, &batch.trg_mask)] {
            let len = mask.shape()[1];
            for (b, row) in ids.iter_mut().enumerate() {
                for (t, id) in row.iter_mut().enumerate() {
                    if mask.data()[b * len + t] == 0.0 {
                        *id = 2 + rng.below(7);
                    }
                }
            }
        }
        let other = m.forward_loss(&noisy, Mode::Test, &mut RngState::from_seed(0), 0.0).unwrap().loss_value();
        assert!((base - other).abs() < 1e-12, "{base} vs {other}");
    }
}

#[test]
fn eval_loss_is_pure_and_matches_train_without_dropout() {
    let corpus = toy_corpus(3, 5);
    let batch = make_batch::<f64>(&corpus, &[0, 1, 2, 3, 4]).unwrap();
    for kind in [ModelType::Attention, ModelType::Rnnlm] {
        let m = Model::<f64>::init(kind, options(9, 9, 4, 5), &mut RngState::from_seed(6)).unwrap();
        let loss = |mode, seed| {
            m.forward_loss(&batch, mode, &mut RngState::from_seed(seed), 1e-4).unwrap().loss_value()
        };
        assert_eq!(loss(Mode::Test, 0).to_bits(), loss(Mode::Test, 1).to_bits());
        assert!((loss(Mode::Train, 2) - loss(Mode::Test, 0)).abs() < 1e-12);
    }
}

#[test]
fn dropout_changes_train_loss_only() {
    let corpus = toy_corpus(4, 5);
    let batch = make_batch::<f64>(&corpus, &[0, 1, 2, 3, 4]).unwrap();
    let mut o = options(9, 9, 4, 5);
    o.emb_dropout = 0.2;
    o.ctx_dropout = 0.3;
    o.out_dropout = 0.5;
    let m = NmtModel::<f64>::init_params(o, &mut RngState::from_seed(7)).unwrap();
    let loss = |mode, seed| m.forward_loss(&batch, mode, &mut RngState::from_seed(seed), 0.0).unwrap().loss_value();
    assert_eq!(loss(Mode::Test, 0).to_bits(), loss(Mode::Test, 9).to_bits());
    assert_eq!(loss(Mode::Train, 3).to_bits(), loss(Mode::Train, 3).to_bits());
    assert_ne!(loss(Mode::Train, 3), loss(Mode::Train, 4));
}

#[test]
fn layer_norm_keeps_shapes() {
    let corpus = toy_corpus(5, 3);
    let batch = make_batch::<f64>(&corpus, &[0, 1, 2]).unwrap();
    let mut o = options(9, 9, 4, 5);
    let plain = NmtModel::<f64>::init_params(o.clone(), &mut RngState::from_seed(8)).unwrap();
    o.layer_norm = true;
    let normed = NmtModel::<f64>::init_params(o, &mut RngState::from_seed(8)).unwrap();
    let a = plain.start(&batch.src_ids, &batch.src_mask).unwrap();
    let b = normed.start(&batch.src_ids, &batch.src_mask).unwrap();
    assert_eq!(a.s.shape(), b.s.shape());
    assert_eq!(a.enc.shape(), b.enc.shape());
    let sa = plain.decode_step(&a, None).unwrap();
    let sb = normed.decode_step(&b, None).unwrap();
    assert_eq!(sa.log_probs.shape(), sb.log_probs.shape());
    assert!(sa.log_probs.max_abs_diff(&sb.log_probs) > 0.0);
}

#[test]
fn beam_scores_agree_with_forced_decoding() {
    let (model, vocab) = trained_copy_model(5, 8, 8, 150, 21);
    let mut rng = RngState::from_seed(22);
    let sources: Vec<Vec<usize>> = random_sentences(&mut rng, 20, 5, 1, 4).iter().map(|s| vocab.encode(s)).collect();
    let cfg = BeamConfig { beam_size: 4, n_best: 4, max_len: None, keep_alignments: true };
    let mut pairs = Vec::new();
    let mut scores = Vec::new();
    for src in &sources {
        let hyps = beam_search(&[&model], src, &cfg).unwrap();
        assert!(!hyps.is_empty());
        for w in hyps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for h in &hyps {
            assert!(!h.tokens.contains(&EOS_ID));
            for a in &h.alphas {
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            if h.ended_with_eos {
                let mut trg = h.tokens.clone();
                trg.push(EOS_ID);
                pairs.push((src.clone(), trg));
                scores.push(h.score);
            }
        }
    }
    let batched = score_pairs(&[&model], &pairs, 7).unwrap();
    let single = score_pairs(&[&model], &pairs, 1).unwrap();
    for ((b, s), beam) in batched.iter().zip(&single).zip(&scores) {
        assert!((b - s).abs() < 1e-9);
        assert!((-b - beam).abs() < 1e-6, "{b} vs {beam}");
    }
}

#[test]
fn gold_rescoring_matches_loss_total() {
    let corpus = toy_corpus(6, 8);
    let m = NmtModel::<f64>::init_params(options(9, 9, 4, 5), &mut RngState::from_seed(9)).unwrap();
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let batch = make_batch::<f64>(&corpus, &idx).unwrap();
    let lg = m.forward_loss(&batch, Mode::Test, &mut RngState::from_seed(0), 0.0).unwrap();
    let total = lg.loss_value() * lg.tokens as f64;
    let pairs: Vec<_> = corpus.src.iter().cloned().zip(corpus.trg.iter().cloned()).collect();
    let scored: f64 = score_pairs(&[&m], &pairs, 3).unwrap().iter().sum();
    assert!((scored - total).abs() < 1e-6, "{scored} vs {total}");
}

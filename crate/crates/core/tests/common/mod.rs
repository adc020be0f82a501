#![allow(dead_code)]

use std::path::Path;

use nmtkit::config::ExperimentConfig;
use nmtkit::data::{make_batch, ParallelCorpus, Vocabulary};
use nmtkit::init::RngState;
use nmtkit::layers::{InitSpec, Mode, TiedEmb};
use nmtkit::model::{InitCgru, Model, ModelOptions, NmtModel};
use nmtkit::optim::{clip_gradients, OptimizerKind, OptimizerState};
use nmtkit::scalar::Scalar;

/// `n` sentences over symbols `s0..s{v-1}` with lengths in `min..=max`.
pub fn random_sentences(rng: &mut RngState, n: usize, v: usize, min: usize, max: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = min + rng.below(max - min + 1);
            (0..len).map(|_| format!("s{}", rng.below(v))).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

pub fn symbol_vocab(v: usize) -> Vocabulary {
    let tokens = ["<eos>".to_owned(), "<unk>".to_owned()]
        .into_iter()
        .chain((0..v).map(|i| format!("s{i}")))
        .collect();
    Vocabulary::from_tokens(tokens).unwrap()
}

pub fn options(v_src: usize, v_trg: usize, emb: usize, rnn: usize) -> ModelOptions {
    ModelOptions {
        n_words_src: v_src,
        n_words_trg: v_trg,
        embedding_dim: emb,
        rnn_dim: rnn,
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

/// Trains `model` with Adam on `corpus` for `updates` steps of `batch` pairs.
pub fn train_nmt<T: Scalar>(model: &mut NmtModel<T>, corpus: &ParallelCorpus, updates: usize, batch: usize, lrate: f64, seed: u64) {
    let mut opt = OptimizerState::with_lrate(OptimizerKind::Adam, lrate, model.store()).unwrap();
    let mut rng = RngState::from_seed(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut pos = order.len();
    for _ in 0..updates {
        if pos + batch > order.len() {
            rng.shuffle(&mut order);
            pos = 0;
        }
        let b = make_batch::<T>(corpus, &order[pos..pos + batch]).unwrap();
        pos += batch;
        let lg = model.forward_loss(&b, Mode::Train, &mut rng, 0.0).unwrap();
        let grads = lg.graph.backward(lg.loss).unwrap();
        let store = model.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        clip_gradients(store, 5.0).unwrap();
        opt.update(store).unwrap();
    }
}

/// A copy-task model over `v` symbols trained for `updates` steps.
pub fn trained_copy_model(v: usize, emb: usize, rnn: usize, updates: usize, seed: u64) -> (NmtModel<f64>, Vocabulary) {
    let vocab = symbol_vocab(v);
    let mut rng = RngState::from_seed(seed);
    let lines = random_sentences(&mut rng, 200, v, 1, 4);
    let corpus = ParallelCorpus::from_lines(&lines, &lines, &vocab, &vocab).unwrap();
    let mut model = NmtModel::init_params(options(vocab.len(), vocab.len(), emb, rnn), &mut rng).unwrap();
    train_nmt(&mut model, &corpus, updates, 10, 0.01, seed);
    (model, vocab)
}

/// Parses a configuration with the given `[training]` and `[model]` lines;
/// checkpoints go to `save_path`.
pub fn config(training: &str, model: &str, save_path: &Path) -> ExperimentConfig {
    let text = format!(
        "[training]\n{training}\n[model]\nsave_path: {}\n{model}\n[model.data]\n",
        save_path.display()
    );
    ExperimentConfig::parse(&text, "<test>", &[]).unwrap()
}

pub fn params_bits<T: Scalar>(m: &Model<T>) -> Vec<(String, Vec<u64>)> {
    m.store()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.as_f64().to_bits()).collect()))
        .collect()
}

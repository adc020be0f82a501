mod common;

use nmtkit::autodiff::{ParamKind, ParamStore};
use nmtkit::checkpoint::Checkpoint;
use nmtkit::data::{ParallelCorpus, Vocabulary};
use nmtkit::decode::BeamConfig;
use nmtkit::init::RngState;
use nmtkit::metrics::MetricName;
use nmtkit::model::{Model, ModelType};
use nmtkit::optim::{OptimizerKind, OptimizerState};
use nmtkit::subword::FilterChain;
use nmtkit::tensor::Tensor;
use nmtkit::trainer::{StandardValidator, Trainer, TrainingData, ValidData, Validator};

use common::{config, options, params_bits, random_sentences, symbol_vocab};

fn data(seed: u64, with_valid: bool) -> TrainingData {
    let vocab = symbol_vocab(6);
    let mut rng = RngState::from_seed(seed);
    let lines = random_sentences(&mut rng, 40, 6, 1, 5);
    let valid_lines = random_sentences(&mut rng, 8, 6, 1, 5);
    TrainingData {
        src_vocab: vocab.clone(),
        trg_vocab: vocab.clone(),
        train: ParallelCorpus::from_lines(&lines, &lines, &vocab, &vocab).unwrap(),
        valid: with_valid.then(|| ValidData {
            corpus: ParallelCorpus::from_lines(&valid_lines, &valid_lines, &vocab, &vocab).unwrap(),
            references: valid_lines.clone(),
        }),
    }
}

fn losses(seed: u64, dir: &std::path::Path) -> Vec<f64> {
    let cfg = config(
        &format!("max_updates: 120\nmax_epochs: 1000\ndisp_freq: 0\nseed: {seed}"),
        "rnn_dim: 6\nembedding_dim: 5\nbatch_size: 4\noptimizer: adam\nlrate: 0.01\nemb_dropout: 0.1\nout_dropout: 0.3",
        dir,
    );
    let mut t = Trainer::<f32>::new(cfg, data(1, false)).unwrap();
    t.run().unwrap();
    t.losses().to_vec()
}

#[test]
fn loss_trajectory_is_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = losses(5, a.path());
    assert_eq!(first.len(), 120);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first), bits(&losses(5, b.path())));
    assert_ne!(first, losses(6, c.path()));
}

#[test]
fn validation_leaves_parameters_untouched() {
    let d = data(2, true).valid.unwrap();
    let vocab: Vocabulary = symbol_vocab(6);
    let model = Model::<f64>::init(ModelType::Attention, options(vocab.len(), vocab.len(), 5, 6), &mut RngState::from_seed(3)).unwrap();
    let before = params_bits(&model);
    for metric in [MetricName::Perplexity, MetricName::Bleu, MetricName::BleuV13a] {
        let mut v = StandardValidator {
            metric,
            data: ValidData { corpus: d.corpus.clone(), references: d.references.clone() },
            trg_vocab: vocab.clone(),
            filters: FilterChain(Vec::new()),
            beam: BeamConfig { beam_size: 3, ..BeamConfig::default() },
            workers: 2,
            batch_size: 3,
        };
        let out = Validator::<f64>::validate(&mut v, &model).unwrap();
        assert!(out.metric.value.is_finite());
        assert_eq!(params_bits(&model), before, "{metric}");
    }
}

#[test]
fn every_optimizer_shrinks_the_squared_norm() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adadelta, OptimizerKind::Adam] {
        let lrate = match kind {
            OptimizerKind::Sgd | OptimizerKind::Adam => 1e-2,
            _ => kind.default_lrate(),
        };
        let mut rng = RngState::from_seed(4);
        let theta: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", ParamKind::Weight, Tensor::from_f64(vec![3, 4], &theta).unwrap()).unwrap();
        let mut opt = OptimizerState::with_lrate(kind, lrate, &store).unwrap();
        let f = |s: &ParamStore<f64>| s.get(id).value.sum_squares();
        let mut prev = f(&store);
        for step in 0..100 {
            let p = store.get_mut(id);
            p.grad = p.value.map(|v| 2.0 * v);
            opt.update(&mut store).unwrap();
            let now = f(&store);
            assert!(now < prev, "{kind} step {step}: {now} >= {prev}");
            prev = now;
        }
    }
}

#[test]
fn checkpoints_load_without_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "max_updates: 20\nvalid_freq: 10\nvalid_metric: px\nmax_epochs: 100\ndisp_freq: 0",
        "rnn_dim: 6\nembedding_dim: 5\nbatch_size: 4\nlrate: 0.01",
        dir.path(),
    );
    let mut t = Trainer::<f32>::new(cfg, data(7, true)).unwrap();
    let report = t.run().unwrap();
    let path = report.best_checkpoint.expect("a validation ran");
    let ckpt = Checkpoint::<f32>::load(&path).unwrap();
    let model = ckpt.to_model().unwrap();
    assert_eq!(params_bits(&model), params_bits(t.model()));
    let (src, trg) = ckpt.vocabularies().unwrap();
    assert_eq!(src.unwrap().tokens(), symbol_vocab(6).tokens());
    assert_eq!(trg.unwrap().tokens(), symbol_vocab(6).tokens());
}

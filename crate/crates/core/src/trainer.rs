//! Training loop with periodic validation, early stopping, best-n
//! checkpoints and resumable snapshots.
//!
//! Files written under `save_path`, for a run named `<name>`:
//!
//! | file | when |
//! |------|------|
//! | `<name>.val<k>.ckpt` | validation `k` improved the metric |
//! | `<name>.val<k>.hyp` | every validation, with `valid_save_hyp` |
//! | `<name>.snapshot` | every `snapshot_freq` updates |
//! | `<name>.nonfinite.snapshot` | training hit a non-finite value |
//! | `<name>.log` | always |

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_pretrained, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{epoch_order, make_batch, read_lines, sequential_batches, ParallelCorpus, Vocabulary};
use crate::decode::{translate_parallel, BeamConfig};
use crate::error::{Error, Result};
use crate::init::RngState;
use crate::layers::Mode;
use crate::metrics::{bleu_corpus, metric_better, perplexity, BleuVariant, MetricName, MetricValue};
use crate::model::{Model, ModelType};
use crate::optim::{clip_gradients, gradient_noise, OptimizerKind, OptimizerMeta, OptimizerState};
use crate::scalar::Scalar;
use crate::subword::FilterChain;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub update: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<MetricValue>,
    /// Consecutive validations without strict improvement.
    pub streak: usize,
    pub best: Option<MetricValue>,
    /// Saved best checkpoints, best first.
    pub best_checkpoints: Vec<(MetricValue, PathBuf)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub improved: bool,
    pub stop: bool,
}

impl TrainerState {
    /// Records one validation result. Patience 0 never stops.
    pub fn record(&mut self, value: MetricValue, patience: usize) -> Result<Outcome> {
        let improved = match &self.best {
            None => true,
            Some(best) => metric_better(&value, best)?,
        };
        self.history.push(value);
        if improved {
            self.best = Some(value);
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        Ok(Outcome {
            improved,
            stop: patience > 0 && self.streak >= patience,
        })
    }

    /// Adds a checkpoint to the best-n ring; returns paths to delete.
    pub fn keep_best(&mut self, value: MetricValue, path: PathBuf, n: usize) -> Result<Vec<PathBuf>> {
        self.best_checkpoints.push((value, path));
        let mut err = None;
        self.best_checkpoints.sort_by(|a, b| match metric_better(&a.0, &b.0) {
            Ok(true) => std::cmp::Ordering::Less,
            Ok(false) => match metric_better(&b.0, &a.0) {
                Ok(true) => std::cmp::Ordering::Greater,
                _ => std::cmp::Ordering::Equal,
            },
            Err(e) => {
                err.get_or_insert(e);
                std::cmp::Ordering::Equal
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let evicted = if self.best_checkpoints.len() > n {
            self.best_checkpoints.split_off(n)
        } else {
            Vec::new()
        };
        Ok(evicted.into_iter().map(|(_, p)| p).collect())
    }
}

pub struct Validation {
    pub metric: MetricValue,
    /// Post-processed hypotheses, when the metric decodes.
    pub hypotheses: Option<Vec<String>>,
}

/// Computes the validation metric. Must not modify the model.
pub trait Validator<T: Scalar> {
    fn validate(&mut self, model: &Model<T>) -> Result<Validation>;
}

pub struct ValidData {
    pub corpus: ParallelCorpus,
    /// Reference lines for BLEU, already in post-processed form.
    pub references: Vec<String>,
}

/// The validator built from the configuration.
pub struct StandardValidator {
    pub metric: MetricName,
    pub data: ValidData,
    pub trg_vocab: Vocabulary,
    pub filters: FilterChain,
    pub beam: BeamConfig,
    pub workers: usize,
    pub batch_size: usize,
}

impl<T: Scalar> Validator<T> for StandardValidator {
    fn validate(&mut self, model: &Model<T>) -> Result<Validation> {
        match self.metric {
            MetricName::Perplexity => {
                let mut nll = 0.0;
                let mut tokens = 0;
                for b in sequential_batches::<T>(&self.data.corpus, self.batch_size)? {
                    nll += model.sentence_nll(&b)?.iter().sum::<f64>();
                    tokens += b.unpadded_trg_lens().iter().sum::<usize>();
                }
                Ok(Validation {
                    metric: perplexity(nll, tokens)?,
                    hypotheses: None,
                })
            }
            MetricName::Bleu | MetricName::BleuV13a => {
                let nmt = model.as_nmt()?;
                let results = translate_parallel(&[nmt], &self.data.corpus.src, self.workers, &self.beam)?;
                let hyps: Vec<String> = results
                    .iter()
                    .map(|h| self.filters.apply(&self.trg_vocab.decode(&h[0].tokens)))
                    .collect();
                let variant = if self.metric == MetricName::Bleu {
                    BleuVariant::MultiBleu
                } else {
                    BleuVariant::V13a
                };
                Ok(Validation {
                    metric: bleu_corpus(&hyps, &self.data.references, variant, false)?,
                    hypotheses: Some(hyps),
                })
            }
        }
    }
}

pub struct TrainingData {
    pub src_vocab: Vocabulary,
    pub trg_vocab: Vocabulary,
    pub train: ParallelCorpus,
    pub valid: Option<ValidData>,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} must be set")))
}

impl TrainingData {
    /// Loads vocabularies and corpora named in the configuration.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let trg_vocab = Vocabulary::load(required(&cfg.dicts.trg, "trg")?)?.truncated(cfg.model.n_words_trg);
        let lm = cfg.training.model_type == ModelType::Rnnlm;
        let src_vocab = if lm {
            trg_vocab.clone()
        } else {
            Vocabulary::load(required(&cfg.dicts.src, "src")?)?.truncated(cfg.model.n_words_src)
        };
        let filters = cfg.filters()?;
        let train = if lm {
            ParallelCorpus::monolingual(&read_lines(required(&d.train_trg, "train_trg")?)?, &trg_vocab)
        } else {
            ParallelCorpus::load(required(&d.train_src, "train_src")?, required(&d.train_trg, "train_trg")?, &src_vocab, &trg_vocab)?
        };
        let valid = match (&d.valid_src, &d.valid_trg) {
            (_, Some(vt)) if lm => {
                let lines = read_lines(vt)?;
                Some(ValidData {
                    corpus: ParallelCorpus::monolingual(&lines, &trg_vocab),
                    references: lines,
                })
            }
            (Some(vs), Some(vt)) => {
                let corpus = ParallelCorpus::load(vs, vt, &src_vocab, &trg_vocab)?;
                let references = match &d.valid_trg_orig {
                    Some(orig) => read_lines(orig)?,
                    None => read_lines(vt)?.iter().map(|l| filters.apply(l)).collect(),
                };
                Some(ValidData { corpus, references })
            }
            _ => None,
        };
        Ok(Self {
            src_vocab,
            trg_vocab,
            train,
            valid,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SnapshotState {
    optimizer: OptimizerMeta,
    trainer: TrainerState,
    rng: RngState,
    epoch_order: Vec<Vec<usize>>,
    position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalReport {
    pub name: String,
    pub updates: u64,
    pub epochs: u64,
    pub best: Option<MetricValue>,
    pub best_checkpoint: Option<PathBuf>,
    pub early_stopped: bool,
    pub history: Vec<MetricValue>,
    pub last_loss: Option<f64>,
}

pub struct Trainer<T: Scalar> {
    cfg: ExperimentConfig,
    name: String,
    model: Model<T>,
    opt: OptimizerState<T>,
    state: TrainerState,
    rng: RngState,
    data: TrainingData,
    pool: Vec<usize>,
    order: Vec<Vec<usize>>,
    position: usize,
    validator: Option<Box<dyn Validator<T>>>,
    log: Option<File>,
    losses: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the model from the seed and attaches the configured validator.
    pub fn new(cfg: ExperimentConfig, data: TrainingData) -> Result<Self> {
        let mut rng = RngState::from_seed(cfg.training.seed);
        let opts = cfg.model_options(data.src_vocab.len(), data.trg_vocab.len());
        let mut init_rng = rng.split();
        let mut model = Model::init(cfg.training.model_type, opts, &mut init_rng)?;
        if let Some(p) = &cfg.model.pretrained_weights {
            let archive = Checkpoint::<T>::load(p)?;
            let n = load_pretrained(model.store_mut(), &archive)?;
            log::info!("initialized {n} parameters from {}", p.display());
        }
        let opt = OptimizerState::with_lrate(cfg.model.optimizer, cfg.lrate(), model.store())?;
        if cfg.training.gradient_noise && cfg.model.optimizer != OptimizerKind::Adam {
            return Err(Error::Config("gradient_noise requires the adam optimizer".into()));
        }
        let pool = data.train.indices_within(cfg.model.max_seq_len);
        if pool.is_empty() {
            return Err(Error::Data("no training sample fits within max_seq_len".into()));
        }
        let validator: Option<Box<dyn Validator<T>>> = match &data.valid {
            None => None,
            Some(v) => {
                let metric = cfg.training.valid_metric.metric()?;
                if metric != MetricName::Perplexity && cfg.training.model_type == ModelType::Rnnlm {
                    return Err(Error::Config("rnnlm can only be validated with px".into()));
                }
                Some(Box::new(StandardValidator {
                    metric,
                    data: ValidData {
                        corpus: v.corpus.clone(),
                        references: v.references.clone(),
                    },
                    trg_vocab: data.trg_vocab.clone(),
                    filters: cfg.filters()?,
                    beam: BeamConfig {
                        beam_size: cfg.training.valid_beam,
                        n_best: 1,
                        max_len: (cfg.training.valid_max_len > 0).then_some(cfg.training.valid_max_len),
                        keep_alignments: false,
                    },
                    workers: cfg.training.valid_njobs,
                    batch_size: cfg.training.valid_batch_size,
                }))
            }
        };
        Ok(Self {
            name: cfg.checkpoint_name(),
            cfg,
            model,
            opt,
            state: TrainerState::default(),
            rng,
            data,
            pool,
            order: Vec::new(),
            position: 0,
            validator,
            log: None,
            losses: Vec::new(),
        })
    }

    pub fn from_config(cfg: ExperimentConfig) -> Result<Self> {
        let data = TrainingData::load(&cfg)?;
        Self::new(cfg, data)
    }

    pub fn set_validator(&mut self, v: Box<dyn Validator<T>>) {
        self.validator = Some(v);
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Loss of every update so far in this process.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.cfg.model.save_path.join(format!("{}{suffix}", self.name))
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.path(".snapshot")
    }

    fn say(&mut self, line: &str) {
        log::info!("{line}");
        if self.log.is_none() {
            self.log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.path(".log"))
                .ok();
        }
        if let Some(f) = &mut self.log {
            let _ = writeln!(f, "{line}");
        }
    }

    fn snapshot(&self) -> Result<Checkpoint<T>> {
        let extras = self
            .opt
            .named_slots(self.model.store())
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let state = SnapshotState {
            optimizer: self.opt.meta(),
            trainer: self.state.clone(),
            rng: self.rng.clone(),
            epoch_order: self.order.clone(),
            position: self.position,
        };
        Ok(Checkpoint::from_model(
            &self.model,
            Some(&self.cfg),
            (Some(&self.data.src_vocab), Some(&self.data.trg_vocab)),
            extras,
            Some(serde_json::to_value(state)?),
        ))
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        self.snapshot()?.save(path)
    }

    /// Continues from a snapshot. The run keeps this trainer's
    /// configuration; parameters, optimizer, counters, random state and
    /// batch position come from the file.
    pub fn restore_snapshot(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::<T>::load(path)?;
        let state: SnapshotState = match &ckpt.header.state {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Checkpoint(format!("{} is not a snapshot", path.display()))),
        };
        let model = ckpt.to_model()?;
        if model.options() != self.model.options() || model.kind() != self.model.kind() {
            return Err(Error::Checkpoint("snapshot architecture differs from the configuration".into()));
        }
        self.opt = OptimizerState::restore(&state.optimizer, model.store(), &ckpt.extras("opt."))?;
        self.model = model;
        self.state = state.trainer;
        self.rng = state.rng;
        self.order = state.epoch_order;
        self.position = state.position;
        Ok(())
    }

    /// One forward/backward/update on the given sample indices.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<f64> {
        let batch = make_batch::<T>(&self.data.train, indices)?;
        let t = &self.cfg.training;
        let lg = self.model.forward_loss(&batch, Mode::Train, &mut self.rng, t.decay_c)?;
        let loss = lg.loss_value();
        let grads = lg.graph.backward(lg.loss)?;
        let store = self.model.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        if t.clip_c > 0.0 {
            clip_gradients(store, t.clip_c)?;
        }
        if t.gradient_noise {
            gradient_noise(store, self.opt.kind, self.state.update + 1, t.noise_eta, t.noise_gamma, &mut self.rng)?;
        }
        self.opt.update(store)?;
        self.state.update += 1;
        Ok(loss)
    }

    fn validate(&mut self) -> Result<Outcome> {
        let Some(v) = self.validator.as_mut() else {
            return Ok(Outcome {
                improved: false,
                stop: false,
            });
        };
        let result = v.validate(&self.model)?;
        let k = self.state.history.len() + 1;
        if self.cfg.training.valid_save_hyp {
            if let Some(h) = &result.hypotheses {
                let p = self.path(&format!(".val{k}.hyp"));
                let mut text = h.join("\n");
                text.push('\n');
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
        }
        let outcome = self.state.record(result.metric, self.cfg.training.patience)?;
        self.say(&format!(
            "validation {k} update {} epoch {}: {}{}",
            self.state.update,
            self.state.epoch + 1,
            result.metric,
            if outcome.improved { " (best)" } else { "" }
        ));
        if outcome.improved {
            let p = self.path(&format!(".val{k}.ckpt"));
            Checkpoint::from_model(
                &self.model,
                Some(&self.cfg),
                (Some(&self.data.src_vocab), Some(&self.data.trg_vocab)),
                vec![],
                None,
            )
            .save(&p)?;
            for old in self.state.keep_best(result.metric, p, self.cfg.training.save_best_n)? {
                std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(outcome)
    }

    fn report(&self, early_stopped: bool) -> FinalReport {
        FinalReport {
            name: self.name.clone(),
            updates: self.state.update,
            epochs: self.state.epoch,
            best: self.state.best,
            best_checkpoint: self.state.best_checkpoints.first().map(|(_, p)| p.clone()),
            early_stopped,
            history: self.state.history.clone(),
            last_loss: self.losses.last().copied(),
        }
    }

    /// Trains until early stopping, `max_epochs` or `max_updates`.
    pub fn run(&mut self) -> Result<FinalReport> {
        self.run_until(|_| false)
    }

    /// [`Trainer::run`] that also stops as soon as `done` holds after a
    /// validation.
    pub fn run_until<F: FnMut(&TrainerState) -> bool>(&mut self, mut done: F) -> Result<FinalReport> {
        std::fs::create_dir_all(&self.cfg.model.save_path).map_err(|e| Error::io(&self.cfg.model.save_path, e))?;
        if self.cfg.device_ignored() {
            log::warn!("device_id {} ignored: CPU-only", self.cfg.training.device_id);
        }
        self.say(&format!(
            "run {} with {} parameters, {} training samples",
            self.name,
            self.model.store().num_elements(),
            self.pool.len()
        ));
        let t = self.cfg.training.clone();
        let mut clock = Instant::now();
        let mut words = 0usize;
        while self.state.epoch < t.max_epochs {
            if self.order.is_empty() {
                self.order = epoch_order(&self.data.train, &self.pool, self.cfg.model.batch_size, self.cfg.model.shuffle_mode, &mut self.rng)?;
                self.position = 0;
            }
            while self.position < self.order.len() {
                if t.max_updates > 0 && self.state.update >= t.max_updates {
                    return Ok(self.report(false));
                }
                let idx = self.order[self.position].clone();
                self.position += 1;
                let loss = match self.train_step(&idx) {
                    Ok(l) => l,
                    Err(e @ Error::NonFinite(_)) => {
                        let p = self.path(".nonfinite.snapshot");
                        self.save_snapshot(&p)?;
                        return Err(Error::NonFinite(format!("{e}; state saved to {}", p.display())));
                    }
                    Err(e) => return Err(e),
                };
                self.losses.push(loss);
                words += idx.iter().map(|&i| self.data.train.trg[i].len()).sum::<usize>();
                let u = self.state.update;
                if t.disp_freq > 0 && u.is_multiple_of(t.disp_freq) {
                    let wps = words as f64 / clock.elapsed().as_secs_f64().max(1e-9);
                    self.say(&format!("epoch {} update {u} loss {loss:.4} words/sec {wps:.0}", self.state.epoch + 1));
                    clock = Instant::now();
                    words = 0;
                }
                if t.snapshot_freq > 0 && u.is_multiple_of(t.snapshot_freq) {
                    self.save_snapshot(&self.snapshot_path())?;
                }
                if t.valid_freq > 0 && u.is_multiple_of(t.valid_freq) && self.state.epoch + 1 >= t.valid_start {
                    let o = self.validate()?;
                    if o.stop || done(&self.state) {
                        return Ok(self.report(o.stop));
                    }
                }
            }
            self.state.epoch += 1;
            self.order.clear();
            self.position = 0;
            if t.valid_freq == 0 && self.state.epoch >= t.valid_start {
                let o = self.validate()?;
                if o.stop || done(&self.state) {
                    return Ok(self.report(o.stop));
                }
            }
        }
        Ok(self.report(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bleu(v: f64) -> MetricValue {
        MetricValue::new(MetricName::Bleu, v)
    }

    #[test]
    fn streak_and_patience() {
        let mut s = TrainerState::default();
        let seq = [10.0, 11.0, 11.0, 10.5, 11.0];
        let outs: Vec<Outcome> = seq.iter().map(|&v| s.record(bleu(v), 3).unwrap()).collect();
        assert!(outs[0].improved && outs[1].improved);
        assert_eq!(outs.iter().filter(|o| o.improved).count(), 2);
        assert!(!outs[3].stop && outs[4].stop);
        assert_eq!(s.streak, 3);
    }

    #[test]
    fn improvement_resets_streak() {
        let mut s = TrainerState::default();
        for v in [5.0, 4.0, 4.0, 6.0] {
            s.record(bleu(v), 0).unwrap();
        }
        assert_eq!(s.streak, 0);
        assert_eq!(s.best.unwrap().value, 6.0);
    }

    #[test]
    fn best_ring_evicts_worst() {
        let mut s = TrainerState::default();
        assert!(s.keep_best(bleu(1.0), "a".into(), 2).unwrap().is_empty());
        assert!(s.keep_best(bleu(3.0), "b".into(), 2).unwrap().is_empty());
        assert_eq!(s.keep_best(bleu(2.0), "c".into(), 2).unwrap(), [PathBuf::from("a")]);
        let px = MetricValue::new(MetricName::Perplexity, 1.0);
        assert!(s.keep_best(px, "d".into(), 2).is_err());
    }
}

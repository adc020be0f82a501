//! Experiment configuration files.
//!
//! ```text
//! [training]
//! model_type: attention   # trailing comments allowed
//! patience: 20
//! [model]
//! rnn_dim: 100
//! [model.dicts]
//! src: ~/data/vocab.en.json
//! [model.data]
//! train_src: ~/data/train.en
//! ```
//!
//! Command-line overrides are `key:value` strings; keys are unique across
//! sections so the section is implied.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ShuffleMode, DEFAULT_MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::init::InitMethod;
use crate::layers::{InitSpec, TiedEmb};
use crate::metrics::MetricName;
use crate::model::{InitCgru, ModelOptions, ModelType};
use crate::optim::{OptimizerKind, DEFAULT_CLIP};
use crate::subword::{Filter, FilterChain, DEFAULT_COMPOUND_MARKER};

const SECTIONS: [(&str, &[&str]); 4] = [
    (
        "training",
        &[
            "model_type", "patience", "valid_freq", "valid_metric", "valid_start", "valid_beam",
            "valid_njobs", "valid_save_hyp", "decay_c", "clip_c", "seed", "save_best_n",
            "device_id", "snapshot_freq", "max_epochs", "disp_freq", "max_updates",
            "gradient_noise", "noise_eta", "noise_gamma", "valid_batch_size", "valid_max_len",
        ],
    ),
    (
        "model",
        &[
            "tied_emb", "layer_norm", "shuffle_mode", "filter", "n_words_src", "n_words_trg",
            "save_path", "rnn_dim", "embedding_dim", "weight_init", "batch_size", "optimizer",
            "lrate", "emb_dropout", "ctx_dropout", "out_dropout", "init_cgru", "n_enc_layers",
            "recurrent_init", "max_seq_len", "pretrained_weights", "compound_marker",
        ],
    ),
    ("model.dicts", &["src", "trg"]),
    (
        "model.data",
        &["train_src", "train_trg", "valid_src", "valid_trg", "valid_trg_orig"],
    ),
];

const MANDATORY: [&str; 3] = ["training", "model", "model.data"];

/// Validation metric as written in the file. `meteor` is recognized so
/// that existing files load, but cannot be computed here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidMetric {
    Known(MetricName),
    Meteor,
}

impl ValidMetric {
    pub fn metric(self) -> Result<MetricName> {
        match self {
            Self::Known(m) => Ok(m),
            Self::Meteor => Err(Error::Unsupported("meteor".into())),
        }
    }
}

impl FromStr for ValidMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meteor" => Ok(Self::Meteor),
            other => other.parse().map(Self::Known),
        }
    }
}

impl fmt::Display for ValidMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Known(MetricName::Bleu) => f.write_str("bleu"),
            Self::Known(MetricName::BleuV13a) => f.write_str("bleu_v13a"),
            Self::Known(MetricName::Perplexity) => f.write_str("px"),
            Self::Meteor => f.write_str("meteor"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub model_type: ModelType,
    pub patience: usize,
    /// Updates between validations; 0 validates at every epoch end.
    pub valid_freq: u64,
    pub valid_metric: ValidMetric,
    /// First epoch (1-based, inclusive) in which validation runs.
    pub valid_start: u64,
    pub valid_beam: usize,
    pub valid_njobs: usize,
    pub valid_save_hyp: bool,
    pub decay_c: f64,
    pub clip_c: f64,
    pub seed: u64,
    pub save_best_n: usize,
    pub device_id: String,
    /// 0 disables snapshots.
    pub snapshot_freq: u64,
    pub max_epochs: u64,
    pub disp_freq: u64,
    /// 0 means unlimited.
    pub max_updates: u64,
    pub gradient_noise: bool,
    pub noise_eta: f64,
    pub noise_gamma: f64,
    pub valid_batch_size: usize,
    /// 0 means the decoder default of `3 * src_len + 10`.
    pub valid_max_len: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            model_type: ModelType::Attention,
            patience: 10,
            valid_freq: 0,
            valid_metric: ValidMetric::Known(MetricName::Bleu),
            valid_start: 1,
            valid_beam: 12,
            valid_njobs: 1,
            valid_save_hyp: false,
            decay_c: 0.0,
            clip_c: DEFAULT_CLIP,
            seed: 1234,
            save_best_n: 4,
            device_id: "auto".into(),
            snapshot_freq: 0,
            max_epochs: 100,
            disp_freq: 100,
            max_updates: 0,
            gradient_noise: false,
            noise_eta: crate::optim::DEFAULT_NOISE_ETA,
            noise_gamma: crate::optim::DEFAULT_NOISE_GAMMA,
            valid_batch_size: 64,
            valid_max_len: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub tied_emb: TiedEmb,
    pub layer_norm: bool,
    pub shuffle_mode: ShuffleMode,
    pub filter: String,
    /// suffix joining a token to the next under the compound filter
    #[serde(default = "default_compound_marker")]
    pub compound_marker: String,
    pub n_words_src: usize,
    pub n_words_trg: usize,
    pub save_path: PathBuf,
    pub rnn_dim: usize,
    pub embedding_dim: usize,
    pub weight_init: InitMethod,
    pub recurrent_init: InitMethod,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// `None` takes the optimizer's default.
    pub lrate: Option<f64>,
    pub emb_dropout: f64,
    pub ctx_dropout: f64,
    pub out_dropout: f64,
    pub init_cgru: InitCgru,
    pub n_enc_layers: usize,
    pub max_seq_len: usize,
    pub pretrained_weights: Option<PathBuf>,
}

fn default_compound_marker() -> String {
    DEFAULT_COMPOUND_MARKER.to_owned()
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            tied_emb: TiedEmb::Off,
            layer_norm: false,
            shuffle_mode: ShuffleMode::Simple,
            filter: String::new(),
            compound_marker: default_compound_marker(),
            n_words_src: 0,
            n_words_trg: 0,
            save_path: PathBuf::from("."),
            rnn_dim: 100,
            embedding_dim: 100,
            weight_init: InitMethod::Xavier,
            recurrent_init: InitMethod::Orthogonal,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lrate: None,
            emb_dropout: 0.0,
            ctx_dropout: 0.0,
            out_dropout: 0.0,
            init_cgru: InitCgru::MeanCtx,
            n_enc_layers: 0,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            pretrained_weights: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DictsSection {
    pub src: Option<PathBuf>,
    pub trg: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub train_src: Option<PathBuf>,
    pub train_trg: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_trg: Option<PathBuf>,
    pub valid_trg_orig: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub training: TrainingSection,
    pub model: ModelSection,
    pub dicts: DictsSection,
    pub data: DataSection,
}

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
}

pub fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "True" | "true" | "yes" | "1" => Some(true),
        "False" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// `~` and `~/...` expand against `$HOME`.
pub fn expand_path(s: &str) -> PathBuf {
    let home = std::env::var_os("HOME");
    match (s, home) {
        ("~", Some(h)) => PathBuf::from(h),
        (s, Some(h)) if s.starts_with("~/") => PathBuf::from(h).join(&s[2..]),
        (s, _) => PathBuf::from(s),
    }
}

/// Where a setting came from, for diagnostics.
#[derive(Clone, Debug)]
struct Origin {
    path: String,
    line: usize,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_owned(),
            line,
            msg,
        };
        let mut seen_sections = Vec::new();
        let mut entries: BTreeMap<&'static str, (String, Origin)> = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(err(line_no, format!("unknown section [{name}]")));
                }
                if seen_sections.contains(&name.to_owned()) {
                    return Err(err(line_no, format!("duplicate section [{name}]")));
                }
                seen_sections.push(name.to_owned());
                section = Some(name.to_owned());
                continue;
            }
            let Some((key, value)) = line.split_once(':') else {
                return Err(err(line_no, format!("expected 'key: value', got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = &section else {
                return Err(err(line_no, format!("key {key:?} outside of any section")));
            };
            let (_, keys) = SECTIONS.iter().find(|(s, _)| s == sec).expect("validated section");
            let Some(&k) = keys.iter().find(|&&k| k == key) else {
                return Err(err(line_no, format!("unknown key {key:?} in [{sec}]")));
            };
            let o = Origin {
                path: origin.to_owned(),
                line: line_no,
            };
            if entries.insert(k, (value.to_owned(), o)).is_some() {
                return Err(err(line_no, format!("duplicate key {key:?}")));
            }
        }
        for m in MANDATORY {
            if !seen_sections.iter().any(|s| s == m) {
                return Err(Error::Config(format!("{origin}: missing mandatory section [{m}]")));
            }
        }
        for (n, ov) in overrides.iter().enumerate() {
            let Some((key, value)) = ov.split_once(':') else {
                return Err(Error::Config(format!("override {ov:?} is not of the form key:value")));
            };
            let key = key.trim();
            let Some(sec) = section_of(key) else {
                return Err(Error::Config(format!("override names unknown key {key:?}")));
            };
            let (_, keys) = SECTIONS.iter().find(|(s, _)| *s == sec).expect("known");
            let k = *keys.iter().find(|&&k| k == key).expect("known");
            entries.insert(
                k,
                (
                    value.trim().to_owned(),
                    Origin {
                        path: "<override>".into(),
                        line: n + 1,
                    },
                ),
            );
        }

        let mut cfg = Self::default();
        for (key, (value, o)) in &entries {
            cfg.set(key, value).map_err(|msg| Error::Parse {
                path: o.path.clone(),
                line: o.line,
                msg: format!("{key}: {msg}"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key:value` overrides to an already parsed configuration.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        for ov in overrides {
            let (key, value) = ov
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not of the form key:value")))?;
            let key = key.trim();
            self.set(key, value.trim())
                .map_err(|msg| Error::Config(format!("override {key}: {msg}")))?;
        }
        self.validate()?;
        Ok(self)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<X: FromStr>(v: &str) -> std::result::Result<X, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
        }
        fn boolean(v: &str) -> std::result::Result<bool, String> {
            parse_bool(v).ok_or_else(|| format!("expected True or False, got {v:?}"))
        }
        fn typed<X: FromStr<Err = Error>>(v: &str) -> std::result::Result<X, String> {
            v.parse().map_err(|e: Error| e.to_string())
        }
        fn path(v: &str) -> Option<PathBuf> {
            match v {
                "" | "None" => None,
                p => Some(expand_path(p)),
            }
        }
        let (t, m) = (&mut self.training, &mut self.model);
        match key {
            "model_type" => t.model_type = typed(v)?,
            "patience" => t.patience = num(v)?,
            "valid_freq" => t.valid_freq = num(v)?,
            "valid_metric" => t.valid_metric = typed(v)?,
            "valid_start" => t.valid_start = num(v)?,
            "valid_beam" => t.valid_beam = num(v)?,
            "valid_njobs" => t.valid_njobs = num(v)?,
            "valid_save_hyp" => t.valid_save_hyp = boolean(v)?,
            "decay_c" => t.decay_c = num(v)?,
            "clip_c" => t.clip_c = num(v)?,
            "seed" => t.seed = num(v)?,
            "save_best_n" => t.save_best_n = num(v)?,
            "device_id" => t.device_id = v.to_owned(),
            "snapshot_freq" => t.snapshot_freq = num(v)?,
            "max_epochs" => t.max_epochs = num(v)?,
            "disp_freq" => t.disp_freq = num(v)?,
            "max_updates" => t.max_updates = num(v)?,
            "gradient_noise" => t.gradient_noise = boolean(v)?,
            "noise_eta" => t.noise_eta = num(v)?,
            "noise_gamma" => t.noise_gamma = num(v)?,
            "valid_batch_size" => t.valid_batch_size = num(v)?,
            "valid_max_len" => t.valid_max_len = num(v)?,
            "tied_emb" => m.tied_emb = typed(v)?,
            "layer_norm" => m.layer_norm = boolean(v)?,
            "shuffle_mode" => m.shuffle_mode = typed(v)?,
            "filter" => {
                typed::<FilterChain>(v)?;
                m.filter = if v == "None" { String::new() } else { v.to_owned() };
            }
            "compound_marker" => {
                if v.is_empty() || v.contains(char::is_whitespace) {
                    return Err(format!("expected a non-empty marker without spaces, found {v:?}"));
                }
                m.compound_marker = v.to_owned();
            }
            "n_words_src" => m.n_words_src = num(v)?,
            "n_words_trg" => m.n_words_trg = num(v)?,
            "save_path" => m.save_path = expand_path(v),
            "rnn_dim" => m.rnn_dim = num(v)?,
            "embedding_dim" => m.embedding_dim = num(v)?,
            "weight_init" => m.weight_init = typed(v)?,
            "recurrent_init" => m.recurrent_init = typed(v)?,
            "batch_size" => m.batch_size = num(v)?,
            "optimizer" => m.optimizer = typed(v)?,
            "lrate" => m.lrate = Some(num(v)?),
            "emb_dropout" => m.emb_dropout = num(v)?,
            "ctx_dropout" => m.ctx_dropout = num(v)?,
            "out_dropout" => m.out_dropout = num(v)?,
            "init_cgru" => m.init_cgru = typed(v)?,
            "n_enc_layers" => m.n_enc_layers = num(v)?,
            "max_seq_len" => m.max_seq_len = num(v)?,
            "pretrained_weights" => m.pretrained_weights = path(v),
            "src" => self.dicts.src = path(v),
            "trg" => self.dicts.trg = path(v),
            "train_src" => self.data.train_src = path(v),
            "train_trg" => self.data.train_trg = path(v),
            "valid_src" => self.data.valid_src = path(v),
            "valid_trg" => self.data.valid_trg = path(v),
            "valid_trg_orig" => self.data.valid_trg_orig = path(v),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let (t, m) = (&self.training, &self.model);
        let positive = [
            ("rnn_dim", m.rnn_dim),
            ("embedding_dim", m.embedding_dim),
            ("batch_size", m.batch_size),
            ("valid_beam", t.valid_beam),
            ("valid_njobs", t.valid_njobs),
            ("save_best_n", t.save_best_n),
            ("valid_batch_size", t.valid_batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("emb_dropout", m.emb_dropout), ("ctx_dropout", m.ctx_dropout), ("out_dropout", m.out_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 1), got {v}")));
            }
        }
        if m.lrate.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("lrate must be positive".into()));
        }
        if t.clip_c < 0.0 || t.decay_c < 0.0 {
            return Err(Error::Config("clip_c and decay_c must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lrate(&self) -> f64 {
        self.model
            .lrate
            .unwrap_or_else(|| self.model.optimizer.default_lrate())
    }

    pub fn filters(&self) -> Result<FilterChain> {
        let mut chain: FilterChain = self.model.filter.parse()?;
        for f in &mut chain.0 {
            if let Filter::Compound { marker } = f {
                marker.clone_from(&self.model.compound_marker);
            }
        }
        Ok(chain)
    }

    /// Model options with the given vocabulary sizes.
    pub fn model_options(&self, n_words_src: usize, n_words_trg: usize) -> ModelOptions {
        let m = &self.model;
        ModelOptions {
            n_words_src,
            n_words_trg,
            embedding_dim: m.embedding_dim,
            rnn_dim: m.rnn_dim,
            layer_norm: m.layer_norm,
            init_cgru: m.init_cgru,
            n_enc_layers: m.n_enc_layers,
            tied_emb: m.tied_emb,
            emb_dropout: m.emb_dropout,
            ctx_dropout: m.ctx_dropout,
            out_dropout: m.out_dropout,
            init: InitSpec {
                weight: m.weight_init,
                recurrent: m.recurrent_init,
            },
        }
    }

    /// True when `device_id` asks for anything other than automatic or CPU
    /// placement, which this implementation ignores.
    pub fn device_ignored(&self) -> bool {
        !matches!(self.training.device_id.as_str(), "auto" | "cpu" | "")
    }

    /// First 8 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<model_type>-e<emb>-r<rnn>-<optimizer>_<lrate>-<hash>`.
    pub fn checkpoint_name(&self) -> String {
        format!(
            "{}-e{}-r{}-{}_{}-{}",
            self.training.model_type,
            self.model.embedding_dim,
            self.model.rnn_dim,
            self.model.optimizer,
            self.lrate(),
            self.hash()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[training]\nmodel_type: attention\n[model]\nrnn_dim: 8 # dims\n[model.data]\ntrain_src: a.txt\n";

    #[test]
    fn minimal_file_with_defaults() {
        let c = ExperimentConfig::parse(MINIMAL, "t.conf", &[]).unwrap();
        assert_eq!(c.model.rnn_dim, 8);
        assert_eq!(c.model.batch_size, 32);
        assert_eq!(c.lrate(), 0.0004);
        assert_eq!(c.data.train_src, Some(PathBuf::from("a.txt")));
    }

    #[test]
    fn unknown_key_cites_line() {
        let text = "[training]\npatience: 3\nbogus: 1\n[model]\n[model.data]\n";
        let err = ExperimentConfig::parse(text, "t.conf", &[]).unwrap_err().to_string();
        assert!(err.contains("t.conf:3") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn type_mismatch_cites_key() {
        let text = "[training]\npatience: many\n[model]\n[model.data]\n";
        let err = ExperimentConfig::parse(text, "t.conf", &[]).unwrap_err().to_string();
        assert!(err.contains("t.conf:2") && err.contains("patience"), "{err}");
    }

    #[test]
    fn missing_section() {
        let err = ExperimentConfig::parse("[training]\n[model]\n", "t.conf", &[]).unwrap_err();
        assert!(err.to_string().contains("model.data"));
    }

    #[test]
    fn overrides_win() {
        let c = ExperimentConfig::parse(MINIMAL, "t", &["rnn_dim:500".into(), "embedding_dim:300".into()]).unwrap();
        assert_eq!((c.model.rnn_dim, c.model.embedding_dim), (500, 300));
        let err = ExperimentConfig::parse(MINIMAL, "t", &["model_type:my_amazing_nmt".into()]).unwrap_err();
        assert!(err.to_string().contains("my_amazing_nmt"));
        assert!(ExperimentConfig::parse(MINIMAL, "t", &["nope:1".into()]).is_err());
    }

    #[test]
    fn compound_marker_reaches_the_filter() {
        let o = |m: &str| vec!["filter:bpe,compound".to_owned(), format!("compound_marker:{m}")];
        let c = ExperimentConfig::parse(MINIMAL, "t", &o("##")).unwrap();
        assert_eq!(c.filters().unwrap().apply("Haus## tür@@ en"), "Haustüren");
        let d = ExperimentConfig::parse(MINIMAL, "t", &["filter:compound".into()]).unwrap();
        assert_eq!(d.filters().unwrap().apply("Haus@@ tür"), "Haustür");
        assert!(ExperimentConfig::parse(MINIMAL, "t", &o("")).is_err());
    }

    #[test]
    fn names_differ_only_in_hash() {
        let a = ExperimentConfig::parse(MINIMAL, "t", &["seed:1".into()]).unwrap();
        let b = ExperimentConfig::parse(MINIMAL, "t", &["seed:2".into()]).unwrap();
        let (na, nb) = (a.checkpoint_name(), b.checkpoint_name());
        assert_ne!(na, nb);
        assert_eq!(na.rsplit_once('-').unwrap().0, nb.rsplit_once('-').unwrap().0);
        assert!(!na.contains(' ') && !na.contains('/'));
        assert_eq!(na.rsplit_once('-').unwrap().0, "attention-e100-r8-adam_0.0004");
    }

    #[test]
    fn meteor_loads_but_cannot_run() {
        let c = ExperimentConfig::parse(MINIMAL, "t", &["valid_metric:meteor".into()]).unwrap();
        assert!(c.training.valid_metric.metric().is_err());
        assert!(ExperimentConfig::parse(MINIMAL, "t", &["valid_metric:cider".into()]).is_err());
    }

    #[test]
    fn tilde_expands() {
        if let Some(h) = std::env::var_os("HOME") { assert_eq!(expand_path("~/x"), PathBuf::from(h).join("x")) }
        assert_eq!(expand_path("/abs"), PathBuf::from("/abs"));
    }
}

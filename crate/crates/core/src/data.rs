//! Vocabularies, corpus reading and mini-batch iteration.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const EOS_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const DEFAULT_MAX_SEQ_LEN: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// corpus frequency per id; 0 for specials
    freqs: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: BTreeMap<String, usize>,
    specials: Specials,
    #[serde(default)]
    freqs: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Specials {
    eos: usize,
    unk: usize,
}

impl Vocabulary {
    /// Specials at ids 0 and 1, then `counts` by descending frequency and
    /// ascending token. `limit > 0` keeps that many non-special tokens.
    pub fn from_counts(counts: HashMap<String, u64>, limit: usize) -> Self {
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| t != EOS && t != UNK)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if limit > 0 {
            entries.truncate(limit);
        }
        let mut tokens = vec![EOS.to_owned(), UNK.to_owned()];
        let mut freqs = vec![0, 0];
        for (t, f) in entries {
            tokens.push(t);
            freqs.push(f);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            freqs,
        }
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(EOS) || tokens.get(1).map(String::as_str) != Some(UNK) {
            return Err(Error::Data("vocabulary lacks <eos>/<unk> at ids 0/1".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let freqs = vec![0; tokens.len()];
        Ok(Self {
            tokens,
            index,
            freqs,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freqs.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Same vocabulary with ids at or above `n` folded into `<unk>`.
    pub fn truncated(&self, n: usize) -> Self {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let n = n.max(2);
        let tokens = self.tokens[..n].to_vec();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            freqs: self.freqs[..n].to_vec(),
        }
    }

    /// Ids of `sentence`'s whitespace tokens followed by `<eos>`.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence
            .split_whitespace()
            .map(|t| self.id(t))
            .chain(std::iter::once(EOS_ID))
            .collect()
    }

    /// Tokens up to the first `<eos>`, space-joined.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self
                .tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect(),
            specials: Specials {
                eos: EOS_ID,
                unk: UNK_ID,
            },
            freqs: self.freqs.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.specials.eos != EOS_ID || file.specials.unk != UNK_ID {
            return Err(Error::Data(format!(
                "vocabulary specials must be eos={EOS_ID} unk={UNK_ID}"
            )));
        }
        let n = file.tokens.len();
        let mut tokens = vec![None; n];
        for (t, i) in file.tokens {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(Error::Data(format!("vocabulary ids are not dense in [0, {n})"))),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense")).collect();
        if tokens.first().map(String::as_str) != Some(EOS) || tokens.get(1).map(String::as_str) != Some(UNK) {
            return Err(Error::Data("vocabulary lacks <eos>/<unk> at ids 0/1".into()));
        }
        let mut freqs = file.freqs;
        freqs.resize(n, 0);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            tokens,
            index,
            freqs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Counts whitespace tokens over the given corpora. With `combined` one
/// vocabulary covers all files, otherwise one is built per file.
pub fn build_vocab(paths: &[PathBuf], n_words: usize, combined: bool) -> Result<Vec<Vocabulary>> {
    if paths.is_empty() {
        return Err(Error::Data("no corpus given".into()));
    }
    let count = |path: &Path, counts: &mut HashMap<String, u64>| -> Result<()> {
        for line in read_corpus(path)? {
            for t in line?.split_whitespace() {
                *counts.entry(t.to_owned()).or_insert(0) += 1;
            }
        }
        Ok(())
    };
    let finish = |counts: HashMap<String, u64>, what: &str| {
        if counts.is_empty() {
            Err(Error::Data(format!("empty corpus {what}")))
        } else {
            Ok(Vocabulary::from_counts(counts, n_words))
        }
    };
    if combined {
        let mut counts = HashMap::new();
        for p in paths {
            count(p, &mut counts)?;
        }
        Ok(vec![finish(counts, "(combined)")?])
    } else {
        paths
            .iter()
            .map(|p| {
                let mut counts = HashMap::new();
                count(p, &mut counts)?;
                finish(counts, &p.display().to_string())
            })
            .collect()
    }
}

/// Line reader; `.gz` files are decompressed transparently.
pub struct CorpusLines {
    reader: Box<dyn BufRead + Send>,
    path: String,
    line: usize,
    buf: Vec<u8>,
}

impl Iterator for CorpusLines {
    type Item = Result<String>;

    fn next(&mut self) -> Option<Result<String>> {
        self.buf.clear();
        self.line += 1;
        match self.reader.read_until(b'\n', &mut self.buf) {
            Ok(0) => None,
            Ok(_) => {
                if self.buf.last() == Some(&b'\n') {
                    self.buf.pop();
                    if self.buf.last() == Some(&b'\r') {
                        self.buf.pop();
                    }
                }
                Some(
                    String::from_utf8(std::mem::take(&mut self.buf)).map_err(|e| Error::Parse {
                        path: self.path.clone(),
                        line: self.line,
                        msg: format!("invalid UTF-8: {}", e.utf8_error()),
                    }),
                )
            }
            Err(e) => Some(Err(Error::Parse {
                path: self.path.clone(),
                line: self.line,
                msg: format!("read failed: {e}"),
            })),
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<CorpusLines> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let inner: Box<dyn Read + Send> = match ext {
        "gz" => Box::new(MultiGzDecoder::new(file)),
        "bz2" | "xz" => return Err(Error::Unsupported(format!(".{ext} compression"))),
        _ => Box::new(file),
    };
    Ok(CorpusLines {
        reader: Box::new(BufReader::new(inner)),
        path: path.display().to_string(),
        line: 0,
        buf: Vec::new(),
    })
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    read_corpus(path)?.collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleMode {
    None,
    #[default]
    Simple,
    Trglen,
}

impl FromStr for ShuffleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "None" | "none" | "False" | "false" => Ok(Self::None),
            "simple" => Ok(Self::Simple),
            "trglen" => Ok(Self::Trglen),
            other => Err(Error::Config(format!("unknown shuffle_mode {other:?}"))),
        }
    }
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "None",
            Self::Simple => "simple",
            Self::Trglen => "trglen",
        })
    }
}

/// Numericalized parallel corpus; every sequence ends in `<eos>`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<usize>>,
    pub trg: Vec<Vec<usize>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.trg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trg.is_empty()
    }

    pub fn from_lines<S: AsRef<str>>(
        src: &[S],
        trg: &[S],
        src_vocab: &Vocabulary,
        trg_vocab: &Vocabulary,
    ) -> Result<Self> {
        if src.len() != trg.len() {
            return Err(Error::Data(format!(
                "line count mismatch: {} source vs {} target lines",
                src.len(),
                trg.len()
            )));
        }
        Ok(Self {
            src: src.iter().map(|l| src_vocab.encode(l.as_ref())).collect(),
            trg: trg.iter().map(|l| trg_vocab.encode(l.as_ref())).collect(),
        })
    }

    pub fn load(src: &Path, trg: &Path, src_vocab: &Vocabulary, trg_vocab: &Vocabulary) -> Result<Self> {
        Self::from_lines(&read_lines(src)?, &read_lines(trg)?, src_vocab, trg_vocab)
    }

    /// Target side only, for language models.
    pub fn monolingual<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary) -> Self {
        let trg: Vec<_> = lines.iter().map(|l| vocab.encode(l.as_ref())).collect();
        Self {
            src: trg.clone(),
            trg,
        }
    }

    /// Indices of samples whose source and target (excluding `<eos>`) fit
    /// in `max_len` tokens.
    pub fn indices_within(&self, max_len: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.src[i].len() - 1 <= max_len && self.trg[i].len() - 1 <= max_len)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Scalar> {
    pub src_ids: Vec<Vec<usize>>,
    /// `[batch, src_len]`
    pub src_mask: Tensor<T>,
    pub trg_ids: Vec<Vec<usize>>,
    /// `[batch, trg_len]`
    pub trg_mask: Tensor<T>,
    pub sample_indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn src_len(&self) -> usize {
        self.src_mask.shape()[1]
    }

    pub fn trg_len(&self) -> usize {
        self.trg_mask.shape()[1]
    }

    /// Column `t` of the target ids, `[batch]`.
    pub fn trg_column(&self, t: usize) -> Vec<usize> {
        self.trg_ids.iter().map(|row| row[t]).collect()
    }

    pub fn src_column(&self, t: usize) -> Vec<usize> {
        self.src_ids.iter().map(|row| row[t]).collect()
    }

    pub fn unpadded_trg_lens(&self) -> Vec<usize> {
        let len = self.trg_len();
        let m = self.trg_mask.data();
        (0..self.size())
            .map(|b| (0..len).filter(|&t| m[b * len + t] != T::zero()).count())
            .collect()
    }
}

fn pad_seqs<T: Scalar>(seqs: &[&Vec<usize>]) -> Result<(Vec<Vec<usize>>, Tensor<T>)> {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::Data("batch of empty sequences".into()));
    }
    let mut ids = Vec::with_capacity(seqs.len());
    let mut mask = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        let mut row = s.to_vec();
        row.resize(len, EOS_ID);
        ids.push(row);
        mask.extend((0..len).map(|t| if t < s.len() { T::one() } else { T::zero() }));
    }
    Ok((ids, Tensor::new(vec![seqs.len(), len], mask)?))
}

/// Pads the given samples into one batch. Padding id is `<eos>`.
pub fn make_batch<T: Scalar>(corpus: &ParallelCorpus, indices: &[usize]) -> Result<Batch<T>> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let src: Vec<&Vec<usize>> = indices.iter().map(|&i| &corpus.src[i]).collect();
    let trg: Vec<&Vec<usize>> = indices.iter().map(|&i| &corpus.trg[i]).collect();
    let (src_ids, src_mask) = pad_seqs(&src)?;
    let (trg_ids, trg_mask) = pad_seqs(&trg)?;
    Ok(Batch {
        src_ids,
        src_mask,
        trg_ids,
        trg_mask,
        sample_indices: indices.to_vec(),
    })
}

/// Splits `pool` into the batch order of one epoch.
pub fn epoch_order(
    corpus: &ParallelCorpus,
    pool: &[usize],
    batch_size: usize,
    mode: ShuffleMode,
    rng: &mut RngState,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    Ok(match mode {
        ShuffleMode::None => pool.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        ShuffleMode::Simple => {
            let mut order = pool.to_vec();
            rng.shuffle(&mut order);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        ShuffleMode::Trglen => {
            let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in pool {
                buckets.entry(corpus.trg[i].len()).or_default().push(i);
            }
            let mut buckets: Vec<Vec<usize>> = buckets.into_values().collect();
            rng.shuffle(&mut buckets);
            let mut batches = Vec::new();
            for mut b in buckets {
                rng.shuffle(&mut b);
                batches.extend(b.chunks(batch_size).map(<[usize]>::to_vec));
            }
            batches
        }
    })
}

/// Batches of one epoch over `pool`.
pub fn iterate_batches<'a, T: Scalar>(
    corpus: &'a ParallelCorpus,
    pool: &[usize],
    batch_size: usize,
    mode: ShuffleMode,
    rng: &mut RngState,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'a> {
    let order = epoch_order(corpus, pool, batch_size, mode, rng)?;
    Ok(order.into_iter().map(move |idx| make_batch(corpus, &idx)))
}

/// Corpus-order batches over every sample, as used for evaluation.
pub fn sequential_batches<T: Scalar>(corpus: &ParallelCorpus, batch_size: usize) -> Result<Vec<Batch<T>>> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    all.chunks(batch_size.max(1))
        .map(|c| make_batch(corpus, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab_aba() -> Vocabulary {
        let mut c = HashMap::new();
        c.insert("a".into(), 2);
        c.insert("b".into(), 1);
        Vocabulary::from_counts(c, 0)
    }

    #[test]
    fn frequency_order() {
        let v = vocab_aba();
        assert_eq!(v.tokens(), ["<eos>", "<unk>", "a", "b"]);
        assert_eq!(v.encode("a b"), [2, 3, 0]);
        assert_eq!(v.encode(""), [0]);
        assert_eq!(v.encode("zzz"), [1, 0]);
        assert_eq!(v.decode(&[2, 3, 0, 2]), "a b");
    }

    #[test]
    fn ties_are_lexicographic_and_limit_applies() {
        let c: HashMap<String, u64> = [("c", 3), ("b", 3), ("a", 1)]
            .iter()
            .map(|(t, f)| (t.to_string(), *f))
            .collect();
        let v = Vocabulary::from_counts(c.clone(), 0);
        assert_eq!(&v.tokens()[2..], ["b", "c", "a"]);
        let v = Vocabulary::from_counts(c, 2);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), UNK_ID);
    }

    #[test]
    fn json_roundtrip() {
        let v = vocab_aba();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_json(r#"{"tokens":{"<eos>":0,"x":2},"specials":{"eos":0,"unk":1}}"#).is_err());
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("c.txt");
        std::fs::write(&plain, "one\ntwo\nthree\n").unwrap();
        let gz = dir.path().join("c.txt.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(b"one\ntwo\nthree\n").unwrap();
        let bytes = enc.finish().unwrap();
        std::fs::write(&gz, &bytes).unwrap();
        assert_eq!(read_lines(&plain).unwrap(), ["one", "two", "three"]);
        assert_eq!(read_lines(&gz).unwrap(), ["one", "two", "three"]);

        let cut = dir.path().join("cut.gz");
        std::fs::write(&cut, &bytes[..bytes.len() - 6]).unwrap();
        assert!(read_lines(&cut).is_err());
    }

    #[test]
    fn bad_utf8_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, b"ok\n\xff\xfe\n").unwrap();
        let err = read_lines(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert!(read_lines(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn mismatch_cites_counts() {
        let v = vocab_aba();
        let err = ParallelCorpus::from_lines(&["a", "b", "a"], &["a", "b"], &v, &v).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn batch_masks() {
        let v = vocab_aba();
        let c = ParallelCorpus::from_lines(&["a", "a b a"], &["b b", ""], &v, &v).unwrap();
        let b: Batch<f64> = make_batch(&c, &[0, 1]).unwrap();
        assert_eq!(b.src_ids, [vec![2, 0, 0, 0], vec![2, 3, 2, 0]]);
        assert_eq!(b.src_mask.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(b.unpadded_trg_lens(), [3, 1]);
    }

    #[test]
    fn trglen_batches_are_uniform() {
        let v = vocab_aba();
        let trg: Vec<String> = (0..40).map(|i| vec!["a"; i % 5].join(" ")).collect();
        let c = ParallelCorpus::from_lines(&trg, &trg, &v, &v).unwrap();
        let pool: Vec<usize> = (0..40).collect();
        let mut rng = RngState::from_seed(1);
        let mut seen = Vec::new();
        for b in iterate_batches::<f64>(&c, &pool, 3, ShuffleMode::Trglen, &mut rng).unwrap() {
            let b = b.unwrap();
            let lens = b.unpadded_trg_lens();
            assert!(lens.iter().all(|&l| l == lens[0]));
            seen.extend(b.sample_indices);
        }
        seen.sort_unstable();
        assert_eq!(seen, pool);
    }
}

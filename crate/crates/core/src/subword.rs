//! Byte-pair encoding and the hypothesis post-processing filters.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@ ";
pub const END_OF_WORD: &str = "</w>";
pub const DEFAULT_COMPOUND_MARKER: &str = "@@";
const VERSION_HEADER: &str = "#version: 0.2";

/// Ordered merge list; index is priority.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate merge {} {}", m.0, m.1)));
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn to_codes(&self) -> String {
        let mut out = String::from(VERSION_HEADER);
        out.push('\n');
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    pub fn parse_codes(text: &str, origin: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("#version") {
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()))
                }
                _ => {
                    return Err(Error::Parse {
                        path: origin.to_owned(),
                        line: i + 1,
                        msg: format!("expected two symbols, got {line:?}"),
                    })
                }
            }
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_codes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_codes(&text, &path.display().to_string())
    }

    /// Segments one whitespace-free word; the last element carries no marker.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        if symbols.is_empty() {
            return Vec::new();
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            symbols = merge_pair(&symbols, a, b);
        }
        let last = symbols.last_mut().expect("non-empty");
        let trimmed = last.strip_suffix(END_OF_WORD).unwrap_or(last).to_owned();
        if trimmed.is_empty() {
            symbols.pop();
        } else {
            *last = trimmed;
        }
        symbols
    }

    /// Segments every word of `line`, keeping the original whitespace.
    pub fn apply(&self, line: &str) -> String {
        let mut out = String::with_capacity(line.len() * 2);
        let mut word_start = None;
        for (i, c) in line.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = word_start.take() {
                    self.push_segmented(&line[s..i], &mut out);
                }
                out.push(c);
            } else if word_start.is_none() {
                word_start = Some(i);
            }
        }
        if let Some(s) = word_start {
            self.push_segmented(&line[s..], &mut out);
        }
        out
    }

    fn push_segmented(&self, word: &str, out: &mut String) {
        let pieces = self.segment_word(word);
        let n = pieces.len();
        for (i, p) in pieces.into_iter().enumerate() {
            out.push_str(&p);
            if i + 1 < n {
                out.push_str(CONTINUATION);
            }
        }
    }
}

/// Characters of `word`, the final one tagged as word-final.
fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Greedy merge learning over whitespace-tokenized lines.
///
/// Each step merges the most frequent adjacent pair; among equally
/// frequent pairs the lexicographically smallest wins. Learning stops early
/// once no adjacent pair remains.
pub fn bpe_learn<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<BpeModel> {
    let mut word_freq: HashMap<&str, u64> = HashMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Data("cannot learn BPE from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (word_symbols(w), f))
        .collect();
    words.sort();

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += f;
            }
        }
        let Some((&(a, b), _)) = counts
            .iter()
            .max_by(|(p, c), (q, d)| c.cmp(d).then_with(|| q.cmp(p)))
        else {
            break;
        };
        let (a, b) = (a.to_owned(), b.to_owned());
        for (syms, _) in &mut words {
            if syms.len() > 1 {
                *syms = merge_pair(syms, &a, &b);
            }
        }
        merges.push((a, b));
    }
    BpeModel::from_merges(merges)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Filter {
    Bpe,
    Compound { marker: String },
}

impl FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bpe" => Ok(Self::Bpe),
            "compound" => Ok(Self::Compound {
                marker: DEFAULT_COMPOUND_MARKER.to_owned(),
            }),
            other => Err(Error::Config(format!("unknown filter {other:?}"))),
        }
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bpe => f.write_str("bpe"),
            Self::Compound { .. } => f.write_str("compound"),
        }
    }
}

impl Filter {
    pub fn apply(&self, line: &str) -> String {
        match self {
            Self::Bpe => {
                let mut s = line.replace(CONTINUATION, "");
                if let Some(stripped) = s.strip_suffix("@@") {
                    s = stripped.to_owned();
                }
                s
            }
            Self::Compound { marker } => {
                let mut out: Vec<String> = Vec::new();
                let mut carry = String::new();
                for tok in line.split_whitespace() {
                    match tok.strip_suffix(marker.as_str()) {
                        Some(head) if !head.is_empty() => carry.push_str(head),
                        _ => {
                            carry.push_str(tok);
                            out.push(std::mem::take(&mut carry));
                        }
                    }
                }
                if !carry.is_empty() {
                    out.push(carry);
                }
                out.join(" ")
            }
        }
    }
}

/// Filters applied left to right.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterChain(pub Vec<Filter>);

impl FromStr for FilterChain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "None" {
            return Ok(Self::default());
        }
        s.split(',').map(str::parse).collect::<Result<_>>().map(Self)
    }
}

impl fmt::Display for FilterChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&names.join(","))
    }
}

impl FilterChain {
    pub fn apply(&self, line: &str) -> String {
        self.0
            .iter()
            .fold(line.to_owned(), |acc, filter| filter.apply(&acc))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn filter_apply(kinds: &str, line: &str) -> Result<String> {
    Ok(kinds.parse::<FilterChain>()?.apply(line))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_low() -> Vec<String> {
        let mut c = vec!["low".to_owned(); 5];
        c.extend(vec!["lowest".to_owned(); 2]);
        c
    }

    #[test]
    fn zero_merges() {
        let m = bpe_learn(&corpus_low(), 0).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.apply("ab"), "a@@ b");
    }

    #[test]
    fn first_merge_is_l_o() {
        let m = bpe_learn(&corpus_low(), 1).unwrap();
        assert_eq!(m.merges()[0], ("l".into(), "o".into()));
    }

    #[test]
    fn fully_merged_word_unchanged() {
        let m = bpe_learn(&corpus_low(), 10).unwrap();
        assert_eq!(m.apply("low"), "low");
        assert_eq!(m.apply("lowest low"), "lowest low");
    }

    #[test]
    fn ties_break_lexicographically() {
        let m = bpe_learn(&["ab cd"], 1).unwrap();
        assert_eq!(m.merges()[0], ("a".into(), "b</w>".into()));
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(bpe_learn::<&str>(&[], 3).is_err());
        assert!(bpe_learn(&["   "], 3).is_err());
    }

    #[test]
    fn whitespace_preserved() {
        let m = BpeModel::default();
        assert_eq!(m.apply(" ab  c\t"), " a@@ b  c\t");
    }

    #[test]
    fn codes_roundtrip() {
        let m = bpe_learn(&corpus_low(), 4).unwrap();
        let text = m.to_codes();
        assert!(text.starts_with("#version"));
        assert_eq!(BpeModel::parse_codes(&text, "codes").unwrap(), m);
        let err = BpeModel::parse_codes("#version: 0.2\na b c\n", "codes").unwrap_err();
        assert!(err.to_string().contains("codes:2"));
    }

    #[test]
    fn filters() {
        assert_eq!(filter_apply("bpe", "un@@ believ@@ able").unwrap(), "unbelievable");
        assert_eq!(filter_apply("bpe", "plain text").unwrap(), "plain text");
        assert_eq!(filter_apply("bpe", "dangling@@").unwrap(), "dangling");
        assert_eq!(filter_apply("compound", "Haus@@ tür offen").unwrap(), "Haustür offen");
        assert_eq!(
            filter_apply("bpe,compound", "Ha@@ us@@ @@ tür").unwrap(),
            "Haustür"
        );
        assert!(filter_apply("meteor", "x").is_err());
    }

    #[test]
    fn chain_order_matters() {
        // compound first sees "Ha@@" and "us@@" as compound heads
        let a = filter_apply("compound,bpe", "Ha@@ us tür").unwrap();
        let b = filter_apply("bpe,compound", "Ha@@ us tür").unwrap();
        assert_eq!(a, "Haus tür");
        assert_eq!(b, "Haus tür");
        let c = filter_apply("compound,bpe", "x@@ @@ y").unwrap();
        assert_eq!(c, "xy");
    }
}

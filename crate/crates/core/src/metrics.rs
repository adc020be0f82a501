//! Corpus BLEU, perplexity and the early-stopping comparison.

use std::collections::HashMap;
use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Bleu,
    BleuV13a,
    Perplexity,
}

impl MetricName {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Self::Perplexity)
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(Self::Bleu),
            "bleu_v13a" => Ok(Self::BleuV13a),
            "px" | "perplexity" => Ok(Self::Perplexity),
            "meteor" => Err(Error::Unsupported("meteor".into())),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bleu => "BLEU",
            Self::BleuV13a => "BLEU_V13A",
            Self::Perplexity => "PX",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: MetricName,
    pub value: f64,
}

impl MetricValue {
    pub fn new(name: MetricName, value: f64) -> Self {
        Self { name, value }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {:.2}", self.name, self.value)
    }
}

/// Strict improvement of `a` over `b` in the metric's own direction.
pub fn metric_better(a: &MetricValue, b: &MetricValue) -> Result<bool> {
    if a.name != b.name {
        return Err(Error::Config(format!(
            "cannot compare {} with {}",
            a.name, b.name
        )));
    }
    Ok(if a.name.higher_is_better() {
        a.value > b.value
    } else {
        a.value < b.value
    })
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<MetricValue> {
    if tokens == 0 {
        return Err(Error::Data("perplexity over zero tokens".into()));
    }
    Ok(MetricValue::new(
        MetricName::Perplexity,
        (total_nll / tokens as f64).exp(),
    ))
}

/// Sufficient statistics of corpus BLEU. Sums of per-sentence stats give
/// the corpus stats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn from_tokens(hyp: &[&str], reference: &[&str]) -> Self {
        let mut s = Self {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// BLEU in [0, 100], unsmoothed.
    pub fn bleu(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (1..=MAX_ORDER).map(|n| self.precision(n).ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_p.exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BleuVariant {
    /// Whitespace tokens taken as-is.
    MultiBleu,
    /// mteval-v13a tokenization first.
    V13a,
}

fn is_v13a_punct(c: char) -> bool {
    // [\{-\~\[-\` -\&\(-\+\:-\@\/]
    matches!(c, '{'..='~' | '['..='`' | ' '..='&' | '('..='+' | ':'..='@' | '/')
}

/// The mteval-v13a tokenizer on ASCII punctuation.
///
/// | rule | effect |
/// |------|--------|
/// | `<skipped>` | removed |
/// | `&quot; &amp; &lt; &gt;` | unescaped |
/// | ``{ \| } ~ [ \ ] ^ _ ` `` and ``space ! " # $ % & ( ) * + : ; < = > ? @ /`` | padded with spaces |
/// | `.` `,` | split off unless preceded *and* followed by a digit |
/// | `-` after a digit | split off |
///
/// Whitespace is then collapsed.
pub fn tokenize_v13a(line: &str) -> Vec<String> {
    let text = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">");
    let text = format!(" {text} ");

    let mut padded = String::with_capacity(text.len() * 2);
    for c in text.chars() {
        if is_v13a_punct(c) {
            padded.push(' ');
            padded.push(c);
            padded.push(' ');
        } else {
            padded.push(c);
        }
    }

    // s/([^0-9])([\.,])/$1 $2 /g
    let chars: Vec<char> = padded.chars().collect();
    let mut out = String::with_capacity(chars.len() * 2);
    let mut i = 0;
    while i < chars.len() {
        if i + 1 < chars.len() && !chars[i].is_ascii_digit() && matches!(chars[i + 1], '.' | ',') {
            out.push(chars[i]);
            out.push(' ');
            out.push(chars[i + 1]);
            out.push(' ');
            i += 2;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }

    // s/([\.,])([^0-9])/ $1 $2/g
    let chars: Vec<char> = out.chars().collect();
    let mut out = String::with_capacity(chars.len() * 2);
    let mut i = 0;
    while i < chars.len() {
        if i + 1 < chars.len() && matches!(chars[i], '.' | ',') && !chars[i + 1].is_ascii_digit() {
            out.push(' ');
            out.push(chars[i]);
            out.push(' ');
            out.push(chars[i + 1]);
            i += 2;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }

    // s/([0-9])(-)/$1 $2 /g
    let chars: Vec<char> = out.chars().collect();
    let mut out = String::with_capacity(chars.len() * 2);
    let mut i = 0;
    while i < chars.len() {
        if i + 1 < chars.len() && chars[i].is_ascii_digit() && chars[i + 1] == '-' {
            out.push(chars[i]);
            out.push(' ');
            out.push('-');
            out.push(' ');
            i += 2;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }

    out.split_whitespace().map(str::to_owned).collect()
}

fn tokens_of(line: &str, variant: BleuVariant, lowercase: bool) -> Vec<String> {
    let line = if lowercase {
        line.to_lowercase()
    } else {
        line.to_owned()
    };
    match variant {
        BleuVariant::MultiBleu => line.split_whitespace().map(str::to_owned).collect(),
        BleuVariant::V13a => tokenize_v13a(&line),
    }
}

/// Per-sentence statistics for a single-reference corpus.
pub fn bleu_stats<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    variant: BleuVariant,
    lowercase: bool,
) -> Result<Vec<BleuStats>> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let h = tokens_of(h.as_ref(), variant, lowercase);
            let r = tokens_of(r.as_ref(), variant, lowercase);
            let h: Vec<&str> = h.iter().map(String::as_str).collect();
            let r: Vec<&str> = r.iter().map(String::as_str).collect();
            BleuStats::from_tokens(&h, &r)
        })
        .collect())
}

pub fn corpus_stats<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    variant: BleuVariant,
    lowercase: bool,
) -> Result<BleuStats> {
    let mut total = BleuStats::default();
    for s in bleu_stats(hyps, refs, variant, lowercase)? {
        total += s;
    }
    Ok(total)
}

pub fn bleu_corpus<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    variant: BleuVariant,
    lowercase: bool,
) -> Result<MetricValue> {
    let name = match variant {
        BleuVariant::MultiBleu => MetricName::Bleu,
        BleuVariant::V13a => MetricName::BleuV13a,
    };
    Ok(MetricValue::new(
        name,
        corpus_stats(hyps, refs, variant, lowercase)?.bleu(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_hundred() {
        let lines = ["the cat sat on the mat", "a b c d e"];
        let b = bleu_corpus(&lines, &lines, BleuVariant::MultiBleu, false).unwrap();
        assert!((b.value - 100.0).abs() < 1e-9);
    }

    #[test]
    fn clipped_unigrams() {
        let h = ["the the the the the the the"];
        let r = ["the cat is on the mat"];
        let s = corpus_stats(&h, &r, BleuVariant::MultiBleu, false).unwrap();
        assert_eq!((s.matches[0], s.totals[0]), (2, 7));
        assert_eq!(s.matches[1], 0);
        assert_eq!(s.bleu(), 0.0);
    }

    #[test]
    fn brevity_penalty_closed_form() {
        let h = ["a b c d e"];
        let r = ["a b c d e f g h i j"];
        let b = bleu_corpus(&h, &r, BleuVariant::MultiBleu, false).unwrap();
        assert!((b.value - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
        assert!((b.value - 36.79).abs() < 0.01);
    }

    #[test]
    fn line_count_mismatch() {
        assert!(bleu_corpus(&["a"], &["a", "b"][..1].repeat(2), BleuVariant::MultiBleu, false).is_err());
    }

    #[test]
    fn lowercase_flag() {
        let b = bleu_corpus(&["The Cat sat on it"], &["the cat sat on it"], BleuVariant::MultiBleu, true).unwrap();
        assert!((b.value - 100.0).abs() < 1e-9);
        let b = bleu_corpus(&["The Cat sat on it"], &["the cat sat on it"], BleuVariant::MultiBleu, false).unwrap();
        assert!(b.value < 100.0);
    }

    #[test]
    fn v13a_tokenizer() {
        assert_eq!(tokenize_v13a("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert_eq!(tokenize_v13a("3.5"), ["3.5"]);
        assert_eq!(tokenize_v13a("end."), ["end", "."]);
        assert_eq!(tokenize_v13a("1,000 people"), ["1,000", "people"]);
        assert_eq!(tokenize_v13a("a &amp; b"), ["a", "&", "b"]);
        assert_eq!(tokenize_v13a("10-20"), ["10", "-", "20"]);
        assert_eq!(tokenize_v13a("don't"), ["don't"]);
        assert_eq!(tokenize_v13a("  spaced   out "), ["spaced", "out"]);
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(0.0, 5).unwrap().value, 1.0);
        assert!((perplexity(2.0 * 2f64.ln(), 2).unwrap().value - 2.0).abs() < 1e-12);
        let v = 50usize;
        assert!((perplexity(10.0 * (v as f64).ln(), 10).unwrap().value - 50.0).abs() < 1e-9);
        assert!(perplexity(1.0, 0).is_err());
    }

    #[test]
    fn strict_comparison() {
        let b = |v| MetricValue::new(MetricName::Bleu, v);
        let p = |v| MetricValue::new(MetricName::Perplexity, v);
        assert!(metric_better(&b(30.0), &b(29.9)).unwrap());
        assert!(!metric_better(&p(50.0), &p(49.0)).unwrap());
        assert!(metric_better(&p(49.0), &p(50.0)).unwrap());
        assert!(!metric_better(&b(30.0), &b(30.0)).unwrap());
        assert!(metric_better(&b(30.0), &p(30.0)).is_err());
    }

    #[test]
    fn metric_names() {
        assert_eq!("px".parse::<MetricName>().unwrap(), MetricName::Perplexity);
        let err = "meteor".parse::<MetricName>().unwrap_err();
        assert!(err.to_string().contains("unsupported"));
    }
}

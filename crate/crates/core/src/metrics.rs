//! Corpus-level BLEU-4 with multi-reference clipping and brevity penalty.
//!
//! Counts follow the usual corpus convention: clipped matches and n-gram
//! totals are summed over every pair before the precisions are formed, and
//! each pair contributes the reference length closest to its hypothesis
//! length (shorter one on ties).

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use crate::corpus::TokenId;

pub const MAX_ORDER: usize = 4;
/// Numerator used in place of a zero match count under add-epsilon smoothing.
pub const SMOOTH_EPSILON: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Smoothing {
    #[default]
    None,
    AddEpsilon,
}

/// A hypothesis with its reference set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair<T> {
    hypothesis: Vec<T>,
    references: Vec<Vec<T>>,
}

impl<T> EvalPair<T> {
    pub fn new(hypothesis: Vec<T>, references: Vec<Vec<T>>) -> Result<Self, MetricsError> {
        if references.is_empty() {
            return Err(MetricsError::Data("pair without references".into()));
        }
        // an empty hypothesis is legal and only lowers the brevity penalty
        if references.iter().any(Vec::is_empty) {
            return Err(MetricsError::Data("empty reference in pair".into()));
        }
        Ok(Self {
            hypothesis,
            references,
        })
    }

    pub fn hypothesis(&self) -> &[T] {
        &self.hypothesis
    }

    pub fn references(&self) -> &[Vec<T>] {
        &self.references
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuScore {
    /// Percentage in `[0, 100]`.
    pub score: f64,
    /// Clipped n-gram precisions for n = 1..=4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// `(matched, total)` for order `n`: each hypothesis n-gram counts at most as
/// often as it occurs in the single most generous reference.
pub fn clipped_ngram_counts<T: Eq + Hash>(hyp: &[T], refs: &[Vec<T>], n: usize) -> (usize, usize) {
    if hyp.is_empty() || n == 0 {
        return (0, 0);
    }
    let hyp_counts = ngram_counts(hyp, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (gram, c) in ngram_counts(r, n) {
            let e = max_ref.entry(gram).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Reference length closest to `hyp_len`, the shorter one on ties.
pub fn effective_ref_len<T>(hyp_len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(hyp_len), len))
        .unwrap_or(0)
}

pub fn corpus_bleu<T: Eq + Hash>(
    pairs: &[EvalPair<T>],
    smoothing: Smoothing,
) -> Result<BleuScore, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Data("corpus_bleu needs at least one pair".into()));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for pair in pairs {
        hyp_len += pair.hypothesis.len();
        ref_len += effective_ref_len(pair.hypothesis.len(), &pair.references);
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped_ngram_counts(&pair.hypothesis, &pair.references, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    Ok(bleu_from_counts(matched, totals, hyp_len, ref_len, smoothing))
}

/// Combines summed statistics into a score.
pub fn bleu_from_counts(
    matched: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
    smoothing: Smoothing,
) -> BleuScore {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = match (matched[n], smoothing) {
            (0, Smoothing::AddEpsilon) => SMOOTH_EPSILON / totals[n].max(1) as f64,
            (0, Smoothing::None) => 0.0,
            (m, _) => m as f64 / totals[n] as f64,
        };
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        bp * log_mean.exp() * 100.0
    };
    BleuScore {
        score,
        precisions,
        bp,
        hyp_len,
        ref_len,
    }
}

/// Synthetic sentences are already token ids.
pub fn tokenize(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.to_vec()
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "score={} p1={} p2={} p3={} p4={} bp={} hyp_len={} ref_len={}",
            self.score,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.bp,
            self.hyp_len,
            self.ref_len
        )
    }
}

impl FromStr for BleuScore {
    type Err = MetricsError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| MetricsError::Parse(format!("field without '=': {part}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| MetricsError::Parse(format!("missing field {k}")))
        };
        let float = |k: &str| -> Result<f64, MetricsError> {
            get(k)?
                .parse()
                .map_err(|e| MetricsError::Parse(format!("{k}: {e}")))
        };
        let int = |k: &str| -> Result<usize, MetricsError> {
            get(k)?
                .parse()
                .map_err(|e| MetricsError::Parse(format!("{k}: {e}")))
        };
        Ok(Self {
            score: float("score")?,
            precisions: [float("p1")?, float("p2")?, float("p3")?, float("p4")?],
            bp: float("bp")?,
            hyp_len: int("hyp_len")?,
            ref_len: int("ref_len")?,
        })
    }
}

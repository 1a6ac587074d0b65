//! Autoregressive generation: greedy, beam search, diverse beam search with
//! Hamming diversity, and temperature-scaled multinomial sampling.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS};
use crate::numerics::{argmax, log_softmax};
use crate::seed::mix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("decode config error: {0}")]
    Config(String),
}

/// Anything that scores the next token given the tokens generated so far.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Unnormalized next-token scores for `prefix` (generated tokens only,
    /// no start symbol). `-inf` marks impossible tokens.
    fn next_logits(&self, prefix: &[TokenId]) -> Vec<f64>;

    fn eos(&self) -> TokenId {
        EOS
    }

    /// Scores for several prefixes at once; models that can share work
    /// across prefixes override this.
    fn next_logits_batch(&self, prefixes: &[&[TokenId]]) -> Vec<Vec<f64>> {
        prefixes.iter().map(|p| self.next_logits(p)).collect()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        (**self).next_logits(prefix)
    }
    fn eos(&self) -> TokenId {
        (**self).eos()
    }
    fn next_logits_batch(&self, prefixes: &[&[TokenId]]) -> Vec<Vec<f64>> {
        (**self).next_logits_batch(prefixes)
    }
}

/// Closure-backed model, handy for table LMs.
pub struct FnLm<F> {
    vocab: usize,
    eos: TokenId,
    f: F,
}

impl<F: Fn(&[TokenId]) -> Vec<f64>> FnLm<F> {
    pub fn new(vocab: usize, eos: TokenId, f: F) -> Self {
        Self { vocab, eos, f }
    }
}

impl<F: Fn(&[TokenId]) -> Vec<f64>> LanguageModel for FnLm<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn next_logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        (self.f)(prefix)
    }
    fn eos(&self) -> TokenId {
        self.eos
    }
}

/// Table LM whose next-token logits are a fixed pseudo-random function of
/// `(seed, prefix)`; fully enumerable for small vocabularies.
pub fn random_table_lm(
    vocab: usize,
    eos: TokenId,
    seed: u64,
    scale: f64,
) -> FnLm<impl Fn(&[TokenId]) -> Vec<f64>> {
    FnLm::new(vocab, eos, move |prefix: &[TokenId]| {
        let mut h = mix(seed, prefix.len() as u64, 0);
        for &t in prefix {
            h = mix(h, t as u64 + 1, 0x7AB1E);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..vocab).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
    DiverseBeam,
    Multinomial,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "greedy" => Some(Self::Greedy),
            "beam" => Some(Self::Beam),
            "diverse_beam" | "diverse" => Some(Self::DiverseBeam),
            "multinomial" | "sampled" => Some(Self::Multinomial),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub num_groups: usize,
    pub diversity_penalty: f64,
    pub temperature: f64,
    pub max_len: usize,
    pub num_return: usize,
    /// Exponent of the length normalization `log_prob / len^alpha`.
    pub length_penalty: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_width: 5,
            num_groups: 5,
            diversity_penalty: 0.5,
            temperature: 1.0,
            max_len: 16,
            num_return: 1,
            length_penalty: 0.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            max_len,
            ..Self::default()
        }
    }

    pub fn beam(beam_width: usize, max_len: usize) -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width,
            max_len,
            ..Self::default()
        }
    }

    pub fn diverse(beam_width: usize, num_groups: usize, penalty: f64, max_len: usize) -> Self {
        Self {
            strategy: Strategy::DiverseBeam,
            beam_width,
            num_groups,
            diversity_penalty: penalty,
            max_len,
            ..Self::default()
        }
    }

    pub fn multinomial(temperature: f64, num_return: usize, max_len: usize, seed: u64) -> Self {
        Self {
            strategy: Strategy::Multinomial,
            temperature,
            num_return,
            max_len,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let err = |m: String| Err(DecodeError::Config(m));
        if self.max_len == 0 {
            return err("max_len must be positive".into());
        }
        if self.beam_width == 0 || self.num_groups == 0 || self.num_return == 0 {
            return err("beam_width, num_groups and num_return must be positive".into());
        }
        if self.diversity_penalty < 0.0 || self.diversity_penalty.is_nan() {
            return err(format!(
                "diversity penalty {} must be non-negative",
                self.diversity_penalty
            ));
        }
        if self.temperature <= 0.0 || self.temperature.is_nan() {
            return err(format!("temperature {} must be positive", self.temperature));
        }
        match self.strategy {
            Strategy::Beam | Strategy::DiverseBeam if self.num_return > self.beam_width => err(
                format!(
                    "num_return {} exceeds beam_width {}",
                    self.num_return, self.beam_width
                ),
            ),
            Strategy::DiverseBeam if !self.beam_width.is_multiple_of(self.num_groups) => err(format!(
                "beam_width {} not divisible by num_groups {}",
                self.beam_width, self.num_groups
            )),
            _ => Ok(()),
        }
    }
}

/// A decoded sequence; `tokens` ends in EOS unless it hit `max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of per-step log-probabilities.
    pub log_prob: f64,
    /// Ranking score after length normalization.
    pub score: f64,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self, eos: TokenId) -> &[TokenId] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn is_well_formed(&self, eos: TokenId, max_len: usize) -> bool {
        let eos_ok = match self.tokens.iter().position(|&t| t == eos) {
            Some(p) => p + 1 == self.tokens.len(),
            None => true,
        };
        eos_ok && self.tokens.len() <= max_len && self.log_prob <= 0.0
    }
}

fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Argmax token each step (lowest id on ties) until EOS or `max_len`.
pub fn greedy<M: LanguageModel + ?Sized>(lm: &M, config: &DecodeConfig) -> Hypothesis {
    let eos = lm.eos();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < config.max_len {
        let lp = log_softmax(&lm.next_logits(&tokens));
        let next = argmax(&lp);
        log_prob += lp[next];
        tokens.push(next);
        if next == eos {
            break;
        }
    }
    let score = normalized(log_prob, tokens.len(), config.length_penalty);
    Hypothesis {
        tokens,
        log_prob,
        score,
    }
}

#[derive(Clone, Debug)]
struct Beam {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

fn cmp_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn finalize(mut hyps: Vec<Hypothesis>) -> Vec<Hypothesis> {
    hyps.sort_by(|a, b| cmp_desc(a.score, b.score).then_with(|| a.tokens.cmp(&b.tokens)));
    hyps
}

/// Beam search with finished hypotheses held aside; sorted by descending score.
pub fn beam_search<M: LanguageModel + ?Sized>(
    lm: &M,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    let mut c = config.clone();
    c.strategy = Strategy::Beam;
    c.validate()?;
    c.num_groups = 1;
    c.diversity_penalty = 0.0;
    let mut groups = run_groups(lm, &c);
    let mut best = finalize(groups.remove(0));
    best.truncate(c.beam_width);
    Ok(best)
}

/// Diverse beam search: `num_groups` groups of `beam_width / num_groups`
/// beams, extended group by group; later groups subtract
/// `diversity_penalty × (times the token was picked at this step by
/// earlier groups)` from candidate scores before selection.
pub fn diverse_beam_search<M: LanguageModel + ?Sized>(
    lm: &M,
    config: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>, DecodeError> {
    let mut c = config.clone();
    c.strategy = Strategy::DiverseBeam;
    c.validate()?;
    let per_group = c.beam_width / c.num_groups;
    Ok(run_groups(lm, &c)
        .into_iter()
        .map(|g| {
            let mut g = finalize(g);
            g.truncate(per_group);
            g
        })
        .collect())
}

fn run_groups<M: LanguageModel + ?Sized>(lm: &M, c: &DecodeConfig) -> Vec<Vec<Hypothesis>> {
    let eos = lm.eos();
    let vocab = lm.vocab_size();
    let width = c.beam_width / c.num_groups;
    let alpha = c.length_penalty;
    let mut alive: Vec<Vec<Beam>> = vec![
        vec![Beam {
            tokens: Vec::new(),
            log_prob: 0.0,
        }];
        c.num_groups
    ];
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); c.num_groups];
    let mut done = vec![false; c.num_groups];

    for _step in 0..c.max_len {
        let mut used = vec![0usize; vocab];
        for g in 0..c.num_groups {
            if done[g] || alive[g].is_empty() {
                done[g] = true;
                continue;
            }
            let prefixes: Vec<&[TokenId]> = alive[g].iter().map(|b| b.tokens.as_slice()).collect();
            let logits = lm.next_logits_batch(&prefixes);
            // (selection score, raw log_prob, beam index, token)
            let mut cands: Vec<(f64, f64, usize, TokenId)> = Vec::new();
            for (bi, (beam, l)) in alive[g].iter().zip(&logits).enumerate() {
                for (tok, lp) in log_softmax(l).into_iter().enumerate() {
                    if lp == f64::NEG_INFINITY {
                        continue;
                    }
                    let total = beam.log_prob + lp;
                    let base = normalized(total, beam.tokens.len() + 1, alpha);
                    let sel = base - c.diversity_penalty * used[tok] as f64;
                    cands.push((sel, total, bi, tok));
                }
            }
            cands.sort_by(|a, b| {
                cmp_desc(a.0, b.0)
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next = Vec::new();
            let mut picked = Vec::new();
            for (rank, &(_, total, bi, tok)) in cands.iter().enumerate() {
                if next.len() == width {
                    break;
                }
                let mut tokens = alive[g][bi].tokens.clone();
                tokens.push(tok);
                if tok == eos {
                    if rank < width {
                        let len = tokens.len();
                        finished[g].push(Hypothesis {
                            tokens,
                            log_prob: total,
                            score: normalized(total, len, alpha),
                        });
                        picked.push(tok);
                    }
                } else {
                    next.push(Beam {
                        tokens,
                        log_prob: total,
                    });
                    picked.push(tok);
                }
            }
            for tok in picked {
                used[tok] += 1;
            }
            alive[g] = next;
            // with non-positive step scores and no length reward, no alive
            // beam can overtake the worst of `width` finished hypotheses
            if alpha == 0.0 && finished[g].len() >= width {
                let mut scores: Vec<f64> = finished[g].iter().map(|h| h.score).collect();
                scores.sort_by(|a, b| cmp_desc(*a, *b));
                let floor = scores[width - 1];
                if alive[g].iter().all(|b| b.log_prob <= floor) {
                    done[g] = true;
                }
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    for g in 0..c.num_groups {
        if done[g] {
            continue;
        }
        for b in alive[g].drain(..) {
            let len = b.tokens.len();
            finished[g].push(Hypothesis {
                score: normalized(b.log_prob, len, alpha),
                tokens: b.tokens,
                log_prob: b.log_prob,
            });
        }
    }
    finished
}

/// `num_return` independent samples from `softmax(logits / temperature)`.
pub fn multinomial<M: LanguageModel + ?Sized>(
    lm: &M,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    config.validate()?;
    let eos = lm.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.num_return);
    for _ in 0..config.num_return {
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        while tokens.len() < config.max_len {
            let scaled: Vec<f64> = lm
                .next_logits(&tokens)
                .iter()
                .map(|l| l / config.temperature)
                .collect();
            let lp = log_softmax(&scaled);
            let next = sample_index(&lp, &mut rng);
            log_prob += lp[next];
            tokens.push(next);
            if next == eos {
                break;
            }
        }
        let score = normalized(log_prob, tokens.len(), config.length_penalty);
        out.push(Hypothesis {
            tokens,
            log_prob,
            score,
        });
    }
    Ok(out)
}

/// Inverse-CDF draw from log-probabilities.
pub fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_possible = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_possible = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_possible
}

/// Decodes according to `config.strategy`, flattening groups.
pub fn decode<M: LanguageModel + ?Sized>(
    lm: &M,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    match config.strategy {
        Strategy::Greedy => {
            config.validate()?;
            Ok(vec![greedy(lm, config)])
        }
        Strategy::Beam => beam_search(lm, config),
        Strategy::DiverseBeam => Ok(diverse_beam_search(lm, config)?.concat()),
        Strategy::Multinomial => multinomial(lm, config),
    }
}

/// `k` caption token sequences (EOS stripped).
///
/// Beam: the top `k`. Diverse beam: the best of each group in turn, so
/// `k = num_groups` yields one caption per group. Multinomial: `k` samples.
pub fn generate_k_captions<M: LanguageModel + ?Sized>(
    lm: &M,
    config: &DecodeConfig,
    k: usize,
) -> Result<Vec<Vec<TokenId>>, DecodeError> {
    if k == 0 {
        return Err(DecodeError::Config("k must be at least 1".into()));
    }
    let eos = lm.eos();
    let hyps: Vec<Hypothesis> = match config.strategy {
        Strategy::Greedy => {
            if k != 1 {
                return Err(DecodeError::Config(format!(
                    "greedy decoding yields one caption, {k} requested"
                )));
            }
            vec![greedy(lm, config)]
        }
        Strategy::Beam => {
            if k > config.beam_width {
                return Err(DecodeError::Config(format!(
                    "{k} captions exceed beam width {}",
                    config.beam_width
                )));
            }
            beam_search(lm, config)?
        }
        Strategy::DiverseBeam => {
            if k > config.beam_width {
                return Err(DecodeError::Config(format!(
                    "{k} captions exceed beam width {}",
                    config.beam_width
                )));
            }
            let groups = diverse_beam_search(lm, config)?;
            let depth = groups.iter().map(Vec::len).max().unwrap_or(0);
            let mut interleaved = Vec::new();
            for rank in 0..depth {
                for g in &groups {
                    if let Some(h) = g.get(rank) {
                        interleaved.push(h.clone());
                    }
                }
            }
            interleaved
        }
        Strategy::Multinomial => {
            let mut c = config.clone();
            c.num_return = k;
            multinomial(lm, &c)?
        }
    };
    if hyps.len() < k {
        return Err(DecodeError::Config(format!(
            "only {} hypotheses available, {k} requested",
            hyps.len()
        )));
    }
    Ok(hyps
        .into_iter()
        .take(k)
        .map(|h| h.content(eos).to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sequence_lm(seq: Vec<TokenId>, vocab: usize) -> FnLm<impl Fn(&[TokenId]) -> Vec<f64>> {
        FnLm::new(vocab, 1, move |prefix: &[TokenId]| {
            let next = seq.get(prefix.len()).copied().unwrap_or(1);
            (0..vocab)
                .map(|t| if t == next { 0.0 } else { f64::NEG_INFINITY })
                .collect()
        })
    }

    #[test]
    fn greedy_follows_certain_sequence() {
        let lm = sequence_lm(vec![3, 2, 4, 1], 5);
        let h = greedy(&lm, &DecodeConfig::greedy(10));
        assert_eq!(h.tokens, vec![3, 2, 4, 1]);
        assert_eq!(h.log_prob, 0.0);
    }

    #[test]
    fn max_len_stops_without_eos() {
        let lm = sequence_lm(vec![3, 3, 3, 3, 3, 3], 5);
        let h = greedy(&lm, &DecodeConfig::greedy(4));
        assert_eq!(h.tokens, vec![3; 4]);
    }

    #[test]
    fn config_validation() {
        let mut c = DecodeConfig::beam(2, 5);
        c.num_return = 3;
        assert!(c.validate().is_err());
        let c = DecodeConfig::diverse(5, 2, 0.5, 5);
        assert!(c.validate().is_err());
        let c = DecodeConfig::diverse(4, 2, -0.1, 5);
        assert!(c.validate().is_err());
        let lm = random_table_lm(3, 1, 0, 2.0);
        assert!(diverse_beam_search(&lm, &c).is_err());
    }

    #[test]
    fn hypotheses_are_well_formed() {
        let lm = random_table_lm(4, 1, 9, 3.0);
        for h in beam_search(&lm, &DecodeConfig::beam(4, 6)).unwrap() {
            assert!(h.is_well_formed(1, 6), "{h:?}");
        }
        for h in multinomial(&lm, &DecodeConfig::multinomial(1.0, 8, 6, 3)).unwrap() {
            assert!(h.is_well_formed(1, 6), "{h:?}");
        }
    }
}

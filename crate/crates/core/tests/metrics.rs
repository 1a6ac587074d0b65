mod common;

use common::{brute_bleu, brute_clipped};
use imgst_core::metrics::{
    clipped_ngram_counts, corpus_bleu, effective_ref_len, BleuScore, EvalPair, Smoothing,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sentence(rng: &mut ChaCha8Rng, vocab: u8) -> Vec<u8> {
    let len = rng.random_range(1..=12);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<Vec<u8>>) {
    let vocab = rng.random_range(2..=6);
    let h = random_sentence(rng, vocab);
    let n_refs = rng.random_range(1..=4);
    (h, (0..n_refs).map(|_| random_sentence(rng, vocab)).collect())
}

#[test]
fn matches_brute_force_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nonzero = 0;
    for _ in 0..200 {
        let n_pairs = rng.random_range(1..=5);
        let raw: Vec<_> = (0..n_pairs).map(|_| random_pair(&mut rng)).collect();
        let pairs: Vec<_> = raw
            .iter()
            .map(|(h, r)| EvalPair::new(h.clone(), r.clone()).unwrap())
            .collect();
        let fast = corpus_bleu(&pairs, Smoothing::None).unwrap().score;
        let slow = brute_bleu(&raw);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow} on {raw:?}");
        if slow > 0.0 {
            nonzero += 1;
        }
        for (h, refs) in &raw {
            for n in 1..=4 {
                assert_eq!(clipped_ngram_counts(h, refs, n), brute_clipped(h, refs, n));
            }
        }
    }
    assert!(nonzero > 20, "too few non-degenerate corpora ({nonzero})");
}

#[test]
fn scores_stay_in_range_and_line_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (h, r) = random_pair(&mut rng);
        let s = corpus_bleu(&[EvalPair::new(h, r).unwrap()], Smoothing::AddEpsilon).unwrap();
        assert!((0.0..=100.0).contains(&s.score));
        assert!(s.bp > 0.0 && s.bp <= 1.0);
        assert_eq!(s.to_string().parse::<BleuScore>().unwrap(), s);
    }
    assert!("score=1 p1=2".parse::<BleuScore>().is_err());
}

proptest! {
    #[test]
    fn reference_order_is_irrelevant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, refs) = random_pair(&mut rng);
        let mut rev = refs.clone();
        rev.reverse();
        let a = corpus_bleu(&[EvalPair::new(h.clone(), refs).unwrap()], Smoothing::None).unwrap();
        let b = corpus_bleu(&[EvalPair::new(h, rev).unwrap()], Smoothing::None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pair_order_is_irrelevant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<_> = (0..4).map(|_| random_pair(&mut rng)).collect();
        let fwd: Vec<_> = raw.iter().map(|(h, r)| EvalPair::new(h.clone(), r.clone()).unwrap()).collect();
        let mut back = fwd.clone();
        back.reverse();
        let a = corpus_bleu(&fwd, Smoothing::None).unwrap().score;
        let b = corpus_bleu(&back, Smoothing::None).unwrap().score;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adding_a_reference_never_loses_matches(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, refs) = random_pair(&mut rng);
        let mut more = refs.clone();
        more.push(random_sentence(&mut rng, 6));
        for n in 1..=4 {
            prop_assert!(clipped_ngram_counts(&h, &more, n).0 >= clipped_ngram_counts(&h, &refs, n).0);
        }
        let len = effective_ref_len(h.len(), &more);
        prop_assert!(more.iter().any(|r| r.len() == len));
    }
}

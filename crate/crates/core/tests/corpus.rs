use std::collections::HashSet;

use imgst_core::corpus::{
    build_dataset, distinct_unigram_rate, load_dataset, oracle_captions, read_audio,
    sample_scene, write_audio, write_dataset, AudioSynth, CaptionStrategy, CaptionerOracle,
    DatasetConfig, Grammar, Inventories, Mode, Scene, SceneSampler, Slot, Tier, Vocabulary,
    World,
};
use imgst_core::metrics::{corpus_bleu, EvalPair, Smoothing};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene_slots(s: &Scene) -> Vec<(Slot, usize)> {
    Slot::ALL
        .iter()
        .filter_map(|&slot| s.slot(slot).map(|v| (slot, v)))
        .collect()
}

fn small_config(mode: Mode) -> DatasetConfig {
    DatasetConfig {
        mode,
        n_train: 30,
        n_dev: 10,
        n_test: 10,
        ..DatasetConfig::default()
    }
}

#[test]
fn fixed_seed_gives_fixed_scene() {
    let inv = World::default().inventories();
    let a = sample_scene(inv, 17).unwrap();
    assert_eq!(a, sample_scene(inv, 17).unwrap());
    assert!(a.is_valid(&inv));
    let empty = Inventories {
        agents: 0,
        ..inv
    };
    assert!(sample_scene(empty, 1).is_err());
}

#[test]
fn slot_marginals_are_uniform() {
    let inv = World::default().inventories();
    let mut sampler = SceneSampler::new(inv, 3).unwrap();
    let n = 10_000;
    let scenes: Vec<Scene> = (0..n).map(|_| sampler.sample()).collect();
    for w in scenes.windows(2) {
        assert!(w[1].id > w[0].id);
    }
    for slot in Slot::ALL {
        // objects carry one extra outcome: absent
        let outcomes = inv.size(slot) + usize::from(slot == Slot::Object);
        let p = 1.0 / outcomes as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for v in 0..outcomes {
            let count = scenes
                .iter()
                .filter(|s| s.slot(slot).unwrap_or(inv.objects) == v)
                .count() as f64;
            assert!(
                (count - n as f64 * p).abs() <= 3.0 * sd,
                "{slot:?}={v}: {count}"
            );
        }
    }
}

#[test]
fn template_zero_hand_realization() {
    let w = World::default();
    let scene = Scene {
        id: 0,
        agent: 0,
        attribute: 0,
        action: 0,
        object: None,
        location: 0,
    };
    let u = w.target.realize(&scene, 0).unwrap();
    assert_eq!(w.vocab.detokenize(&u.tokens), "a brown dog runs in the field");
    let with_ball = Scene {
        object: Some(0),
        ..scene
    };
    let u = w.target.realize(&with_ball, 0).unwrap();
    assert_eq!(
        w.vocab.detokenize(&u.tokens),
        "a brown dog runs with a ball in the field"
    );
    assert!(w.target.realize(&scene, w.target.template_count()).is_err());
}

#[test]
fn templates_differ_in_form_not_meaning() {
    let w = World::default();
    let mut sampler = SceneSampler::new(w.inventories(), 5).unwrap();
    for _ in 0..200 {
        let scene = sampler.sample();
        let target: Vec<Vec<usize>> = (0..w.target.template_count())
            .map(|t| w.target.realize(&scene, t).unwrap().tokens)
            .collect();
        let distinct: HashSet<_> = target.iter().collect();
        assert_eq!(distinct.len(), target.len());
        let mut expected = scene_slots(&scene);
        expected.sort();
        for toks in &target {
            let mut got: Vec<_> = w.target.invert(toks).into_iter().collect();
            got.sort();
            assert_eq!(got, expected);
        }
        for t in 0..w.source.template_count() {
            let src = w.source.realize(&scene, t).unwrap().tokens;
            assert!(src.iter().all(|tok| !target.iter().any(|tt| tt.contains(tok))));
            let mut got: Vec<_> = w.source.invert(&src).into_iter().collect();
            got.sort();
            assert_eq!(got, expected);
        }
    }
    assert!(w.target.tokens().is_disjoint(&w.source.tokens()));
    assert!(w.target.template_count() >= 4 && w.source.template_count() >= 4);
}

#[test]
fn noiseless_unit_duration_audio_is_the_prototype_sequence() {
    let w = World::default();
    let synth = AudioSynth::new(&w.vocab, 8, 0.24, 1).with_durations(1..=1);
    let scene = sample_scene(w.inventories(), 2).unwrap();
    let toks = w.source.realize(&scene, 0).unwrap().tokens;
    let audio = synth.synthesize(scene.id, &toks, 9, 0.0).unwrap();
    assert_eq!(audio.n_frames(), toks.len());
    for (i, &t) in toks.iter().enumerate() {
        assert_eq!(audio.frames.row(i), synth.prototype(t).unwrap());
    }
    let mut vocab = Vocabulary::default();
    let _ = Grammar::target(&mut vocab);
    assert!(synth.synthesize(0, &[0], 1, 0.0).is_err());
}

#[test]
fn audio_is_seeded_and_nearest_prototype_decodable() {
    let w = World::default();
    let synth = AudioSynth::new(&w.vocab, 48, 0.24, 4);
    let scene = sample_scene(w.inventories(), 8).unwrap();
    let toks = w.source.realize(&scene, 1).unwrap().tokens;
    let a = synth.synthesize(scene.id, &toks, 77, 0.3).unwrap();
    let b = synth.synthesize(scene.id, &toks, 77, 0.3).unwrap();
    assert_eq!(a, b);
    assert!(a.n_frames() >= 2 * toks.len() && a.n_frames() <= 4 * toks.len());

    let clean = synth.synthesize(scene.id, &toks, 77, 0.0).unwrap();
    let mut decoded: Vec<usize> = Vec::new();
    for i in 0..clean.n_frames() {
        let t = synth.nearest_token(clean.frames.row(i));
        if decoded.last() != Some(&t) {
            decoded.push(t);
        }
    }
    let mut dedup = toks.clone();
    dedup.dedup();
    assert_eq!(decoded, dedup);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.f64");
    write_audio(&path, &a.frames).unwrap();
    assert_eq!(read_audio(&path).unwrap(), a.frames);
}

#[test]
fn noiseless_deterministic_oracle_reproduces_reference() {
    let w = World::default();
    let oracle = CaptionerOracle::new(Tier::A, CaptionStrategy::DeterministicBest).with_p_confuse(0.0);
    let mut sampler = SceneSampler::new(w.inventories(), 6).unwrap();
    for seed in 0..50 {
        let scene = sampler.sample();
        let caps = oracle_captions(&w.target, &scene, &oracle, 1, seed).unwrap();
        assert_eq!(caps, vec![w.target.realize(&scene, 0).unwrap().tokens]);
    }
}

#[test]
fn diverse_oracle_gives_distinct_captions_and_bounds_k() {
    let w = World::default();
    let oracle = CaptionerOracle::new(Tier::B, CaptionStrategy::DiverseTemplates);
    let scene = sample_scene(w.inventories(), 12).unwrap();
    let caps = oracle_captions(&w.target, &scene, &oracle, 5, 3).unwrap();
    assert_eq!(caps.iter().collect::<HashSet<_>>().len(), 5);
    assert!(oracle_captions(&w.target, &scene, &oracle, 7, 3).is_err());
    assert!(oracle_captions(&w.target, &scene, &oracle, 0, 3).is_err());
    let bad = oracle.with_p_confuse(0.6);
    assert!(oracle_captions(&w.target, &scene, &bad, 1, 3).is_err());
}

#[test]
fn corruption_rate_matches_p_confuse() {
    let w = World::default();
    let mut sampler = SceneSampler::new(w.inventories(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for tier in Tier::ALL {
        let oracle = CaptionerOracle::new(tier, CaptionStrategy::DeterministicBest);
        let p = oracle.p_confuse;
        let (mut flips, mut slots) = (0usize, 0usize);
        for _ in 0..10_000 {
            let scene = sampler.sample();
            let seen = oracle.observe(&scene, &w.target, &mut rng);
            for slot in Slot::ALL {
                if let Some(v) = scene.slot(slot) {
                    slots += 1;
                    let s = seen.slot(slot).unwrap();
                    if s != v {
                        flips += 1;
                        let n = w.inventories().size(slot);
                        assert!(s == (v + 1) % n || s == (v + n - 1) % n);
                    }
                }
            }
        }
        let sd = (slots as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (flips as f64 - slots as f64 * p).abs() <= 3.0 * sd,
            "{tier:?}: {flips}/{slots}"
        );
    }
}

#[test]
fn diversity_dial_is_monotone() {
    let w = World::default();
    let mut sampler = SceneSampler::new(w.inventories(), 21).unwrap();
    let scenes: Vec<Scene> = (0..500).map(|_| sampler.sample()).collect();
    let rates: Vec<f64> = CaptionStrategy::ALL
        .iter()
        .map(|&strategy| {
            let oracle = CaptionerOracle::new(Tier::A, strategy);
            scenes
                .iter()
                .map(|s| distinct_unigram_rate(&oracle_captions(&w.target, s, &oracle, 5, s.id).unwrap()))
                .sum::<f64>()
                / scenes.len() as f64
        })
        .collect();
    assert!(rates[0] <= rates[1] && rates[1] <= rates[2], "{rates:?}");
}

#[test]
fn tiers_order_caption_bleu() {
    let w = World::default();
    let mut sampler = SceneSampler::new(w.inventories(), 31).unwrap();
    let scenes: Vec<Scene> = (0..500).map(|_| sampler.sample()).collect();
    let bleu: Vec<f64> = Tier::ALL
        .iter()
        .map(|&tier| {
            let oracle = CaptionerOracle::new(tier, CaptionStrategy::DiverseTemplates);
            let pairs: Vec<_> = scenes
                .iter()
                .flat_map(|s| {
                    let refs: Vec<Vec<usize>> =
                        (0..5).map(|t| w.target.realize(s, t).unwrap().tokens).collect();
                    oracle_captions(&w.target, s, &oracle, 5, s.id)
                        .unwrap()
                        .into_iter()
                        .map(move |c| EvalPair::new(c, refs.clone()).unwrap())
                })
                .collect();
            corpus_bleu(&pairs, Smoothing::None).unwrap().score
        })
        .collect();
    assert!(bleu[0] > bleu[1] && bleu[1] > bleu[2], "{bleu:?}");
}

#[test]
fn dataset_shapes_and_disjoint_splits() {
    for (mode, m) in [(Mode::Paraphrase, 5), (Mode::Translation, 1)] {
        let d = build_dataset(&small_config(mode)).unwrap();
        assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (30, 10, 10));
        let mut ids = HashSet::new();
        for item in d.all_items() {
            assert!(ids.insert(item.scene.id), "duplicate scene id");
            assert_eq!(item.utterances.len(), m);
            assert_eq!(item.references.len(), 5);
            assert_eq!(item.captions.len(), 5);
            let spoken = mode.spoken_language();
            let g = d.world.grammar(spoken);
            for u in &item.utterances {
                assert_eq!(u.utterance.language, spoken);
                assert_eq!(g.realize(&item.scene, u.utterance.template_id).unwrap(), u.utterance);
            }
        }
    }
}

#[test]
fn rebuild_is_byte_identical_and_loads_back() {
    let config = small_config(Mode::Translation);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&build_dataset(&config).unwrap(), a.path()).unwrap();
    write_dataset(&build_dataset(&config).unwrap(), b.path()).unwrap();
    let files = |root: &std::path::Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    out.push((e.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&e).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    let fa = files(a.path());
    assert!(fa.len() > 3);
    assert_eq!(fa, files(b.path()));
    let loaded = load_dataset(a.path()).unwrap();
    assert_eq!(loaded.test, build_dataset(&config).unwrap().test);
    let missing = load_dataset(&a.path().join("nope")).unwrap_err().to_string();
    assert!(missing.contains("nope"), "{missing}");
}

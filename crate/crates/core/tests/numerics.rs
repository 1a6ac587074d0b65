mod common;

use common::{gradcheck, param, project};
use imgst_core::numerics::{Graph, Segment, Tensor, LAYER_NORM_EPS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[test]
fn matmul_identity_and_hand_value() {
    let mut g = Graph::new();
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]])
        .unwrap();
    let i = g.leaf(&Tensor::identity(3));
    let xv = g.leaf(&x);
    let out = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(out), x.data());

    let a = g
        .constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])
        .unwrap();
    let b = g.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[3.0, 7.0]);
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = param(&[4, 4], &mut rng);
    let b = param(&[4, 4], &mut rng);
    let err = gradcheck(&[a, b], STEP, |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        g.sum(c)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_anchor_values() {
    let mut g = Graph::new();
    let x = g.constant(&[3], vec![0.0, 0.0, 0.0]).unwrap();
    let s = g.softmax(x, 0).unwrap();
    for v in g.value(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(&[2], vec![1000.0, 0.0]).unwrap();
    let s = g.softmax(x, 0).unwrap();
    assert!(g.value(s).iter().all(|v| v.is_finite()));
    assert!((g.value(s)[0] - 1.0).abs() < 1e-12);
    assert!(g.value(s)[1] < 1e-300);

    let x = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let s = g.softmax(x, 0).unwrap();
    let expected = [0.09003, 0.24473, 0.66524];
    for (v, e) in g.value(s).iter().zip(expected) {
        assert!((v - e).abs() < 5e-6, "{v} vs {e}");
    }
}

#[test]
fn softmax_along_inner_axis_normalizes_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tensor::randn(&[2, 3, 4], 3.0, &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(&t);
    let s = g.softmax(x, 1).unwrap();
    let y = g.value(s);
    for o in 0..2 {
        for i in 0..4 {
            let total: f64 = (0..3).map(|j| y[o * 12 + j * 4 + i]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_anchor_values() {
    let mut g = Graph::new();
    let x = g.constant(&[1, 4], vec![2.5; 4]).unwrap();
    let y = g.layer_norm(x, None, None, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let x = g.constant(&[1, 2], vec![1.0, 3.0]).unwrap();
    let gain = g.constant(&[2], vec![1.0, 1.0]).unwrap();
    let bias = g.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = g.layer_norm(x, Some(gain), Some(bias), 1e-12).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-4);
    assert!((g.value(y)[1] - 1.0).abs() < 1e-4);

    let x = g.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
    assert!(g.layer_norm(x, None, None, LAYER_NORM_EPS).is_err());
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = param(&[3, 5], &mut rng);
    let gain = param(&[5], &mut rng);
    let bias = param(&[5], &mut rng);
    let err = gradcheck(&[x, gain, bias], STEP, |g, v| {
        let y = g.layer_norm(v[0], Some(v[1]), Some(v[2]), LAYER_NORM_EPS).unwrap();
        project(g, y, 7)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn cross_entropy_anchor_values() {
    let mut g = Graph::new();
    let logits = g.constant(&[1, 4], vec![0.5; 4]).unwrap();
    let loss = g.cross_entropy(logits, &[2], usize::MAX).unwrap();
    assert!((g.value(loss)[0] - 4f64.ln()).abs() < 1e-12);

    let logits = g.constant(&[1, 3], vec![0.0, 60.0, 0.0]).unwrap();
    let loss = g.cross_entropy(logits, &[1], usize::MAX).unwrap();
    assert!(g.value(loss)[0] < 1e-20);

    // Hand computation: row 0 = [1, 2, 0] target 1, row 1 = [0, 0, ln 2]
    // target 2. Row losses: ln(e + e² + 1) − 2 and ln(2 + 2) − ln 2 = ln 2.
    let logits = g
        .constant(&[2, 3], vec![1.0, 2.0, 0.0, 0.0, 0.0, 2f64.ln()])
        .unwrap();
    let loss = g.cross_entropy(logits, &[1, 2], usize::MAX).unwrap();
    let e = std::f64::consts::E;
    let expected = ((e + e * e + 1.0).ln() - 2.0 + 2f64.ln()) / 2.0;
    assert!((g.value(loss)[0] - expected).abs() < 1e-10);

    // ignored positions do not count towards the mean
    let logits = g
        .constant(&[2, 3], vec![1.0, 2.0, 0.0, 9.0, -3.0, 1.0])
        .unwrap();
    let loss = g.cross_entropy(logits, &[1, 99], 99).unwrap();
    assert!((g.value(loss)[0] - ((e + e * e + 1.0).ln() - 2.0)).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = param(&[4, 6], &mut rng);
    let err = gradcheck(&[logits], STEP, |g, v| {
        g.cross_entropy(v[0], &[0, 5, 99, 2], 99).unwrap()
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = param(&[5, 4], &mut rng);
    let k = param(&[7, 4], &mut rng);
    let v = param(&[7, 4], &mut rng);
    let segs = [
        Segment {
            q_start: 0,
            q_len: 2,
            k_start: 0,
            k_len: 3,
        },
        Segment {
            q_start: 2,
            q_len: 3,
            k_start: 3,
            k_len: 4,
        },
    ];
    let err = gradcheck(&[q.clone(), k, v], STEP, |g, x| {
        let y = g.attention(x[0], x[1], x[2], 2, &segs, false).unwrap();
        project(g, y, 11)
    });
    assert!(err < TOL, "cross rel err {err}");

    let kv = param(&[5, 4], &mut rng);
    let err = gradcheck(&[q, kv], STEP, |g, x| {
        let segs = [Segment::square(0, 2), Segment::square(2, 3)];
        let y = g.attention(x[0], x[1], x[1], 2, &segs, true).unwrap();
        project(g, y, 12)
    });
    assert!(err < TOL, "causal rel err {err}");
}

#[test]
fn backward_leaves_values_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = param(&[3, 4], &mut rng);
    let b = param(&[4, 2], &mut rng);
    let mut g = Graph::new();
    let av = g.leaf(&a);
    let bv = g.leaf(&b);
    let c = g.matmul(av, bv).unwrap();
    let c = g.gelu(c);
    let s = g.softmax(c, 1).unwrap();
    let loss = g.sum(s);
    let before: Vec<Vec<f64>> = g.vars().map(|v| g.value(v).to_vec()).collect();
    g.backward(loss).unwrap();
    for (i, (snapshot, v)) in before.iter().zip(g.vars()).enumerate() {
        let now = g.value(v);
        assert!(
            snapshot.iter().zip(now).all(|(x, y)| x.to_bits() == y.to_bits()),
            "node {i} mutated"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_slices_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..32)) {
        let mut g = Graph::new();
        let x = g.constant(&[values.len()], values).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(s).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(s).iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn gelu_and_elementwise_gradients(seed in 0u64..1000, rows in 1usize..4, cols in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = param(&[rows, cols], &mut rng);
        let b = param(&[rows, cols], &mut rng);
        let bias = param(&[cols], &mut rng);
        let err = gradcheck(&[a, b, bias], STEP, |g, v| {
            let p = g.mul(v[0], v[1]).unwrap();
            let d = g.sub(p, v[1]).unwrap();
            let e = g.add_row(d, v[2]).unwrap();
            let h = g.gelu(e);
            let t = g.transpose(h).unwrap();
            let s = g.scale(t, 0.7);
            project(g, s, seed)
        });
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn forward_and_gradients_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = param(&[3, 4], &mut rng);
            let table = param(&[6, 4], &mut rng);
            let mut g = Graph::new();
            let av = g.leaf(&a);
            let tv = g.leaf(&table);
            let rows = g.gather_rows(tv, &[0, 5, 5]).unwrap();
            let s = g.add(av, rows).unwrap();
            let l = g.cross_entropy(s, &[1, 2, 3], usize::MAX).unwrap();
            g.backward(l).unwrap();
            (g.value(l)[0].to_bits(), g.grad(tv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}

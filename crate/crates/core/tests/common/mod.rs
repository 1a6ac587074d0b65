//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use imgst_core::numerics::{Graph, Tensor, Var};

/// Central finite differences against the tape's analytic gradient.
///
/// `build` records a scalar loss on a fresh graph from the given leaves.
/// Returns the worst relative error over every element of every input,
/// with a denominator floor of `1e-4` so near-zero gradients are compared
/// absolutely.
pub fn gradcheck<F>(inputs: &[Tensor], step: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("backward");
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()))
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss)[0]
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let Some(ana) = &analytic[i] else { continue };
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let denom = ana[j].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((ana[j] - numeric).abs() / denom);
        }
    }
    worst
}

/// Tracked random tensor.
pub fn param<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_requires_grad(true)
}

/// Fixed random projection so a non-scalar output reduces to a scalar whose
/// gradient exercises every element.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng);
    let w = g.leaf(&w);
    let prod = g.mul(x, w).unwrap();
    g.sum(prod)
}

/// Small model dimensions for the architecture and gradient tests.
pub fn toy_config() -> imgst_core::model::ModelConfig {
    imgst_core::model::ModelConfig {
        d_audio: 4,
        d_text: 8,
        n_blocks: 2,
        n_heads: 2,
        vocab_size: 11,
        max_audio_frames: 16,
        max_text_len: 8,
        dropout: 0.0,
        encoder_blocks: 1,
        encoder_heads: 2,
        encoder_positions: true,
        ff_mult: 2,
    }
}

/// Overwrites the zero-initialized cross-attention output projections so
/// the audio path influences the logits.
pub fn open_cross_attention(model: &mut imgst_core::model::AudioToTextModel, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .parameters()
        .iter()
        .filter(|p| p.name.contains("cross_attn.out"))
        .map(|p| p.name.clone())
        .collect();
    assert!(!names.is_empty());
    for name in names {
        let t = model.param_mut(&name).unwrap();
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, 0.5, &mut rng);
    }
}

/// Worst relative error between the loss gradient of every tracked
/// parameter of `group` and central finite differences, probing up to
/// `per_tensor` evenly spaced elements of each tensor.
pub fn model_gradcheck(
    model: &imgst_core::model::AudioToTextModel,
    examples: &[(Tensor, Vec<usize>)],
    group: imgst_core::model::ParamGroup,
    per_tensor: usize,
    step: f64,
) -> (f64, usize) {
    use imgst_core::model::Example;
    let loss_of = |m: &imgst_core::model::AudioToTextModel| -> f64 {
        let ex: Vec<Example> = examples
            .iter()
            .map(|(e, t)| Example { encoded: e, target: t })
            .collect();
        let mut g = Graph::new();
        let (loss, _) = m.loss_graph(&mut g, &ex, None, None).unwrap();
        g.value(loss)[0]
    };
    let ex: Vec<Example> = examples
        .iter()
        .map(|(e, t)| Example { encoded: e, target: t })
        .collect();
    let mut g = Graph::new();
    let (loss, leaves) = model.loss_graph(&mut g, &ex, Some(group), None).unwrap();
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for (idx, var) in leaves {
        let name = model.parameters()[idx].name.clone();
        let ana = g.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(var).len()]);
        let n = ana.len();
        let stride = (n / per_tensor).max(1);
        for j in (0..n).step_by(stride).take(per_tensor) {
            let mut plus = model.clone();
            plus.param_mut(&name).unwrap().data_mut()[j] += step;
            let mut minus = model.clone();
            minus.param_mut(&name).unwrap().data_mut()[j] -= step;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let denom = ana[j].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((ana[j] - numeric).abs() / denom);
            probed += 1;
        }
    }
    (worst, probed)
}

// Literal re-reading of the definition with nested loops and no hashing.
pub fn brute_clipped(hyp: &[u8], refs: &[Vec<u8>], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let grams: Vec<&[u8]> = hyp.windows(n).collect();
    let mut seen: Vec<&[u8]> = Vec::new();
    let mut matched = 0;
    for g in &grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_hyp = grams.iter().filter(|x| *x == g).count();
        let mut best = 0;
        for r in refs {
            let c = if r.len() < n {
                0
            } else {
                r.windows(n).filter(|x| x == g).count()
            };
            best = best.max(c);
        }
        matched += in_hyp.min(best);
    }
    (matched, grams.len())
}

pub fn brute_bleu(pairs: &[(Vec<u8>, Vec<Vec<u8>>)]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, refs) in pairs {
        c += h.len();
        let mut best = refs[0].len();
        for x in refs {
            let (dx, db) = (x.len().abs_diff(h.len()), best.abs_diff(h.len()));
            if dx < db || (dx == db && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
        for n in 1..=4 {
            let (a, b) = brute_clipped(h, refs, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
    }
    if m.contains(&0) {
        return 0.0;
    }
    let mut logsum = 0.0;
    for n in 0..4 {
        logsum += (m[n] as f64 / t[n] as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (logsum / 4.0).exp()
}

// Every finishable sequence: ends in EOS within max_len, or runs to max_len.
pub fn enumerate<M: imgst_core::decode::LanguageModel>(lm: &M, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let step = imgst_core::numerics::log_softmax(&lm.next_logits(&prefix));
        for (t, l) in step.iter().enumerate() {
            let mut seq: Vec<usize> = prefix.clone();
            seq.push(t);
            let total = lp + l;
            if t == lm.eos() || seq.len() == max_len {
                out.push((seq, total));
            } else {
                stack.push((seq, total));
            }
        }
    }
    out
}

pub fn best_of(all: &[(Vec<usize>, f64)]) -> (Vec<usize>, f64) {
    all.iter()
        .cloned()
        .fold((vec![], f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
}

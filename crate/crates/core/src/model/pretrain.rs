//! Stand-ins for the pretrained parts: the decoder is trained as a
//! target-language LM and the encoder by masked-frame reconstruction, after
//! which both stay frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_model, lm_perplexity, stack_rows, AudioToTextModel, ModelConfig, ModelError, ParamGroup, Pass};
use crate::corpus::{TokenId, BOS, EOS};
use crate::numerics::{Graph, Tensor, Var};
use crate::seed::mix;
use crate::train::{adamw_update, clip_grad_norm, lr_at, Moments};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lm_max_epochs: usize,
    pub lm_lr: f64,
    /// Relative dev-perplexity gain below which an epoch counts as flat.
    pub lm_min_gain: f64,
    pub lm_max_texts: usize,
    pub enc_epochs: usize,
    pub enc_lr: f64,
    pub enc_max_utterances: usize,
    pub mask_prob: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lm_max_epochs: 12,
            lm_lr: 2e-3,
            lm_min_gain: 0.01,
            lm_max_texts: 4000,
            enc_epochs: 3,
            enc_lr: 1e-3,
            enc_max_utterances: 1000,
            mask_prob: 0.15,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub lm_dev_ppl_before: f64,
    pub lm_dev_ppl_after: f64,
    pub lm_epochs: usize,
    pub enc_loss_before: f64,
    pub enc_loss_after: f64,
}

/// Builds a model and pretrains its decoder on `lm_corpus` (target-language
/// token sequences) and its encoder on `enc_corpus` (frame matrices).
pub fn pretrain_frozen_parts(
    config: &ModelConfig,
    lm_corpus: &[Vec<TokenId>],
    enc_corpus: &[&Tensor],
    seed: u64,
    pretrain: &PretrainConfig,
) -> Result<(AudioToTextModel, PretrainReport), ModelError> {
    if lm_corpus.len() < 2 || enc_corpus.is_empty() {
        return Err(ModelError::Data("pretraining corpora must be non-empty".into()));
    }
    let mut model = build_model(config, seed)?;
    let (lm_dev_ppl_before, lm_dev_ppl_after, lm_epochs) =
        pretrain_decoder(&mut model, lm_corpus, seed, pretrain)?;
    let (enc_loss_before, enc_loss_after) = pretrain_encoder(&mut model, enc_corpus, seed, pretrain)?;
    Ok((
        model,
        PretrainReport {
            lm_dev_ppl_before,
            lm_dev_ppl_after,
            lm_epochs,
            enc_loss_before,
            enc_loss_after,
        },
    ))
}

struct GroupOptimizer {
    moments: Vec<Option<Moments>>,
    step: u64,
}

impl GroupOptimizer {
    fn new(model: &AudioToTextModel, group: ParamGroup) -> Self {
        Self {
            moments: model
                .parameters()
                .iter()
                .map(|p| {
                    (p.group == group).then(|| Moments {
                        m: vec![0.0; p.value.numel()],
                        v: vec![0.0; p.value.numel()],
                    })
                })
                .collect(),
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut AudioToTextModel, g: &Graph, leaves: &[(usize, Var)], lr: f64) {
        let mut grads: Vec<(usize, Vec<f64>)> = leaves
            .iter()
            .map(|&(i, v)| (i, g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()])))
            .collect();
        clip_grad_norm(&mut grads, 1.0);
        self.step += 1;
        for (i, grad) in grads {
            let state = self.moments[i].as_mut().expect("group parameter");
            adamw_update(model.params_mut()[i].value.data_mut(), &grad, state, self.step, lr, 0.0);
        }
    }
}

fn pretrain_decoder(
    model: &mut AudioToTextModel,
    corpus: &[Vec<TokenId>],
    seed: u64,
    cfg: &PretrainConfig,
) -> Result<(f64, f64, usize), ModelError> {
    let limit = model.config().max_text_len;
    let mut texts: Vec<Vec<TokenId>> = corpus
        .iter()
        .filter(|t| !t.is_empty() && t.len() < limit)
        .cloned()
        .collect();
    if texts.len() < 2 {
        return Err(ModelError::Data("no usable LM texts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1A, 0));
    texts.shuffle(&mut rng);
    texts.truncate(cfg.lm_max_texts.max(2));
    let n_dev = (texts.len() / 10).max(1);
    let dev = texts.split_off(texts.len() - n_dev);
    let before = lm_perplexity(model, &dev)?;
    let batches_per_epoch = texts.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.lm_max_epochs;
    let warmup = (total / 20).max(1);
    let mut opt = GroupOptimizer::new(model, ParamGroup::Decoder);
    let mut best = (before, model.clone());
    let mut flat = 0;
    let mut epochs = 0;
    let mut step = 0;
    for epoch in 0..cfg.lm_max_epochs {
        texts.shuffle(&mut rng);
        for batch in texts.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<TokenId>> = batch
                .iter()
                .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
                .collect();
            let targets: Vec<TokenId> = batch
                .iter()
                .flat_map(|t| t.iter().copied().chain(std::iter::once(EOS)))
                .collect();
            let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
            let mut g = Graph::new();
            let mut pass = Pass::new(model, Some(ParamGroup::Decoder), Some(mix(seed, 0x1B, step)));
            let logits = pass.decoder(&mut g, &refs, None)?;
            let loss = g.cross_entropy(logits, &targets, usize::MAX)?;
            g.backward(loss)?;
            let leaves = pass.tracked();
            step += 1;
            let lr = lr_at(step as usize, cfg.lm_lr, warmup, total.max(warmup + 1))
                .expect("step within schedule");
            opt.apply(model, &g, &leaves, lr);
        }
        epochs = epoch + 1;
        let ppl = lm_perplexity(model, &dev)?;
        if ppl < best.0 * (1.0 - cfg.lm_min_gain) {
            flat = 0;
        } else {
            flat += 1;
        }
        if ppl < best.0 {
            best = (ppl, model.clone());
        }
        if flat >= 2 {
            break;
        }
    }
    *model = best.1;
    Ok((before, best.0, epochs))
}

/// Mean squared reconstruction error of masked frames, and the tracked
/// leaves when `train` is set.
fn reconstruction_loss(
    model: &AudioToTextModel,
    head: &[Tensor; 2],
    g: &mut Graph,
    frames: &[&Tensor],
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<(Var, Vec<(usize, Var)>, [Var; 2]), ModelError> {
    let d = model.config().d_audio;
    let (clean, lengths) = stack_rows(frames);
    let rows = clean.len() / d;
    let mut masked_rows: Vec<bool> = (0..rows).map(|_| rng.random::<f64>() < mask_prob).collect();
    if !masked_rows.iter().any(|&m| m) {
        masked_rows[rng.random_range(0..rows)] = true;
    }
    let mut input = clean.clone();
    for (r, &m) in masked_rows.iter().enumerate() {
        if m {
            input[r * d..(r + 1) * d].fill(0.0);
        }
    }
    let x = g.constant(&[rows, d], input)?;
    let mut pass = Pass::new(model, train.then_some(ParamGroup::Encoder), None);
    let enc = pass.encoder(g, x, &lengths)?;
    let w = g.leaf_with(&head[0], train);
    let b = g.leaf_with(&head[1], train);
    let pred = g.matmul(enc, w)?;
    let pred = g.add_row(pred, b)?;
    let target = g.constant(&[rows, d], clean)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let count = masked_rows.iter().filter(|&&m| m).count();
    let weights: Vec<f64> = masked_rows
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))
        .collect();
    let sq = g.mul_const(sq, weights)?;
    let total = g.sum(sq);
    let loss = g.scale(total, 1.0 / (count * d) as f64);
    Ok((loss, pass.tracked(), [w, b]))
}

fn pretrain_encoder(
    model: &mut AudioToTextModel,
    corpus: &[&Tensor],
    seed: u64,
    cfg: &PretrainConfig,
) -> Result<(f64, f64), ModelError> {
    let d = model.config().d_audio;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xE1, 0));
    let mut order: Vec<&Tensor> = corpus.to_vec();
    order.shuffle(&mut rng);
    order.truncate(cfg.enc_max_utterances.max(1));
    let probe: Vec<&Tensor> = order.iter().take(64).copied().collect();
    let mut head = [
        Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng),
        Tensor::zeros(&[d]),
    ];
    let probe_loss = |model: &AudioToTextModel, head: &[Tensor; 2]| -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(mix(seed, 0xE2, 0));
        let (loss, _, _) = reconstruction_loss(model, head, &mut g, &probe, cfg.mask_prob, &mut r, false)?;
        Ok(g.value(loss)[0])
    };
    let before = probe_loss(model, &head)?;
    let mut opt = GroupOptimizer::new(model, ParamGroup::Encoder);
    let mut head_state = [
        Moments {
            m: vec![0.0; d * d],
            v: vec![0.0; d * d],
        },
        Moments {
            m: vec![0.0; d],
            v: vec![0.0; d],
        },
    ];
    for _ in 0..cfg.enc_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let (loss, leaves, hv) =
                reconstruction_loss(model, &head, &mut g, batch, cfg.mask_prob, &mut rng, true)?;
            g.backward(loss)?;
            opt.apply(model, &g, &leaves, cfg.enc_lr);
            for (k, v) in hv.iter().enumerate() {
                let grad = g.grad(*v).expect("head tracked").to_vec();
                adamw_update(head[k].data_mut(), &grad, &mut head_state[k], opt.step, cfg.enc_lr, 0.0);
            }
        }
    }
    Ok((before, probe_loss(model, &head)?))
}

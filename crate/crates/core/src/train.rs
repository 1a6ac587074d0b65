//! Adapter training: AdamW with linear warmup and decay, random
//! utterance/caption pairing per epoch, global-norm clipping, and best-epoch
//! selection on the development set.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Item, Mode, TokenId};
use crate::metrics::{corpus_bleu, EvalPair, Smoothing};
use crate::model::{load_checkpoint, AudioToTextModel, Checkpoint, CheckpointMeta, Example, ModelError, ParamGroup, Parameter};
use crate::numerics::{Graph, NumericsError, Tensor};
use crate::seed::mix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("log parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What the model is taught to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Oracle captions of the scene (distillation).
    Captions,
    /// The reference translation paired with each utterance (supervised).
    References,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    DevBleu,
    DevLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub mode: Mode,
    pub targets: TargetSource,
    pub selection: Selection,
    /// Longest caption produced during dev decoding.
    pub max_decode_len: usize,
    /// Checkpoint whose learnable parameters seed the run (translation runs
    /// start from a paraphrase model).
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            warmup_steps: 200,
            epochs: 50,
            batch_size: 16,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            mode: Mode::Translation,
            targets: TargetSource::Captions,
            selection: Selection::DevBleu,
            max_decode_len: 20,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, total_steps: usize) -> Result<(), TrainError> {
        if !(self.lr_max > 0.0) || self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("rates must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup_steps >= total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} must be below total steps {total_steps}",
                self.warmup_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max` over `warmup` steps, then linear decay to 0 at
/// `total`.
pub fn lr_at(step: usize, lr_max: f64, warmup: usize, total: usize) -> Result<f64, TrainError> {
    if step > total || warmup >= total {
        return Err(TrainError::Contract(format!(
            "step {step} outside schedule of {total} steps (warmup {warmup})"
        )));
    }
    Ok(if step <= warmup {
        if warmup == 0 {
            lr_max
        } else {
            lr_max * step as f64 / warmup as f64
        }
    } else {
        lr_max * (total - step) as f64 / (total - warmup) as f64
    })
}

/// One Adam moment pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW state for the parameters of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    group: ParamGroup,
    moments: Vec<Option<Moments>>,
    step: u64,
}

/// In-place bias-corrected Adam update with decoupled decay.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], state: &mut Moments, step: u64, lr: f64, weight_decay: f64) {
    let c1 = 1.0 - BETA1.powi(step as i32);
    let c2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] = theta[i] * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

impl AdamW {
    /// Moments are allocated only for parameters in `group`.
    pub fn new(params: &[Parameter], group: ParamGroup) -> Self {
        Self {
            group,
            moments: params
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

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> Option<&Moments> {
        self.moments.get(index).and_then(Option::as_ref)
    }

    /// `grads` must hold exactly one entry per parameter of the group.
    pub fn step(
        &mut self,
        params: &mut [Parameter],
        grads: &[(usize, Vec<f64>)],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        let mut seen = vec![false; params.len()];
        for (i, g) in grads {
            let p = params
                .get(*i)
                .ok_or_else(|| TrainError::Contract(format!("gradient for unknown parameter {i}")))?;
            if p.group != self.group {
                return Err(TrainError::Contract(format!("gradient for untrained parameter {}", p.name)));
            }
            if g.len() != p.value.numel() {
                return Err(TrainError::Contract(format!("gradient shape mismatch for {}", p.name)));
            }
            seen[*i] = true;
        }
        if let Some(p) = params.iter().enumerate().find(|(i, p)| p.group == self.group && !seen[*i]) {
            return Err(TrainError::Contract(format!("missing gradient for {}", p.1.name)));
        }
        self.step += 1;
        for (i, g) in grads {
            let state = self.moments[*i].as_mut().expect("moments exist for the group");
            adamw_update(params[*i].value.data_mut(), g, state, self.step, lr, weight_decay);
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(usize, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One training pair: which item, which of its utterances, which target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pairing {
    pub item: usize,
    pub utterance: usize,
    pub target: usize,
}

/// Shuffled batches for one epoch. Every utterance is paired with one
/// target drawn uniformly from its item's pool (captions, or for
/// `References` the utterance's own reference). Reproducible from
/// `(seed, epoch)`.
pub fn make_batches(
    items: &[Item],
    targets: TargetSource,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<Pairing>>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xBA7C, epoch as u64));
    let mut pairs = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if targets == TargetSource::Captions && item.captions.is_empty() {
            return Err(TrainError::Data(format!("scene {} has no captions", item.scene.id)));
        }
        for (u, utt) in item.utterances.iter().enumerate() {
            let target = match targets {
                TargetSource::Captions => rng.random_range(0..item.captions.len()),
                TargetSource::References => utt.own_reference,
            };
            pairs.push(Pairing {
                item: i,
                utterance: u,
                target,
            });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs.chunks(batch_size).map(<[Pairing]>::to_vec).collect())
}

fn target_tokens(item: &Item, source: TargetSource, index: usize) -> &[TokenId] {
    match source {
        TargetSource::Captions => &item.captions[index],
        TargetSource::References => &item.references[index],
    }
}

/// Frozen-encoder outputs for every utterance of a split, computed once.
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub utterances: Vec<Vec<Tensor>>,
}

pub fn encode_items(model: &AudioToTextModel, items: &[Item]) -> Result<EncodedSplit, TrainError> {
    let mut utterances = Vec::with_capacity(items.len());
    for chunk in items.chunks(32) {
        let frames: Vec<&Tensor> = chunk
            .iter()
            .flat_map(|it| it.utterances.iter().map(|u| &u.audio.frames))
            .collect();
        let mut encoded = model.encode_batch(&frames)?.into_iter();
        for it in chunk {
            utterances.push(encoded.by_ref().take(it.utterances.len()).collect());
        }
    }
    Ok(EncodedSplit { utterances })
}

/// Encoded train/dev/test splits of a dataset.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub train: EncodedSplit,
    pub dev: EncodedSplit,
    pub test: EncodedSplit,
}

pub fn encode_dataset(model: &AudioToTextModel, dataset: &DatasetSplit) -> Result<EncodedDataset, TrainError> {
    Ok(EncodedDataset {
        train: encode_items(model, &dataset.train)?,
        dev: encode_items(model, &dataset.dev)?,
        test: encode_items(model, &dataset.test)?,
    })
}

/// Greedy captions for the first utterance of each item.
pub fn decode_split(
    model: &AudioToTextModel,
    encoded: &EncodedSplit,
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>, TrainError> {
    let mut out = Vec::with_capacity(encoded.utterances.len());
    for chunk in encoded.utterances.chunks(64) {
        let enc: Vec<&Tensor> = chunk.iter().map(|u| &u[0]).collect();
        out.extend(model.greedy_batch(&enc, max_len)?);
    }
    Ok(out)
}

/// Corpus BLEU of greedy decodes against each item's full reference set.
pub fn dev_bleu(
    model: &AudioToTextModel,
    items: &[Item],
    encoded: &EncodedSplit,
    max_len: usize,
) -> Result<f64, TrainError> {
    let hyps = decode_split(model, encoded, max_len)?;
    let pairs = hyps
        .into_iter()
        .zip(items)
        .map(|(h, it)| EvalPair::new(h, it.references.clone()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TrainError::Data(e.to_string()))?;
    Ok(corpus_bleu(&pairs, Smoothing::None)
        .map_err(|e| TrainError::Data(e.to_string()))?
        .score)
}

/// Mean teacher-forced loss of the first utterance of each item against
/// its first target.
pub fn dev_loss(
    model: &AudioToTextModel,
    items: &[Item],
    encoded: &EncodedSplit,
    targets: TargetSource,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0;
    for (chunk_items, chunk_enc) in items.chunks(64).zip(encoded.utterances.chunks(64)) {
        let examples: Vec<Example> = chunk_items
            .iter()
            .zip(chunk_enc)
            .map(|(it, enc)| {
                let t = match targets {
                    TargetSource::Captions => 0,
                    TargetSource::References => it.utterances[0].own_reference,
                };
                Example {
                    encoded: &enc[0],
                    target: target_tokens(it, targets, t),
                }
            })
            .collect();
        let mut g = Graph::new();
        let (loss, _) = model.loss_graph(&mut g, &examples, None, None)?;
        total += g.value(loss)[0] * examples.len() as f64;
        n += examples.len();
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub selection: Selection,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the selected model; 0 means the initial model.
    pub best_epoch: usize,
    pub initial_dev_metric: f64,
}

impl TrainLog {
    pub fn best_metric(&self) -> f64 {
        if self.best_epoch == 0 {
            self.initial_dev_metric
        } else {
            self.epochs[self.best_epoch - 1].dev_metric
        }
    }
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sel = match self.selection {
            Selection::DevBleu => "dev_bleu",
            Selection::DevLoss => "dev_loss",
        };
        writeln!(
            f,
            "selection={sel} best_epoch={} initial_dev_metric={}",
            self.best_epoch, self.initial_dev_metric
        )?;
        for s in &self.steps {
            writeln!(f, "step={} lr={} loss={}", s.step, s.lr, s.loss)?;
        }
        for e in &self.epochs {
            writeln!(
                f,
                "epoch={} train_loss={} dev_metric={}",
                e.epoch, e.train_loss, e.dev_metric
            )?;
        }
        Ok(())
    }
}

impl FromStr for TrainLog {
    type Err = TrainError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut log = TrainLog {
            selection: Selection::DevBleu,
            steps: Vec::new(),
            epochs: Vec::new(),
            best_epoch: 0,
            initial_dev_metric: 0.0,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let kv: Vec<(&str, &str)> = line
                .split_whitespace()
                .map(|p| p.split_once('=').ok_or_else(|| TrainError::Parse(line.to_string())))
                .collect::<Result<_, _>>()?;
            let get = |k: &str| {
                kv.iter()
                    .find(|(key, _)| *key == k)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TrainError::Parse(format!("{k} missing in: {line}")))
            };
            fn num<T: FromStr>(v: &str) -> Result<T, TrainError> {
                v.parse().map_err(|_| TrainError::Parse(format!("bad number {v}")))
            }
            match kv[0].0 {
                "selection" => {
                    log.selection = match get("selection")? {
                        "dev_bleu" => Selection::DevBleu,
                        "dev_loss" => Selection::DevLoss,
                        s => return Err(TrainError::Parse(format!("unknown selection {s}"))),
                    };
                    log.best_epoch = num(get("best_epoch")?)?;
                    log.initial_dev_metric = num(get("initial_dev_metric")?)?;
                }
                "step" => log.steps.push(StepRecord {
                    step: num(get("step")?)?,
                    lr: num(get("lr")?)?,
                    loss: num(get("loss")?)?,
                }),
                "epoch" => log.epochs.push(EpochRecord {
                    epoch: num(get("epoch")?)?,
                    train_loss: num(get("train_loss")?)?,
                    dev_metric: num(get("dev_metric")?)?,
                }),
                other => return Err(TrainError::Parse(format!("unknown record {other}"))),
            }
        }
        Ok(log)
    }
}

pub struct TrainOutcome {
    /// Model with the selected epoch's learnable parameters.
    pub model: AudioToTextModel,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

fn better(selection: Selection, candidate: f64, best: f64) -> bool {
    match selection {
        Selection::DevBleu => candidate > best,
        Selection::DevLoss => candidate < best,
    }
}

/// Trains the adapter of `model` on `dataset.train`, selecting the epoch
/// with the best dev metric. `encoded` may carry precomputed encoder
/// outputs for the dataset.
pub fn train(
    mut model: AudioToTextModel,
    dataset: &DatasetSplit,
    encoded: Option<&EncodedDataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if dataset.train.is_empty() || dataset.dev.is_empty() {
        return Err(TrainError::Data("train and dev splits must be non-empty".into()));
    }
    if let Some(path) = &config.init_checkpoint {
        model.init_from_checkpoint(&load_checkpoint(path)?)?;
    }
    let owned;
    let encoded = match encoded {
        Some(e) => e,
        None => {
            owned = encode_dataset(&model, dataset)?;
            &owned
        }
    };
    let per_epoch = make_batches(&dataset.train, config.targets, config.batch_size, config.seed, 0)?.len();
    let total = per_epoch * config.epochs;
    config.validate(total)?;

    let metric = |m: &AudioToTextModel| -> Result<f64, TrainError> {
        match config.selection {
            Selection::DevBleu => dev_bleu(m, &dataset.dev, &encoded.dev, config.max_decode_len),
            Selection::DevLoss => dev_loss(m, &dataset.dev, &encoded.dev, config.targets),
        }
    };
    let initial = metric(&model)?;
    let mut log = TrainLog {
        selection: config.selection,
        steps: Vec::with_capacity(total),
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        initial_dev_metric: initial,
    };
    let mut best_metric = initial;
    let mut best_params: Vec<Tensor> = learnable_values(&model);
    let mut opt = AdamW::new(model.parameters(), ParamGroup::Adapter);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let batches = make_batches(&dataset.train, config.targets, config.batch_size, config.seed, epoch)?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let examples: Vec<Example> = batch
                .iter()
                .map(|p| Example {
                    encoded: &encoded.train.utterances[p.item][p.utterance],
                    target: target_tokens(&dataset.train[p.item], config.targets, p.target),
                })
                .collect();
            let mut g = Graph::new();
            let built = model.loss_graph(
                &mut g,
                &examples,
                Some(ParamGroup::Adapter),
                Some(mix(config.seed, 0xD50, step as u64)),
            );
            let (loss, leaves) = match built {
                Err(ModelError::Numerics(NumericsError::NonFinite(_))) => {
                    return Err(TrainError::Divergence { step, loss: f64::NAN })
                }
                other => other?,
            };
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(TrainError::Divergence { step, loss: value });
            }
            g.backward(loss).map_err(ModelError::from)?;
            let mut grads: Vec<(usize, Vec<f64>)> = leaves
                .iter()
                .map(|&(i, v)| (i, g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()])))
                .collect();
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            step += 1;
            let lr = lr_at(step, config.lr_max, config.warmup_steps, total)?;
            opt.step(model.params_mut(), &grads, lr, config.weight_decay)?;
            log.steps.push(StepRecord { step, lr, loss: value });
            epoch_loss += value;
        }
        let dev = metric(&model)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.len() as f64,
            dev_metric: dev,
        });
        if better(config.selection, dev, best_metric) {
            best_metric = dev;
            log.best_epoch = epoch;
            best_params = learnable_values(&model);
        }
    }
    restore_learnable(&mut model, &best_params);
    let checkpoint = Checkpoint::of(
        &model,
        CheckpointMeta {
            epoch: log.best_epoch,
            dev_metric: best_metric,
            seed: config.seed,
        },
    );
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
    })
}

fn learnable_values(model: &AudioToTextModel) -> Vec<Tensor> {
    model
        .parameters()
        .iter()
        .filter(|p| p.learnable())
        .map(|p| p.value.clone())
        .collect()
}

fn restore_learnable(model: &mut AudioToTextModel, values: &[Tensor]) {
    let mut it = values.iter();
    for p in model.params_mut().iter_mut().filter(|p| p.learnable()) {
        p.value = it.next().expect("one value per learnable parameter").clone();
    }
}

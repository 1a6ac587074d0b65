//! Experiment protocols on the synthetic corpus: reference sampling, the
//! rows of the results table, the tier/strategy sweep, the caption-count
//! sweep, text reports and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    attach_captions, build_dataset, CaptionStrategy, CaptionerOracle, CorpusError, DatasetConfig,
    DatasetSplit, Item, Mode, Tier, TokenId, DATASET_FORMAT_VERSION,
};
use crate::metrics::{corpus_bleu, EvalPair, MetricsError, Smoothing};
use crate::model::{
    pretrain_frozen_parts, AudioToTextModel, Checkpoint, ModelConfig, ModelError, PretrainConfig,
    PretrainReport, CHECKPOINT_VERSION,
};
use crate::numerics::Tensor;
use crate::seed::mix;
use crate::train::{
    encode_dataset, train, EncodedDataset, EncodedSplit, TargetSource, TrainConfig, TrainError,
    TrainLog,
};

pub const REPEATS: usize = 5;
/// Reference-count columns of the results table.
pub const MAX_REFS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("missing runs: {}", .0.join(", "))]
    MissingRuns(Vec<String>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceProtocol {
    pub n: usize,
    /// Always keep the reference the input utterance actually says.
    pub include_input: bool,
    pub seed: u64,
}

/// Sorted indices of the sampled references out of `available`.
pub fn sample_reference_indices(
    available: usize,
    own: Option<usize>,
    protocol: &ReferenceProtocol,
) -> Result<Vec<usize>, HarnessError> {
    if protocol.n == 0 || protocol.n > available {
        return Err(HarnessError::Protocol(format!(
            "{} references requested, {available} available",
            protocol.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut chosen = match own.filter(|_| protocol.include_input) {
        Some(o) => {
            if o >= available {
                return Err(HarnessError::Protocol(format!(
                    "input reference {o} out of range for {available}"
                )));
            }
            let others: Vec<usize> = (0..available).filter(|&i| i != o).collect();
            let mut v = vec![o];
            v.extend(sample(&mut rng, others.len(), protocol.n - 1).into_iter().map(|i| others[i]));
            v
        }
        None => sample(&mut rng, available, protocol.n).into_vec(),
    };
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn sample_references<T: Clone>(
    references: &[Vec<T>],
    own: Option<usize>,
    protocol: &ReferenceProtocol,
) -> Result<Vec<Vec<T>>, HarnessError> {
    Ok(sample_reference_indices(references.len(), own, protocol)?
        .into_iter()
        .map(|i| references[i].clone())
        .collect())
}

/// A system output tied to the item it describes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub item: usize,
    /// Reference spoken by the input utterance, if the output came from one.
    pub own_reference: Option<usize>,
    pub tokens: Vec<TokenId>,
}

fn bleu_of(pairs: Vec<EvalPair<TokenId>>) -> Result<f64, HarnessError> {
    Ok(corpus_bleu(&pairs, Smoothing::None)?.score)
}

/// Corpus BLEU of `outputs` with references drawn per output by the protocol.
pub fn protocol_bleu(
    items: &[Item],
    outputs: &[Scored],
    n: usize,
    include_input: bool,
    seed: u64,
) -> Result<f64, HarnessError> {
    let mut pairs = Vec::with_capacity(outputs.len());
    for (j, o) in outputs.iter().enumerate() {
        let item = items
            .get(o.item)
            .ok_or_else(|| HarnessError::Protocol(format!("output for unknown item {}", o.item)))?;
        let protocol = ReferenceProtocol {
            n,
            include_input,
            seed: mix(seed, j as u64, n as u64),
        };
        let refs = sample_references(&item.references, o.own_reference, &protocol)?;
        pairs.push(EvalPair::new(o.tokens.clone(), refs)?);
    }
    bleu_of(pairs)
}

/// One randomly chosen reference as hypothesis against `n` of the others.
pub fn annotator_bleu(items: &[Item], n: usize, seed: u64) -> Result<f64, HarnessError> {
    let mut pairs = Vec::with_capacity(items.len());
    for (j, it) in items.iter().enumerate() {
        let m = it.references.len();
        if n == 0 || n >= m {
            return Err(HarnessError::Protocol(format!(
                "annotator topline holds one of {m} references out, so n must be in 1..={}; got {n}",
                m.saturating_sub(1)
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, j as u64, 0xA77));
        let h = rng.random_range(0..m);
        let others: Vec<usize> = (0..m).filter(|&i| i != h).collect();
        let refs = sample(&mut rng, others.len(), n)
            .into_iter()
            .map(|i| it.references[others[i]].clone())
            .collect();
        pairs.push(EvalPair::new(it.references[h].clone(), refs)?);
    }
    bleu_of(pairs)
}

/// One randomly chosen oracle caption per item against `n` sampled references.
pub fn caption_bleu(items: &[Item], n: usize, seed: u64) -> Result<f64, HarnessError> {
    let outputs: Vec<Scored> = items
        .iter()
        .enumerate()
        .map(|(j, it)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, j as u64, 0xCA7));
            Scored {
                item: j,
                own_reference: None,
                tokens: it.captions[rng.random_range(0..it.captions.len())].clone(),
            }
        })
        .collect();
    protocol_bleu(items, &outputs, n, false, seed)
}

/// Greedy decodes of every utterance of every item.
pub fn model_outputs(
    model: &AudioToTextModel,
    items: &[Item],
    encoded: &EncodedSplit,
    max_len: usize,
) -> Result<Vec<Scored>, HarnessError> {
    let mut slots = Vec::new();
    let mut frames: Vec<&Tensor> = Vec::new();
    for (j, (it, enc)) in items.iter().zip(&encoded.utterances).enumerate() {
        for (u, e) in it.utterances.iter().zip(enc) {
            slots.push((j, u.own_reference));
            frames.push(e);
        }
    }
    let mut tokens = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(64) {
        tokens.extend(model.greedy_batch(chunk, max_len)?);
    }
    Ok(slots
        .into_iter()
        .zip(tokens)
        .map(|((item, own), tokens)| Scored {
            item,
            own_reference: Some(own),
            tokens,
        })
        .collect())
}

/// Mean and twice the sample standard deviation over repeats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub two_sigma: f64,
}

impl Cell {
    pub fn from_repeats(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "a cell needs at least one repeat");
        if values.iter().all(|&v| v == values[0]) {
            return Self {
                mean: values[0],
                two_sigma: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            two_sigma: 2.0 * var.sqrt(),
        }
    }
}

/// One table row: per reference count, the repeat values and their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub name: String,
    /// Index `n - 1`; empty where the protocol is undefined.
    pub repeats: Vec<Vec<f64>>,
}

impl RowResult {
    /// Evaluates `score(n, seed)` for every `n` and repeat; `Ok(None)` marks
    /// an undefined cell.
    pub fn collect(
        name: impl Into<String>,
        master_seed: u64,
        mut score: impl FnMut(usize, u64) -> Result<Option<f64>, HarnessError>,
    ) -> Result<Self, HarnessError> {
        let mut repeats = Vec::with_capacity(MAX_REFS);
        for n in 1..=MAX_REFS {
            let mut values = Vec::with_capacity(REPEATS);
            for r in 0..REPEATS {
                match score(n, mix(master_seed, 0x7E9 + r as u64, n as u64))? {
                    Some(v) => values.push(v),
                    None => break,
                }
            }
            repeats.push(values);
        }
        Ok(Self {
            name: name.into(),
            repeats,
        })
    }

    pub fn cell(&self, n: usize) -> Option<Cell> {
        self.repeats
            .get(n.checked_sub(1)?)
            .filter(|v| !v.is_empty())
            .map(|v| Cell::from_repeats(v))
    }

    pub fn cells(&self) -> Vec<Option<Cell>> {
        (1..=MAX_REFS).map(|n| self.cell(n)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    AnnotatorTopline,
    SupervisedTranslationTopline,
    GeneratedCaptionsTopline,
    VgsTranslation,
    VgsParaphrase,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            RowKind::AnnotatorTopline => "annotator_topline",
            RowKind::SupervisedTranslationTopline => "supervised_translation_topline",
            RowKind::GeneratedCaptionsTopline => "generated_captions_topline",
            RowKind::VgsTranslation => "vgs_translation",
            RowKind::VgsParaphrase => "vgs_paraphrase",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub row: RowKind,
    pub tier: Tier,
    pub strategy: CaptionStrategy,
    pub repeats: usize,
}

impl ExperimentSpec {
    pub fn new(row: RowKind, tier: Tier, strategy: CaptionStrategy) -> Self {
        Self {
            row,
            tier,
            strategy,
            repeats: REPEATS,
        }
    }

    /// The six rows of the results table for one captioner tier.
    pub fn table_rows(tier: Tier) -> Vec<ExperimentSpec> {
        use CaptionStrategy::*;
        vec![
            Self::new(RowKind::AnnotatorTopline, tier, DiverseTemplates),
            Self::new(RowKind::SupervisedTranslationTopline, tier, DiverseTemplates),
            Self::new(RowKind::GeneratedCaptionsTopline, tier, DiverseTemplates),
            Self::new(RowKind::VgsTranslation, tier, DeterministicBest),
            Self::new(RowKind::VgsTranslation, tier, DiverseTemplates),
            Self::new(RowKind::VgsParaphrase, tier, DiverseTemplates),
        ]
    }

    pub fn name(&self) -> String {
        match self.row {
            RowKind::AnnotatorTopline | RowKind::SupervisedTranslationTopline => self.row.name().to_string(),
            _ => format!("{}[{}/{}]", self.row.name(), self.tier.name(), self.strategy.name()),
        }
    }
}

/// What a trained run learns from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunSource {
    Captions {
        tier: Tier,
        strategy: CaptionStrategy,
        k: usize,
    },
    /// Ground-truth references (supervised topline).
    References,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunSpec {
    pub mode: Mode,
    pub source: RunSource,
}

impl RunSpec {
    pub fn captions(mode: Mode, tier: Tier, strategy: CaptionStrategy, k: usize) -> Self {
        Self {
            mode,
            source: RunSource::Captions { tier, strategy, k },
        }
    }

    pub fn supervised(mode: Mode) -> Self {
        Self {
            mode,
            source: RunSource::References,
        }
    }

    pub fn name(&self) -> String {
        match self.source {
            RunSource::Captions { tier, strategy, k } => {
                format!("{}/{}/{}/k{k}", self.mode.name(), tier.name(), strategy.name())
            }
            RunSource::References => format!("{}/supervised", self.mode.name()),
        }
    }
}

/// Sizes and recipe shared by every run of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentScale {
    /// Corpus template; mode and oracle are set per run.
    pub corpus: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Training template; mode, targets and initialization are set per run.
    pub train: TrainConfig,
    /// Start translation runs from the matching paraphrase run.
    pub init_translation_from_paraphrase: bool,
}

impl ExperimentScale {
    /// Training recipe as published: lr 1e-4, 200 warmup steps, 50 epochs.
    pub fn published_recipe() -> Self {
        Self {
            corpus: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            init_translation_from_paraphrase: true,
        }
    }

    /// Shortened schedule that fits the whole suite on one core: ten times
    /// the peak rate, a 50-step warmup, four epochs per run.
    pub fn reference() -> Self {
        let mut s = Self::published_recipe();
        s.train.lr_max = 3e-3;
        s.train.warmup_steps = 50;
        s.train.epochs = 4;
        s
    }

    /// Seconds-scale configuration for tests.
    pub fn smoke() -> Self {
        let mut s = Self::reference();
        s.corpus.n_train = 48;
        s.corpus.n_dev = 12;
        s.corpus.n_test = 12;
        s.model.d_text = 16;
        s.model.n_blocks = 1;
        s.model.n_heads = 2;
        s.model.encoder_blocks = 1;
        s.model.encoder_heads = 2;
        s.pretrain.lm_max_epochs = 2;
        s.pretrain.enc_epochs = 1;
        s.pretrain.enc_max_utterances = 48;
        s.train.epochs = 2;
        s.train.warmup_steps = 2;
        s
    }

    /// Overrides one dotted field, e.g. `train.lr_max = 1e-4` or
    /// `corpus.oracle.tier = B`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let mut root = serde_json::to_value(&*self).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| HarnessError::Config(format!("unknown key {key}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(root).map_err(|e| HarnessError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<(), HarnessError> {
        entries.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Every leaf field as `dotted.key = value` lines, loadable by `apply`.
    pub fn to_kv(&self) -> String {
        fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
            match v {
                serde_json::Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                serde_json::Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
                other => out.push_str(&format!("{prefix} = {other}\n")),
            }
        }
        let mut out = String::new();
        walk("", &serde_json::to_value(self).expect("serializable"), &mut out);
        out
    }
}

/// `key = value` lines; blank lines and `#` comments ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Parse(format!("line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Pretrains the frozen decoder on the translation references and the
/// frozen encoder on audio from both modes, as every suite run shares them.
pub fn pretrain_shared(
    scale: &ExperimentScale,
    seed: u64,
    translation: &DatasetSplit,
    paraphrase: &DatasetSplit,
) -> Result<(AudioToTextModel, PretrainReport), HarnessError> {
    let lm_corpus: Vec<Vec<TokenId>> = translation
        .train
        .iter()
        .flat_map(|it| it.references.iter().cloned())
        .collect();
    let enc_corpus: Vec<&Tensor> = translation
        .train
        .iter()
        .zip(&paraphrase.train)
        .flat_map(|(t, p)| [&t.utterances[0].audio.frames, &p.utterances[0].audio.frames])
        .collect();
    let mut model_config = scale.model.clone();
    model_config.vocab_size = translation.world.vocab.len();
    model_config.d_audio = scale.corpus.d_audio;
    Ok(pretrain_frozen_parts(
        &model_config,
        &lm_corpus,
        &enc_corpus,
        mix(seed, 0xF0, 0),
        &scale.pretrain,
    )?)
}

/// A finished training run and its test-set decodes.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub name: String,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
    pub test_outputs: Vec<Scored>,
    pub seconds: f64,
}

struct Base {
    dataset: DatasetSplit,
    encoded: EncodedDataset,
}

/// Shared state of a suite: one pretrained frozen model, both corpus modes
/// with cached encoder outputs, and every run trained so far.
pub struct Lab {
    scale: ExperimentScale,
    seed: u64,
    frozen: AudioToTextModel,
    pretrain_report: PretrainReport,
    translation: Base,
    paraphrase: Base,
    runs: BTreeMap<String, RunRecord>,
    log: Option<Box<dyn FnMut(&str)>>,
}

impl Lab {
    pub fn new(scale: ExperimentScale, seed: u64) -> Result<Self, HarnessError> {
        let build = |mode| {
            build_dataset(&DatasetConfig {
                mode,
                ..scale.corpus.clone()
            })
        };
        let translation = build(Mode::Translation)?;
        let paraphrase = build(Mode::Paraphrase)?;
        let (frozen, pretrain_report) = pretrain_shared(&scale, seed, &translation, &paraphrase)?;
        let encode = |dataset: DatasetSplit| -> Result<Base, HarnessError> {
            let encoded = encode_dataset(&frozen, &dataset)?;
            Ok(Base { dataset, encoded })
        };
        let translation = encode(translation)?;
        let paraphrase = encode(paraphrase)?;
        Ok(Self {
            scale,
            seed,
            frozen,
            pretrain_report,
            translation,
            paraphrase,
            runs: BTreeMap::new(),
            log: None,
        })
    }

    /// Progress messages (one per finished run) go to `sink`.
    pub fn with_progress(mut self, sink: impl FnMut(&str) + 'static) -> Self {
        self.log = Some(Box::new(sink));
        self
    }

    pub fn scale(&self) -> &ExperimentScale {
        &self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frozen_model(&self) -> &AudioToTextModel {
        &self.frozen
    }

    pub fn pretrain_report(&self) -> &PretrainReport {
        &self.pretrain_report
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.values()
    }

    fn base(&self, mode: Mode) -> &Base {
        match mode {
            Mode::Translation => &self.translation,
            Mode::Paraphrase => &self.paraphrase,
        }
    }

    pub fn dataset(&self, mode: Mode) -> &DatasetSplit {
        &self.base(mode).dataset
    }

    /// The base dataset of `mode` with captions from the given oracle.
    pub fn captioned(
        &self,
        mode: Mode,
        tier: Tier,
        strategy: CaptionStrategy,
        k: usize,
    ) -> Result<DatasetSplit, HarnessError> {
        Ok(attach_captions(
            &self.base(mode).dataset,
            CaptionerOracle::new(tier, strategy),
            k,
        )?)
    }

    /// Paraphrase run with the same targets that a translation run starts
    /// from, when enabled.
    pub fn init_run(&self, spec: &RunSpec) -> Option<RunSpec> {
        if spec.mode != Mode::Translation || !self.scale.init_translation_from_paraphrase {
            return None;
        }
        Some(RunSpec {
            mode: Mode::Paraphrase,
            source: spec.source,
        })
    }

    /// Trains `spec` (and its initialization run) unless already done.
    pub fn run(&mut self, spec: &RunSpec) -> Result<&RunRecord, HarnessError> {
        let name = spec.name();
        if !self.runs.contains_key(&name) {
            let record = self.train_run(spec)?;
            if let Some(sink) = self.log.as_mut() {
                sink(&format!(
                    "{name}: best epoch {} dev {:.2} ({:.0}s)",
                    record.log.best_epoch,
                    record.log.best_metric(),
                    record.seconds
                ));
            }
            self.runs.insert(name.clone(), record);
        }
        Ok(&self.runs[&name])
    }

    fn train_run(&mut self, spec: &RunSpec) -> Result<RunRecord, HarnessError> {
        let init = match self.init_run(spec) {
            Some(p) => Some(self.run(&p)?.checkpoint.clone()),
            None => None,
        };
        let started = Instant::now();
        let (dataset, targets) = match spec.source {
            RunSource::Captions { tier, strategy, k } => {
                (self.captioned(spec.mode, tier, strategy, k)?, TargetSource::Captions)
            }
            RunSource::References => (self.dataset(spec.mode).clone(), TargetSource::References),
        };
        let mut model = self.frozen.clone();
        if let Some(c) = &init {
            model.init_from_checkpoint(c)?;
        }
        let config = TrainConfig {
            mode: spec.mode,
            targets,
            seed: self.seed,
            init_checkpoint: None,
            ..self.scale.train.clone()
        };
        let base = self.base(spec.mode);
        let outcome = train(model, &dataset, Some(&base.encoded), &config)?;
        let test_outputs = model_outputs(&outcome.model, &dataset.test, &base.encoded.test, config.max_decode_len)?;
        Ok(RunRecord {
            name: spec.name(),
            log: outcome.log,
            checkpoint: outcome.checkpoint,
            test_outputs,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Decodes of the zero-initialized adapter.
    pub fn untrained_outputs(&self, mode: Mode) -> Result<Vec<Scored>, HarnessError> {
        let base = self.base(mode);
        model_outputs(
            &self.frozen,
            &base.dataset.test,
            &base.encoded.test,
            self.scale.train.max_decode_len,
        )
    }

    fn outputs_row(&self, name: String, mode: Mode, outputs: &[Scored]) -> Result<RowResult, HarnessError> {
        let items = &self.dataset(mode).test;
        RowResult::collect(name, self.seed, |n, seed| {
            protocol_bleu(items, outputs, n, true, seed).map(Some)
        })
    }

    pub fn untrained_row(&self, mode: Mode) -> Result<RowResult, HarnessError> {
        let outputs = self.untrained_outputs(mode)?;
        self.outputs_row(format!("untrained[{}]", mode.name()), mode, &outputs)
    }

    /// Test-set row of a trained run under the include-input protocol.
    pub fn run_row(&mut self, spec: &RunSpec) -> Result<RowResult, HarnessError> {
        let outputs = self.run(spec)?.test_outputs.clone();
        self.outputs_row(spec.name(), spec.mode, &outputs)
    }

    pub fn annotator_row(&self) -> Result<RowResult, HarnessError> {
        let items = &self.dataset(Mode::Translation).test;
        let limit = items.iter().map(|it| it.references.len()).min().unwrap_or(0);
        RowResult::collect(RowKind::AnnotatorTopline.name(), self.seed, |n, seed| {
            if n >= limit {
                Ok(None)
            } else {
                annotator_bleu(items, n, seed).map(Some)
            }
        })
    }

    pub fn caption_row(&self, tier: Tier, strategy: CaptionStrategy) -> Result<RowResult, HarnessError> {
        let data = self.captioned(Mode::Translation, tier, strategy, self.scale.corpus.k_captions)?;
        let name = ExperimentSpec::new(RowKind::GeneratedCaptionsTopline, tier, strategy).name();
        RowResult::collect(name, self.seed, |n, seed| caption_bleu(&data.test, n, seed).map(Some))
    }

    pub fn run_experiment(&mut self, spec: &ExperimentSpec) -> Result<RowResult, HarnessError> {
        let k = self.scale.corpus.k_captions;
        let mut row = match spec.row {
            RowKind::AnnotatorTopline => self.annotator_row()?,
            RowKind::GeneratedCaptionsTopline => self.caption_row(spec.tier, spec.strategy)?,
            RowKind::SupervisedTranslationTopline => self.run_row(&RunSpec::supervised(Mode::Translation))?,
            RowKind::VgsTranslation => {
                self.run_row(&RunSpec::captions(Mode::Translation, spec.tier, spec.strategy, k))?
            }
            RowKind::VgsParaphrase => {
                self.run_row(&RunSpec::captions(Mode::Paraphrase, spec.tier, spec.strategy, k))?
            }
        };
        row.name = spec.name();
        Ok(row)
    }

    pub fn table(&mut self, specs: &[ExperimentSpec]) -> Result<ReportTable, HarnessError> {
        let rows = specs
            .iter()
            .map(|s| self.run_experiment(s))
            .collect::<Result<Vec<_>, _>>()?;
        ReportTable::assemble(&specs.iter().map(ExperimentSpec::name).collect::<Vec<_>>(), &rows)
    }

    /// Every tier × caption strategy: caption quality and trained BLEU in
    /// both modes, all at n = 5.
    pub fn sensitivity_sweep(&mut self) -> Result<SweepGrid, HarnessError> {
        let k = self.scale.corpus.k_captions;
        let mut cells = Vec::with_capacity(9);
        for tier in Tier::ALL {
            for strategy in CaptionStrategy::ALL {
                let caption = self.caption_row(tier, strategy)?;
                let paraphrase = self.run_row(&RunSpec::captions(Mode::Paraphrase, tier, strategy, k))?;
                let translation = self.run_row(&RunSpec::captions(Mode::Translation, tier, strategy, k))?;
                let at5 = |r: &RowResult| r.cell(MAX_REFS).map(|c| c.mean).unwrap_or(f64::NAN);
                cells.push(SweepCell {
                    tier,
                    strategy,
                    caption_bleu: at5(&caption),
                    translation_bleu: at5(&translation),
                    paraphrase_bleu: at5(&paraphrase),
                });
            }
        }
        Ok(SweepGrid { cells })
    }

    /// Translation BLEU at n = 5 for each caption count in `ks`.
    pub fn caption_count_sweep(
        &mut self,
        tier: Tier,
        strategy: CaptionStrategy,
        ks: &[usize],
    ) -> Result<CountSweep, HarnessError> {
        let mut points = Vec::with_capacity(ks.len());
        for &k in ks {
            let row = self.run_row(&RunSpec::captions(Mode::Translation, tier, strategy, k))?;
            points.push((k, row.cell(MAX_REFS).map(|c| c.mean).unwrap_or(f64::NAN)));
        }
        Ok(CountSweep { tier, strategy, points })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub tier: Tier,
    pub strategy: CaptionStrategy,
    pub caption_bleu: f64,
    pub translation_bleu: f64,
    pub paraphrase_bleu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    fn argmax(&self, key: impl Fn(&SweepCell) -> f64) -> Option<&SweepCell> {
        // ties go to the earlier cell
        self.cells
            .iter()
            .rev()
            .max_by(|a, b| key(a).total_cmp(&key(b)))
    }

    pub fn best_translation(&self) -> Option<&SweepCell> {
        self.argmax(|c| c.translation_bleu)
    }

    pub fn best_caption(&self) -> Option<&SweepCell> {
        self.argmax(|c| c.caption_bleu)
    }

    /// True when the best captioner is not the best teacher.
    pub fn argmax_differs(&self) -> bool {
        match (self.best_caption(), self.best_translation()) {
            (Some(a), Some(b)) => (a.tier, a.strategy) != (b.tier, b.strategy),
            _ => false,
        }
    }

    pub fn to_plot_data(&self) -> String {
        let mut s = String::from("tier\tstrategy\tcaption_bleu\ttranslation_bleu\tparaphrase_bleu\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.tier.name(),
                c.strategy.name(),
                c.caption_bleu,
                c.translation_bleu,
                c.paraphrase_bleu
            ));
        }
        if self.argmax_differs() {
            s.push_str("# best caption cell and best translation cell differ\n");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountSweep {
    pub tier: Tier,
    pub strategy: CaptionStrategy,
    /// `(k, BLEU at n = 5)`.
    pub points: Vec<(usize, f64)>,
}

impl CountSweep {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == k).map(|p| p.1)
    }

    /// `(max − min over k ≥ from, gain from k = 1 to k = from)`.
    pub fn plateau(&self, from: usize) -> Option<(f64, f64)> {
        let tail: Vec<f64> = self.points.iter().filter(|p| p.0 >= from).map(|p| p.1).collect();
        if tail.is_empty() {
            return None;
        }
        let spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - tail.iter().cloned().fold(f64::INFINITY, f64::min);
        Some((spread, self.at(from)? - self.at(1)?))
    }

    pub fn to_plot_data(&self) -> String {
        let mut s = format!("# {}/{}\nk\tbleu_n5\n", self.tier.name(), self.strategy.name());
        for (k, b) in &self.points {
            s.push_str(&format!("{k}\t{b}\n"));
        }
        s
    }
}

/// Results-table text: one row per experiment, columns n = 1..5 holding
/// `mean±2σ` or `n/a`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<(String, Vec<Option<Cell>>)>,
}

impl ReportTable {
    /// Orders `results` by `expected`, listing any expected row without a
    /// result.
    pub fn assemble(expected: &[String], results: &[RowResult]) -> Result<Self, HarnessError> {
        let missing: Vec<String> = expected
            .iter()
            .filter(|e| !results.iter().any(|r| &r.name == *e))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(HarnessError::MissingRuns(missing));
        }
        Ok(Self {
            rows: expected
                .iter()
                .map(|e| {
                    let r = results.iter().find(|r| &r.name == e).expect("checked");
                    (e.clone(), r.cells())
                })
                .collect(),
        })
    }

    pub fn row(&self, name: &str) -> Option<&[Option<Cell>]> {
        self.rows.iter().find(|r| r.0 == name).map(|r| r.1.as_slice())
    }

    /// Two-decimal rendering for reading; `Display` is the exact form.
    pub fn pretty(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(3).max(3);
        let mut s = format!("{:width$}", "row");
        for n in 1..=MAX_REFS {
            s.push_str(&format!("  {:>13}", format!("n={n}")));
        }
        s.push('\n');
        for (name, cells) in &self.rows {
            s.push_str(&format!("{name:width$}"));
            for c in cells {
                let text = match c {
                    Some(c) => format!("{:.2}±{:.2}", c.mean, c.two_sigma),
                    None => "n/a".into(),
                };
                s.push_str(&format!("  {text:>13}"));
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for ReportTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row")?;
        for n in 1..=MAX_REFS {
            write!(f, "\tn={n}")?;
        }
        writeln!(f)?;
        for (name, cells) in &self.rows {
            write!(f, "{name}")?;
            for c in cells {
                match c {
                    Some(c) => write!(f, "\t{}±{}", c.mean, c.two_sigma)?,
                    None => write!(f, "\tn/a")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for ReportTable {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |line: usize, what: &str| HarnessError::Parse(format!("line {line}: {what}"));
        let mut lines = s.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.starts_with("row\t") => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let mut fields = line.split('\t');
            let name = fields.next().ok_or_else(|| bad(i + 1, "empty line"))?.to_string();
            let cells = fields
                .map(|f| {
                    if f == "n/a" {
                        return Ok(None);
                    }
                    let (m, d) = f.split_once('±').ok_or_else(|| bad(i + 1, "cell without ±"))?;
                    Ok(Some(Cell {
                        mean: m.parse().map_err(|_| bad(i + 1, "bad mean"))?,
                        two_sigma: d.parse().map_err(|_| bad(i + 1, "bad dispersion"))?,
                    }))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            if cells.len() != MAX_REFS {
                return Err(bad(i + 1, "wrong number of cells"));
            }
            rows.push((name, cells));
        }
        Ok(Self { rows })
    }
}

/// What produced a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub versions: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(command: &str) -> Self {
        let versions = BTreeMap::from([
            ("imgst-core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("dataset_format".to_string(), DATASET_FORMAT_VERSION.to_string()),
            ("checkpoint_format".to_string(), CHECKPOINT_VERSION.to_string()),
        ]);
        Self {
            command: command.to_string(),
            versions,
            seeds: BTreeMap::new(),
            config: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))
    }
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(io_err(&path))
}

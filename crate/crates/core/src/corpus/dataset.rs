use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    oracle_captions, read_audio, write_audio, AudioFeatures, AudioSynth, CaptionStrategy,
    CaptionerOracle, CorpusError, Language, Scene, SceneSampler, Tier, TokenId, Utterance, World,
    FRAME_RATE,
};
use crate::seed::mix;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Paraphrase: speech and captions share the target language, five spoken
/// captions per scene. Translation: speech is in the source language, one
/// spoken utterance per scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Paraphrase,
    Translation,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Paraphrase => "paraphrase",
            Mode::Translation => "translation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paraphrase" => Some(Mode::Paraphrase),
            "translation" => Some(Mode::Translation),
            _ => None,
        }
    }

    pub fn spoken_language(self) -> Language {
        match self {
            Mode::Paraphrase => Language::Target,
            Mode::Translation => Language::Source,
        }
    }

    /// Spoken utterances per scene.
    pub fn utterances_per_scene(self) -> usize {
        match self {
            Mode::Paraphrase => 5,
            Mode::Translation => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub mode: Mode,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub k_captions: usize,
    pub oracle: CaptionerOracle,
    pub n_references: usize,
    pub d_audio: usize,
    pub noise_sigma: f64,
    pub proto_std: f64,
    /// All target templates identical (collapse case for sanity checks).
    #[serde(default)]
    pub degenerate_grammar: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Translation,
            n_train: 2000,
            n_dev: 250,
            n_test: 250,
            k_captions: 5,
            oracle: CaptionerOracle::new(Tier::A, CaptionStrategy::DiverseTemplates),
            n_references: 5,
            d_audio: 48,
            noise_sigma: 0.3,
            proto_std: 0.24,
            degenerate_grammar: false,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(CorpusError::Config("every split needs at least one scene".into()));
        }
        if self.k_captions == 0 {
            return Err(CorpusError::Config("k_captions must be at least 1".into()));
        }
        if self.n_references == 0 || self.n_references > 6 {
            return Err(CorpusError::Config(format!(
                "n_references {} outside 1..=6",
                self.n_references
            )));
        }
        if self.mode == Mode::Paraphrase && self.n_references < self.mode.utterances_per_scene() {
            return Err(CorpusError::Config(
                "paraphrase mode needs a reference per spoken caption".into(),
            ));
        }
        if self.d_audio == 0 {
            return Err(CorpusError::Config("d_audio must be positive".into()));
        }
        self.oracle.validate()
    }

    pub fn world(&self) -> World {
        if self.degenerate_grammar {
            World::degenerate()
        } else {
            World::default()
        }
    }

    /// Prototype table shared by every dataset built from this seed.
    pub fn synth(&self, world: &World) -> AudioSynth {
        AudioSynth::new(&world.vocab, self.d_audio, self.proto_std, mix(self.seed, 0xA0D1, 0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpokenUtterance {
    pub utterance: Utterance,
    pub audio: AudioFeatures,
    /// Index into the item's references of the caption this utterance says.
    pub own_reference: usize,
}

/// One scene with its speech, references and oracle captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub scene: Scene,
    pub utterances: Vec<SpokenUtterance>,
    pub references: Vec<Vec<TokenId>>,
    pub captions: Vec<Vec<TokenId>>,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub config: DatasetConfig,
    pub world: World,
    pub train: Vec<Item>,
    pub dev: Vec<Item>,
    pub test: Vec<Item>,
}

impl DatasetSplit {
    pub fn split(&self, name: &str) -> Option<&[Item]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn synth(&self) -> AudioSynth {
        self.config.synth(&self.world)
    }

    pub fn all_items(&self) -> impl Iterator<Item = &Item> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Deterministic corpus generation: a pure function of `config`.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetSplit, CorpusError> {
    config.validate()?;
    let world = config.world();
    let synth = config.synth(&world);
    let mut sampler = SceneSampler::new(world.inventories(), mix(config.seed, 0x5CE4E, 0))?;
    let sizes = [config.n_train, config.n_dev, config.n_test];
    let mut splits: Vec<Vec<Item>> = Vec::new();
    for size in sizes {
        let mut items = Vec::with_capacity(size);
        for _ in 0..size {
            let scene = sampler.sample();
            items.push(build_item(config, &world, &synth, scene)?);
        }
        splits.push(items);
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetSplit {
        config: config.clone(),
        world,
        train,
        dev,
        test,
    })
}

fn build_item(
    config: &DatasetConfig,
    world: &World,
    synth: &AudioSynth,
    scene: Scene,
) -> Result<Item, CorpusError> {
    let references = (0..config.n_references)
        .map(|t| world.target.realize(&scene, t).map(|u| u.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x17E3, scene.id));
    let mut utterances = Vec::new();
    match config.mode {
        Mode::Paraphrase => {
            for i in 0..config.mode.utterances_per_scene() {
                let utterance = world.target.realize(&scene, i)?;
                let audio = synth.synthesize(
                    scene.id,
                    &utterance.tokens,
                    mix(config.seed, scene.id, i as u64),
                    config.noise_sigma,
                )?;
                utterances.push(SpokenUtterance {
                    utterance,
                    audio,
                    own_reference: i,
                });
            }
        }
        Mode::Translation => {
            // the spoken sentence translates one particular reference
            let own_reference = rng.random_range(0..config.n_references);
            let template = own_reference % world.source.templates_for(&scene).len();
            let utterance = world.source.realize(&scene, template)?;
            let audio = synth.synthesize(
                scene.id,
                &utterance.tokens,
                mix(config.seed, scene.id, 0),
                config.noise_sigma,
            )?;
            utterances.push(SpokenUtterance {
                utterance,
                audio,
                own_reference,
            });
        }
    }
    let captions = oracle_captions(
        &world.target,
        &scene,
        &config.oracle,
        config.k_captions,
        mix(config.seed, 0xCA9, scene.id),
    )?;
    Ok(Item {
        scene,
        utterances,
        references,
        captions,
    })
}

/// Replaces every item's captions with a fresh draw from `oracle`.
pub fn attach_captions(
    dataset: &DatasetSplit,
    oracle: CaptionerOracle,
    k: usize,
) -> Result<DatasetSplit, CorpusError> {
    let mut out = dataset.clone();
    out.config.oracle = oracle;
    out.config.k_captions = k;
    out.config.validate()?;
    let seed = out.config.seed;
    for item in out
        .train
        .iter_mut()
        .chain(out.dev.iter_mut())
        .chain(out.test.iter_mut())
    {
        item.captions = oracle_captions(
            &out.world.target,
            &item.scene,
            &oracle,
            k,
            mix(seed, 0xCA9, item.scene.id),
        )?;
    }
    Ok(out)
}

/// Mean over caption pairs of the Jaccard distance between unigram sets.
pub fn distinct_unigram_rate(captions: &[Vec<TokenId>]) -> f64 {
    let sets: Vec<HashSet<TokenId>> = captions.iter().map(|c| c.iter().copied().collect()).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let union = sets[i].union(&sets[j]).count();
            let inter = sets[i].intersection(&sets[j]).count();
            if union > 0 {
                total += 1.0 - inter as f64 / union as f64;
            }
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    format_version: u32,
    scene: Scene,
    split: String,
    language: Language,
    tokens: Vec<TokenId>,
    text: String,
    template_id: usize,
    own_reference: usize,
    captions: Vec<Vec<TokenId>>,
    references: Vec<Vec<TokenId>>,
    audio_path: String,
}

/// Writes `config.json`, one `<split>.jsonl` per split and the raw audio
/// matrices under `audio/<split>/`.
pub fn write_dataset(dataset: &DatasetSplit, dir: &Path) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let config_path = dir.join("config.json");
    let cfg = serde_json::to_string_pretty(&dataset.config)
        .map_err(|e| CorpusError::Data(e.to_string()))?;
    std::fs::write(&config_path, cfg + "\n").map_err(|e| CorpusError::io(&config_path, e))?;
    for name in SPLITS {
        let audio_dir = dir.join("audio").join(name);
        std::fs::create_dir_all(&audio_dir).map_err(|e| CorpusError::io(&audio_dir, e))?;
        let path = dir.join(format!("{name}.jsonl"));
        let file = std::fs::File::create(&path).map_err(|e| CorpusError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for item in dataset.split(name).expect("known split") {
            for (u, spoken) in item.utterances.iter().enumerate() {
                let rel = PathBuf::from("audio")
                    .join(name)
                    .join(format!("{}_{u}.f64", item.scene.id));
                write_audio(&dir.join(&rel), &spoken.audio.frames)?;
                let record = Record {
                    format_version: DATASET_FORMAT_VERSION,
                    scene: item.scene,
                    split: name.to_string(),
                    language: spoken.utterance.language,
                    tokens: spoken.utterance.tokens.clone(),
                    text: dataset.world.vocab.detokenize(&spoken.utterance.tokens),
                    template_id: spoken.utterance.template_id,
                    own_reference: spoken.own_reference,
                    captions: item.captions.clone(),
                    references: item.references.clone(),
                    audio_path: rel.to_string_lossy().replace('\\', "/"),
                };
                let line =
                    serde_json::to_string(&record).map_err(|e| CorpusError::Data(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| CorpusError::io(&path, e))?;
            }
        }
        out.flush().map_err(|e| CorpusError::io(&path, e))?;
    }
    Ok(())
}

/// Reads back a directory produced by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit, CorpusError> {
    let config_path = dir.join("config.json");
    let text =
        std::fs::read_to_string(&config_path).map_err(|e| CorpusError::io(&config_path, e))?;
    let config: DatasetConfig =
        serde_json::from_str(&text).map_err(|e| CorpusError::Data(format!("config.json: {e}")))?;
    let world = config.world();
    let mut splits = Vec::new();
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        let file = std::fs::File::open(&path).map_err(|e| CorpusError::io(&path, e))?;
        let mut items: Vec<Item> = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CorpusError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line).map_err(|e| {
                CorpusError::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if r.format_version != DATASET_FORMAT_VERSION {
                return Err(CorpusError::Data(format!(
                    "{}:{}: unsupported format version {}",
                    path.display(),
                    lineno + 1,
                    r.format_version
                )));
            }
            let frames = read_audio(&dir.join(&r.audio_path))?;
            let spoken = SpokenUtterance {
                utterance: Utterance {
                    scene_id: r.scene.id,
                    language: r.language,
                    tokens: r.tokens,
                    template_id: r.template_id,
                },
                audio: AudioFeatures {
                    scene_id: r.scene.id,
                    frames,
                    frame_rate: FRAME_RATE,
                },
                own_reference: r.own_reference,
            };
            match items.last_mut() {
                Some(last) if last.scene.id == r.scene.id => last.utterances.push(spoken),
                _ => items.push(Item {
                    scene: r.scene,
                    utterances: vec![spoken],
                    references: r.references,
                    captions: r.captions,
                }),
            }
        }
        splits.push(items);
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetSplit {
        config,
        world,
        train,
        dev,
        test,
    })
}

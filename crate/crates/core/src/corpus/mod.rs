//! Synthetic stand-in for an image-caption-speech corpus.
//!
//! Scenes play the role of images, two template grammars realize them in a
//! source and a target language, a noisy captioner oracle describes scenes
//! in the target language, and simulated frames play the role of speech.

mod audio;
mod dataset;
mod grammar;
mod oracle;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use audio::{read_audio, write_audio, AudioFeatures, AudioSynth, FRAME_RATE};
pub use dataset::{
    attach_captions, build_dataset, distinct_unigram_rate, load_dataset, write_dataset,
    DatasetConfig, DatasetSplit, Item, Mode, SpokenUtterance, DATASET_FORMAT_VERSION,
};
pub use grammar::{Grammar, Inventories, Language, Piece, Template};
pub use oracle::{oracle_captions, CaptionStrategy, CaptionerOracle, Tier};

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("config error: {0}")]
    Config(String),
    #[error("grammar error: {0}")]
    Grammar(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Agent,
    Attribute,
    Action,
    Object,
    Location,
}

impl Slot {
    pub const ALL: [Slot; 5] = [
        Slot::Agent,
        Slot::Attribute,
        Slot::Action,
        Slot::Object,
        Slot::Location,
    ];
}

/// The semantic content a caption describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub agent: usize,
    pub attribute: usize,
    pub action: usize,
    pub object: Option<usize>,
    pub location: usize,
}

impl Scene {
    pub fn slot(&self, slot: Slot) -> Option<usize> {
        match slot {
            Slot::Agent => Some(self.agent),
            Slot::Attribute => Some(self.attribute),
            Slot::Action => Some(self.action),
            Slot::Object => self.object,
            Slot::Location => Some(self.location),
        }
    }

    pub(crate) fn set_slot(&mut self, slot: Slot, value: usize) {
        match slot {
            Slot::Agent => self.agent = value,
            Slot::Attribute => self.attribute = value,
            Slot::Action => self.action = value,
            Slot::Object => self.object = Some(value),
            Slot::Location => self.location = value,
        }
    }

    pub fn is_valid(&self, inv: &Inventories) -> bool {
        Slot::ALL.iter().all(|&s| match self.slot(s) {
            Some(v) => v < inv.size(s),
            None => s == Slot::Object,
        })
    }
}

/// One linguistic realization of a scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub scene_id: u64,
    pub language: Language,
    pub tokens: Vec<TokenId>,
    pub template_id: usize,
}

/// Token strings for both languages plus the two specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        assert_eq!(v.intern("<bos>"), BOS);
        assert_eq!(v.intern("<eos>"), EOS);
        v
    }
}

impl Vocabulary {
    pub fn intern(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Space-joined display form.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`Vocabulary::detokenize`] for in-vocabulary strings.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| CorpusError::Vocabulary(format!("unknown word {w:?}")))
            })
            .collect()
    }
}

/// Shared linguistic world: vocabulary, both grammars and the confusability
/// graph used by the captioner oracle.
#[derive(Clone, Debug)]
pub struct World {
    pub vocab: Vocabulary,
    pub target: Grammar,
    pub source: Grammar,
}

impl Default for World {
    fn default() -> Self {
        let mut vocab = Vocabulary::default();
        let target = Grammar::target(&mut vocab);
        let source = Grammar::source(&mut vocab);
        Self {
            vocab,
            target,
            source,
        }
    }
}

impl World {
    /// World whose target templates are all identical.
    pub fn degenerate() -> Self {
        let mut vocab = Vocabulary::default();
        let target = Grammar::degenerate_target(&mut vocab);
        let source = Grammar::source(&mut vocab);
        Self {
            vocab,
            target,
            source,
        }
    }

    pub fn inventories(&self) -> Inventories {
        self.target.inventories()
    }

    pub fn grammar(&self, language: Language) -> &Grammar {
        match language {
            Language::Source => &self.source,
            Language::Target => &self.target,
        }
    }
}

/// The two designated confusable neighbours of a slot value (ring order).
pub fn confusable_neighbors(value: usize, inventory: usize) -> [usize; 2] {
    [(value + inventory - 1) % inventory, (value + 1) % inventory]
}

/// Draws scenes with uniform independent slots and increasing ids.
#[derive(Clone, Debug)]
pub struct SceneSampler {
    inventories: Inventories,
    rng: ChaCha8Rng,
    next_id: u64,
}

impl SceneSampler {
    pub fn new(inventories: Inventories, seed: u64) -> Result<Self, CorpusError> {
        for slot in Slot::ALL {
            if inventories.size(slot) == 0 {
                return Err(CorpusError::Config(format!("empty {slot:?} inventory")));
            }
        }
        Ok(Self {
            inventories,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        })
    }

    pub fn with_first_id(mut self, id: u64) -> Self {
        self.next_id = id;
        self
    }

    pub fn sample(&mut self) -> Scene {
        let inv = self.inventories;
        let id = self.next_id;
        self.next_id += 1;
        // object has one extra outcome meaning "no object"
        let object = self.rng.random_range(0..=inv.objects);
        Scene {
            id,
            agent: self.rng.random_range(0..inv.agents),
            attribute: self.rng.random_range(0..inv.attributes),
            action: self.rng.random_range(0..inv.actions),
            object: (object < inv.objects).then_some(object),
            location: self.rng.random_range(0..inv.locations),
        }
    }
}

/// Single seeded scene draw.
pub fn sample_scene(inventories: Inventories, seed: u64) -> Result<Scene, CorpusError> {
    Ok(SceneSampler::new(inventories, seed)?.sample())
}

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Scene, Slot, TokenId, Utterance, Vocabulary};

/// Which language a grammar realizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    /// The spoken language of translation mode.
    Source,
    /// The caption / reference language; also the spoken language of
    /// paraphrase mode.
    Target,
}

impl Language {
    pub fn tag(self) -> &'static str {
        match self {
            Language::Source => "src",
            Language::Target => "tgt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(TokenId),
    Slot(Slot),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    fn has_slot(&self, slot: Slot) -> bool {
        self.pieces.contains(&Piece::Slot(slot))
    }
}

/// Slot inventories are closed: each slot value is an index into a lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventories {
    pub agents: usize,
    pub attributes: usize,
    pub actions: usize,
    pub objects: usize,
    pub locations: usize,
}

impl Inventories {
    pub fn size(&self, slot: Slot) -> usize {
        match slot {
            Slot::Agent => self.agents,
            Slot::Attribute => self.attributes,
            Slot::Action => self.actions,
            Slot::Object => self.objects,
            Slot::Location => self.locations,
        }
    }
}

/// Template-based realizer for one language.
#[derive(Clone, Debug)]
pub struct Grammar {
    language: Language,
    lexicon: HashMap<Slot, Vec<TokenId>>,
    with_object: Vec<Template>,
    without_object: Vec<Template>,
    /// Interchangeable function words used for sampling jitter.
    alternates: Vec<Vec<TokenId>>,
    inverse: HashMap<TokenId, (Slot, usize)>,
}

/// Word lists for the caption language.
pub(crate) const TARGET_LEXICON: [(Slot, &[&str]); 5] = [
    (
        Slot::Agent,
        &["dog", "cat", "boy", "girl", "man", "woman", "horse", "bird"],
    ),
    (
        Slot::Attribute,
        &["brown", "black", "white", "small", "young", "happy"],
    ),
    (
        Slot::Action,
        &["runs", "jumps", "sits", "plays", "walks", "rests"],
    ),
    (
        Slot::Object,
        &["ball", "frisbee", "stick", "rope", "toy", "kite"],
    ),
    (
        Slot::Location,
        &["field", "beach", "park", "street", "snow", "river"],
    ),
];

const TARGET_TEMPLATES: [&str; 6] = [
    "a {attr} {agent} {action} [with a {object}] in the {location}",
    "the {attr} {agent} {action} [with the {object}] on the {location}",
    "there is a {attr} {agent} that {action} [with a {object}] near the {location}",
    "in the {location} the {agent} is {attr} and {action} [with a {object}]",
    "a {agent} which is {attr} {action} [holding a {object}] at the {location}",
    "one {attr} {agent} {action} [and carries a {object}] by the {location}",
];

const TARGET_ALTERNATES: [&[&str]; 3] = [
    &["a", "the", "one"],
    &["in", "on", "at", "near", "by"],
    &["with", "holding"],
];

pub(crate) const SOURCE_LEXICON: [(Slot, &[&str]); 5] = [
    (
        Slot::Agent,
        &[
            "aja", "ologbo", "omokunrin", "omobinrin", "okunrin", "obinrin", "esin", "eye",
        ],
    ),
    (
        Slot::Attribute,
        &["pupa", "dudu", "funfun", "kekere", "odo", "ayo"],
    ),
    (
        Slot::Action,
        &["sare", "fo", "joko", "nsere", "rin", "sinmi"],
    ),
    (
        Slot::Object,
        &["boolu", "awo", "igi", "okun", "nkan", "afefe"],
    ),
    (
        Slot::Location,
        &["papa", "etiokun", "ogba", "opopona", "yinyin", "odonla"],
    ),
];

const SOURCE_TEMPLATES: [&str; 5] = [
    "{agent} {attr} kan {action} [pelu {object}] ni {location}",
    "ni {location} {agent} {attr} kan {action} [pelu {object}]",
    "{agent} ti o je {attr} {action} [pelu {object}] ni {location}",
    "[pelu {object}] {agent} {attr} {action} ni {location}",
    "{agent} {attr} wa ti o {action} [pelu {object}] lebe {location}",
];

impl Grammar {
    /// The caption language with its six templates per scene shape.
    pub fn target(vocab: &mut Vocabulary) -> Self {
        Self::from_spec(
            Language::Target,
            vocab,
            &TARGET_LEXICON,
            &TARGET_TEMPLATES,
            &TARGET_ALTERNATES,
        )
    }

    /// The spoken language of translation mode.
    pub fn source(vocab: &mut Vocabulary) -> Self {
        Self::from_spec(Language::Source, vocab, &SOURCE_LEXICON, &SOURCE_TEMPLATES, &[])
    }

    /// A grammar whose templates are all the same sentence pattern; every
    /// paraphrase of a scene is then identical.
    pub fn degenerate_target(vocab: &mut Vocabulary) -> Self {
        let templates = [TARGET_TEMPLATES[0]; 6];
        Self::from_spec(
            Language::Target,
            vocab,
            &TARGET_LEXICON,
            &templates,
            &TARGET_ALTERNATES,
        )
    }

    fn from_spec(
        language: Language,
        vocab: &mut Vocabulary,
        lexicon: &[(Slot, &[&str])],
        templates: &[&str],
        alternates: &[&[&str]],
    ) -> Self {
        let lexicon: HashMap<Slot, Vec<TokenId>> = lexicon
            .iter()
            .map(|(slot, words)| (*slot, words.iter().map(|w| vocab.intern(w)).collect()))
            .collect();
        let mut inverse = HashMap::new();
        for (slot, ids) in &lexicon {
            for (value, id) in ids.iter().enumerate() {
                inverse.insert(*id, (*slot, value));
            }
        }
        let with_object = templates
            .iter()
            .map(|t| parse_template(t, true, vocab))
            .collect();
        let without_object = templates
            .iter()
            .map(|t| parse_template(t, false, vocab))
            .collect();
        let alternates = alternates
            .iter()
            .map(|group| group.iter().map(|w| vocab.intern(w)).collect())
            .collect();
        Self {
            language,
            lexicon,
            with_object,
            without_object,
            alternates,
            inverse,
        }
    }

    pub fn language(&self) -> Language {
        self.language
    }

    /// Templates available for scenes of this shape.
    pub fn templates_for(&self, scene: &Scene) -> &[Template] {
        if scene.object.is_some() {
            &self.with_object
        } else {
            &self.without_object
        }
    }

    pub fn template_count(&self) -> usize {
        self.with_object.len()
    }

    pub fn lexicon(&self, slot: Slot) -> &[TokenId] {
        &self.lexicon[&slot]
    }

    pub fn inventories(&self) -> Inventories {
        Inventories {
            agents: self.lexicon[&Slot::Agent].len(),
            attributes: self.lexicon[&Slot::Attribute].len(),
            actions: self.lexicon[&Slot::Action].len(),
            objects: self.lexicon[&Slot::Object].len(),
            locations: self.lexicon[&Slot::Location].len(),
        }
    }

    pub fn alternates(&self) -> &[Vec<TokenId>] {
        &self.alternates
    }

    /// Every token this grammar can emit.
    pub fn tokens(&self) -> BTreeSet<TokenId> {
        let mut out: BTreeSet<TokenId> = self.lexicon.values().flatten().copied().collect();
        for t in self.with_object.iter().chain(&self.without_object) {
            for p in &t.pieces {
                if let Piece::Word(w) = p {
                    out.insert(*w);
                }
            }
        }
        out.extend(self.alternates.iter().flatten());
        out
    }

    /// Deterministic realization of `scene` with template `template_id`.
    pub fn realize(&self, scene: &Scene, template_id: usize) -> Result<Utterance, CorpusError> {
        let templates = self.templates_for(scene);
        let template = templates.get(template_id).ok_or_else(|| {
            CorpusError::Grammar(format!(
                "template {template_id} not available for scene {} ({} templates)",
                scene.id,
                templates.len()
            ))
        })?;
        if scene.object.is_some() != template.has_slot(Slot::Object) {
            return Err(CorpusError::Grammar(format!(
                "template {template_id} does not fit the shape of scene {}",
                scene.id
            )));
        }
        let mut tokens = Vec::with_capacity(template.pieces.len());
        for piece in &template.pieces {
            match piece {
                Piece::Word(w) => tokens.push(*w),
                Piece::Slot(slot) => {
                    let value = scene.slot(*slot).ok_or_else(|| {
                        CorpusError::Grammar(format!("scene {} has no {slot:?}", scene.id))
                    })?;
                    let words = &self.lexicon[slot];
                    let word = words.get(value).ok_or_else(|| {
                        CorpusError::Grammar(format!(
                            "{slot:?} value {value} outside lexicon of {}",
                            words.len()
                        ))
                    })?;
                    tokens.push(*word);
                }
            }
        }
        Ok(Utterance {
            scene_id: scene.id,
            language: self.language,
            tokens,
            template_id,
        })
    }

    /// Recovers slot values from a token sequence via the lexicon.
    pub fn invert(&self, tokens: &[TokenId]) -> HashMap<Slot, usize> {
        tokens
            .iter()
            .filter_map(|t| self.inverse.get(t).copied())
            .collect()
    }

    pub fn slot_of(&self, token: TokenId) -> Option<(Slot, usize)> {
        self.inverse.get(&token).copied()
    }
}

fn parse_template(text: &str, with_object: bool, vocab: &mut Vocabulary) -> Template {
    let mut pieces = Vec::new();
    let mut optional = false;
    for raw in text.split_whitespace() {
        let mut word = raw;
        if let Some(rest) = word.strip_prefix('[') {
            optional = true;
            word = rest;
        }
        let closes = word.ends_with(']');
        let word = word.trim_end_matches(']');
        if !optional || with_object {
            let piece = match word {
                "{agent}" => Piece::Slot(Slot::Agent),
                "{attr}" => Piece::Slot(Slot::Attribute),
                "{action}" => Piece::Slot(Slot::Action),
                "{object}" => Piece::Slot(Slot::Object),
                "{location}" => Piece::Slot(Slot::Location),
                w => Piece::Word(vocab.intern(w)),
            };
            pieces.push(piece);
        }
        if closes {
            optional = false;
        }
    }
    Template { pieces }
}

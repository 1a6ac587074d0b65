use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{confusable_neighbors, CorpusError, Grammar, Scene, Slot, TokenId};

/// Quality tier of the simulated captioner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    A,
    B,
    C,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::A, Tier::B, Tier::C];

    pub fn default_p_confuse(self) -> f64 {
        match self {
            Tier::A => 0.02,
            Tier::B => 0.05,
            Tier::C => 0.10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::A => "tier_A",
            Tier::B => "tier_B",
            Tier::C => "tier_C",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().trim_start_matches("tier_") {
            "a" => Some(Tier::A),
            "b" => Some(Tier::B),
            "c" => Some(Tier::C),
            _ => None,
        }
    }
}

/// How the oracle turns its observation into `k` sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStrategy {
    /// The single best template, repeated (beam-search analog).
    DeterministicBest,
    /// `k` distinct templates in ranking order (diverse-beam analog).
    DiverseTemplates,
    /// Template and function words sampled per caption (multinomial analog).
    Sampled,
}

impl CaptionStrategy {
    pub const ALL: [CaptionStrategy; 3] = [
        CaptionStrategy::DeterministicBest,
        CaptionStrategy::DiverseTemplates,
        CaptionStrategy::Sampled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaptionStrategy::DeterministicBest => "deterministic_best",
            CaptionStrategy::DiverseTemplates => "diverse_templates",
            CaptionStrategy::Sampled => "sampled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "deterministic_best" | "beam" => Some(Self::DeterministicBest),
            "diverse_templates" | "diverse" | "diverse_beam" => Some(Self::DiverseTemplates),
            "sampled" | "multinomial" => Some(Self::Sampled),
            _ => None,
        }
    }
}

/// Template preference of the sampled strategy, best template first.
const TEMPLATE_PRIOR: [f64; 6] = [0.22, 0.19, 0.17, 0.15, 0.14, 0.13];
/// Probability that a sampled caption swaps a function word for an alternate.
const JITTER: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerOracle {
    pub tier: Tier,
    pub p_confuse: f64,
    pub strategy: CaptionStrategy,
}

impl CaptionerOracle {
    pub fn new(tier: Tier, strategy: CaptionStrategy) -> Self {
        Self {
            tier,
            p_confuse: tier.default_p_confuse(),
            strategy,
        }
    }

    pub fn with_p_confuse(mut self, p: f64) -> Self {
        self.p_confuse = p;
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(0.0..=0.5).contains(&self.p_confuse) {
            return Err(CorpusError::Config(format!(
                "p_confuse {} outside [0, 0.5]",
                self.p_confuse
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.tier.name(), self.strategy.name())
    }

    /// Noisy reading of the scene: each present slot is swapped for one of
    /// its confusable neighbours with probability `p_confuse`.
    pub fn observe<R: Rng + ?Sized>(&self, scene: &Scene, grammar: &Grammar, rng: &mut R) -> Scene {
        let inv = grammar.inventories();
        let mut seen = *scene;
        for slot in Slot::ALL {
            let Some(value) = scene.slot(slot) else {
                continue;
            };
            if rng.random::<f64>() < self.p_confuse {
                let n = confusable_neighbors(value, inv.size(slot));
                seen.set_slot(slot, n[rng.random_range(0..2)]);
            }
        }
        seen
    }
}

/// `k` target-language captions of `scene` from the oracle.
///
/// Deterministic strategies observe the scene once and realize that single
/// reading; the sampled strategy observes it afresh for every caption.
pub fn oracle_captions(
    grammar: &Grammar,
    scene: &Scene,
    oracle: &CaptionerOracle,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>, CorpusError> {
    oracle.validate()?;
    if k == 0 {
        return Err(CorpusError::Config("k must be at least 1".into()));
    }
    let n_templates = grammar.templates_for(scene).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match oracle.strategy {
        CaptionStrategy::DeterministicBest => {
            let seen = oracle.observe(scene, grammar, &mut rng);
            let best = grammar.realize(&seen, 0)?.tokens;
            Ok(vec![best; k])
        }
        CaptionStrategy::DiverseTemplates => {
            if k > n_templates {
                return Err(CorpusError::Config(format!(
                    "{k} diverse captions requested but only {n_templates} templates exist"
                )));
            }
            let seen = oracle.observe(scene, grammar, &mut rng);
            (0..k)
                .map(|t| grammar.realize(&seen, t).map(|u| u.tokens))
                .collect()
        }
        CaptionStrategy::Sampled => {
            let prior = WeightedIndex::new(&TEMPLATE_PRIOR[..n_templates.min(TEMPLATE_PRIOR.len())])
                .expect("positive prior");
            (0..k)
                .map(|_| {
                    let seen = oracle.observe(scene, grammar, &mut rng);
                    let template = prior.sample(&mut rng);
                    let mut tokens = grammar.realize(&seen, template)?.tokens;
                    jitter(&mut tokens, grammar, &mut rng);
                    Ok(tokens)
                })
                .collect()
        }
    }
}

fn jitter<R: Rng + ?Sized>(tokens: &mut [TokenId], grammar: &Grammar, rng: &mut R) {
    for t in tokens.iter_mut() {
        if let Some(group) = grammar.alternates().iter().find(|g| g.contains(t)) {
            if rng.random::<f64>() < JITTER {
                *t = group[rng.random_range(0..group.len())];
            }
        }
    }
}

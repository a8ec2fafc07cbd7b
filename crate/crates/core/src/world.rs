//! Synthetic acoustic-text world with controlled domain mismatch.
//!
//! Each word owns a fixed prototype of `frames_per_word x frame_dim` values;
//! an utterance is the concatenation of its words' prototypes plus i.i.d.
//! Gaussian noise. Target-domain entity words are near-homophones of source
//! "decoy" words: their prototype is the decoy's plus a small offset, and they
//! never occur in source text. Recognizing them therefore needs context that
//! the source-trained recognizer does not have.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default contextual prompts for the three target scenarios.
pub const PROMPT_ORDERING: &str = "Generate a message for ordering at Starbucks.";
pub const PROMPT_COMMAND: &str = "Generate a voice command message.";
pub const PROMPT_READABILITY: &str =
    "Generate a message that includes numbers or digits in a display-friendly format.";
pub const PROMPT_GENERAL: &str = "Generate an everyday conversational message.";

const FUNCTION_WORDS: &[&str] = &[
    "i", "you", "we", "they", "the", "a", "to", "and", "for", "at", "on", "in", "my", "your",
    "please", "can", "could", "get", "want", "need", "with", "some", "it", "is", "this", "that",
    "me", "now", "then", "just", "set", "turn",
];

const CONTENT_WORDS: &[&str] = &[
    "coffee", "tea", "water", "music", "light", "door", "room", "home", "work", "morning",
    "night", "weather", "alarm", "song", "phone", "number", "meeting", "lunch", "large", "small",
    "hot", "tomorrow",
];

/// `(entity, decoy)` twins per built-in target domain.
const ORDERING_TWINS: &[(&str, &str)] = &[
    ("latte", "lately"),
    ("mocha", "mocker"),
    ("macchiato", "mackerel"),
    ("cappuccino", "cabinet"),
    ("espresso", "express"),
    ("frappuccino", "fracture"),
];
const COMMAND_TWINS: &[(&str, &str)] = &[
    ("alexa", "election"),
    ("thermostat", "thermos"),
    ("bluetooth", "blue"),
    ("spotify", "spot"),
    ("wifi", "wife"),
    ("roomba", "rumba"),
];
// Display-format variants: casing, punctuation and digits.
const READABILITY_TWINS: &[(&str, &str)] = &[
    ("Monday", "monday"),
    ("Friday.", "friday"),
    ("7", "seven"),
    ("3:30", "three-thirty"),
    ("Call", "call"),
    ("today.", "today"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

/// World parameters. Sizes are per target domain unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub frames_per_word: usize,
    pub frame_dim: usize,
    pub noise_sigma: f64,
    /// Scale of the offset separating an entity's prototype from its decoy's.
    pub twin_offset: f64,
    /// Probability mass on entity words in every target bigram row.
    pub entity_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Successors per word in the sparse part of each bigram row.
    pub fanout: usize,
    /// Mass spread uniformly over the domain's carrier words in each row.
    pub uniform_floor: f64,
    pub dirichlet_alpha: f64,
    /// Target domains drawn from the built-in catalog.
    pub targets: Vec<String>,
    /// Prompt overrides by domain name.
    pub prompts: BTreeMap<String, String>,
    /// Source-domain utterances in the pretrain split.
    pub pretrain_size: usize,
    pub adapt_size: usize,
    pub test_size: usize,
    /// Source-domain sentences in the text-only split.
    pub lm_source_size: usize,
    pub lm_target_size: usize,
    pub min_entity_count: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames_per_word: 2,
            frame_dim: 16,
            noise_sigma: 0.3,
            twin_offset: 0.5,
            entity_rate: 0.25,
            min_len: 4,
            max_len: 8,
            fanout: 6,
            uniform_floor: 0.1,
            dirichlet_alpha: 1.0,
            targets: vec!["ordering".into(), "command".into(), "readability".into()],
            prompts: BTreeMap::new(),
            pretrain_size: 3000,
            adapt_size: 300,
            test_size: 300,
            lm_source_size: 1500,
            lm_target_size: 600,
            min_entity_count: 25,
        }
    }
}

/// Fixed per-word acoustic prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordCodebook {
    pub vocabulary: Vec<String>,
    pub frames_per_word: usize,
    pub frame_dim: usize,
    /// Row-major `frames_per_word x frame_dim` per word.
    pub prototypes: Vec<Vec<f64>>,
}

impl WordCodebook {
    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.vocabulary.iter().position(|w| w == word)
    }

    pub fn template_dim(&self) -> usize {
        self.frames_per_word * self.frame_dim
    }
}

/// Start distribution plus one successor distribution per vocabulary word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordDistribution {
    pub start: Vec<f64>,
    pub bigram: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub role: DomainRole,
    pub context_prompt: String,
    pub entity_lexicon: BTreeSet<String>,
    /// Entity to the source word it is acoustically confusable with.
    pub twins: BTreeMap<String, String>,
    pub word_distribution: WordDistribution,
    pub sentence_length_range: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub codebook: WordCodebook,
    pub domains: Vec<DomainSpec>,
}

impl World {
    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn sources(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| d.role == DomainRole::Source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| d.role == DomainRole::Target)
    }

    /// Every distinct prompt word, in first-seen order.
    pub fn prompt_words(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for d in &self.domains {
            for w in d.context_prompt.split_whitespace() {
                if seen.insert(w.to_string()) {
                    out.push(w.to_string());
                }
            }
        }
        out
    }
}

/// Template of one domain before randomized distributions are drawn.
#[derive(Clone, Debug)]
struct DomainBlueprint {
    name: String,
    role: DomainRole,
    prompt: String,
    twins: Vec<(String, String)>,
}

fn catalog(name: &str) -> Option<(&'static str, &'static [(&'static str, &'static str)])> {
    match name {
        "ordering" => Some((PROMPT_ORDERING, ORDERING_TWINS)),
        "command" => Some((PROMPT_COMMAND, COMMAND_TWINS)),
        "readability" => Some((PROMPT_READABILITY, READABILITY_TWINS)),
        _ => None,
    }
}

fn blueprints(cfg: &WorldConfig) -> Result<Vec<DomainBlueprint>> {
    let prompt = |name: &str, default: &str| {
        cfg.prompts
            .get(name)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    };
    let mut out = vec![DomainBlueprint {
        name: "general".into(),
        role: DomainRole::Source,
        prompt: prompt("general", PROMPT_GENERAL),
        twins: Vec::new(),
    }];
    for t in &cfg.targets {
        let (default_prompt, twins) =
            catalog(t).ok_or_else(|| Error::Config(format!("unknown target domain {t:?}")))?;
        out.push(DomainBlueprint {
            name: t.clone(),
            role: DomainRole::Target,
            prompt: prompt(t, default_prompt),
            twins: twins
                .iter()
                .map(|(e, d)| (e.to_string(), d.to_string()))
                .collect(),
        });
    }
    Ok(out)
}

fn validate_config(cfg: &WorldConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    if cfg.frames_per_word == 0 || cfg.frame_dim == 0 {
        return bad("frames_per_word and frame_dim must be positive");
    }
    if !(cfg.noise_sigma >= 0.0) {
        return bad("noise_sigma must be >= 0");
    }
    if !(cfg.twin_offset > 0.0) {
        return bad("twin_offset must be > 0 so twins stay distinct");
    }
    if !(0.0..1.0).contains(&cfg.entity_rate) {
        return bad("entity_rate must be in [0, 1)");
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return bad("need 0 < min_len <= max_len");
    }
    if cfg.fanout == 0 || !(0.0..=1.0).contains(&cfg.uniform_floor) {
        return bad("fanout must be positive and uniform_floor in [0, 1]");
    }
    if cfg.targets.is_empty() {
        return bad("at least one target domain is required");
    }
    let mut names = BTreeSet::new();
    names.insert("general");
    for t in &cfg.targets {
        if !names.insert(t.as_str()) {
            return Err(Error::Config(format!("duplicate domain name {t:?}")));
        }
    }
    Ok(())
}

fn dirichlet(rng: &mut Rng, k: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive alpha");
    let draws: Vec<f64> = (0..k).map(|_| g.sample(rng).max(1e-12)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / s).collect()
}

/// A row with `floor` spread over `support` and the rest on a random sparse
/// subset of it.
fn sparse_row(
    rng: &mut Rng,
    vocab_len: usize,
    support: &[usize],
    fanout: usize,
    floor: f64,
    alpha: f64,
) -> Vec<f64> {
    let mut row = vec![0.0; vocab_len];
    let k = fanout.min(support.len());
    let picks = rand::seq::index::sample(rng, support.len(), k);
    let weights = dirichlet(rng, k, alpha);
    for (i, w) in picks.iter().zip(weights) {
        row[support[i]] += (1.0 - floor) * w;
    }
    for &s in support {
        row[s] += floor / support.len() as f64;
    }
    row
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

/// Builds the codebook and domain specs. Pure in `(seed, cfg)`.
pub fn build_world(seed: u64, cfg: &WorldConfig, rng: &mut Rng) -> Result<World> {
    validate_config(cfg)?;
    let blueprints = blueprints(cfg)?;

    let mut vocabulary: Vec<String> = FUNCTION_WORDS
        .iter()
        .chain(CONTENT_WORDS)
        .map(|s| s.to_string())
        .collect();
    for bp in &blueprints {
        for (_, decoy) in &bp.twins {
            if !vocabulary.contains(decoy) {
                vocabulary.push(decoy.clone());
            }
        }
    }
    let n_source = vocabulary.len();
    for bp in &blueprints {
        for (entity, _) in &bp.twins {
            if vocabulary.contains(entity) {
                return Err(Error::Config(format!(
                    "entity {entity:?} collides with another vocabulary word"
                )));
            }
            vocabulary.push(entity.clone());
        }
    }

    let tdim = cfg.frames_per_word * cfg.frame_dim;
    let mut prototypes: Vec<Vec<f64>> = (0..n_source)
        .map(|_| (0..tdim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for bp in &blueprints {
        for (_, decoy) in &bp.twins {
            let d = vocabulary.iter().position(|w| w == decoy).expect("decoy in vocab");
            let base = prototypes[d].clone();
            let twin = base
                .iter()
                .map(|b| b + cfg.twin_offset * rng.sample::<f64, _>(StandardNormal))
                .collect();
            prototypes.push(twin);
        }
    }
    let codebook = WordCodebook {
        vocabulary,
        frames_per_word: cfg.frames_per_word,
        frame_dim: cfg.frame_dim,
        prototypes,
    };

    let v = codebook.vocabulary.len();
    let idx = |w: &str| codebook.index_of(w).expect("word in vocabulary");
    let mut domains = Vec::new();
    for bp in &blueprints {
        let own_decoys: BTreeSet<usize> = bp.twins.iter().map(|(_, d)| idx(d)).collect();
        let entities: Vec<usize> = bp.twins.iter().map(|(e, _)| idx(e)).collect();
        let carriers: Vec<usize> = (0..n_source).filter(|i| !own_decoys.contains(i)).collect();

        let draw_row = |rng: &mut Rng| -> Vec<f64> {
            let mut row = sparse_row(
                rng,
                v,
                &carriers,
                cfg.fanout,
                cfg.uniform_floor,
                cfg.dirichlet_alpha,
            );
            if bp.role == DomainRole::Target && !entities.is_empty() {
                row.iter_mut().for_each(|p| *p *= 1.0 - cfg.entity_rate);
                let w = dirichlet(rng, entities.len(), cfg.dirichlet_alpha);
                for (&e, we) in entities.iter().zip(w) {
                    row[e] += cfg.entity_rate * we;
                }
            }
            normalize(&mut row);
            row
        };
        let start = draw_row(rng);
        let bigram: Vec<Vec<f64>> = (0..v).map(|_| draw_row(rng)).collect();

        domains.push(DomainSpec {
            name: bp.name.clone(),
            role: bp.role,
            context_prompt: bp.prompt.clone(),
            entity_lexicon: bp.twins.iter().map(|(e, _)| e.clone()).collect(),
            twins: bp.twins.iter().cloned().collect(),
            word_distribution: WordDistribution { start, bigram },
            sentence_length_range: (cfg.min_len, cfg.max_len),
        });
    }

    let world = World {
        seed,
        codebook,
        domains,
    };
    validate_world(&world)?;
    Ok(world)
}

/// Checks the structural invariants of a (possibly deserialized) world.
pub fn validate_world(world: &World) -> Result<()> {
    let cb = &world.codebook;
    let v = cb.vocabulary.len();
    let tdim = cb.template_dim();
    if cb.prototypes.len() != v || cb.prototypes.iter().any(|p| p.len() != tdim) {
        return Err(Error::Config("prototype table does not match vocabulary".into()));
    }
    let mut names = BTreeSet::new();
    let mut all_entities = BTreeSet::new();
    for d in &world.domains {
        if !names.insert(d.name.as_str()) {
            return Err(Error::Config(format!("duplicate domain name {:?}", d.name)));
        }
        for e in &d.entity_lexicon {
            if cb.index_of(e).is_none() {
                return Err(Error::Config(format!(
                    "entity {e:?} of domain {} is not in the vocabulary",
                    d.name
                )));
            }
            all_entities.insert(e.as_str());
        }
        let wd = &d.word_distribution;
        if wd.start.len() != v || wd.bigram.len() != v {
            return Err(Error::Config(format!("{}: distribution size mismatch", d.name)));
        }
        for row in std::iter::once(&wd.start).chain(&wd.bigram) {
            let s: f64 = row.iter().sum();
            if row.len() != v || (s - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::Config(format!(
                    "{}: distribution row is not normalized (sum {s})",
                    d.name
                )));
            }
        }
    }
    if world.sources().next().is_none() || world.targets().next().is_none() {
        return Err(Error::Config("need >= 1 source and >= 1 target domain".into()));
    }
    for s in world.sources() {
        let wd = &s.word_distribution;
        for e in &all_entities {
            let i = cb.index_of(e).unwrap();
            if wd.start[i] != 0.0 || wd.bigram.iter().any(|row| row[i] != 0.0) {
                return Err(Error::Config(format!(
                    "source domain {} gives entity {e:?} nonzero probability",
                    s.name
                )));
            }
        }
    }
    Ok(())
}

/// `rows x dim` acoustic frames; zero rows for text-only records.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Frames {
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

impl Serialize for Frames {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(self.rows))?;
        for i in 0..self.rows {
            seq.serialize_element(self.row(i))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Frames {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(serde::de::Error::custom("ragged frame rows"));
        }
        Ok(Frames {
            rows: rows.len(),
            dim,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

/// One record of a corpus split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub domain: String,
    pub frames: Frames,
    #[serde(with = "space_joined")]
    pub text: Vec<String>,
    /// Positions in `text` holding entity words of `domain`.
    pub entities: Vec<usize>,
}

mod space_joined {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(words: &[String], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&words.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.split_whitespace().map(str::to_string).collect())
    }
}

/// Audio-only view handed to adaptation code; it carries no transcript.
#[derive(Clone, Copy, Debug)]
pub struct AudioUtterance<'a> {
    pub id: &'a str,
    pub domain: &'a str,
    pub frames: &'a Frames,
}

/// Draws a sentence from the domain's bigram chain.
pub fn sample_sentence(spec: &DomainSpec, codebook: &WordCodebook, rng: &mut Rng) -> Vec<String> {
    let (lo, hi) = spec.sentence_length_range;
    let len = rng.random_range(lo..=hi);
    let wd = &spec.word_distribution;
    let mut words = Vec::with_capacity(len);
    let mut prev: Option<usize> = None;
    for _ in 0..len {
        let row = match prev {
            None => &wd.start,
            Some(p) => &wd.bigram[p],
        };
        let next = sample_index(row, rng);
        words.push(codebook.vocabulary[next].clone());
        prev = Some(next);
    }
    words
}

fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = i;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

/// Concatenated prototypes of `text` plus `N(0, noise_sigma^2)` noise.
pub fn render_frames(
    text: &[String],
    codebook: &WordCodebook,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Frames> {
    let mut data = Vec::with_capacity(text.len() * codebook.template_dim());
    for w in text {
        let i = codebook
            .index_of(w)
            .ok_or_else(|| Error::Data(format!("word {w:?} has no prototype")))?;
        data.extend_from_slice(&codebook.prototypes[i]);
    }
    if noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Frames {
        rows: text.len() * codebook.frames_per_word,
        dim: codebook.frame_dim,
        data,
    })
}

pub fn entity_positions(spec: &DomainSpec, text: &[String]) -> Vec<usize> {
    text.iter()
        .enumerate()
        .filter(|(_, w)| spec.entity_lexicon.contains(*w))
        .map(|(i, _)| i)
        .collect()
}

pub fn synthesize_utterance(
    id: String,
    spec: &DomainSpec,
    codebook: &WordCodebook,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Utterance> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config("noise_sigma must be >= 0".into()));
    }
    let text = sample_sentence(spec, codebook, rng);
    let frames = render_frames(&text, codebook, noise_sigma, rng)?;
    Ok(Utterance {
        id,
        domain: spec.name.clone(),
        entities: entity_positions(spec, &text),
        frames,
        text,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    Adapt,
    Test,
    LmText,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Adapt, Split::Test, Split::LmText];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Adapt => "adapt",
            Split::Test => "test",
            Split::LmText => "lm-text",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Audio without transcripts, for the unlabeled adaptation split.
    pub fn audio_only(&self) -> Vec<AudioUtterance<'_>> {
        self.utterances
            .iter()
            .map(|u| AudioUtterance {
                id: &u.id,
                domain: &u.domain,
                frames: &u.frames,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(split: Split, text: &str) -> Result<Self> {
        let utterances = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Utterance>, _>>()?;
        Ok(Self { split, utterances })
    }

    pub fn checksum(&self) -> Result<String> {
        Ok(crate::sha256_hex(self.to_jsonl()?.as_bytes()))
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub pretrain: Corpus,
    pub adapt: Corpus,
    pub test: Corpus,
    pub lm_text: Corpus,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Corpus {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Adapt => &self.adapt,
            Split::Test => &self.test,
            Split::LmText => &self.lm_text,
        }
    }
}

/// Draws all four splits. Adapt and test utterances get disjoint ids.
pub fn generate_corpus(world: &World, cfg: &WorldConfig, rng: &mut Rng) -> Result<Splits> {
    let cb = &world.codebook;
    if cfg.pretrain_size == 0 || cfg.adapt_size == 0 || cfg.test_size == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let audio = |split: Split, spec: &DomainSpec, n: usize, rng: &mut Rng| -> Result<Vec<Utterance>> {
        if split == Split::Test && spec.entity_lexicon.is_empty() {
            log::warn!(
                "domain {} has an empty entity lexicon; test annotations will be empty",
                spec.name
            );
        }
        (0..n)
            .map(|i| {
                let id = format!("{}-{}-{i:05}", split.as_str(), spec.name);
                synthesize_utterance(id, spec, cb, cfg.noise_sigma, rng)
            })
            .collect()
    };

    let mut pretrain = Vec::new();
    let sources: Vec<&DomainSpec> = world.sources().collect();
    for (k, s) in sources.iter().enumerate() {
        // split the source budget across source domains
        let n = cfg.pretrain_size / sources.len() + usize::from(k < cfg.pretrain_size % sources.len());
        pretrain.extend(audio(Split::Pretrain, s, n, rng)?);
    }
    let mut adapt = Vec::new();
    let mut test = Vec::new();
    for t in world.targets() {
        adapt.extend(audio(Split::Adapt, t, cfg.adapt_size, rng)?);
    }
    for t in world.targets() {
        test.extend(audio(Split::Test, t, cfg.test_size, rng)?);
    }

    let mut lm = Vec::new();
    let text_only = |spec: &DomainSpec, i: usize, rng: &mut Rng| -> Utterance {
        let text = sample_sentence(spec, cb, rng);
        Utterance {
            id: format!("lm-text-{}-{i:05}", spec.name),
            domain: spec.name.clone(),
            frames: Frames::empty(cb.frame_dim),
            entities: entity_positions(spec, &text),
            text,
        }
    };
    for s in world.sources() {
        for i in 0..cfg.lm_source_size {
            lm.push(text_only(s, i, rng));
        }
    }
    for t in world.targets() {
        let mut counts: BTreeMap<&str, usize> =
            t.entity_lexicon.iter().map(|e| (e.as_str(), 0)).collect();
        let mut i = 0;
        // top up until every entity is covered often enough
        while i < cfg.lm_target_size
            || counts.values().any(|&c| c < cfg.min_entity_count)
        {
            let u = text_only(t, i, rng);
            for &p in &u.entities {
                *counts.get_mut(u.text[p].as_str()).unwrap() += 1;
            }
            lm.push(u);
            i += 1;
            if i > 100 * cfg.lm_target_size.max(cfg.min_entity_count) {
                return Err(Error::Config(format!(
                    "domain {} cannot reach min_entity_count; raise entity_rate",
                    t.name
                )));
            }
        }
    }

    Ok(Splits {
        pretrain: Corpus {
            split: Split::Pretrain,
            utterances: pretrain,
        },
        adapt: Corpus {
            split: Split::Adapt,
            utterances: adapt,
        },
        test: Corpus {
            split: Split::Test,
            utterances: test,
        },
        lm_text: Corpus {
            split: Split::LmText,
            utterances: lm,
        },
    })
}

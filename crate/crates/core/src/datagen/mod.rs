//! Deterministic synthetic commented-retrieval corpus.
//!
//! Entities live in scene groups. Every group holds one two-member family per
//! category; a family differs in exactly one attribute (stage, color or size),
//! which is what the pair relations ask about. Questions name the scene and
//! encode relation direction by word order only, so an order-blind text
//! encoder sees the same bag of words for both directions.
//!
//! Test examples come from a few reserved families per group and always
//! point at entities that no training example mentions.

mod image;
mod io;
pub mod vocab;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Tokenizer;
use crate::types::{CoRExample, EntityDocument, MultimodalQuery, RelationKind, Split};

pub use image::{decode_image, render_image, FeatureLayout, IMAGE_DIM, NOISE_STD, TILE_COUNT, TILE_DIM};
pub use io::{dataset_checksum, load_dataset, load_queries, write_dataset, DOCUMENTS_FILE, EXAMPLES_FILE};

pub const FAMILIES_PER_GROUP: usize = vocab::CATEGORIES.len();
pub const MAX_GROUPS: usize = vocab::SCENE_ADJECTIVES.len() * vocab::SCENE_PLACES.len();
const STAGE_FAMILIES: usize = 6;
const COLOR_FAMILIES: usize = 5;
/// Families per group reserved for the test split.
const HELD_OUT_FAMILIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub category: usize,
    pub color: usize,
    pub size: usize,
    pub stage: usize,
    pub pattern: usize,
}

/// Which attribute separates the two members of a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    Stage,
    Color,
    Size,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub id: usize,
    pub group: usize,
    pub family: FamilyKind,
    pub attrs: Attributes,
}

/// A relation with its free slot filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Stage { to: usize },
    Color { to: usize },
    Size { to: usize },
    OtherCategory { category: usize, key: FamilyKind, value: usize },
}

impl Relation {
    pub fn kind(&self) -> RelationKind {
        match self {
            Relation::Stage { .. } => RelationKind::StageChange,
            Relation::Color { .. } => RelationKind::ColorChange,
            Relation::Size { .. } => RelationKind::SizeChange,
            Relation::OtherCategory { .. } => RelationKind::SameGroupOtherCategory,
        }
    }

    /// Whether `candidate` is a valid answer for a query showing `query`.
    pub fn holds(&self, query: &EntityRecord, candidate: &EntityRecord) -> bool {
        if candidate.group != query.group || candidate.id == query.id {
            return false;
        }
        let (q, c) = (&query.attrs, &candidate.attrs);
        match *self {
            Relation::Stage { to } => {
                c.category == q.category && c.color == q.color && c.size == q.size && c.stage == to
            }
            Relation::Color { to } => c.category == q.category && c.color == to,
            Relation::Size { to } => c.category == q.category && c.size == to,
            Relation::OtherCategory {
                category,
                key,
                value,
            } => c.category == category && category != q.category && attr_value(c, key) == value,
        }
    }
}

fn attr_value(a: &Attributes, key: FamilyKind) -> usize {
    match key {
        FamilyKind::Stage => a.stage,
        FamilyKind::Color => a.color,
        FamilyKind::Size => a.size,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub groups: usize,
    pub train: usize,
    pub test: usize,
    pub golden: usize,
    pub seed: u64,
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            groups: 64,
            train: 4096,
            test: 512,
            golden: 128,
            seed: 7,
            noise: NOISE_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub entities: Vec<EntityRecord>,
    pub documents: Vec<EntityDocument>,
    pub examples: Vec<CoRExample>,
    /// Candidate examples dropped because their relation had no unique target.
    pub skipped: usize,
}

impl Corpus {
    pub fn train(&self) -> impl Iterator<Item = &CoRExample> {
        self.examples.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &CoRExample> {
        self.examples.iter().filter(|e| e.split.is_test())
    }

    pub fn golden(&self) -> impl Iterator<Item = &CoRExample> {
        self.examples.iter().filter(|e| e.split == Split::Golden)
    }
}

/// Mixes a base seed with a stream tag and an index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_ENTITIES: u64 = 1;
const STREAM_DOC_IMAGE: u64 = 2;
const STREAM_QUERY_IMAGE: u64 = 3;
const STREAM_SPLITS: u64 = 4;

pub fn scene_words(group: usize) -> (&'static str, &'static str) {
    (
        vocab::SCENE_ADJECTIVES[group / vocab::SCENE_PLACES.len()],
        vocab::SCENE_PLACES[group % vocab::SCENE_PLACES.len()],
    )
}

pub fn caption_text(a: &Attributes) -> String {
    format!(
        "a {} {} {} {} {}",
        vocab::PATTERNS[a.pattern],
        vocab::SIZES[a.size],
        vocab::COLORS[a.color],
        vocab::STAGES[a.stage],
        vocab::CATEGORIES[a.category]
    )
}

pub fn metadata_text(group: usize) -> String {
    let (adj, place) = scene_words(group);
    format!("seen at {adj} {place}")
}

/// The question a user asks while showing `query`.
pub fn question_text(query: &EntityRecord, relation: &Relation) -> String {
    let (adj, place) = scene_words(query.group);
    let q = &query.attrs;
    let body = match *relation {
        Relation::Stage { to } => format!(
            "show the {} form of this {}",
            vocab::STAGES[to],
            vocab::STAGES[q.stage]
        ),
        Relation::Color { to } => format!(
            "show this {} one in {}",
            vocab::COLORS[q.color],
            vocab::COLORS[to]
        ),
        Relation::Size { to } => format!(
            "show a {} version of this {}",
            vocab::SIZES[to],
            vocab::SIZES[q.size]
        ),
        Relation::OtherCategory {
            category,
            key,
            value,
        } => format!(
            "show the {} {} from here",
            key_word(key, value),
            vocab::CATEGORIES[category]
        ),
    };
    format!("{adj} {place} {body}")
}

fn key_word(key: FamilyKind, value: usize) -> &'static str {
    match key {
        FamilyKind::Stage => vocab::STAGES[value],
        FamilyKind::Color => vocab::COLORS[value],
        FamilyKind::Size => vocab::SIZES[value],
    }
}

/// Ground-truth comment about the target; independent of the relation
/// wording, so it always carries target attributes absent from the question.
pub fn comment_text(target: &Attributes) -> String {
    format!(
        "{} is {} {} {} {}",
        vocab::CATEGORIES[target.category],
        vocab::SIZES[target.size],
        vocab::COLORS[target.color],
        vocab::STAGES[target.stage],
        vocab::PATTERNS[target.pattern]
    )
}

fn build_entities(groups: usize, rng: &mut ChaCha8Rng) -> Vec<EntityRecord> {
    let mut entities = Vec::with_capacity(groups * FAMILIES_PER_GROUP * 2);
    for group in 0..groups {
        let mut cats: Vec<usize> = (0..FAMILIES_PER_GROUP).collect();
        cats.shuffle(rng);
        let mut kinds: Vec<(usize, FamilyKind)> = cats
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let kind = if i < STAGE_FAMILIES {
                    FamilyKind::Stage
                } else if i < STAGE_FAMILIES + COLOR_FAMILIES {
                    FamilyKind::Color
                } else {
                    FamilyKind::Size
                };
                (c, kind)
            })
            .collect();
        kinds.sort_by_key(|&(c, _)| c);

        for (category, kind) in kinds {
            let random_attrs = |rng: &mut ChaCha8Rng| Attributes {
                category,
                color: rng.random_range(0..vocab::COLORS.len()),
                size: rng.random_range(0..vocab::SIZES.len()),
                stage: rng.random_range(0..vocab::STAGES.len()),
                pattern: rng.random_range(0..vocab::PATTERNS.len()),
            };
            let mut a = random_attrs(rng);
            let mut b = random_attrs(rng);
            match kind {
                FamilyKind::Stage => {
                    a.stage = 0;
                    b.stage = 1;
                    b.color = a.color;
                    b.size = a.size;
                }
                FamilyKind::Color => {
                    let mut colors: Vec<usize> = (0..vocab::COLORS.len()).collect();
                    colors.shuffle(rng);
                    a.color = colors[0];
                    b.color = colors[1];
                }
                FamilyKind::Size => {
                    let mut sizes: Vec<usize> = (0..vocab::SIZES.len()).collect();
                    sizes.shuffle(rng);
                    a.size = sizes[0];
                    b.size = sizes[1];
                }
            }
            for attrs in [a, b] {
                entities.push(EntityRecord {
                    id: entities.len(),
                    group,
                    family: kind,
                    attrs,
                });
            }
        }
    }
    entities
}

/// Relation linking `query` to its family partner `target`.
fn pair_relation(query: &EntityRecord, target: &EntityRecord) -> Relation {
    match query.family {
        FamilyKind::Stage => Relation::Stage {
            to: target.attrs.stage,
        },
        FamilyKind::Color => Relation::Color {
            to: target.attrs.color,
        },
        FamilyKind::Size => Relation::Size {
            to: target.attrs.size,
        },
    }
}

fn other_relation(target: &EntityRecord) -> Relation {
    Relation::OtherCategory {
        category: target.attrs.category,
        key: target.family,
        value: attr_value(&target.attrs, target.family),
    }
}

/// Every entity in the pool satisfying `relation` for `query`.
pub fn apply_relation<'a>(entities: &'a [EntityRecord], query: &EntityRecord, relation: &Relation) -> Vec<&'a EntityRecord> {
    entities.iter().filter(|c| relation.holds(query, c)).collect()
}

fn partner(entities: &[EntityRecord], e: &EntityRecord) -> usize {
    // Family members are stored adjacently.
    if e.id.is_multiple_of(2) {
        e.id + 1
    } else {
        e.id - 1
    }
    .min(entities.len() - 1)
}

pub fn build_corpus(cfg: &CorpusConfig, tokenizer: &Tokenizer) -> Result<Corpus> {
    if cfg.groups == 0 || cfg.train == 0 || cfg.test == 0 {
        return Err(Error::contract("corpus counts must be positive"));
    }
    if cfg.groups > MAX_GROUPS {
        return Err(Error::contract(format!(
            "at most {MAX_GROUPS} scene groups are nameable, asked for {}",
            cfg.groups
        )));
    }
    if cfg.golden > cfg.test {
        return Err(Error::contract("golden split must fit inside the test split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ENTITIES, 0));
    let entities = build_entities(cfg.groups, &mut rng);
    let n = entities.len();
    let test_entities = cfg.test.div_ceil(2);
    if test_entities > cfg.groups * HELD_OUT_FAMILIES {
        return Err(Error::contract(format!(
            "test split needs {test_entities} query entities but only {} families are held out",
            cfg.groups * HELD_OUT_FAMILIES
        )));
    }

    let documents = entities
        .iter()
        .map(|e| {
            Ok(EntityDocument {
                id: e.id,
                features: render_image(&e.attrs, derive_seed(cfg.seed, STREAM_DOC_IMAGE, e.id as u64), cfg.noise),
                caption: tokenizer.encode(&caption_text(&e.attrs))?,
                comment: None,
                metadata: tokenizer.encode(&metadata_text(e.group))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SPLITS, 0));
    // Some families in every group are reserved for the test split. One
    // member of each is the test query and may still appear as a training
    // target; the other is never part of a training example, so its
    // attributes can only be learned from its document.
    let mut hidden = vec![false; n];
    let mut shown = vec![false; n];
    for g in 0..cfg.groups {
        let mut fams: Vec<usize> = (0..FAMILIES_PER_GROUP).collect();
        fams.shuffle(&mut split_rng);
        for &f in &fams[..HELD_OUT_FAMILIES] {
            let first = (g * FAMILIES_PER_GROUP + f) * 2;
            let h = first + split_rng.random_range(0..2);
            hidden[h] = true;
            shown[2 * first + 1 - h] = true;
        }
    }
    let mut test_q: Vec<usize> = (0..n).filter(|&i| shown[i]).collect();
    let mut train_q: Vec<usize> = (0..n).filter(|&i| !hidden[i] && !shown[i]).collect();
    test_q.shuffle(&mut split_rng);
    test_q.truncate(test_entities);
    train_q.shuffle(&mut split_rng);

    let random_other = |q: &EntityRecord, rng: &mut ChaCha8Rng| -> usize {
        let base = q.group * FAMILIES_PER_GROUP * 2;
        loop {
            let t = base + rng.random_range(0..FAMILIES_PER_GROUP * 2);
            if entities[t].attrs.category != q.attrs.category && hidden[t] == shown[q.id] {
                return t;
            }
        }
    };

    let mut planned: Vec<(usize, usize, Relation, Split)> = Vec::new();
    for &q in &test_q {
        let t = partner(&entities, &entities[q]);
        planned.push((q, t, pair_relation(&entities[q], &entities[t]), Split::Test));
    }
    for &q in test_q.iter().cycle().take(cfg.test - test_entities) {
        let t = random_other(&entities[q], &mut split_rng);
        planned.push((q, t, other_relation(&entities[t]), Split::Test));
    }
    let pairs_in_train = cfg.train.min(train_q.len());
    for &q in &train_q[..pairs_in_train] {
        let t = partner(&entities, &entities[q]);
        planned.push((q, t, pair_relation(&entities[q], &entities[t]), Split::Train));
    }
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut train_count = pairs_in_train;
    let max_other = train_q.len() * (FAMILIES_PER_GROUP * 2 - HELD_OUT_FAMILIES - 2);
    while train_count < cfg.train && seen.len() < max_other {
        let q = train_q[split_rng.random_range(0..train_q.len())];
        let t = random_other(&entities[q], &mut split_rng);
        if seen.insert((q, t)) {
            planned.push((q, t, other_relation(&entities[t]), Split::Train));
            train_count += 1;
        }
    }
    // Train examples first, then test, each in generation order.
    planned.sort_by_key(|p| p.3.is_test());

    let instruction = tokenizer.encode(vocab::INSTRUCTION)?;
    let mut examples = Vec::with_capacity(planned.len());
    let mut skipped = 0;
    for (q, t, relation, split) in planned {
        let query = &entities[q];
        let hits = apply_relation(&entities, query, &relation);
        if hits.len() != 1 || hits[0].id != t {
            skipped += 1;
            continue;
        }
        let id = examples.len();
        let target = &entities[t];
        examples.push(CoRExample {
            id,
            query_entity: q,
            relation: relation.kind(),
            query: MultimodalQuery {
                question: tokenizer.encode(&question_text(query, &relation))?,
                image: render_image(&query.attrs, derive_seed(cfg.seed, STREAM_QUERY_IMAGE, id as u64), cfg.noise),
                instruction: instruction.clone(),
            },
            target: t,
            comment: tokenizer.encode(&comment_text(&target.attrs))?,
            caption: documents[t].caption.clone(),
            split,
        });
    }

    mark_golden(&mut examples, &documents, cfg, tokenizer)?;
    Ok(Corpus {
        entities,
        documents,
        examples,
        skipped,
    })
}

/// Promotes test examples whose comment can be rebuilt exactly from the
/// target document's decoded image to the golden split.
fn mark_golden(examples: &mut [CoRExample], documents: &[EntityDocument], cfg: &CorpusConfig, tokenizer: &Tokenizer) -> Result<()> {
    let mut test_ids: Vec<usize> = examples
        .iter()
        .filter(|e| e.split.is_test())
        .map(|e| e.id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SPLITS, 1));
    test_ids.shuffle(&mut rng);
    let mut promoted = 0;
    for id in test_ids {
        if promoted == cfg.golden {
            break;
        }
        let ex = &examples[id];
        let decoded = decode_image(&documents[ex.target].features);
        if tokenizer.encode(&comment_text(&decoded))? == ex.comment {
            examples[id].split = Split::Golden;
            promoted += 1;
        }
    }
    Ok(())
}

/// Convenience: a small corpus for tests and smoke runs.
pub fn small_config(seed: u64) -> CorpusConfig {
    CorpusConfig {
        groups: 4,
        train: 96,
        test: 32,
        golden: 8,
        seed,
        noise: NOISE_STD,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Corpus {
        build_corpus(&small_config(3), &Tokenizer::micro_cor()).unwrap()
    }

    #[test]
    fn targets_exist_and_are_unique() {
        let c = corpus();
        assert_eq!(c.skipped, 0);
        for ex in &c.examples {
            assert!(ex.target < c.documents.len());
            assert_eq!(c.documents[ex.target].id, ex.target);
        }
    }

    #[test]
    fn split_counts() {
        let c = corpus();
        assert_eq!(c.train().count(), 96);
        assert_eq!(c.test().count(), 32);
        assert_eq!(c.golden().count(), 8);
        assert_eq!(c.documents.len(), 4 * 32);
    }

    #[test]
    fn train_and_test_query_entities_are_disjoint() {
        let c = corpus();
        let train: HashSet<usize> = c.train().map(|e| e.query_entity).collect();
        assert!(c.test().all(|e| !train.contains(&e.query_entity)));
    }

    #[test]
    fn test_targets_never_occur_in_training_examples() {
        let c = corpus();
        let seen: HashSet<usize> = c.train().flat_map(|e| [e.query_entity, e.target]).collect();
        assert!(c.test().all(|e| !seen.contains(&e.target)));
    }

    #[test]
    fn stage_change_keeps_everything_but_stage() {
        let c = corpus();
        for ex in c.examples.iter().filter(|e| e.relation == RelationKind::StageChange) {
            let (q, t) = (&c.entities[ex.query_entity], &c.entities[ex.target]);
            assert_eq!(q.group, t.group);
            assert_eq!(q.attrs.category, t.attrs.category);
            assert_eq!(q.attrs.color, t.attrs.color);
            assert_eq!(q.attrs.size, t.attrs.size);
            assert_ne!(q.attrs.stage, t.attrs.stage);
        }
    }

    #[test]
    fn comments_are_complementary() {
        let c = corpus();
        for ex in &c.examples {
            let q: HashSet<_> = ex.query.question.iter().collect();
            assert!(ex.comment.iter().any(|t| !q.contains(t)));
        }
    }

    #[test]
    fn word_order_is_the_only_direction_cue() {
        let tok = Tokenizer::micro_cor();
        let c = build_corpus(&small_config(3), &tok).unwrap();
        let ex = c
            .examples
            .iter()
            .find(|e| e.relation == RelationKind::StageChange)
            .unwrap();
        let mut fwd = ex.query.question.clone();
        let back = tok
            .encode(&question_text(
                &c.entities[ex.target],
                &Relation::Stage {
                    to: c.entities[ex.query_entity].attrs.stage,
                },
            ))
            .unwrap();
        let mut back_sorted = back.clone();
        fwd.sort();
        back_sorted.sort();
        assert_eq!(fwd, back_sorted);
        assert_ne!(ex.query.question, back);
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(corpus(), corpus());
        let other = build_corpus(&small_config(4), &Tokenizer::micro_cor()).unwrap();
        assert_ne!(corpus().examples, other.examples);
    }

    #[test]
    fn rejects_bad_counts() {
        let tok = Tokenizer::micro_cor();
        let mut cfg = small_config(1);
        cfg.train = 0;
        assert!(build_corpus(&cfg, &tok).is_err());
        cfg = small_config(1);
        cfg.groups = MAX_GROUPS + 1;
        assert!(build_corpus(&cfg, &tok).is_err());
    }
}

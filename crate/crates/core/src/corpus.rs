//! Synthetic fact corpora shaped like COUNTERFACT-style datasets.
//!
//! Every fact is a `(subject, relation, object)` triple rendered through a
//! word-level template whose last slot is the object, so each surface reads
//! `BOS <prompt words...> <object words...> EOS`. Entity names come from
//! seeded syllable combinators: base entities use CVC syllables, novel
//! (fictitious) entities use CV syllables, which keeps the two pools disjoint.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "PAD";
pub const BOS: &str = "BOS";
pub const EOS: &str = "EOS";
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

/// Counterfact ids live above this offset: `offset + contradicted id`.
pub const COUNTERFACT_ID_OFFSET: u64 = 1 << 32;
/// Novel fact ids live above this offset: `offset + index`.
pub const NOVEL_ID_OFFSET: u64 = 2 << 32;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

pub type FactId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub id: FactId,
    pub subject: String,
    pub relation: String,
    /// Space separated when the object spans several tokens.
    pub object: String,
}

impl FactTriple {
    pub fn object_tokens(&self) -> Vec<String> {
        self.object.split_whitespace().map(str::to_owned).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    Base,
    Counterfact,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    #[serde(flatten)]
    pub triple: FactTriple,
    /// Index of the relation template used for `surface`.
    pub template: usize,
    pub surface: Vec<String>,
    pub paraphrases: Vec<Vec<String>>,
    pub origin: Origin,
    pub contradicts: Option<FactId>,
}

impl FactRecord {
    pub fn id(&self) -> FactId {
        self.triple.id
    }

    /// Number of object tokens at the end of the surface (before EOS).
    pub fn object_len(&self) -> usize {
        self.triple.object.split_whitespace().count()
    }

    /// Tokens preceding the object.
    pub fn prompt(&self) -> &[String] {
        &self.surface[..self.surface.len() - 1 - self.object_len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    /// Templates with `{s}` and `{o}` slots; `{o}` must be the last word.
    pub templates: Vec<String>,
}

impl RelationSpec {
    fn new(name: &str, templates: &[&str]) -> Self {
        Self {
            name: name.to_owned(),
            templates: templates.iter().map(|t| (*t).to_owned()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Seed for the entity pools; the vocabulary is a pure function of the config.
    pub pool_seed: u64,
    pub n_subjects: usize,
    pub objects_per_relation: usize,
    pub n_novel_entities: usize,
    pub max_object_tokens: usize,
    pub n_paraphrases: usize,
    /// Draw `new` facts only about subjects that no `base` fact mentions.
    pub disjoint_new_subjects: bool,
    pub relations: Vec<RelationSpec>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            pool_seed: 0x5eed,
            n_subjects: 400,
            objects_per_relation: 24,
            n_novel_entities: 400,
            max_object_tokens: 1,
            n_paraphrases: 2,
            disjoint_new_subjects: false,
            relations: default_relations(),
        }
    }
}

pub fn default_relations() -> Vec<RelationSpec> {
    vec![
        RelationSpec::new(
            "capital",
            &[
                "{s} capital is {o}",
                "the capital of {s} is {o}",
                "{s} has its capital in {o}",
            ],
        ),
        RelationSpec::new(
            "language",
            &[
                "{s} speaks {o}",
                "the language of {s} is {o}",
                "the mother tongue of {s} is {o}",
            ],
        ),
        RelationSpec::new(
            "instrument",
            &[
                "{s} plays the {o}",
                "the instrument of {s} is {o}",
                "{s} performs on the {o}",
            ],
        ),
        RelationSpec::new(
            "birthplace",
            &[
                "{s} was born in {o}",
                "the birthplace of {s} is {o}",
                "{s} comes from {o}",
            ],
        ),
        RelationSpec::new(
            "employer",
            &[
                "{s} works for {o}",
                "the employer of {s} is {o}",
                "{s} is employed by {o}",
            ],
        ),
        RelationSpec::new(
            "religion",
            &[
                "{s} follows {o}",
                "the religion of {s} is {o}",
                "{s} believes in {o}",
            ],
        ),
        RelationSpec::new(
            "genre",
            &[
                "{s} is known for {o}",
                "the genre of {s} is {o}",
                "{s} performs {o}",
            ],
        ),
        RelationSpec::new(
            "continent",
            &[
                "{s} is located in {o}",
                "the continent of {s} is {o}",
                "{s} lies in {o}",
            ],
        ),
    ]
}

/// Deterministic entity pools derived from a [`GenerationConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPools {
    pub subjects: Vec<String>,
    pub objects: BTreeMap<String, Vec<String>>,
    pub novel: Vec<String>,
}

impl EntityPools {
    pub fn build(config: &GenerationConfig) -> Result<Self> {
        validate_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.pool_seed);
        let mut taken = HashSet::new();
        let mut unique_words = |rng: &mut ChaCha8Rng, n: usize, what: &str, style: NameStyle| {
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0usize;
            while out.len() < n {
                attempts += 1;
                if attempts > 200 * n + 1000 {
                    return Err(Error::PoolExhausted(format!(
                        "cannot draw {n} distinct {what} names"
                    )));
                }
                let w = style.draw(rng);
                if taken.insert(w.clone()) {
                    out.push(w);
                }
            }
            Ok(out)
        };
        let subjects = unique_words(&mut rng, config.n_subjects, "subject", NameStyle::Base)?;
        let mut objects = BTreeMap::new();
        for rel in &config.relations {
            let mut pool = Vec::with_capacity(config.objects_per_relation);
            for _ in 0..config.objects_per_relation {
                let n_words = rng.random_range(1..=config.max_object_tokens.max(1));
                let words = unique_words(&mut rng, n_words, "object", NameStyle::Base)?;
                pool.push(words.join(" "));
            }
            objects.insert(rel.name.clone(), pool);
        }
        let novel = unique_words(&mut rng, config.n_novel_entities, "novel", NameStyle::Novel)?;
        Ok(Self {
            subjects,
            objects,
            novel,
        })
    }

    pub fn base_entities(&self) -> BTreeSet<&str> {
        self.subjects
            .iter()
            .map(String::as_str)
            .chain(
                self.objects
                    .values()
                    .flatten()
                    .flat_map(|o| o.split_whitespace()),
            )
            .collect()
    }
}

#[derive(Clone, Copy)]
enum NameStyle {
    /// Two consonant-vowel-consonant syllables.
    Base,
    /// Two to four consonant-vowel syllables.
    Novel,
}

impl NameStyle {
    fn draw(self, rng: &mut ChaCha8Rng) -> String {
        let mut s = String::new();
        let pick = |rng: &mut ChaCha8Rng, set: &[u8]| set[rng.random_range(0..set.len())] as char;
        match self {
            NameStyle::Base => {
                for _ in 0..2 {
                    s.push(pick(rng, CONSONANTS));
                    s.push(pick(rng, VOWELS));
                    s.push(pick(rng, CONSONANTS));
                }
            }
            NameStyle::Novel => {
                let n = rng.random_range(2..=4);
                for _ in 0..n {
                    s.push(pick(rng, CONSONANTS));
                    s.push(pick(rng, VOWELS));
                }
            }
        }
        s
    }
}

fn validate_config(config: &GenerationConfig) -> Result<()> {
    if config.relations.is_empty() {
        return Err(Error::Config("at least one relation is required".into()));
    }
    for rel in &config.relations {
        if rel.templates.is_empty() {
            return Err(Error::TemplateShortage {
                relation: rel.name.clone(),
                available: 0,
                needed: 1,
            });
        }
        for t in &rel.templates {
            let words: Vec<&str> = t.split_whitespace().collect();
            if words.last() != Some(&"{o}") || words.iter().filter(|w| **w == "{s}").count() != 1 {
                return Err(Error::Config(format!(
                    "template `{t}` must contain one {{s}} and end with {{o}}"
                )));
            }
        }
    }
    Ok(())
}

fn render(template: &str, subject: &str, object: &str) -> Vec<String> {
    let mut out = vec![BOS.to_owned()];
    for w in template.split_whitespace() {
        match w {
            "{s}" => out.extend(subject.split_whitespace().map(str::to_owned)),
            "{o}" => out.extend(object.split_whitespace().map(str::to_owned)),
            w => out.push(w.to_owned()),
        }
    }
    out.push(EOS.to_owned());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCorpus {
    pub vocabulary: Vec<String>,
    pub records: Vec<FactRecord>,
    pub templates: BTreeMap<String, Vec<String>>,
    pub object_pools: BTreeMap<String, Vec<String>>,
    /// Named partitions of record ids, e.g. `base` and `new`.
    pub splits: BTreeMap<String, Vec<FactId>>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl FactCorpus {
    fn from_parts(
        vocabulary: Vec<String>,
        records: Vec<FactRecord>,
        templates: BTreeMap<String, Vec<String>>,
        object_pools: BTreeMap<String, Vec<String>>,
        splits: BTreeMap<String, Vec<FactId>>,
    ) -> Self {
        let mut c = Self {
            vocabulary,
            records,
            templates,
            object_pools,
            splits,
            index: HashMap::new(),
        };
        c.rebuild_index();
        c
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn record(&self, id: FactId) -> Result<&FactRecord> {
        self.records
            .iter()
            .find(|r| r.id() == id)
            .ok_or(Error::UnknownFact(id))
    }

    /// Records of a named split, in split order.
    pub fn split(&self, name: &str) -> Vec<FactRecord> {
        let by_id: HashMap<FactId, &FactRecord> =
            self.records.iter().map(|r| (r.id(), r)).collect();
        self.splits
            .get(name)
            .map(|ids| {
                ids.iter()
                    .filter_map(|id| by_id.get(id).map(|r| (*r).clone()))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn tokenize<S: AsRef<str>>(&self, text: &[S]) -> Result<Vec<u32>> {
        text.iter()
            .map(|t| {
                self.index
                    .get(t.as_ref())
                    .copied()
                    .ok_or_else(|| Error::UnknownToken(t.as_ref().to_owned()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.vocabulary
                    .get(i as usize)
                    .cloned()
                    .ok_or(Error::UnknownTokenId(i))
            })
            .collect()
    }

    /// `m` paraphrases of `record` using templates other than its own.
    pub fn make_paraphrases(
        &self,
        record: &FactRecord,
        m: usize,
        seed: u64,
    ) -> Result<Vec<Vec<String>>> {
        paraphrases_from(&self.templates, record, m, seed)
    }

    /// One counterfact per target: same subject and relation, a different object.
    pub fn make_counterfacts(&self, target_ids: &[FactId], seed: u64) -> Result<Vec<FactRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(target_ids.len());
        for &id in target_ids {
            let target = self.record(id)?;
            let rel = &target.triple.relation;
            let alternatives: Vec<&String> = self
                .object_pools
                .get(rel)
                .map(|pool| {
                    pool.iter()
                        .filter(|o| **o != target.triple.object)
                        .collect()
                })
                .unwrap_or_default();
            if alternatives.is_empty() {
                return Err(Error::NoAlternativeObject {
                    relation: rel.clone(),
                    object: target.triple.object.clone(),
                });
            }
            let object = alternatives[rng.random_range(0..alternatives.len())].clone();
            let templates = &self.templates[rel];
            let triple = FactTriple {
                id: COUNTERFACT_ID_OFFSET + id,
                subject: target.triple.subject.clone(),
                relation: rel.clone(),
                object,
            };
            let surface = render(&templates[target.template], &triple.subject, &triple.object);
            let mut record = FactRecord {
                triple,
                template: target.template,
                surface,
                paraphrases: Vec::new(),
                origin: Origin::Counterfact,
                contradicts: Some(id),
            };
            // Same paraphrase templates as the target, so both read identically.
            record.paraphrases = target
                .paraphrases
                .iter()
                .map(|p| {
                    let t = paraphrase_template(templates, target, p);
                    render(&templates[t], &record.triple.subject, &record.triple.object)
                })
                .collect();
            out.push(record);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut c: FactCorpus = serde_json::from_str(s)?;
        c.rebuild_index();
        Ok(c)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint_bytes(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

fn paraphrase_template(templates: &[String], target: &FactRecord, paraphrase: &[String]) -> usize {
    (0..templates.len())
        .find(|&t| {
            render(&templates[t], &target.triple.subject, &target.triple.object) == paraphrase
        })
        .unwrap_or(target.template)
}

fn paraphrases_from(
    templates: &BTreeMap<String, Vec<String>>,
    record: &FactRecord,
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    let rel = &record.triple.relation;
    let available = templates.get(rel).map_or(0, Vec::len);
    if available < m + 1 {
        return Err(Error::TemplateShortage {
            relation: rel.clone(),
            available,
            needed: m + 1,
        });
    }
    let ts = &templates[rel];
    let mut others: Vec<usize> = (0..ts.len()).filter(|&t| t != record.template).collect();
    others.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ record.id()));
    Ok(others
        .into_iter()
        .take(m)
        .map(|t| render(&ts[t], &record.triple.subject, &record.triple.object))
        .collect())
}

fn build_vocabulary(config: &GenerationConfig, pools: &EntityPools) -> Vec<String> {
    let mut vocab = vec![PAD.to_owned(), BOS.to_owned(), EOS.to_owned()];
    let words: BTreeSet<&str> = config
        .relations
        .iter()
        .flat_map(|r| r.templates.iter())
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != "{s}" && *w != "{o}")
        .collect();
    let mut seen: HashSet<String> = vocab.iter().cloned().collect();
    let entity_words = pools
        .subjects
        .iter()
        .map(String::as_str)
        .chain(
            pools
                .objects
                .values()
                .flatten()
                .flat_map(|o| o.split_whitespace()),
        )
        .chain(pools.novel.iter().map(String::as_str));
    for w in words.into_iter().chain(entity_words) {
        if seen.insert(w.to_owned()) {
            vocab.push(w.to_owned());
        }
    }
    vocab
}

fn templates_map(config: &GenerationConfig) -> BTreeMap<String, Vec<String>> {
    config
        .relations
        .iter()
        .map(|r| (r.name.clone(), r.templates.clone()))
        .collect()
}

/// Generates `n_base + n_new` facts with distinct `(subject, relation)` pairs.
///
/// Records `0..n_base` form the `base` split and the rest the `new` split.
pub fn generate_corpus(
    n_base: usize,
    n_new: usize,
    seed: u64,
    config: &GenerationConfig,
) -> Result<FactCorpus> {
    if n_base == 0 || n_new == 0 {
        return Err(Error::Empty("generate_corpus needs n_base, n_new >= 1"));
    }
    let pools = EntityPools::build(config)?;
    let total = n_base + n_new;
    let n_pairs = pools.subjects.len() * config.relations.len();
    if total > n_pairs {
        return Err(Error::PoolExhausted(format!(
            "{total} facts requested but only {n_pairs} distinct (subject, relation) pairs exist"
        )));
    }
    for rel in &config.relations {
        if pools.objects[&rel.name].is_empty() {
            return Err(Error::PoolExhausted(format!(
                "relation `{}` has no objects",
                rel.name
            )));
        }
    }
    let templates = templates_map(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (0..pools.subjects.len())
        .flat_map(|s| (0..config.relations.len()).map(move |r| (s, r)))
        .collect();
    let chosen: Vec<(usize, usize)> = if config.disjoint_new_subjects {
        pairs.shuffle(&mut rng);
        let base_subjects: HashSet<usize> = pairs[..n_base].iter().map(|p| p.0).collect();
        let fresh = pairs[n_base..]
            .iter()
            .filter(|p| !base_subjects.contains(&p.0));
        let chosen: Vec<(usize, usize)> = pairs[..n_base]
            .iter()
            .chain(fresh.take(n_new))
            .copied()
            .collect();
        if chosen.len() < total {
            return Err(Error::PoolExhausted(format!(
                "only {} new facts have subjects disjoint from the base facts, {n_new} requested",
                chosen.len() - n_base
            )));
        }
        chosen
    } else {
        pairs.partial_shuffle(&mut rng, total);
        pairs.truncate(total);
        pairs
    };
    let mut records = Vec::with_capacity(total);
    for (i, &(s, r)) in chosen.iter().enumerate() {
        let rel = &config.relations[r];
        let pool = &pools.objects[&rel.name];
        let object = pool[rng.random_range(0..pool.len())].clone();
        let template = rng.random_range(0..rel.templates.len());
        let triple = FactTriple {
            id: i as FactId,
            subject: pools.subjects[s].clone(),
            relation: rel.name.clone(),
            object,
        };
        let surface = render(&rel.templates[template], &triple.subject, &triple.object);
        let mut record = FactRecord {
            triple,
            template,
            surface,
            paraphrases: Vec::new(),
            origin: Origin::Base,
            contradicts: None,
        };
        let m = config.n_paraphrases.min(rel.templates.len() - 1);
        record.paraphrases = paraphrases_from(&templates, &record, m, seed)?;
        records.push(record);
    }
    let mut splits = BTreeMap::new();
    splits.insert("base".to_owned(), (0..n_base as FactId).collect());
    splits.insert(
        "new".to_owned(),
        (n_base as FactId..total as FactId).collect(),
    );
    Ok(FactCorpus::from_parts(
        build_vocabulary(config, &pools),
        records,
        templates,
        pools.objects,
        splits,
    ))
}

/// Facts about fictitious entities drawn from the novel pool.
///
/// Relations and templates are shared with the base facts so the surface
/// structure carries no class signal.
pub fn make_novel_facts(n: usize, seed: u64, config: &GenerationConfig) -> Result<Vec<FactRecord>> {
    let pools = EntityPools::build(config)?;
    if n > 0 && pools.novel.len() < 2 {
        return Err(Error::PoolExhausted(
            "novel pool needs at least two names".into(),
        ));
    }
    let templates = templates_map(config);
    let n_pairs = pools.novel.len() * config.relations.len();
    if n > n_pairs {
        return Err(Error::PoolExhausted(format!(
            "{n} novel facts requested but only {n_pairs} novel pairs exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (0..pools.novel.len())
        .flat_map(|s| (0..config.relations.len()).map(move |r| (s, r)))
        .collect();
    pairs.partial_shuffle(&mut rng, n);
    let mut out = Vec::with_capacity(n);
    for (i, &(s, r)) in pairs[..n].iter().enumerate() {
        let rel = &config.relations[r];
        let subject = pools.novel[s].clone();
        let n_words = rng.random_range(1..=config.max_object_tokens.max(1));
        let object = (0..n_words)
            .map(|_| loop {
                let o = &pools.novel[rng.random_range(0..pools.novel.len())];
                if *o != subject {
                    break o.clone();
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        let template = rng.random_range(0..rel.templates.len());
        let triple = FactTriple {
            id: NOVEL_ID_OFFSET + i as FactId,
            subject,
            relation: rel.name.clone(),
            object,
        };
        let surface = render(&rel.templates[template], &triple.subject, &triple.object);
        let mut record = FactRecord {
            triple,
            template,
            surface,
            paraphrases: Vec::new(),
            origin: Origin::Novel,
            contradicts: None,
        };
        let m = config.n_paraphrases.min(rel.templates.len() - 1);
        record.paraphrases = paraphrases_from(&templates, &record, m, seed)?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<FactId, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: FactId) -> Option<usize> {
        self.assignments.get(&id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn test_ids(&self, fold: usize) -> Vec<FactId> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Shuffles `ids` and deals them round-robin into `k` folds.
pub fn split_folds(ids: &[FactId], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || ids.len() < k {
        return Err(Error::TooFewIds { n: ids.len(), k });
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldPlan { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenerationConfig {
        GenerationConfig {
            n_subjects: 30,
            objects_per_relation: 6,
            n_novel_entities: 40,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_pairs_distinct() {
        let cfg = small_config();
        let a = generate_corpus(2, 1, 7, &cfg).unwrap();
        let b = generate_corpus(2, 1, 7, &cfg).unwrap();
        assert_eq!(a.records.len(), 3);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let pairs: HashSet<_> = a
            .records
            .iter()
            .map(|r| (r.triple.subject.clone(), r.triple.relation.clone()))
            .collect();
        assert_eq!(pairs.len(), 3);
        assert_eq!(a.splits["base"].len(), 2);
        assert_eq!(a.splits["new"], vec![2]);
    }

    #[test]
    fn disjoint_new_subjects() {
        let cfg = GenerationConfig {
            disjoint_new_subjects: true,
            ..small_config()
        };
        let c = generate_corpus(20, 20, 3, &cfg).unwrap();
        let subjects = |split: &str| -> HashSet<String> {
            c.split(split)
                .into_iter()
                .map(|r| r.triple.subject)
                .collect()
        };
        assert!(subjects("base").is_disjoint(&subjects("new")));
        assert_eq!(c.split("new").len(), 20);
        assert!(matches!(
            generate_corpus(100, 100, 3, &cfg),
            Err(Error::PoolExhausted(_))
        ));
    }

    #[test]
    fn paper_sized_corpus() {
        let c = generate_corpus(2000, 1000, 0, &GenerationConfig::default()).unwrap();
        assert_eq!(c.records.len(), 3000);
        let pairs: HashSet<_> = c
            .records
            .iter()
            .map(|r| (&r.triple.subject, &r.triple.relation))
            .collect();
        assert_eq!(pairs.len(), 3000);
    }

    #[test]
    fn pool_exhaustion() {
        let cfg = GenerationConfig {
            n_subjects: 3,
            relations: default_relations()[..4].to_vec(),
            ..small_config()
        };
        assert!(matches!(
            generate_corpus(10, 5, 0, &cfg),
            Err(Error::PoolExhausted(_))
        ));
    }

    #[test]
    fn surfaces_end_with_object_then_eos_and_are_in_vocab() {
        let c = generate_corpus(20, 10, 3, &small_config()).unwrap();
        for r in &c.records {
            let n = r.surface.len();
            assert_eq!(r.surface[n - 1], EOS);
            assert_eq!(r.surface[n - 2], r.triple.object);
            assert_eq!(r.surface[0], BOS);
            c.tokenize(&r.surface).unwrap();
            for p in &r.paraphrases {
                assert_eq!(&p[p.len() - 2..], &r.surface[n - 2..]);
                assert_ne!(p, &r.surface);
                c.tokenize(p).unwrap();
            }
        }
    }

    #[test]
    fn counterfacts_contradict_their_targets() {
        let c = generate_corpus(20, 10, 3, &small_config()).unwrap();
        let ids: Vec<_> = c.splits["new"].clone();
        let cfs = c.make_counterfacts(&ids, 11).unwrap();
        assert_eq!(cfs.len(), ids.len());
        for (cf, id) in cfs.iter().zip(&ids) {
            let t = c.record(*id).unwrap();
            assert_eq!(cf.contradicts, Some(*id));
            assert_eq!(cf.origin, Origin::Counterfact);
            assert_eq!(cf.triple.subject, t.triple.subject);
            assert_eq!(cf.triple.relation, t.triple.relation);
            assert_ne!(cf.triple.object, t.triple.object);
            assert_eq!(cf.prompt(), t.prompt());
            c.tokenize(&cf.surface).unwrap();
        }
        assert!(c.make_counterfacts(&[], 0).unwrap().is_empty());
        assert!(matches!(
            c.make_counterfacts(&[999], 0),
            Err(Error::UnknownFact(999))
        ));
    }

    #[test]
    fn single_object_relation_cannot_be_contradicted() {
        let cfg = GenerationConfig {
            objects_per_relation: 1,
            ..small_config()
        };
        let c = generate_corpus(2, 1, 0, &cfg).unwrap();
        assert!(matches!(
            c.make_counterfacts(&[0], 0),
            Err(Error::NoAlternativeObject { .. })
        ));
    }

    #[test]
    fn novel_facts_use_fictitious_entities() {
        let cfg = small_config();
        let pools = EntityPools::build(&cfg).unwrap();
        let base = pools.base_entities();
        let novel = make_novel_facts(25, 5, &cfg).unwrap();
        assert_eq!(novel, make_novel_facts(25, 5, &cfg).unwrap());
        let c = generate_corpus(5, 5, 0, &cfg).unwrap();
        let relations: HashSet<_> = cfg.relations.iter().map(|r| r.name.as_str()).collect();
        for r in &novel {
            assert_eq!(r.origin, Origin::Novel);
            assert!(!base.contains(r.triple.subject.as_str()));
            assert!(!base.contains(r.triple.object.as_str()));
            assert!(relations.contains(r.triple.relation.as_str()));
            c.tokenize(&r.surface).unwrap();
        }
        assert!(make_novel_facts(0, 1, &cfg).unwrap().is_empty());
        let big = make_novel_facts(600, 1, &GenerationConfig::default()).unwrap();
        assert_eq!(big.len(), 600);
    }

    #[test]
    fn paraphrase_counts_and_shortage() {
        let c = generate_corpus(4, 1, 2, &small_config()).unwrap();
        let r = &c.records[0];
        let ps = c.make_paraphrases(r, 2, 9).unwrap();
        assert_eq!(ps.len(), 2);
        assert_ne!(ps[0], ps[1]);
        for p in &ps {
            assert_eq!(p[p.len() - 2], r.triple.object);
        }
        assert!(c.make_paraphrases(r, 0, 9).unwrap().is_empty());
        assert!(matches!(
            c.make_paraphrases(r, 3, 9),
            Err(Error::TemplateShortage { .. })
        ));
    }

    #[test]
    fn tokenize_round_trip() {
        let c = generate_corpus(4, 1, 2, &small_config()).unwrap();
        let r = &c.records[0];
        let text = r.surface.clone();
        let ids = c.tokenize(&text).unwrap();
        assert_eq!(ids.len(), text.len());
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(c.detokenize(&ids).unwrap(), text);
        assert!(c.tokenize::<&str>(&[]).unwrap().is_empty());
        assert!(matches!(
            c.tokenize(&["zzz-not-in-vocab"]),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn json_round_trip_restores_index() {
        let c = generate_corpus(4, 2, 2, &small_config()).unwrap();
        let back = FactCorpus::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            back.tokenize(&c.records[1].surface).unwrap(),
            c.tokenize(&c.records[1].surface).unwrap()
        );
    }

    #[test]
    fn fold_sizes() {
        let ids: Vec<FactId> = (0..10).collect();
        assert_eq!(split_folds(&ids, 5, 1).unwrap().fold_sizes(), vec![2; 5]);
        let ids: Vec<FactId> = (0..11).collect();
        let mut sizes = split_folds(&ids, 5, 1).unwrap().fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(split_folds(&[1, 2, 3], 5, 0).is_err());
        assert_eq!(
            split_folds(&ids, 5, 4).unwrap(),
            split_folds(&ids, 5, 4).unwrap()
        );
    }

    #[test]
    fn multi_token_objects() {
        let cfg = GenerationConfig {
            max_object_tokens: 3,
            ..small_config()
        };
        let c = generate_corpus(30, 10, 1, &cfg).unwrap();
        assert!(c.records.iter().any(|r| r.object_len() > 1));
        for r in &c.records {
            let n = r.surface.len();
            let obj = r.triple.object_tokens();
            assert_eq!(&r.surface[n - 1 - obj.len()..n - 1], obj.as_slice());
        }
    }
}

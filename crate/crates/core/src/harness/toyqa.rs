//! Desk-scale QA corpus with template-conditional answer priors that
//! shift between train and test.
//!
//! Every scene holds one object that determines the answer. Its features
//! are nonnegative activations: a dense per-category pattern scaled by a
//! salience amplitude, which is highest for the deciding object. Other
//! objects are less salient same-group distractors and scene clutter. Explanations name
//! the deciding object, attention maps peak on its box, and synthetic word
//! vectors group the answer words by topic.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::training::sub_seed;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::models::{Annotations, QaInstance};
use crate::proposal::{
    tokenize, AnswerScore, AttentionMap, CorpusObject, CorpusRecord, EmbeddingStore, ImageSize,
};

struct Group {
    name: &'static str,
    answers: [&'static str; 4],
    templates: [(&'static str, &'static str); 2],
}

const GROUPS: [Group; 3] = [
    Group {
        name: "food",
        answers: ["banana", "pizza", "donut", "sandwich"],
        templates: [
            ("what is the man eating", "the man is eating a {}"),
            ("what food is on the plate", "there is a {} on the plate"),
        ],
    },
    Group {
        name: "animal",
        answers: ["dog", "cat", "horse", "sheep"],
        templates: [
            ("what animal is on the grass", "a {} is on the grass"),
            ("what animal is near the tree", "the {} is near the tree"),
        ],
    },
    Group {
        name: "vehicle",
        answers: ["car", "bus", "truck", "bicycle"],
        templates: [
            ("what vehicle is on the street", "the {} is on the street"),
            (
                "what is parked on the street",
                "a {} is parked on the street",
            ),
        ],
    },
];

const CLUTTER: [&str; 6] = ["man", "table", "tree", "grass", "street", "plate"];

/// Alternative names used in some explanations.
const SYNONYMS: [(&str, &str); 3] = [("dog", "puppy"), ("bicycle", "bike"), ("cat", "kitten")];

/// Feature width; each category raises `CODE_ONES` of these dimensions
/// above a shared floor.
const CODE_DIM: usize = 12;
const CODE_ONES: usize = 3;
/// Category-independent presence dimensions.
const PRESENCE_DIM: usize = 4;
const IMAGE: f64 = 64.0;
const MAP: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyQaConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub num_objects: usize,
    /// Same-group distractor objects per scene.
    pub distractors: usize,
    /// Prior skew in `[0, 1]`: the train distribution of each template puts
    /// `shift` extra mass on one answer and the test distribution on another.
    pub shift: f64,
    pub feature_noise: f64,
    /// Salience of non-deciding objects; the deciding object has 1.
    pub background_salience: f64,
    /// Standard deviation of each object's salience.
    pub salience_noise: f64,
    /// Probability that a second same-group answer gets partial credit.
    pub partial_rate: f64,
    pub partial_score: f64,
    /// Probability that an explanation uses a synonym of the answer.
    pub synonym_rate: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ToyQaConfig {
    fn default() -> Self {
        ToyQaConfig {
            train_size: 1500,
            test_size: 600,
            num_objects: 8,
            distractors: 2,
            shift: 0.8,
            feature_noise: 0.5,
            background_salience: 0.5,
            salience_noise: 0.15,
            partial_rate: 0.2,
            partial_score: 0.3,
            synonym_rate: 0.2,
            embed_dim: 300,
            seed: 0,
        }
    }
}

impl ToyQaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::Config(format!(
                "shift {} outside [0, 1]",
                self.shift
            )));
        }
        if self.num_objects < 2 || self.distractors > 3 || self.distractors + 1 > self.num_objects {
            return Err(Error::Config(format!(
                "{} objects cannot hold the answer object and {} distractors",
                self.num_objects, self.distractors
            )));
        }
        if self.train_size == 0 || self.test_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "corpus sizes and embedding width must be positive".into(),
            ));
        }
        for (name, v) in [
            ("partial_rate", self.partial_rate),
            ("partial_score", self.partial_score),
            ("synonym_rate", self.synonym_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.partial_score >= 1.0 {
            return Err(Error::Config(
                "partial credit must stay below full credit".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.background_salience) {
            return Err(Error::Config(format!(
                "background_salience {} outside [0, 1)",
                self.background_salience
            )));
        }
        if self.feature_noise < 0.0 || self.salience_noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Feature width of each object.
    pub fn object_dim(&self) -> usize {
        CODE_DIM + PRESENCE_DIM
    }
}

/// Fixed answer list, in output-unit order.
pub fn answer_list() -> Vec<String> {
    GROUPS
        .iter()
        .flat_map(|g| g.answers.iter().map(|a| a.to_string()))
        .collect()
}

/// Template identifiers (`group/index`), in a fixed order.
pub fn template_ids() -> Vec<String> {
    GROUPS
        .iter()
        .flat_map(|g| (0..g.templates.len()).map(move |t| format!("{}/{t}", g.name)))
        .collect()
}

/// Answer distribution of one template within its group.
///
/// The train split favours answer `t mod 4` of the group; the test split
/// favours the next one.
pub fn template_prior(shift: f64, template: usize, test: bool) -> [f64; 4] {
    let major = (template + usize::from(test)) % 4;
    let mut pi = [(1.0 - shift) / 4.0; 4];
    pi[major] += shift;
    pi
}

/// Corpus files and the vocabularies needed to read them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMeta {
    pub answers: Vec<String>,
    /// Question vocabulary; id 0 is `<unk>`.
    pub vocab: Vec<String>,
    pub object_dim: usize,
    pub config: ToyQaConfig,
}

pub struct ToyCorpus {
    pub train: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    pub embeddings: EmbeddingStore,
    pub meta: ToyMeta,
}

pub const UNK: &str = "<unk>";

struct Codes {
    by_category: BTreeMap<String, Vec<f64>>,
}

impl Codes {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut by_category = BTreeMap::new();
        let mut seen = Vec::new();
        let names = GROUPS
            .iter()
            .flat_map(|g| g.answers.iter())
            .chain(CLUTTER.iter());
        for name in names {
            let code = loop {
                let mut dims: Vec<usize> = (0..CODE_DIM).collect();
                dims.shuffle(rng);
                let mut on = dims[..CODE_ONES].to_vec();
                on.sort_unstable();
                if !seen.contains(&on) {
                    break on;
                }
            };
            seen.push(code.clone());
            let mut v = vec![0.0; CODE_DIM];
            for d in code {
                v[d] = 1.0;
            }
            by_category.insert(name.to_string(), v);
        }
        Codes { by_category }
    }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn mix(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// Word vectors: answers and clutter share a topic direction within their
/// group (cosine about 0.45), synonyms sit at cosine about 0.8 from their
/// word, everything else is random.
pub fn synth_embeddings(dim: usize, seed: u64) -> Result<EmbeddingStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = EmbeddingStore::new(dim);
    let within: f64 = 0.45;
    let (a, b) = (within.sqrt(), (1.0 - within).sqrt());
    let mut topic_words: Vec<(Vec<f64>, Vec<&str>)> = GROUPS
        .iter()
        .map(|g| (unit(&mut rng, dim), g.answers.to_vec()))
        .collect();
    topic_words.push((unit(&mut rng, dim), CLUTTER.to_vec()));
    for (topic, words) in &topic_words {
        for w in words {
            let v = mix(topic, a, &unit(&mut rng, dim), b);
            store.insert(w, &v)?;
        }
    }
    for (word, syn) in SYNONYMS {
        let base = store.get(word).expect("answer word").to_vec();
        let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        let base: Vec<f64> = base.iter().map(|x| x / norm).collect();
        store.insert(syn, &mix(&base, 0.8, &unit(&mut rng, dim), 0.6))?;
    }
    let mut rest: Vec<String> = GROUPS
        .iter()
        .flat_map(|g| g.templates.iter())
        .flat_map(|(q, e)| tokenize(q).into_iter().chain(tokenize(e)))
        .filter(|w| w != "{}")
        .collect();
    rest.sort();
    rest.dedup();
    for w in rest {
        if store.get(&w).is_none() {
            store.insert(&w, &unit(&mut rng, dim))?;
        }
    }
    Ok(store)
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.random_range(10.0..22.0_f64).round();
    let h = rng.random_range(10.0..22.0_f64).round();
    let x1 = rng.random_range(0.0..IMAGE - w).round();
    let y1 = rng.random_range(0.0..IMAGE - h).round();
    [x1, y1, x1 + w, y1 + h]
}

fn attention(rng: &mut ChaCha8Rng, target: [f64; 4], other: Option<[f64; 4]>) -> AttentionMap {
    let cell = IMAGE / MAP as f64;
    let blob = |b: [f64; 4], amp: f64, r: usize, c: usize| {
        let cx = 0.5 * (b[0] + b[2]) / cell;
        let cy = 0.5 * (b[1] + b[3]) / cell;
        let sx = 0.25 * (b[2] - b[0]) / cell;
        let sy = 0.25 * (b[3] - b[1]) / cell;
        let dx = (c as f64 + 0.5 - cx) / sx;
        let dy = (r as f64 + 0.5 - cy) / sy;
        amp * (-0.5 * (dx * dx + dy * dy)).exp()
    };
    let mut data = Vec::with_capacity(MAP * MAP);
    for r in 0..MAP {
        for c in 0..MAP {
            let mut v = 0.01 + 0.01 * rng.random::<f64>() + blob(target, 1.0, r, c);
            if let Some(o) = other {
                v += blob(o, 0.3, r, c);
            }
            data.push(v);
        }
    }
    AttentionMap {
        height: MAP,
        width: MAP,
        data,
    }
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn features(rng: &mut ChaCha8Rng, code: &[f64], deciding: bool, cfg: &ToyQaConfig) -> Vec<f64> {
    let mean = if deciding {
        1.0
    } else {
        cfg.background_salience
    };
    let z: f64 = rng.sample(StandardNormal);
    let salience = (mean + cfg.salience_noise * z).max(0.05);
    code.iter()
        .copied()
        .chain(std::iter::repeat_n(1.0, PRESENCE_DIM))
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            (salience * x + cfg.feature_noise * z).max(0.0)
        })
        .collect()
}

fn scene(
    rng: &mut ChaCha8Rng,
    cfg: &ToyQaConfig,
    codes: &Codes,
    id: usize,
    test: bool,
) -> CorpusRecord {
    let num_templates: usize = GROUPS.iter().map(|g| g.templates.len()).sum();
    let t = rng.random_range(0..num_templates);
    let (g, local) = (t / 2, t % 2);
    let group = &GROUPS[g];
    let (question, explanation) = group.templates[local];
    let k = draw(rng, &template_prior(cfg.shift, t, test));
    let answer = group.answers[k];

    let mut categories = vec![(answer.to_string(), true)];
    let mut others: Vec<usize> = (0..4).filter(|&j| j != k).collect();
    others.shuffle(rng);
    for &j in others.iter().take(cfg.distractors) {
        categories.push((group.answers[j].to_string(), false));
    }
    let mut clutter = CLUTTER.to_vec();
    clutter.shuffle(rng);
    while categories.len() < cfg.num_objects {
        let c = clutter[(categories.len() - 1 - cfg.distractors) % clutter.len()];
        categories.push((c.to_string(), false));
    }
    let mut order: Vec<usize> = (0..categories.len()).collect();
    order.shuffle(rng);
    let causal = order.iter().position(|&o| o == 0).expect("answer object");

    let objects: Vec<CorpusObject> = order
        .iter()
        .map(|&o| {
            let (cat, deciding) = &categories[o];
            CorpusObject {
                category: cat.clone(),
                bbox: random_box(rng),
                feature: features(rng, &codes.by_category[cat], *deciding, cfg),
            }
        })
        .collect();

    let mut answers = vec![AnswerScore {
        answer: answer.to_string(),
        score: 1.0,
    }];
    if rng.random::<f64>() < cfg.partial_rate {
        let j = *others.choose(rng).expect("group has four answers");
        answers.push(AnswerScore {
            answer: group.answers[j].to_string(),
            score: cfg.partial_score,
        });
    }

    let named = match SYNONYMS.iter().find(|(w, _)| *w == answer) {
        Some((_, syn)) if rng.random::<f64>() < cfg.synonym_rate => syn,
        _ => answer,
    };
    let other_box = (rng.random::<f64>() < 0.5).then(|| objects[(causal + 1) % objects.len()].bbox);
    let map = attention(rng, objects[causal].bbox, other_box);

    CorpusRecord {
        id,
        qtype: Some(format!("{}/{local}", group.name)),
        question: question.to_string(),
        answers,
        image: ImageSize {
            width: IMAGE,
            height: IMAGE,
        },
        objects,
        explanation: Some(explanation.replace("{}", named)),
        attention: Some(map),
        causal_object: Some(causal),
    }
}

/// Generates train and test corpora, word vectors and metadata.
pub fn gen_toy_qa(cfg: &ToyQaConfig) -> Result<ToyCorpus> {
    cfg.validate()?;
    let mut code_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 10));
    let codes = Codes::new(&mut code_rng);
    let mut train_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 11));
    let mut test_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 12));
    let train: Vec<CorpusRecord> = (0..cfg.train_size)
        .map(|i| scene(&mut train_rng, cfg, &codes, i, false))
        .collect();
    let test: Vec<CorpusRecord> = (0..cfg.test_size)
        .map(|i| scene(&mut test_rng, cfg, &codes, cfg.train_size + i, true))
        .collect();
    let embeddings = synth_embeddings(cfg.embed_dim, sub_seed(cfg.seed, 13))?;
    let meta = ToyMeta {
        answers: answer_list(),
        vocab: build_vocab(&train),
        object_dim: cfg.object_dim(),
        config: cfg.clone(),
    };
    Ok(ToyCorpus {
        train,
        test,
        embeddings,
        meta,
    })
}

/// Sorted question vocabulary of `records`, preceded by `<unk>`.
pub fn build_vocab(records: &[CorpusRecord]) -> Vec<String> {
    let mut words: Vec<String> = records.iter().flat_map(|r| tokenize(&r.question)).collect();
    words.sort();
    words.dedup();
    std::iter::once(UNK.to_string()).chain(words).collect()
}

/// Converts corpus records into model instances. Unknown question words map
/// to `<unk>`; unknown answers are an error.
pub fn to_instances(
    records: &[CorpusRecord],
    answers: &[String],
    vocab: &[String],
) -> Result<Vec<QaInstance>> {
    let word_id: BTreeMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let answer_id: BTreeMap<&str, usize> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let unk = word_id.get(UNK).copied().unwrap_or(0);
    records
        .iter()
        .map(|r| {
            let dim = r.objects.first().map_or(0, |o| o.feature.len());
            if r.objects.iter().any(|o| o.feature.len() != dim) {
                return Err(Error::InvalidInstance(format!(
                    "record {}: ragged object features",
                    r.id
                )));
            }
            let features = Array::matrix(
                r.objects.len(),
                dim,
                r.objects
                    .iter()
                    .flat_map(|o| o.feature.iter().copied())
                    .collect(),
            )?;
            let tokens = tokenize(&r.question)
                .iter()
                .map(|w| word_id.get(w.as_str()).copied().unwrap_or(unk))
                .collect();
            let mut gold = vec![0.0_f64; answers.len()];
            for a in &r.answers {
                let &i = answer_id.get(a.answer.as_str()).ok_or_else(|| {
                    Error::InvalidInstance(format!(
                        "record {}: unknown answer `{}`",
                        r.id, a.answer
                    ))
                })?;
                gold[i] = gold[i].max(a.score);
            }
            let mut inst = QaInstance::new(features, tokens, gold)?;
            inst.qtype = r.qtype.clone();
            inst.annotations = Annotations {
                explanation: r.explanation.clone(),
                attention: r.attention.clone(),
                objects: r.object_meta(),
            };
            Ok(inst)
        })
        .collect()
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const META_FILE: &str = "meta.json";

impl ToyCorpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::proposal::write_corpus(&dir.join(TRAIN_FILE), &self.train)?;
        crate::proposal::write_corpus(&dir.join(TEST_FILE), &self.test)?;
        self.embeddings.save(&dir.join(EMBEDDINGS_FILE))?;
        let meta = dir.join(META_FILE);
        std::fs::write(&meta, serde_json::to_string_pretty(&self.meta)?)
            .map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Ok(ToyCorpus {
            train: crate::proposal::read_corpus(&dir.join(TRAIN_FILE))?,
            test: crate::proposal::read_corpus(&dir.join(TEST_FILE))?,
            embeddings: EmbeddingStore::load(&dir.join(EMBEDDINGS_FILE))?,
            meta: serde_json::from_str(&text)?,
        })
    }
}

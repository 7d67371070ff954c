use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::embeddings::{cosine_similarity, EmbeddingStore};
use super::tagger::{extract_nouns, PosTagger};
use super::{AttentionMap, BBox, ObjectMeta};
use crate::error::{Error, Result};

/// Default cosine-similarity threshold for grounding nouns to objects.
pub const DEFAULT_THRESHOLD: f64 = 0.6;
/// Default proposal set size.
pub const DEFAULT_PROPOSAL_SIZE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMethod {
    Visual,
    Textual,
    Qa,
}

impl std::str::FromStr for ProposalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(ProposalMethod::Visual),
            "textual" => Ok(ProposalMethod::Textual),
            "qa" => Ok(ProposalMethod::Qa),
            other => Err(Error::Config(format!("unknown proposal method `{other}`"))),
        }
    }
}

impl std::fmt::Display for ProposalMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProposalMethod::Visual => "visual",
            ProposalMethod::Textual => "textual",
            ProposalMethod::Qa => "qa",
        })
    }
}

/// Candidate influential objects, ordered by descending score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub method: ProposalMethod,
}

impl ProposalSet {
    pub fn empty(method: ProposalMethod) -> Self {
        ProposalSet {
            indices: Vec::new(),
            scores: Vec::new(),
            method,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The influence losses need at least one proposed and one other object.
    pub fn is_usable(&self, num_objects: usize) -> bool {
        !self.indices.is_empty() && self.indices.len() < num_objects
    }

    fn top_k(scores: &[f64], keep: impl Fn(f64) -> bool, k: usize, method: ProposalMethod) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| keep(scores[i])).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        ProposalSet {
            scores: order.iter().map(|&i| scores[i]).collect(),
            indices: order,
            method,
        }
    }
}

/// Ratio of mean attention density inside each box to the mean density
/// outside it. A box holding all of the mass scores `f64::INFINITY`.
///
/// Boxes are in map cell coordinates; a cell belongs to a box when its
/// centre lies in `[x1, x2) × [y1, y2)`.
pub fn score_objects_visual(map: &AttentionMap, boxes: &[BBox]) -> Result<Vec<f64>> {
    map.validate()?;
    let total: f64 = map.data.iter().sum();
    let cells = map.height * map.width;
    boxes
        .iter()
        .map(|b| {
            b.validate(map.width as f64, map.height as f64)?;
            let mut inside_mass = 0.0;
            let mut inside_cells = 0usize;
            for r in 0..map.height {
                for c in 0..map.width {
                    if b.contains(c as f64 + 0.5, r as f64 + 0.5) {
                        inside_mass += map.data[r * map.width + c] / total;
                        inside_cells += 1;
                    }
                }
            }
            if inside_cells == 0 {
                return Err(Error::InvalidAttention(format!(
                    "box {b:?} covers no map cell"
                )));
            }
            if inside_cells == cells {
                return Err(Error::InvalidAttention(format!(
                    "box {b:?} covers the whole map; nothing lies outside"
                )));
            }
            let outside_mass = (1.0 - inside_mass).max(0.0);
            let inside = inside_mass / inside_cells as f64;
            let outside = outside_mass / (cells - inside_cells) as f64;
            Ok(if outside == 0.0 {
                f64::INFINITY
            } else {
                inside / outside
            })
        })
        .collect()
}

/// Top-`k` objects by visual score, ties to the lower index.
pub fn build_proposal_visual(scores: &[f64], k: usize) -> ProposalSet {
    ProposalSet::top_k(scores, |_| true, k, ProposalMethod::Visual)
}

/// Objects whose category name is similar (cosine > `threshold`) to one
/// of `nouns`, best `k` first. Multi-word categories use the summed vector.
pub fn build_proposal_textual(
    nouns: &[String],
    objects: &[ObjectMeta],
    store: &EmbeddingStore,
    threshold: f64,
    k: usize,
) -> ProposalSet {
    grounded(nouns, objects, store, threshold, k, ProposalMethod::Textual)
}

/// Same grounding as [`build_proposal_textual`], with nouns taken from the
/// question and answer text.
pub fn build_proposal_qa(
    question: &str,
    answer: &str,
    objects: &[ObjectMeta],
    store: &EmbeddingStore,
    tagger: &dyn PosTagger,
    threshold: f64,
    k: usize,
) -> ProposalSet {
    let mut nouns = extract_nouns(question, tagger);
    for n in extract_nouns(answer, tagger) {
        if !nouns.contains(&n) {
            nouns.push(n);
        }
    }
    grounded(&nouns, objects, store, threshold, k, ProposalMethod::Qa)
}

/// Per-object grounding score: max cosine similarity between the category
/// name and any noun.
pub fn grounding_scores(
    nouns: &[String],
    objects: &[ObjectMeta],
    store: &EmbeddingStore,
) -> Vec<f64> {
    let noun_vecs: Vec<Vec<f64>> = nouns.iter().map(|n| store.phrase(n)).collect();
    objects
        .iter()
        .map(|o| {
            let cat = store.phrase(&o.category);
            noun_vecs
                .iter()
                .map(|n| cosine_similarity(&cat, n))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn grounded(
    nouns: &[String],
    objects: &[ObjectMeta],
    store: &EmbeddingStore,
    threshold: f64,
    k: usize,
    method: ProposalMethod,
) -> ProposalSet {
    if nouns.is_empty() {
        return ProposalSet::empty(method);
    }
    let scores = grounding_scores(nouns, objects, store);
    ProposalSet::top_k(&scores, |s| s > threshold, k, method)
}

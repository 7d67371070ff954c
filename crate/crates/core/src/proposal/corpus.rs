//! JSON-lines QA corpus: one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::builders::{
    build_proposal_qa, build_proposal_textual, build_proposal_visual, score_objects_visual,
    ProposalMethod, ProposalSet,
};
use super::embeddings::EmbeddingStore;
use super::tagger::{extract_nouns, PosTagger};
use super::{AttentionMap, BBox, ObjectMeta};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub answer: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusObject {
    pub category: String,
    /// `[x1, y1, x2, y2]` in image pixels.
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    pub question: String,
    pub answers: Vec<AnswerScore>,
    pub image: ImageSize,
    pub objects: Vec<CorpusObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    /// Row-major human attention over the image, at its own resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionMap>,
    /// Generator ground truth: index of the object that determines the answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub causal_object: Option<usize>,
}

impl CorpusRecord {
    /// Answer with the highest soft score (first on ties).
    pub fn top_answer(&self) -> Option<&AnswerScore> {
        self.answers
            .iter()
            .fold(None, |best: Option<&AnswerScore>, a| match best {
                Some(b) if b.score >= a.score => Some(b),
                _ => Some(a),
            })
    }

    pub fn object_meta(&self) -> Vec<ObjectMeta> {
        self.objects
            .iter()
            .map(|o| ObjectMeta {
                category: o.category.clone(),
                bbox: BBox::from_array(o.bbox),
            })
            .collect()
    }

    /// Boxes rescaled from image pixels to attention-map cells.
    pub fn boxes_in_map(&self, map: &AttentionMap) -> Vec<BBox> {
        let sx = map.width as f64 / self.image.width;
        let sy = map.height as f64 / self.image.height;
        self.objects
            .iter()
            .map(|o| BBox {
                x1: o.bbox[0] * sx,
                y1: o.bbox[1] * sy,
                x2: o.bbox[2] * sx,
                y2: o.bbox[3] * sy,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    pub method: ProposalMethod,
    pub threshold: f64,
    pub size: usize,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams {
            method: ProposalMethod::Textual,
            threshold: super::DEFAULT_THRESHOLD,
            size: super::DEFAULT_PROPOSAL_SIZE,
        }
    }
}

/// Builds the proposal set of one record. Missing annotations give an
/// empty (unusable) set.
pub fn proposals_for_record(
    rec: &CorpusRecord,
    params: &ProposalParams,
    store: &EmbeddingStore,
    tagger: &dyn PosTagger,
) -> Result<ProposalSet> {
    let objects = rec.object_meta();
    Ok(match params.method {
        ProposalMethod::Visual => match &rec.attention {
            Some(map) => {
                let scores = score_objects_visual(map, &rec.boxes_in_map(map))?;
                build_proposal_visual(&scores, params.size)
            }
            None => ProposalSet::empty(ProposalMethod::Visual),
        },
        ProposalMethod::Textual => match &rec.explanation {
            Some(text) => {
                let nouns = extract_nouns(text, tagger);
                build_proposal_textual(&nouns, &objects, store, params.threshold, params.size)
            }
            None => ProposalSet::empty(ProposalMethod::Textual),
        },
        ProposalMethod::Qa => {
            let answer = rec.top_answer().map(|a| a.answer.as_str()).unwrap_or("");
            build_proposal_qa(
                &rec.question,
                answer,
                &objects,
                store,
                tagger,
                params.threshold,
                params.size,
            )
        }
    })
}

/// Fraction of the members of `reference` that also appear in `candidate`.
pub fn containment(candidate: &ProposalSet, reference: &ProposalSet) -> Option<f64> {
    if reference.is_empty() {
        return None;
    }
    let hits = reference
        .indices
        .iter()
        .filter(|i| candidate.indices.contains(i))
        .count();
    Some(hits as f64 / reference.len() as f64)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

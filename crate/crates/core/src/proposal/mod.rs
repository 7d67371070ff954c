//! Construction of proposed influential object sets from visual
//! attention, textual explanations, or the question/answer text.

mod builders;
mod corpus;
mod embeddings;
mod tagger;

use serde::{Deserialize, Serialize};

pub use builders::{
    build_proposal_qa, build_proposal_textual, build_proposal_visual, grounding_scores,
    score_objects_visual, ProposalMethod, ProposalSet, DEFAULT_PROPOSAL_SIZE, DEFAULT_THRESHOLD,
};
pub use corpus::{
    containment, proposals_for_record, read_corpus, write_corpus, AnswerScore, CorpusObject,
    CorpusRecord, ImageSize, ProposalParams,
};
pub use embeddings::{cosine_similarity, EmbeddingStore};
pub use tagger::{extract_nouns, tokenize, LexiconTagger, PosTag, PosTagger};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn from_array(b: [f64; 4]) -> Self {
        BBox {
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Positive area and inside `[0, width] × [0, height]`.
    pub fn validate(&self, width: f64, height: f64) -> Result<()> {
        let inside = self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height;
        if !(self.x2 > self.x1 && self.y2 > self.y1 && inside) {
            return Err(Error::InvalidAttention(format!(
                "box {self:?} is empty or outside {width}×{height}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub category: String,
    pub bbox: BBox,
}

/// Non-negative attention energy over an `height × width` grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn validate(&self) -> Result<()> {
        if self.height * self.width != self.data.len() || self.data.is_empty() {
            return Err(Error::InvalidAttention(format!(
                "{}×{} map with {} values",
                self.height,
                self.width,
                self.data.len()
            )));
        }
        if self.data.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidAttention(
                "negative or non-finite energy".into(),
            ));
        }
        if self.data.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidAttention("map has no energy".into()));
        }
        Ok(())
    }
}

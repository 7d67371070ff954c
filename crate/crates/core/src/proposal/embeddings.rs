use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Word vectors loaded from a GloVe-style text file:
/// one `word f1 f2 ... fd` line per entry, every line with the same `d`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    index: HashMap<String, usize>,
    words: Vec<String>,
    vectors: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Adds a word; an existing entry keeps its first vector.
    pub fn insert(&mut self, word: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::EmbeddingFormat {
                line: self.words.len() + 1,
                msg: format!("expected {} values, got {}", self.dim, vector.len()),
            });
        }
        if self.index.contains_key(word) {
            return Ok(());
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut store: Option<EmbeddingStore> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let word = fields.next().unwrap_or_default();
            let values = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::EmbeddingFormat {
                        line: lineno + 1,
                        msg: format!("`{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(Error::EmbeddingFormat {
                    line: lineno + 1,
                    msg: "no vector values".into(),
                });
            }
            let s = store.get_or_insert_with(|| EmbeddingStore::new(values.len()));
            if values.len() != s.dim {
                return Err(Error::EmbeddingFormat {
                    line: lineno + 1,
                    msg: format!("expected {} values, got {}", s.dim, values.len()),
                });
            }
            s.insert(word, &values)?;
        }
        Ok(store.unwrap_or_default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_glove_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_glove_string(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for x in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }

    /// `None` marks an out-of-vocabulary word.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Sum of the vectors of the whitespace-separated words of `text`.
    /// Unknown words contribute nothing, so a fully unknown phrase is the
    /// zero vector.
    pub fn phrase(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for w in text.split_whitespace() {
            if let Some(v) = self.get(&w.to_lowercase()) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
        }
        acc
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

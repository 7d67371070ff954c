use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::proposal::{AttentionMap, ObjectMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    /// GRU hidden size; also the size of the question vector.
    pub hidden: usize,
    pub object_dim: usize,
    pub joint_dim: usize,
    pub num_answers: usize,
    pub max_question_len: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            vocab_size: 64,
            word_dim: 16,
            hidden: 32,
            object_dim: 16,
            joint_dim: 32,
            num_answers: 12,
            max_question_len: 14,
        }
    }
}

// Positional layout of the parameter store.
const EMBED: usize = 0;
const GRU_W_Z: usize = 1;
const GRU_U_Z: usize = 2;
const GRU_B_Z: usize = 3;
const GRU_W_R: usize = 4;
const GRU_U_R: usize = 5;
const GRU_B_R: usize = 6;
const GRU_W_N: usize = 7;
const GRU_U_N: usize = 8;
const GRU_B_N: usize = 9;
const FUSE_V_W: usize = 10;
const FUSE_V_B: usize = 11;
const FUSE_Q_W: usize = 12;
const FUSE_Q_B: usize = 13;
const ATTENTION: usize = 14;
const HEAD_W: usize = 15;
const HEAD_B: usize = 16;

/// Question-answering model over a set of object feature vectors.
///
/// The question is encoded by a single-layer GRU. Each object is projected
/// and multiplied elementwise with the projected question; a softmax over
/// objects pools these joint vectors, and a linear head with per-answer
/// sigmoids produces independent confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct QaModel {
    pub config: QaConfig,
    pub params: ParamStore,
}

/// Annotations used to build proposal sets; not seen by the model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub explanation: Option<String>,
    pub attention: Option<AttentionMap>,
    pub objects: Vec<ObjectMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaInstance {
    /// `[num_objects, object_dim]`.
    pub features: Array,
    pub tokens: Vec<usize>,
    /// Soft score per answer, in `[0, 1]`.
    pub gold: Vec<f64>,
    /// Ground-truth answer: the index with the highest soft score.
    pub answer: usize,
    pub qtype: Option<String>,
    pub annotations: Annotations,
}

impl QaInstance {
    pub fn new(features: Array, tokens: Vec<usize>, gold: Vec<f64>) -> Result<Self> {
        let (num_objects, _) = features.dims2("instance features")?;
        if num_objects < 2 {
            return Err(Error::InvalidInstance(format!(
                "need at least 2 objects, got {num_objects}"
            )));
        }
        if gold.is_empty() || gold.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidInstance(
                "gold soft scores must be non-empty and within [0, 1]".into(),
            ));
        }
        let answer = crate::models::argmax(&gold);
        Ok(QaInstance {
            features,
            tokens,
            gold,
            answer,
            qtype: None,
            annotations: Annotations::default(),
        })
    }

    pub fn num_objects(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Tensors of one recorded forward pass.
pub struct QaForward {
    /// Object features registered as a leaf, `[num_objects, object_dim]`.
    pub objects: Tensor,
    pub question: Tensor,
    /// `[1, num_answers]`.
    pub probs: Tensor,
}

impl QaModel {
    pub fn new(config: QaConfig, seed: u64) -> Result<Self> {
        if config.vocab_size == 0 || config.num_answers == 0 || config.max_question_len == 0 {
            return Err(Error::Config(format!("degenerate QA model {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut p = ParamStore::new();
        p.insert_uniform("embed", &[c.vocab_size, c.word_dim], c.word_dim, &mut rng);
        for gate in ["z", "r", "n"] {
            p.insert_uniform(
                format!("gru.w_{gate}"),
                &[c.word_dim, c.hidden],
                c.word_dim,
                &mut rng,
            );
            p.insert_uniform(
                format!("gru.u_{gate}"),
                &[c.hidden, c.hidden],
                c.hidden,
                &mut rng,
            );
            p.insert_uniform(format!("gru.b_{gate}"), &[1, c.hidden], c.hidden, &mut rng);
        }
        p.insert_uniform(
            "fuse.v_w",
            &[c.object_dim, c.joint_dim],
            c.object_dim,
            &mut rng,
        );
        p.insert_uniform("fuse.v_b", &[1, c.joint_dim], c.object_dim, &mut rng);
        p.insert_uniform("fuse.q_w", &[c.hidden, c.joint_dim], c.hidden, &mut rng);
        p.insert_uniform("fuse.q_b", &[1, c.joint_dim], c.hidden, &mut rng);
        p.insert_uniform("attention", &[c.joint_dim, 1], c.joint_dim, &mut rng);
        p.insert_uniform(
            "head.w",
            &[c.joint_dim, c.num_answers],
            c.joint_dim,
            &mut rng,
        );
        p.insert_uniform("head.b", &[1, c.num_answers], c.joint_dim, &mut rng);
        debug_assert_eq!(p.len(), HEAD_B + 1);
        Ok(QaModel { config, params: p })
    }

    pub fn from_params(config: QaConfig, params: ParamStore) -> Result<Self> {
        let reference = QaModel::new(config.clone(), 0)?;
        if reference.params.names() != params.names()
            || reference
                .params
                .values()
                .iter()
                .zip(params.values())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint(
                "parameter layout does not match the QA model configuration".into(),
            ));
        }
        Ok(QaModel { config, params })
    }

    /// Final hidden state of the GRU over `tokens`, shape `[1, hidden]`.
    pub fn encode_question(&self, p: &[Tensor], tokens: &[usize]) -> Result<Tensor> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::InvalidQuestion("empty token sequence".into()));
        }
        if tokens.len() > c.max_question_len {
            return Err(Error::InvalidQuestion(format!(
                "{} tokens exceed the maximum of {}",
                tokens.len(),
                c.max_question_len
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab: c.vocab_size,
            });
        }
        let words = p[EMBED].index_rows(tokens)?;
        let xz = words.matmul(&p[GRU_W_Z])?;
        let xr = words.matmul(&p[GRU_W_R])?;
        let xn = words.matmul(&p[GRU_W_N])?;
        let mut h = Tensor::constant(Array::zeros(&[1, c.hidden]));
        for t in 0..tokens.len() {
            let z = xz
                .row(t)?
                .add(&h.matmul(&p[GRU_U_Z])?)?
                .add(&p[GRU_B_Z])?
                .sigmoid()?;
            let r = xr
                .row(t)?
                .add(&h.matmul(&p[GRU_U_R])?)?
                .add(&p[GRU_B_R])?
                .sigmoid()?;
            let n = xn
                .row(t)?
                .add(&r.mul(&h)?.matmul(&p[GRU_U_N])?)?
                .add(&p[GRU_B_N])?
                .tanh()?;
            // h' = (1 - z) * n + z * h
            h = n.add(&z.mul(&h.sub(&n)?)?)?;
        }
        Ok(h)
    }

    /// Per-answer confidences `[1, num_answers]`.
    ///
    /// Objects with `mask[i] == false` receive exactly zero attention.
    pub fn predict(
        &self,
        p: &[Tensor],
        objects: &Tensor,
        question: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let (n, d) = objects.value().dims2("predict")?;
        if n == 0 {
            return Err(Error::InvalidInstance("no objects".into()));
        }
        if d != self.config.object_dim {
            return Err(Error::ShapeMismatch {
                op: "predict",
                lhs: objects.shape().to_vec(),
                rhs: vec![n, self.config.object_dim],
            });
        }
        let keep: Vec<bool> = match mask {
            Some(m) if m.len() != n => {
                return Err(Error::InvalidInstance(format!(
                    "mask of length {} for {n} objects",
                    m.len()
                )))
            }
            Some(m) if !m.iter().any(|&k| k) => {
                return Err(Error::InvalidInstance("every object is masked".into()))
            }
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };

        let pv = objects
            .matmul(&p[FUSE_V_W])?
            .add(&p[FUSE_V_B].expand_axis(0, n)?)?
            .relu()?;
        let pq = question.matmul(&p[FUSE_Q_W])?.add(&p[FUSE_Q_B])?.relu()?;
        let joint = pv.mul(&pq.expand_axis(0, n)?)?;

        let energy = joint.matmul(&p[ATTENTION])?;
        // Softmax is shift invariant; the shift is a constant.
        let shift = energy
            .value()
            .data()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&e, _)| e)
            .fold(f64::NEG_INFINITY, f64::max);
        let mask_t = Tensor::constant(Array::new(
            vec![n, 1],
            keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )?);
        let weights = energy.add_scalar(-shift)?.exp()?.mul(&mask_t)?;
        let alpha = weights.div(&weights.sum()?)?;
        let pooled = alpha.transpose()?.matmul(&joint)?;

        pooled.matmul(&p[HEAD_W])?.add(&p[HEAD_B])?.sigmoid()
    }

    /// Records a full forward pass with the object features as a leaf.
    pub fn forward(&self, tape: &Tape, p: &[Tensor], inst: &QaInstance) -> Result<QaForward> {
        let objects = tape.var(inst.features.clone());
        let question = self.encode_question(p, &inst.tokens)?;
        let probs = self.predict(p, &objects, &question, None)?;
        Ok(QaForward {
            objects,
            question,
            probs,
        })
    }

    /// Confidences without recording a tape.
    pub fn predict_probs(&self, inst: &QaInstance) -> Result<Vec<f64>> {
        let p = self.params.constants();
        let q = self.encode_question(&p, &inst.tokens)?;
        let probs = self.predict(&p, &Tensor::constant(inst.features.clone()), &q, None)?;
        Ok(probs.value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> QaConfig {
        QaConfig {
            vocab_size: 10,
            word_dim: 4,
            hidden: 5,
            object_dim: 3,
            joint_dim: 6,
            num_answers: 4,
            max_question_len: 14,
        }
    }

    #[test]
    fn zero_gru_weights_give_zero_question() {
        let mut m = QaModel::new(tiny(), 1).unwrap();
        for (name, v) in m
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v.shape().to_vec()))
            .collect::<Vec<_>>()
        {
            if name.starts_with("gru.") {
                *m.params.get_mut(&name).unwrap() = Array::zeros(&v);
            }
        }
        let p = m.params.constants();
        let q = m.encode_question(&p, &[3]).unwrap();
        assert!(q.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn question_validation() {
        let m = QaModel::new(tiny(), 1).unwrap();
        let p = m.params.constants();
        assert!(matches!(
            m.encode_question(&p, &[]),
            Err(Error::InvalidQuestion(_))
        ));
        assert!(matches!(
            m.encode_question(&p, &[10]),
            Err(Error::UnknownToken { id: 10, vocab: 10 })
        ));
        assert!(matches!(
            m.encode_question(&p, &[1; 15]),
            Err(Error::InvalidQuestion(_))
        ));
        assert!(m.encode_question(&p, &[1; 14]).is_ok());
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m = QaModel::new(tiny(), 2).unwrap();
        *m.params.get_mut("head.w").unwrap() = Array::zeros(&[6, 4]);
        *m.params.get_mut("head.b").unwrap() = Array::zeros(&[1, 4]);
        let inst = QaInstance::new(
            Array::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap(),
            vec![1, 2],
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(m.predict_probs(&inst).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn empty_object_set_is_an_error() {
        let m = QaModel::new(tiny(), 2).unwrap();
        let p = m.params.constants();
        let q = m.encode_question(&p, &[1]).unwrap();
        let objects = Tensor::constant(Array::zeros(&[0, 3]));
        assert!(m.predict(&p, &objects, &q, None).is_err());
    }

    #[test]
    fn instance_invariants() {
        let f = Array::zeros(&[1, 3]);
        assert!(QaInstance::new(f, vec![1], vec![1.0]).is_err());
        let f = Array::zeros(&[2, 3]);
        assert!(QaInstance::new(f.clone(), vec![1], vec![1.2]).is_err());
        let inst = QaInstance::new(f, vec![1], vec![0.3, 0.9, 0.0]).unwrap();
        assert_eq!(inst.answer, 1);
    }
}

//! Training objectives: binary cross-entropy on soft scores, the influence
//! strengthening loss, and the self-critical loss.
//!
//! The two gradient-based terms are built from sensitivities recorded with
//! `create_graph`, so differentiating them with respect to the parameters
//! goes through a second backward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{MlpClassifier, QaInstance, QaModel};
use crate::proposal::{cosine_similarity, EmbeddingStore};
use crate::sensitivity::{column_sensitivities, most_influential, object_sensitivities};

/// Confidences are clamped to `[ε, 1 − ε]` inside the logarithms.
pub const BCE_EPS: f64 = 1e-12;
pub const DEFAULT_BUCKET_SIZE: usize = 5;

/// Mean binary cross-entropy between confidences and soft targets of the
/// same shape.
pub fn vqa_loss(probs: &Tensor, gold: &Array) -> Result<Tensor> {
    if probs.shape() != gold.shape() {
        return Err(Error::ShapeMismatch {
            op: "vqa_loss",
            lhs: probs.shape().to_vec(),
            rhs: gold.shape().to_vec(),
        });
    }
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = p.ln()?.mul(&Tensor::constant(gold.clone()))?;
    let neg = p
        .neg()?
        .add_scalar(1.0)?
        .ln()?
        .mul(&Tensor::constant(gold.map(|s| 1.0 - s)))?;
    pos.add(&neg)?.mean()?.neg()
}

/// Answers ranked above the ground truth, most confident first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub indices: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl Bucket {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Up to `capacity` answers with confidence strictly above `probs[gt]`,
/// in descending confidence (ties to the lower index).
pub fn build_bucket(probs: &[f64], gt: usize, capacity: usize) -> Bucket {
    let Some(&threshold) = probs.get(gt) else {
        return Bucket::default();
    };
    let mut above: Vec<usize> = (0..probs.len()).filter(|&a| probs[a] > threshold).collect();
    above.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    above.truncate(capacity);
    Bucket {
        confidences: above.iter().map(|&a| probs[a]).collect(),
        indices: above,
    }
}

/// Cosine distance between the summed word vectors of two answers.
/// A phrase with no known words has the zero vector and gets weight 1.
pub fn answer_weight(answer: &str, ground_truth: &str, store: &EmbeddingStore) -> f64 {
    if answer == ground_truth {
        return 0.0;
    }
    1.0 - cosine_similarity(&store.phrase(answer), &store.phrase(ground_truth))
}

/// Per-answer weights of the self-critical loss for one ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerWeights {
    pub weights: Vec<f64>,
}

impl AnswerWeights {
    pub fn from_store(answers: &[String], gt: usize, store: &EmbeddingStore) -> Self {
        let weights = answers
            .iter()
            .enumerate()
            .map(|(a, text)| {
                if a == gt {
                    0.0
                } else {
                    answer_weight(text, &answers[gt], store)
                }
            })
            .collect();
        AnswerWeights { weights }
    }

    /// Weight 1 for every answer except the ground truth.
    pub fn uniform(num_answers: usize, gt: usize) -> Self {
        AnswerWeights {
            weights: (0..num_answers)
                .map(|a| if a == gt { 0.0 } else { 1.0 })
                .collect(),
        }
    }
}

/// Precomputed weight table: row `gt` holds the weights for that ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    rows: Vec<Vec<f64>>,
}

impl WeightTable {
    pub fn from_store(answers: &[String], store: &EmbeddingStore) -> Self {
        WeightTable {
            rows: (0..answers.len())
                .map(|gt| AnswerWeights::from_store(answers, gt, store).weights)
                .collect(),
        }
    }

    pub fn uniform(num_answers: usize) -> Self {
        WeightTable {
            rows: (0..num_answers)
                .map(|gt| AnswerWeights::uniform(num_answers, gt).weights)
                .collect(),
        }
    }

    pub fn row(&self, gt: usize) -> &[f64] {
        &self.rows[gt]
    }

    pub fn num_answers(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_infl: f64,
    pub lambda_crit: f64,
    pub bucket_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_infl: 20.0,
            lambda_crit: 2000.0,
            bucket_size: DEFAULT_BUCKET_SIZE,
        }
    }
}

impl LossConfig {
    pub fn vqa_only() -> Self {
        LossConfig {
            lambda_infl: 0.0,
            lambda_crit: 0.0,
            bucket_size: DEFAULT_BUCKET_SIZE,
        }
    }

    fn uses_sensitivities(&self) -> bool {
        self.lambda_infl != 0.0 || self.lambda_crit != 0.0
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vqa: f64,
    pub infl: f64,
    pub crit: f64,
    pub joint: f64,
}

/// One prediction row of a batch and what the gradient terms need for it.
#[derive(Clone, Copy, Debug)]
pub struct RowSpec<'a> {
    pub gt: usize,
    /// `None` (or an empty set) disables the gradient terms for the row.
    pub proposal: Option<&'a [usize]>,
    pub weights: &'a [f64],
}

/// Influence and self-critical terms over a batch, each averaged over all
/// rows (rows without a proposal contribute zero).
pub struct CriticTerms {
    pub infl: Tensor,
    pub crit: Tensor,
    pub v_star: Vec<Option<usize>>,
    pub buckets: Vec<Bucket>,
}

/// Builds both gradient terms from per-answer sensitivity tables.
///
/// `probs` is the `[n, num_answers]` confidence matrix; `sens(a)` must
/// return the `[n, num_objects]` table `S(a, ·)` per row, recorded with
/// `create_graph`. It is called at most once per answer.
///
/// The most influential object is chosen from the current values and is
/// not differentiated through; both sides of each self-critical gap are.
pub fn critic_terms(
    probs: &Array,
    rows: &[RowSpec<'_>],
    bucket_size: usize,
    sens: &mut dyn FnMut(usize) -> Result<Tensor>,
) -> Result<CriticTerms> {
    let (n, num_answers) = probs.dims2("critic_terms")?;
    if rows.len() != n {
        return Err(Error::InvalidShape {
            shape: probs.shape().to_vec(),
            len: rows.len(),
        });
    }
    let mut cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut table = |a: usize, cache: &mut BTreeMap<usize, Tensor>| -> Result<Tensor> {
        if let Some(t) = cache.get(&a) {
            return Ok(t.clone());
        }
        let t = sens(a)?;
        cache.insert(a, t.clone());
        Ok(t)
    };

    // Flat indices into S(a, ·), grouped by answer.
    let mut infl_pairs: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut crit_coefs: BTreeMap<usize, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut v_stars = Vec::with_capacity(n);
    let mut buckets = Vec::with_capacity(n);

    for (r, spec) in rows.iter().enumerate() {
        if spec.gt >= num_answers || spec.weights.len() != num_answers {
            return Err(Error::InvalidInstance(format!(
                "row {r}: ground truth {} / {} weights for {num_answers} answers",
                spec.gt,
                spec.weights.len()
            )));
        }
        let Some(proposal) = spec.proposal.filter(|p| !p.is_empty()) else {
            v_stars.push(None);
            buckets.push(Bucket::default());
            continue;
        };
        let s_gt = table(spec.gt, &mut cache)?;
        let (_, num_objects) = s_gt.value().dims2("sensitivity table")?;
        let values = &s_gt.value().data()[r * num_objects..(r + 1) * num_objects];
        let v_star = most_influential(values, proposal)?;
        let flat = |i: usize| r * num_objects + i;

        let entry = infl_pairs.entry(spec.gt).or_default();
        for j in (0..num_objects).filter(|j| !proposal.contains(j)) {
            entry.0.push(flat(j));
            entry.1.push(flat(v_star));
        }

        let row_probs = &probs.data()[r * num_answers..(r + 1) * num_answers];
        let bucket = build_bucket(row_probs, spec.gt, bucket_size);
        for &a in &bucket.indices {
            let w = spec.weights[a];
            let e = crit_coefs.entry(a).or_default();
            e.0.push(flat(v_star));
            e.1.push(w);
            let g = crit_coefs.entry(spec.gt).or_default();
            g.0.push(flat(v_star));
            g.1.push(-w);
        }
        v_stars.push(Some(v_star));
        buckets.push(bucket);
    }

    let scale = 1.0 / n.max(1) as f64;
    let mut infl = Tensor::scalar(0.0);
    for (a, (outside, star)) in infl_pairs {
        let s = table(a, &mut cache)?;
        let m = outside.len();
        let term = s
            .gather(outside, &[m])?
            .sub(&s.gather(star, &[m])?)?
            .relu()?
            .sum()?;
        infl = infl.add(&term)?;
    }
    let mut crit = Tensor::scalar(0.0);
    for (a, (idx, coef)) in crit_coefs {
        let s = table(a, &mut cache)?;
        let m = idx.len();
        let coef = Tensor::constant(Array::new(vec![m], coef)?);
        crit = crit.add(&s.gather(idx, &[m])?.mul(&coef)?.sum()?)?;
    }
    Ok(CriticTerms {
        infl: infl.scale(scale)?,
        crit: crit.scale(scale)?,
        v_star: v_stars,
        buckets,
    })
}

/// Output of a recorded joint-loss evaluation.
pub struct JointLoss {
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
    pub v_star: Vec<Option<usize>>,
    pub buckets: Vec<Bucket>,
}

fn combine(
    vqa: Tensor,
    terms: Option<CriticTerms>,
    cfg: &LossConfig,
    n: usize,
) -> Result<JointLoss> {
    let Some(terms) = terms else {
        let v = vqa.item();
        return Ok(JointLoss {
            breakdown: LossBreakdown {
                vqa: v,
                infl: 0.0,
                crit: 0.0,
                joint: v,
            },
            loss: vqa,
            v_star: vec![None; n],
            buckets: vec![Bucket::default(); n],
        });
    };
    let loss = vqa
        .add(&terms.infl.scale(cfg.lambda_infl)?)?
        .add(&terms.crit.scale(cfg.lambda_crit)?)?;
    Ok(JointLoss {
        breakdown: LossBreakdown {
            vqa: vqa.item(),
            infl: terms.infl.item(),
            crit: terms.crit.item(),
            joint: loss.item(),
        },
        loss,
        v_star: terms.v_star,
        buckets: terms.buckets,
    })
}

/// `L_vqa + λ_infl·L_infl + λ_crit·L_crit` for one QA instance.
///
/// `params` must be bound to `tape`. With both λ zero no sensitivities are
/// computed and the result is exactly the cross-entropy.
pub fn joint_loss(
    model: &QaModel,
    tape: &Tape,
    params: &[Tensor],
    inst: &QaInstance,
    proposal: Option<&[usize]>,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<JointLoss> {
    let fwd = model.forward(tape, params, inst)?;
    let gold = Array::row(inst.gold.clone());
    let vqa = vqa_loss(&fwd.probs, &gold)?;
    let terms = if cfg.uses_sensitivities() {
        let spec = RowSpec {
            gt: inst.answer,
            proposal,
            weights,
        };
        let probs = fwd.probs.value().clone();
        Some(critic_terms(&probs, &[spec], cfg.bucket_size, &mut |a| {
            object_sensitivities(&fwd.probs, &fwd.objects, a, true)
        })?)
    } else {
        None
    };
    combine(vqa, terms, cfg, 1)
}

/// Joint loss over a batch of independent rows of an MLP classifier whose
/// input columns are the objects.
///
/// `inputs` must be a leaf on the same tape as `params`; `gold` is
/// `[n, num_classes]`.
pub fn joint_loss_rows(
    model: &MlpClassifier,
    params: &[Tensor],
    inputs: &Tensor,
    gold: &Array,
    rows: &[RowSpec<'_>],
    cfg: &LossConfig,
) -> Result<JointLoss> {
    let probs = model.forward(params, inputs)?;
    let vqa = vqa_loss(&probs, gold)?;
    let terms = if cfg.uses_sensitivities() {
        let values = probs.value().clone();
        Some(critic_terms(&values, rows, cfg.bucket_size, &mut |a| {
            column_sensitivities(&probs, inputs, a, true)
        })?)
    } else {
        None
    };
    combine(vqa, terms, cfg, rows.len())
}

/// `L_infl` from plain sensitivity values: the minimum summed violation.
pub fn influence_strengthen_value(s_gt: &[f64], proposal: &[usize]) -> Result<f64> {
    let sums = crate::sensitivity::violation_sums(s_gt, proposal)?;
    Ok(sums.into_iter().fold(f64::INFINITY, f64::min))
}

/// `L_crit` from plain values: `Σ_{a∈B} w(a)·(S(a, v*) − S(gt, v*))`.
pub fn self_critical_value(
    bucket: &Bucket,
    s_at_v_star: &[f64],
    gt: usize,
    weights: &[f64],
) -> f64 {
    bucket
        .indices
        .iter()
        .map(|&a| weights[a] * (s_at_v_star[a] - s_at_v_star[gt]))
        .sum()
}

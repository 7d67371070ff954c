//! Soft-score accuracy and the false sensitivity rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{argmax, QaInstance, QaModel};
use crate::sensitivity::{most_influential, object_sensitivities};

/// Credit of predicting `prediction`: its gold soft score.
pub fn soft_score(prediction: usize, gold: &[f64]) -> f64 {
    gold[prediction]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean soft score over all instances.
    pub soft_score: f64,
    pub per_qtype: BTreeMap<String, f64>,
    /// False-sensitivity instances over counted instances (0 when none counted).
    pub fsr: f64,
    pub total: usize,
    /// Instances with a usable proposal set: the rate's denominator.
    pub counted: usize,
    pub false_sensitive: usize,
    /// Instances left out of the rate because their proposal set is unusable.
    pub excluded: usize,
}

/// Flat form of [`EvalReport`] for CSV tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub soft_score: f64,
    pub fsr: f64,
    pub total: usize,
    pub counted: usize,
    pub false_sensitive: usize,
    pub excluded: usize,
}

impl EvalReport {
    pub fn row(&self) -> EvalRow {
        EvalRow {
            soft_score: self.soft_score,
            fsr: self.fsr,
            total: self.total,
            counted: self.counted,
            false_sensitive: self.false_sensitive,
            excluded: self.excluded,
        }
    }
}

/// Whether a proposal set supports the influence-based quantities.
pub fn proposal_usable(proposal: Option<&[usize]>, num_objects: usize) -> bool {
    proposal.is_some_and(|p| !p.is_empty() && p.len() < num_objects)
}

/// Outcome of the false-sensitivity test on one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceOutcome {
    pub prediction: usize,
    pub soft_score: f64,
    /// `None` when the instance has no usable proposal set.
    pub false_sensitive: Option<bool>,
}

/// Prediction, credit and false-sensitivity flag of one instance in one
/// recorded forward pass.
pub fn evaluate_instance(
    model: &QaModel,
    inst: &QaInstance,
    proposal: Option<&[usize]>,
) -> Result<InstanceOutcome> {
    let tape = Tape::new();
    let params = model.params.constants();
    let fwd = model.forward(&tape, &params, inst)?;
    let probs = fwd.probs.value().data().to_vec();
    let prediction = argmax(&probs);
    let score = soft_score(prediction, &inst.gold);
    let false_sensitive = match proposal {
        Some(p) if proposal_usable(Some(p), inst.num_objects()) => {
            let s_gt = object_sensitivities(&fwd.probs, &fwd.objects, inst.answer, false)?;
            let v_star = most_influential(s_gt.value().data(), p)?;
            Some(if score == 0.0 {
                let s_pred = object_sensitivities(&fwd.probs, &fwd.objects, prediction, false)?;
                s_pred.value().data()[v_star] - s_gt.value().data()[v_star] > 0.0
            } else {
                false
            })
        }
        _ => None,
    };
    Ok(InstanceOutcome {
        prediction,
        soft_score: score,
        false_sensitive,
    })
}

/// Soft score and false sensitivity rate over a dataset.
///
/// `proposals[k]` is the proposal set of `instances[k]`; instances whose set
/// is missing or unusable are excluded from the rate and counted in
/// `excluded`.
pub fn evaluate(
    model: &QaModel,
    instances: &[QaInstance],
    proposals: &[Option<Vec<usize>>],
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    if proposals.len() != instances.len() {
        return Err(Error::InvalidInstance(format!(
            "{} proposal sets for {} instances",
            proposals.len(),
            instances.len()
        )));
    }
    let mut report = EvalReport {
        total: instances.len(),
        ..EvalReport::default()
    };
    let mut score_sum = 0.0;
    let mut by_type: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (inst, proposal) in instances.iter().zip(proposals) {
        let out = evaluate_instance(model, inst, proposal.as_deref())?;
        score_sum += out.soft_score;
        if let Some(t) = &inst.qtype {
            let e = by_type.entry(t.clone()).or_default();
            e.0 += out.soft_score;
            e.1 += 1;
        }
        match out.false_sensitive {
            Some(flag) => {
                report.counted += 1;
                report.false_sensitive += usize::from(flag);
            }
            None => report.excluded += 1,
        }
    }
    report.soft_score = score_sum / instances.len() as f64;
    report.per_qtype = by_type
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    if report.counted > 0 {
        report.fsr = report.false_sensitive as f64 / report.counted as f64;
    }
    Ok(report)
}

//! Gradient sensitivities of answer confidences to object features.
//!
//! `S(a, v_i)` is the sum of the entries of `∂P(a) / ∂v_i`, taken on the
//! post-sigmoid confidence with no relu clamp and no weighting by the
//! feature values. Values may therefore be negative.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{QaInstance, QaModel};

/// Sensitivities of answer `answer` to each object, `[1, num_objects]`.
///
/// `probs` is a recorded `[1, num_answers]` output and `objects` the
/// `[num_objects, dim]` leaf it was computed from.
pub fn object_sensitivities(
    probs: &Tensor,
    objects: &Tensor,
    answer: usize,
    create_graph: bool,
) -> Result<Tensor> {
    let (_, num_answers) = probs.value().dims2("object_sensitivities")?;
    let (num_objects, _) = objects.value().dims2("object_sensitivities")?;
    check_index("answer", answer, num_answers)?;
    let p = probs.at(0, answer)?;
    let g = grad(&p, &[objects], create_graph)?.remove(0);
    g.sum_axis(1)?.reshape(&[1, num_objects])
}

/// Per-row sensitivities for a batch whose rows are predicted independently
/// and whose objects are the individual input columns.
///
/// Returns `[n, k]` for `inputs` of shape `[n, k]`: entry `(r, i)` is
/// `∂P[r, answer] / ∂inputs[r, i]`. The whole batch costs one backward
/// sweep because no row's output depends on another row's input.
pub fn column_sensitivities(
    probs: &Tensor,
    inputs: &Tensor,
    answer: usize,
    create_graph: bool,
) -> Result<Tensor> {
    let (_, num_answers) = probs.value().dims2("column_sensitivities")?;
    check_index("answer", answer, num_answers)?;
    let total = probs.column(answer)?.sum()?;
    Ok(grad(&total, &[inputs], create_graph)?.remove(0))
}

/// Full `[num_answers, num_objects]` sensitivity matrix of one instance.
pub fn sensitivity_matrix(model: &QaModel, inst: &QaInstance) -> Result<Array> {
    let tape = Tape::new();
    let params = model.params.constants();
    let fwd = model.forward(&tape, &params, inst)?;
    let num_answers = fwd.probs.numel();
    let mut data = Vec::with_capacity(num_answers * inst.num_objects());
    for a in 0..num_answers {
        let s = object_sensitivities(&fwd.probs, &fwd.objects, a, false)?;
        data.extend_from_slice(s.value().data());
    }
    Array::matrix(num_answers, inst.num_objects(), data)
}

/// `S(answer, v_object)` for one instance.
pub fn sensitivity(
    model: &QaModel,
    inst: &QaInstance,
    answer: usize,
    object: usize,
) -> Result<f64> {
    check_index("object", object, inst.num_objects())?;
    let tape = Tape::new();
    let params = model.params.constants();
    let fwd = model.forward(&tape, &params, inst)?;
    let s = object_sensitivities(&fwd.probs, &fwd.objects, answer, false)?;
    Ok(s.value().data()[object])
}

/// `max(S(a, v_j) − S(a, v_i), 0)`.
pub fn sensitivity_violation(s_i: f64, s_j: f64) -> f64 {
    (s_j - s_i).max(0.0)
}

/// Checks that `proposal` is a non-empty strict subset of the objects with
/// unique, valid indices.
pub fn validate_proposal(proposal: &[usize], num_objects: usize) -> Result<()> {
    if proposal.is_empty() {
        return Err(Error::InvalidProposal("proposal set is empty".into()));
    }
    if proposal.len() >= num_objects {
        return Err(Error::InvalidProposal(format!(
            "proposal set of size {} leaves no object outside it ({num_objects} objects)",
            proposal.len()
        )));
    }
    for (k, &i) in proposal.iter().enumerate() {
        check_index("proposal object", i, num_objects)?;
        if proposal[..k].contains(&i) {
            return Err(Error::InvalidProposal(format!("object {i} proposed twice")));
        }
    }
    Ok(())
}

/// For each proposal member `i`, `Σ_{j ∉ I} SV(a, v_i, v_j)`.
pub fn violation_sums(s: &[f64], proposal: &[usize]) -> Result<Vec<f64>> {
    validate_proposal(proposal, s.len())?;
    let outside: Vec<usize> = (0..s.len()).filter(|j| !proposal.contains(j)).collect();
    Ok(proposal
        .iter()
        .map(|&i| {
            outside
                .iter()
                .map(|&j| sensitivity_violation(s[i], s[j]))
                .sum()
        })
        .collect())
}

/// The proposal object with the smallest summed violation against all
/// outside objects; ties go to the lowest object index.
///
/// `s` holds `S(a_gt, ·)` over all objects.
pub fn most_influential(s: &[f64], proposal: &[usize]) -> Result<usize> {
    let sums = violation_sums(s, proposal)?;
    let mut best = 0;
    for k in 1..proposal.len() {
        let better =
            sums[k] < sums[best] || (sums[k] == sums[best] && proposal[k] < proposal[best]);
        if better {
            best = k;
        }
    }
    Ok(proposal[best])
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { what, index, len });
    }
    Ok(())
}

/// Attribution summary of one instance, as dumped by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// `S[a][i]`, answers by objects.
    pub sensitivities: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
    pub ground_truth: usize,
    pub proposal_indices: Vec<usize>,
    pub v_star_index: usize,
    pub bucket: Vec<usize>,
    pub weights: Vec<f64>,
    pub create_graph: bool,
}

impl SensitivityReport {
    pub fn compute(
        model: &QaModel,
        inst: &QaInstance,
        proposal: &[usize],
        bucket_size: usize,
        weights: &[f64],
    ) -> Result<Self> {
        let matrix = sensitivity_matrix(model, inst)?;
        let (num_answers, num_objects) = matrix.dims2("report")?;
        let rows: Vec<Vec<f64>> = (0..num_answers)
            .map(|a| matrix.data()[a * num_objects..(a + 1) * num_objects].to_vec())
            .collect();
        let v_star = most_influential(&rows[inst.answer], proposal)?;
        let probabilities = model.predict_probs(inst)?;
        let bucket = crate::losses::build_bucket(&probabilities, inst.answer, bucket_size);
        Ok(SensitivityReport {
            sensitivities: rows,
            probabilities,
            ground_truth: inst.answer,
            proposal_indices: proposal.to_vec(),
            v_star_index: v_star,
            bucket: bucket.indices,
            weights: weights.to_vec(),
            create_graph: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn violation_examples() {
        assert_eq!(sensitivity_violation(0.4, 0.4), 0.0);
        assert!((sensitivity_violation(0.3, 0.5) - 0.2).abs() < 1e-15);
        assert_eq!(sensitivity_violation(0.5, 0.3), 0.0);
    }

    #[test]
    fn most_influential_examples() {
        let s = [0.9, 0.1, 0.5, 0.2];
        assert_eq!(most_influential(&s, &[0, 1]).unwrap(), 0);
        let sums = violation_sums(&s, &[0, 1]).unwrap();
        assert_eq!(sums[0], 0.0);
        assert!((sums[1] - 0.5).abs() < 1e-15);
        assert_eq!(most_influential(&[0.0, 5.0, 1.0], &[2]).unwrap(), 2);
    }

    #[test]
    fn ties_go_to_lowest_object() {
        assert_eq!(most_influential(&[0.0, 1.0, 1.0, 0.0], &[2, 1]).unwrap(), 1);
    }

    #[test]
    fn degenerate_proposals_are_rejected() {
        let s = [0.1, 0.2];
        assert!(most_influential(&s, &[]).is_err());
        assert!(most_influential(&s, &[0, 1]).is_err());
        assert!(most_influential(&s, &[2]).is_err());
        assert!(most_influential(&[0.1, 0.2, 0.3], &[0, 0]).is_err());
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfcrit_core::autodiff::{Array, Tape, Tensor};
use selfcrit_core::losses::influence_strengthen_value;
use selfcrit_core::models::{QaConfig, QaInstance, QaModel};
use selfcrit_core::sensitivity::{
    most_influential, object_sensitivities, sensitivity, sensitivity_matrix, sensitivity_violation,
    violation_sums,
};

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `P = σ(Σ_i wᵀv_i + b)` over a `[n, d]` object matrix.
fn linear_probe(objects: &Tensor, w: &Array, b: f64) -> Tensor {
    objects
        .matmul(&Tensor::constant(w.clone()))
        .unwrap()
        .sum()
        .unwrap()
        .add_scalar(b)
        .unwrap()
        .sigmoid()
        .unwrap()
        .reshape(&[1, 1])
        .unwrap()
}

#[test]
fn linear_sigmoid_probe_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let (n, d) = (1 + trial % 4, 1 + trial % 7);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let v: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-1.0..1.0);
        let tape = Tape::new();
        let objects = tape.var(Array::matrix(n, d, v.clone()).unwrap());
        let wa = Array::matrix(d, 1, w.clone()).unwrap();
        let p = linear_probe(&objects, &wa, b);
        let s = object_sensitivities(&p, &objects, 0, false).unwrap();

        let z: f64 = b + (0..n * d).map(|k| v[k] * w[k % d]).sum::<f64>();
        let expected = sigmoid(z) * (1.0 - sigmoid(z)) * w.iter().sum::<f64>();
        for &got in s.value().data() {
            assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
        }
    }
}

#[test]
fn independent_object_has_zero_sensitivity() {
    let tape = Tape::new();
    let objects = tape.var(Array::matrix(2, 2, vec![0.3, -0.2, 0.9, 0.4]).unwrap());
    // Only object 0 reaches the output.
    let p = objects
        .row(0)
        .unwrap()
        .sum()
        .unwrap()
        .sigmoid()
        .unwrap()
        .reshape(&[1, 1])
        .unwrap();
    let s = object_sensitivities(&p, &objects, 0, false).unwrap();
    assert_eq!(s.value().data()[1], 0.0);
    assert!(s.value().data()[0] != 0.0);
}

fn toy_config() -> QaConfig {
    QaConfig {
        vocab_size: 12,
        word_dim: 6,
        hidden: 7,
        object_dim: 5,
        joint_dim: 6,
        num_answers: 6,
        max_question_len: 5,
    }
}

fn random_instance(rng: &mut ChaCha8Rng, cfg: &QaConfig, num_objects: usize) -> QaInstance {
    let features = Array::matrix(
        num_objects,
        cfg.object_dim,
        (0..num_objects * cfg.object_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let len = rng.random_range(1..=cfg.max_question_len);
    let tokens = (0..len)
        .map(|_| rng.random_range(0..cfg.vocab_size))
        .collect();
    let mut gold = vec![0.0; cfg.num_answers];
    gold[rng.random_range(0..cfg.num_answers)] = 1.0;
    QaInstance::new(features, tokens, gold).unwrap()
}

// Perturbs every entry of v_i together: the directional derivative along
// the all-ones vector is the sum of the gradient entries.
#[test]
fn qa_sensitivity_matches_finite_differences() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for m in 0..20 {
        let model = QaModel::new(cfg.clone(), 100 + m).unwrap();
        let inst = random_instance(&mut rng, &cfg, 4);
        let s = sensitivity_matrix(&model, &inst).unwrap();
        for i in 0..inst.num_objects() {
            let shifted = |delta: f64| {
                let mut x = inst.clone();
                for k in 0..cfg.object_dim {
                    x.features.data_mut()[i * cfg.object_dim + k] += delta;
                }
                model.predict_probs(&x).unwrap()
            };
            let (up, down) = (shifted(h), shifted(-h));
            for a in 0..cfg.num_answers {
                let fd = (up[a] - down[a]) / (2.0 * h);
                let an = s.get2(a, i);
                worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8));
            }
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:.3e}");
}

#[test]
fn single_entry_agrees_with_matrix() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = QaModel::new(cfg.clone(), 1).unwrap();
    let inst = random_instance(&mut rng, &cfg, 3);
    let m = sensitivity_matrix(&model, &inst).unwrap();
    assert_eq!(sensitivity(&model, &inst, 2, 1).unwrap(), m.get2(2, 1));
}

#[test]
fn violation_fixtures() {
    assert_eq!(sensitivity_violation(0.4, 0.4), 0.0);
    assert!((sensitivity_violation(0.3, 0.5) - 0.2).abs() < 1e-15);
    assert_eq!(sensitivity_violation(0.5, 0.3), 0.0);
}

#[test]
fn most_influential_fixtures() {
    assert_eq!(most_influential(&[0.9, 0.1, 0.5, 0.2], &[0, 1]).unwrap(), 0);
    assert_eq!(most_influential(&[0.0, 0.1, 0.5, 0.2], &[2]).unwrap(), 2);
    assert_eq!(most_influential(&[-5.0, 0.1, 0.5, 0.2], &[0]).unwrap(), 0);
    assert!(most_influential(&[0.1, 0.2], &[]).is_err());
    assert!(most_influential(&[0.1, 0.2], &[0, 1]).is_err());
}

#[test]
fn influence_fixtures() {
    assert_eq!(
        influence_strengthen_value(&[0.9, 0.1, 0.5, 0.2], &[0, 1]).unwrap(),
        0.0
    );
    let l = influence_strengthen_value(&[0.1, 0.2, 0.5, 0.4], &[0, 1]).unwrap();
    assert!((l - 0.5).abs() < 1e-15);
}

/// Enumerates every (i, j) pair with i in the proposal and j outside it.
fn brute_force(s: &[f64], proposal: &[usize]) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    let mut sorted = proposal.to_vec();
    sorted.sort_unstable();
    for &i in &sorted {
        let mut total = 0.0;
        for j in 0..s.len() {
            if !proposal.contains(&j) && s[j] > s[i] {
                total += s[j] - s[i];
            }
        }
        if best.is_none_or(|(_, b)| total < b) {
            best = Some((i, total));
        }
    }
    best.unwrap()
}

#[test]
fn brute_force_equivalence_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.random_range(2..12);
        // Coarse values on even trials make exact ties common.
        let s: Vec<f64> = (0..n)
            .map(|_| {
                if trial % 2 == 0 {
                    f64::from(rng.random_range(-4i32..5)) / 4.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let k = rng.random_range(1..n);
        let mut objs: Vec<usize> = (0..n).collect();
        for a in 0..k {
            let b = rng.random_range(a..n);
            objs.swap(a, b);
        }
        let proposal = &objs[..k];
        let (v_star, l) = brute_force(&s, proposal);
        assert_eq!(
            most_influential(&s, proposal).unwrap(),
            v_star,
            "{s:?} {proposal:?}"
        );
        assert_eq!(influence_strengthen_value(&s, proposal).unwrap(), l);
        let inside = proposal.iter().map(|&i| s[i]).fold(f64::MIN, f64::max);
        let outside = (0..n)
            .filter(|j| !proposal.contains(j))
            .map(|j| s[j])
            .fold(f64::MIN, f64::max);
        if inside >= outside {
            assert_eq!(l, 0.0);
        }
    }
}

proptest! {
    #[test]
    fn global_maximum_in_proposal_is_selected(
        s in prop::collection::vec(-1.0..1.0f64, 3..10),
        pick in any::<prop::sample::Index>(),
    ) {
        let top = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        let other = pick.index(s.len());
        let proposal: Vec<usize> = if other == top { vec![top] } else { vec![other, top] };
        prop_assume!(proposal.len() < s.len());
        let unique = s.iter().filter(|&&x| x == s[top]).count() == 1;
        prop_assume!(unique);
        prop_assert_eq!(influence_strengthen_value(&s, &proposal).unwrap(), 0.0);
        // Another proposal object that also dominates the outside set ties
        // at zero and wins on a lower index.
        let sums = violation_sums(&s, &proposal).unwrap();
        let expected = if sums.iter().filter(|&&v| v == 0.0).count() == 1 {
            top
        } else {
            proposal.iter().copied().min().unwrap()
        };
        prop_assert_eq!(most_influential(&s, &proposal).unwrap(), expected);
    }
}

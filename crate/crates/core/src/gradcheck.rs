//! Finite-difference validation of the gradient engine and of the joint
//! loss, shared by the test suites and the `gradcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::check::{relative_error, FD_STEP};
use crate::autodiff::{grad, Array, ParamStore, Tape, Tensor};
use crate::error::Result;
use crate::losses::{joint_loss, joint_loss_rows, LossConfig, RowSpec};
use crate::models::{MlpClassifier, MlpConfig, QaConfig, QaInstance, QaModel};

pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const SECOND_ORDER_TOL: f64 = 1e-4;
pub const JOINT_LOSS_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Probes dropped because the function is not smooth there.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.points > 0
    }
}

type Primitive = fn(&[Tensor]) -> Result<Tensor>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    f: Primitive,
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    /// Entries kept at least 0.05 away from zero (kinks, division).
    AwayFromZero,
    Positive,
}

fn cases() -> Vec<Case> {
    fn c(
        name: &'static str,
        shapes: &'static [&'static [usize]],
        domain: Domain,
        f: Primitive,
    ) -> Case {
        Case {
            name,
            shapes,
            domain,
            f,
        }
    }
    use Domain::*;
    vec![
        c("add", &[&[3, 4], &[3, 4]], Any, |x| x[0].add(&x[1])),
        c("sub", &[&[3, 4], &[3, 4]], Any, |x| x[0].sub(&x[1])),
        c("mul", &[&[3, 4], &[3, 4]], Any, |x| x[0].mul(&x[1])),
        c("mul_scalar", &[&[], &[2, 3]], Any, |x| x[0].mul(&x[1])),
        c("div", &[&[3, 4], &[3, 4]], AwayFromZero, |x| {
            x[0].div(&x[1])
        }),
        c("scale", &[&[3, 4]], Any, |x| x[0].scale(-1.7)),
        c("add_scalar", &[&[3, 4]], Any, |x| x[0].add_scalar(0.3)),
        c("neg", &[&[2, 2]], Any, |x| x[0].neg()),
        c("matmul", &[&[3, 4], &[4, 2]], Any, |x| x[0].matmul(&x[1])),
        c("transpose", &[&[3, 4]], Any, |x| x[0].transpose()),
        c("reshape", &[&[3, 4]], Any, |x| x[0].reshape(&[2, 6])),
        c("sum", &[&[3, 4]], Any, |x| x[0].sum()),
        c("mean", &[&[3, 4]], Any, |x| x[0].mean()),
        c("sum_axis0", &[&[3, 4]], Any, |x| x[0].sum_axis(0)),
        c("sum_axis1", &[&[3, 4]], Any, |x| x[0].sum_axis(1)),
        c("expand_axis0", &[&[1, 4]], Any, |x| x[0].expand_axis(0, 3)),
        c("expand_axis1", &[&[3, 1]], Any, |x| x[0].expand_axis(1, 2)),
        c("broadcast", &[&[]], Any, |x| x[0].broadcast_to(&[2, 3])),
        c("gather", &[&[3, 4]], Any, |x| {
            x[0].gather(vec![0, 5, 5, 11, 2], &[5])
        }),
        c("scatter", &[&[5]], Any, |x| {
            x[0].scatter(vec![1, 1, 0, 7, 3], &[2, 4])
        }),
        c("max_axis0", &[&[3, 4]], Any, |x| x[0].max_axis(0)),
        c("max_axis1", &[&[3, 4]], Any, |x| x[0].max_axis(1)),
        c("concat0", &[&[2, 3], &[1, 3]], Any, |x| {
            Tensor::concat(x, 0)
        }),
        c("concat1", &[&[2, 3], &[2, 2]], Any, |x| {
            Tensor::concat(x, 1)
        }),
        c("sigmoid", &[&[3, 4]], Any, |x| x[0].sigmoid()),
        c("tanh", &[&[3, 4]], Any, |x| x[0].tanh()),
        c("relu", &[&[3, 4]], AwayFromZero, |x| x[0].relu()),
        c("clamp_min_zero", &[&[3, 4]], AwayFromZero, |x| {
            x[0].clamp_min_zero()
        }),
        c("clamp", &[&[3, 4]], AwayFromZero, |x| x[0].clamp(-0.5, 0.5)),
        c("exp", &[&[3, 4]], Any, |x| x[0].exp()),
        c("ln", &[&[3, 4]], Positive, |x| x[0].ln()),
        c("square", &[&[3, 4]], Any, |x| x[0].square()),
    ]
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            match domain {
                Domain::Any => z,
                Domain::AwayFromZero => {
                    let z = if z.abs() < 0.05 {
                        0.05_f64.copysign(z) + z
                    } else {
                        z
                    };
                    // Keep clear of the ±0.5 clamp bounds too.
                    if (z.abs() - 0.5).abs() < 0.05 {
                        z * 1.3
                    } else {
                        z
                    }
                }
                Domain::Positive => 0.2 + z.abs(),
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape")
}

/// Weighted sum `Σ out ⊙ r` so every output entry reaches the gradient.
fn weighted(out: &Tensor, r: &Array) -> Result<Tensor> {
    out.mul(&Tensor::constant(r.clone()))?.sum()
}

fn outer(order: Order, t: &Tensor) -> Result<Tensor> {
    match order {
        Order::First => Ok(t.clone()),
        Order::Second => t.tanh(),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Order {
    First,
    Second,
}

/// Scalar objective of a case at `inputs`, and for the second-order check
/// the weighted first derivative.
fn case_value(case: &Case, inputs: &[Array], r: &Array, order: Order, r2: &[Array]) -> Result<f64> {
    let tape = Tape::new();
    let xs: Vec<Tensor> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let y = weighted(&outer(order, &(case.f)(&xs)?)?, r)?;
    match order {
        Order::First => Ok(y.item()),
        Order::Second => {
            let refs: Vec<&Tensor> = xs.iter().collect();
            let g = grad(&y, &refs, false)?;
            let mut total = 0.0;
            for (gi, ri) in g.iter().zip(r2) {
                total += gi
                    .value()
                    .data()
                    .iter()
                    .zip(ri.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            Ok(total)
        }
    }
}

fn analytic(
    case: &Case,
    inputs: &[Array],
    r: &Array,
    order: Order,
    r2: &[Array],
) -> Result<Vec<Array>> {
    let tape = Tape::new();
    let xs: Vec<Tensor> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let refs: Vec<&Tensor> = xs.iter().collect();
    let y = weighted(&outer(order, &(case.f)(&xs)?)?, r)?;
    let g = match order {
        Order::First => grad(&y, &refs, false)?,
        Order::Second => {
            let g = grad(&y, &refs, true)?;
            let mut h = Tensor::scalar(0.0);
            for (gi, ri) in g.iter().zip(r2) {
                h = h.add(&weighted(gi, ri)?)?;
            }
            grad(&h, &refs, false)?
        }
    };
    Ok(g.into_iter().map(|t| t.value().clone()).collect())
}

fn check_cases(seed: u64, points: usize, order: Order) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = match order {
        Order::First => FIRST_ORDER_TOL,
        Order::Second => SECOND_ORDER_TOL,
    };
    let mut results = Vec::new();
    for case in cases() {
        let mut worst = 0.0_f64;
        for _ in 0..points {
            let inputs: Vec<Array> = case
                .shapes
                .iter()
                .map(|s| sample(&mut rng, s, case.domain))
                .collect();
            let out_shape = (case.f)(
                &inputs
                    .iter()
                    .cloned()
                    .map(Tensor::constant)
                    .collect::<Vec<_>>(),
            )?
            .shape()
            .to_vec();
            let r = sample(&mut rng, &out_shape, Domain::Any);
            let r2: Vec<Array> = case
                .shapes
                .iter()
                .map(|s| sample(&mut rng, s, Domain::Any))
                .collect();
            let a = analytic(&case, &inputs, &r, order, &r2)?;
            for k in 0..inputs.len() {
                let numeric = crate::autodiff::check::finite_difference(
                    |probe| {
                        let mut xs = inputs.clone();
                        xs[k] = probe.clone();
                        case_value(&case, &xs, &r, order, &r2)
                    },
                    &inputs[k],
                    FD_STEP,
                )?;
                worst = worst.max(relative_error(a[k].data(), numeric.data()));
            }
        }
        results.push(CheckResult {
            name: match order {
                Order::First => case.name.to_string(),
                Order::Second => format!("{} (2nd order)", case.name),
            },
            points,
            max_rel_error: worst,
            tolerance: tol,
            skipped: 0,
        });
    }
    Ok(results)
}

/// First-order gradient of every primitive against central differences.
pub fn check_primitives(seed: u64, points: usize) -> Result<Vec<CheckResult>> {
    check_cases(seed, points, Order::First)
}

/// Gradient of a weighted first derivative (through `tanh ∘ primitive`)
/// against central differences of the first derivative.
pub fn check_second_order(seed: u64, points: usize) -> Result<Vec<CheckResult>> {
    check_cases(seed, points, Order::Second)
}

/// Tiny model used for the joint-loss check.
pub fn tiny_qa_config() -> QaConfig {
    QaConfig {
        vocab_size: 10,
        word_dim: 4,
        hidden: 5,
        object_dim: 3,
        joint_dim: 4,
        num_answers: 5,
        max_question_len: 6,
    }
}

/// Central difference of `f` along one coordinate, or `None` when the
/// estimates at `h` and `h/2` disagree (a kink or a routing switch lies
/// within the stencil).
fn smooth_difference(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<Option<f64>> {
    let d1 = (f(h)? - f(-h)?) / (2.0 * h);
    let d2 = (f(h / 2.0)? - f(-h / 2.0)?) / h;
    let scale = d1.abs().max(d2.abs()).max(1e-6);
    Ok(((d1 - d2).abs() <= 1e-5 * scale).then_some(d1))
}

fn perturbed(params: &ParamStore, idx: (usize, usize), delta: f64) -> ParamStore {
    let mut p = params.clone();
    p.values_mut()[idx.0].data_mut()[idx.1] += delta;
    p
}

fn random_coords(rng: &mut ChaCha8Rng, params: &ParamStore, count: usize) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..params.len());
            (i, rng.random_range(0..params.values()[i].numel()))
        })
        .collect()
}

/// Parameter gradient of the full QA joint loss, including the
/// second-order terms, against central differences. Each point is a fresh
/// random model and instance probed along `coords` random coordinates.
pub fn check_joint_loss(seed: u64, points: usize, coords: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_qa_config();
    let loss_cfg = LossConfig {
        lambda_infl: 20.0,
        lambda_crit: 2000.0,
        bucket_size: 3,
    };
    let mut worst = 0.0_f64;
    let mut skipped = 0;
    for point in 0..points {
        let model = QaModel::new(
            cfg.clone(),
            seed.wrapping_mul(1000).wrapping_add(point as u64),
        )?;
        let num_objects = 5;
        let features = sample(&mut rng, &[num_objects, cfg.object_dim], Domain::Any);
        let len = rng.random_range(1..=cfg.max_question_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_size))
            .collect();
        // Ground truth at the least confident answer keeps the bucket full.
        let probe = QaInstance::new(features.clone(), tokens.clone(), vec![1.0; cfg.num_answers])?;
        let probs = model.predict_probs(&probe)?;
        let gt = (0..probs.len())
            .min_by(|&a, &b| probs[a].total_cmp(&probs[b]))
            .unwrap_or(0);
        let mut gold = vec![0.0; cfg.num_answers];
        gold[gt] = 1.0;
        let inst = QaInstance::new(features, tokens, gold)?;
        let weights: Vec<f64> = (0..cfg.num_answers)
            .map(|a| {
                if a == gt {
                    0.0
                } else {
                    rng.random_range(0.2..1.5)
                }
            })
            .collect();
        let proposal = [0usize, 1];

        let loss_at = |params: &ParamStore| -> Result<f64> {
            let tape = Tape::new();
            let p = params.bind(&tape);
            Ok(joint_loss(
                &model,
                &tape,
                &p,
                &inst,
                Some(&proposal),
                &weights,
                &loss_cfg,
            )?
            .breakdown
            .joint)
        };
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let jl = joint_loss(
            &model,
            &tape,
            &p,
            &inst,
            Some(&proposal),
            &weights,
            &loss_cfg,
        )?;
        let refs: Vec<&Tensor> = p.iter().collect();
        let g = grad(&jl.loss, &refs, false)?;

        let mut a = Vec::new();
        let mut n = Vec::new();
        for idx in random_coords(&mut rng, &model.params, coords) {
            match smooth_difference(|d| loss_at(&perturbed(&model.params, idx, d)), FD_STEP)? {
                Some(d) => {
                    a.push(g[idx.0].value().data()[idx.1]);
                    n.push(d);
                }
                None => skipped += 1,
            }
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(CheckResult {
        name: "joint_loss_qa".into(),
        points,
        max_rel_error: worst,
        tolerance: JOINT_LOSS_TOL,
        skipped,
    })
}

/// The same check for the batched-row loss of a small relu MLP whose two
/// input columns are the objects.
pub fn check_joint_loss_rows(seed: u64, points: usize, coords: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MlpConfig {
        input_dim: 2,
        hidden: 8,
        depth: 3,
        num_classes: 2,
    };
    let loss_cfg = LossConfig {
        lambda_infl: 20.0,
        lambda_crit: 1000.0,
        bucket_size: 5,
    };
    let weights = [[0.0, 1.0], [1.0, 0.0]];
    let proposal = [0usize];
    let mut worst = 0.0_f64;
    let mut skipped = 0;
    for point in 0..points {
        let model = MlpClassifier::new(
            cfg.clone(),
            seed.wrapping_mul(1000).wrapping_add(point as u64),
        )?;
        let n = 6;
        let x = sample(&mut rng, &[n, 2], Domain::Any).map(|v| 2.0 * v);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let gold = Array::new(
            vec![n, 2],
            labels
                .iter()
                .flat_map(|&l| [f64::from(u8::from(l == 0)), f64::from(u8::from(l == 1))])
                .collect(),
        )?;
        let rows: Vec<RowSpec<'_>> = labels
            .iter()
            .map(|&l| RowSpec {
                gt: l,
                proposal: Some(&proposal),
                weights: &weights[l],
            })
            .collect();
        let eval = |params: &ParamStore| -> Result<(Tensor, Vec<Tensor>)> {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let xs = tape.var(x.clone());
            let jl = joint_loss_rows(&model, &p, &xs, &gold, &rows, &loss_cfg)?;
            Ok((jl.loss, p))
        };
        let (loss, p) = eval(&model.params)?;
        let refs: Vec<&Tensor> = p.iter().collect();
        let g = grad(&loss, &refs, false)?;
        let mut a = Vec::new();
        let mut nu = Vec::new();
        for idx in random_coords(&mut rng, &model.params, coords) {
            match smooth_difference(
                |d| Ok(eval(&perturbed(&model.params, idx, d))?.0.item()),
                FD_STEP,
            )? {
                Some(d) => {
                    a.push(g[idx.0].value().data()[idx.1]);
                    nu.push(d);
                }
                None => skipped += 1,
            }
        }
        worst = worst.max(relative_error(&a, &nu));
    }
    Ok(CheckResult {
        name: "joint_loss_rows".into(),
        points,
        max_rel_error: worst,
        tolerance: JOINT_LOSS_TOL,
        skipped,
    })
}

//! Two-Gaussian prior-shift experiment with the input coordinates as
//! objects and the first coordinate as the explained-important one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::training::{divergence, sub_seed, Batcher, LossLogRow};
use crate::autodiff::{adam_step, grad, AdamConfig, AdamState, Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{joint_loss_rows, LossConfig, RowSpec};
use crate::models::{MlpClassifier, MlpConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Mixing probabilities to run, one experiment each.
    pub ps: Vec<f64>,
    /// Mean of class 0, drawn with probability `p` in training.
    pub mean0: [f64; 2],
    pub mean1: [f64; 2],
    /// Isotropic covariance scale.
    pub variance: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub depth: usize,
    pub width: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub lambda_infl: f64,
    pub lambda_crit: f64,
    /// Input coordinates proposed as influential.
    pub proposal: Vec<usize>,
    pub raster_size: usize,
    pub raster_extent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            ps: vec![0.05, 0.1, 0.2, 0.5],
            mean0: [-3.0, 3.0],
            mean1: [3.0, 3.0],
            variance: 2.0,
            n_train: 1000,
            n_test: 1000,
            depth: 15,
            width: 256,
            pretrain_epochs: 100,
            pretrain_lr: 1e-3,
            finetune_epochs: 50,
            finetune_lr: 1e-5,
            pretrain_batch: 1000,
            finetune_batch: 1000,
            lambda_infl: 20.0,
            lambda_crit: 1000.0,
            proposal: vec![0],
            raster_size: 200,
            raster_extent: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ps.is_empty() || self.ps.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config(format!(
                "mixing probabilities must lie in (0, 1): {:?}",
                self.ps
            )));
        }
        if self.n_train == 0
            || self.n_test == 0
            || self.pretrain_batch == 0
            || self.finetune_batch == 0
        {
            return Err(Error::Config(
                "sample counts and batch size must be positive".into(),
            ));
        }
        if self.variance.is_nan() || self.variance <= 0.0 || self.depth == 0 || self.width == 0 {
            return Err(Error::Config(
                "variance, depth and width must be positive".into(),
            ));
        }
        if self.raster_size < 2 || self.raster_extent.is_nan() || self.raster_extent <= 0.0 {
            return Err(Error::Config(
                "raster needs at least 2 cells and a positive extent".into(),
            ));
        }
        if self.proposal.is_empty()
            || self.proposal.len() >= 2
            || self.proposal.iter().any(|&i| i >= 2)
        {
            return Err(Error::Config(format!(
                "proposal {:?} must be one of the two inputs",
                self.proposal
            )));
        }
        Ok(())
    }

    pub fn mlp(&self) -> MlpConfig {
        MlpConfig {
            input_dim: 2,
            hidden: self.width,
            depth: self.depth,
            num_classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// `[n, 2]`.
    pub x: Array,
    pub labels: Vec<usize>,
}

impl SyntheticData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - ones, ones]
    }

    fn rows(&self, idx: &[usize]) -> (Array, Array, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * 2);
        let mut gold = Vec::with_capacity(idx.len() * 2);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.x.data()[2 * i..2 * i + 2]);
            let l = self.labels[i];
            gold.extend_from_slice(if l == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] });
            labels.push(l);
        }
        let n = idx.len();
        (
            Array::matrix(n, 2, x).expect("shape"),
            Array::matrix(n, 2, gold).expect("shape"),
            labels,
        )
    }
}

fn sample(cfg: &SyntheticConfig, p0: f64, n: usize, seed: u64) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = cfg.variance.sqrt();
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = usize::from(!rng.random_bool(p0));
        let mean = if label == 0 { cfg.mean0 } else { cfg.mean1 };
        for m in mean {
            let z: f64 = rng.sample(StandardNormal);
            x.push(m + sd * z);
        }
        labels.push(label);
    }
    SyntheticData {
        x: Array::matrix(n, 2, x).expect("shape"),
        labels,
    }
}

/// Training set with class 0 drawn at rate `p`, test set at rate `1 − p`.
pub fn gen_synthetic(cfg: &SyntheticConfig, p: f64) -> Result<(SyntheticData, SyntheticData)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!(
            "mixing probability {p} outside (0, 1)"
        )));
    }
    let base = sub_seed(cfg.seed, (p * 1e6).round() as u64);
    Ok((
        sample(cfg, p, cfg.n_train, sub_seed(base, 1)),
        sample(cfg, 1.0 - p, cfg.n_test, sub_seed(base, 2)),
    ))
}

pub fn accuracy(model: &MlpClassifier, data: &SyntheticData) -> Result<f64> {
    let pred = model.classify(&data.x)?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// One training stage over the synthetic set. Returns the per-step log.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut MlpClassifier,
    data: &SyntheticData,
    stage: &str,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    loss_cfg: &LossConfig,
    proposal: &[usize],
    seed: u64,
) -> Result<Vec<LossLogRow>> {
    let weights = [[0.0, 1.0], [1.0, 0.0]];
    let mut state = AdamState::new(AdamConfig::with_lr(lr), &model.params);
    let mut batcher = Batcher::new(data.len(), batch_size, seed);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..epochs {
        for idx in batcher.epoch() {
            let (x, gold, labels) = data.rows(&idx);
            let rows: Vec<RowSpec<'_>> = labels
                .iter()
                .map(|&l| RowSpec {
                    gt: l,
                    proposal: Some(proposal),
                    weights: &weights[l],
                })
                .collect();
            let result = (|| {
                let tape = Tape::new();
                let params = model.params.bind(&tape);
                let inputs = tape.var(x);
                let jl = joint_loss_rows(model, &params, &inputs, &gold, &rows, loss_cfg)?;
                let refs: Vec<&Tensor> = params.iter().collect();
                let grads: Vec<Array> = grad(&jl.loss, &refs, false)?
                    .into_iter()
                    .map(|g| g.value().clone())
                    .collect();
                adam_step(&mut model.params, &grads, &mut state)?;
                Ok(jl.breakdown)
            })();
            let breakdown = result.map_err(|e| divergence(stage, step, e))?;
            log.push(LossLogRow::new(stage, epoch, step, &breakdown));
            step += 1;
        }
    }
    Ok(log)
}

/// Grid points classified per forward pass; large single batches are
/// slower than several moderate ones.
const RASTER_CHUNK: usize = 2000;

/// Predicted class on a `size × size` grid over `[-extent, extent]²`,
/// row-major with row 0 at the top (largest y).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub size: usize,
    pub extent: f64,
    pub classes: Vec<u8>,
}

impl Raster {
    pub fn compute(model: &MlpClassifier, size: usize, extent: f64) -> Result<Self> {
        let mut pts = Vec::with_capacity(size * size * 2);
        for r in 0..size {
            for c in 0..size {
                pts.push(Self::coord(c, size, extent));
                pts.push(-Self::coord(r, size, extent));
            }
        }
        let mut classes = Vec::with_capacity(size * size);
        for chunk in pts.chunks(2 * RASTER_CHUNK) {
            let x = Array::matrix(chunk.len() / 2, 2, chunk.to_vec())?;
            classes.extend(model.classify(&x)?.into_iter().map(|c| c as u8));
        }
        Ok(Raster {
            size,
            extent,
            classes,
        })
    }

    /// Centre of cell `i` along an axis.
    pub fn coord(i: usize, size: usize, extent: f64) -> f64 {
        -extent + (i as f64 + 0.5) * 2.0 * extent / size as f64
    }

    /// Mean x position of the first class change along each raster row
    /// whose y lies in `[y_lo, y_hi]`; rows without a change are skipped.
    pub fn mean_boundary_x(&self, y_lo: f64, y_hi: f64) -> Option<f64> {
        let mut xs = Vec::new();
        for r in 0..self.size {
            let y = -Self::coord(r, self.size, self.extent);
            if y < y_lo || y > y_hi {
                continue;
            }
            let row = &self.classes[r * self.size..(r + 1) * self.size];
            if let Some(c) = (1..self.size).find(|&c| row[c] != row[c - 1]) {
                let left = Self::coord(c - 1, self.size, self.extent);
                let right = Self::coord(c, self.size, self.extent);
                xs.push(0.5 * (left + right));
            }
        }
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Boundary polyline: one `(x, y)` point per row that has a change.
    pub fn boundary_points(&self) -> Vec<(f64, f64)> {
        (0..self.size)
            .filter_map(|r| {
                let row = &self.classes[r * self.size..(r + 1) * self.size];
                (1..self.size).find(|&c| row[c] != row[c - 1]).map(|c| {
                    let x = 0.5
                        * (Self::coord(c - 1, self.size, self.extent)
                            + Self::coord(c, self.size, self.extent));
                    (x, -Self::coord(r, self.size, self.extent))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticResult {
    pub p: f64,
    pub train_class1: usize,
    pub test_class1: usize,
    pub pretrain_accuracy: f64,
    pub finetune_accuracy: f64,
    pub pretrain_boundary_x: Option<f64>,
    pub finetune_boundary_x: Option<f64>,
}

/// Everything produced for one mixing probability.
#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub result: SyntheticResult,
    pub train: SyntheticData,
    pub test: SyntheticData,
    pub pretrain_raster: Raster,
    pub finetune_raster: Raster,
    pub log: Vec<LossLogRow>,
}

/// Vertical band around the class means used for boundary statistics.
pub fn boundary_band(cfg: &SyntheticConfig) -> (f64, f64) {
    let y = 0.5 * (cfg.mean0[1] + cfg.mean1[1]);
    let half = 3.0 * cfg.variance.sqrt();
    (y - half, y + half)
}

/// Pretrains with cross-entropy, then fine-tunes with the joint objective.
pub fn run_synthetic_p(cfg: &SyntheticConfig, p: f64) -> Result<SyntheticRun> {
    cfg.validate()?;
    let (train, test) = gen_synthetic(cfg, p)?;
    let base = sub_seed(cfg.seed, (p * 1e6).round() as u64);
    let mut model = MlpClassifier::new(cfg.mlp(), sub_seed(base, 3))?;
    let mut log = train_stage(
        &mut model,
        &train,
        "pretrain",
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        cfg.pretrain_batch,
        &LossConfig::vqa_only(),
        &cfg.proposal,
        sub_seed(base, 4),
    )?;
    let pretrain_accuracy = accuracy(&model, &test)?;
    let pretrain_raster = Raster::compute(&model, cfg.raster_size, cfg.raster_extent)?;

    let loss_cfg = LossConfig {
        lambda_infl: cfg.lambda_infl,
        lambda_crit: cfg.lambda_crit,
        bucket_size: 1,
    };
    log.extend(train_stage(
        &mut model,
        &train,
        "finetune",
        cfg.finetune_epochs,
        cfg.finetune_lr,
        cfg.finetune_batch,
        &loss_cfg,
        &cfg.proposal,
        sub_seed(base, 5),
    )?);
    let finetune_accuracy = accuracy(&model, &test)?;
    let finetune_raster = Raster::compute(&model, cfg.raster_size, cfg.raster_extent)?;
    let (lo, hi) = boundary_band(cfg);
    Ok(SyntheticRun {
        result: SyntheticResult {
            p,
            train_class1: train.class_counts()[1],
            test_class1: test.class_counts()[1],
            pretrain_accuracy,
            finetune_accuracy,
            pretrain_boundary_x: pretrain_raster.mean_boundary_x(lo, hi),
            finetune_boundary_x: finetune_raster.mean_boundary_x(lo, hi),
        },
        train,
        test,
        pretrain_raster,
        finetune_raster,
        log,
    })
}

pub fn run_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticRun>> {
    cfg.ps.iter().map(|&p| run_synthetic_p(cfg, p)).collect()
}

//! Ablation grids over the loss weights and the proposal-set size. All
//! cells share one pretrained model; each cell then runs its own
//! fine-tuning stages.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::stages::{prepare, train_stage, Prepared, Stage, TrainConfig};
use super::toyqa::ToyCorpus;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::models::QaModel;

/// Named axes. `Infl` and `Crit` sweep one loss weight with the other
/// fixed; `Size` sweeps the number of proposal objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Infl,
    Crit,
    Size,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infl" => Ok(SweepAxis::Infl),
            "crit" => Ok(SweepAxis::Crit),
            "size" => Ok(SweepAxis::Size),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected infl, crit or size)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Infl => "infl",
            SweepAxis::Crit => "crit",
            SweepAxis::Size => "size",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda_infl: Vec<f64>,
    pub lambda_crit: Vec<f64>,
    pub proposal_size: Vec<usize>,
}

impl SweepGrid {
    pub fn preset(axis: SweepAxis) -> Self {
        match axis {
            SweepAxis::Infl => SweepGrid {
                lambda_infl: vec![5.0, 20.0, 60.0, 80.0],
                lambda_crit: vec![0.0],
                proposal_size: vec![6],
            },
            SweepAxis::Crit => SweepGrid {
                lambda_infl: vec![20.0],
                lambda_crit: vec![500.0, 2000.0, 4000.0, 6000.0],
                proposal_size: vec![6],
            },
            SweepAxis::Size => SweepGrid {
                lambda_infl: vec![20.0],
                lambda_crit: vec![2000.0],
                proposal_size: vec![4, 5, 6, 7, 8, 10],
            },
        }
    }

    /// Cells in row-major order: λ_infl, then λ_crit, then |I|.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        if self.lambda_infl.is_empty()
            || self.lambda_crit.is_empty()
            || self.proposal_size.is_empty()
        {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        let mut out = Vec::new();
        for &lambda_infl in &self.lambda_infl {
            for &lambda_crit in &self.lambda_crit {
                for &proposal_size in &self.proposal_size {
                    out.push(SweepCell {
                        lambda_infl,
                        lambda_crit,
                        proposal_size,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda_infl: f64,
    pub lambda_crit: f64,
    pub proposal_size: usize,
}

/// One CSV row: final metrics of a cell, plus the shared pretrained baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_infl: f64,
    pub lambda_crit: f64,
    pub proposal_size: usize,
    /// Last stage run for this cell.
    pub stage: Stage,
    pub best_epoch: usize,
    pub val_score: f64,
    pub soft_score: f64,
    pub fsr: f64,
    pub counted: usize,
    pub excluded: usize,
    pub pretrain_soft_score: f64,
    pub pretrain_fsr: f64,
}

/// Runs one cell from the shared pretrained model: the strengthen stage,
/// then the joint stage when `lambda_crit > 0`.
fn run_cell(
    corpus: &ToyCorpus,
    base: &TrainConfig,
    pretrained: &QaModel,
    cell: SweepCell,
    baseline: (f64, f64),
) -> Result<SweepRow> {
    let mut cfg = base.clone();
    cfg.proposal.size = cell.proposal_size;
    cfg.strengthen.lambda_infl = cell.lambda_infl;
    cfg.joint.lambda_infl = cell.lambda_infl;
    cfg.joint.lambda_crit = cell.lambda_crit;
    let prep = prepare(corpus, &cfg)?;
    let mut model = pretrained.clone();
    let mut last = None;
    let stages: &[Stage] = if cell.lambda_crit > 0.0 {
        &[Stage::Strengthen, Stage::Joint]
    } else {
        &[Stage::Strengthen]
    };
    for &stage in stages {
        let trace = train_stage(&prep, &model, stage, cfg.stage(stage), &cfg)?;
        last = Some((stage, trace.best_epoch, trace.val_score));
        model = trace.model;
    }
    let (stage, best_epoch, val_score) = last.expect("at least one stage runs");
    let report = evaluate(&model, &prep.test, &prep.test_proposals)?;
    Ok(SweepRow {
        lambda_infl: cell.lambda_infl,
        lambda_crit: cell.lambda_crit,
        proposal_size: cell.proposal_size,
        stage,
        best_epoch,
        val_score,
        soft_score: report.soft_score,
        fsr: report.fsr,
        counted: report.counted,
        excluded: report.excluded,
        pretrain_soft_score: baseline.0,
        pretrain_fsr: baseline.1,
    })
}

/// Pretrains once, then runs every cell. Cells are independent, so they
/// are spread over `threads` workers; rows come back in grid order.
pub fn run_sweep(
    corpus: &ToyCorpus,
    cfg: &TrainConfig,
    grid: &SweepGrid,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells()?;
    let sizes: BTreeSet<usize> = cells.iter().map(|c| c.proposal_size).collect();
    if sizes.contains(&0) {
        return Err(Error::Config("proposal size must be positive".into()));
    }
    let prep: Prepared = prepare(corpus, cfg)?;
    let init = QaModel::new(
        prep.model_config.clone(),
        super::training::sub_seed(cfg.seed, 40),
    )?;
    let pretrained = train_stage(&prep, &init, Stage::Pretrain, &cfg.pretrain, cfg)?.model;
    let base = evaluate(&pretrained, &prep.test, &prep.test_proposals)?;
    let baseline = (base.soft_score, base.fsr);

    let threads = threads.clamp(1, cells.len());
    let mut slots: Vec<Option<Result<SweepRow>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let cells = &cells;
                let pretrained = &pretrained;
                scope.spawn(move || {
                    (w..cells.len())
                        .step_by(threads)
                        .map(|k| (k, run_cell(corpus, cfg, pretrained, cells[k], baseline)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, row) in h.join().expect("sweep worker panicked") {
                slots[k] = Some(row);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every cell assigned"))
        .collect()
}

//! Three-stage QA training: cross-entropy pretraining, influence
//! strengthening, then the joint self-critical objective. Each stage
//! starts from the best (validation soft score) parameters of the
//! previous one.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::toyqa::{to_instances, ToyCorpus};
use super::training::{accumulate, divergence, sub_seed, Batcher, LossLogRow};
use crate::autodiff::{adam_step, grad, AdamConfig, AdamState, Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, LossBreakdown, LossConfig, WeightTable};
use crate::metrics::{evaluate, proposal_usable, soft_score, EvalReport};
use crate::models::{argmax, Checkpoint, QaConfig, QaInstance, QaModel};
use crate::proposal::{proposals_for_record, CorpusRecord, LexiconTagger, ProposalParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Strengthen,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Strengthen, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Strengthen => "strengthen",
            Stage::Joint => "joint",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.ckpt", self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub lambda_infl: f64,
    #[serde(default)]
    pub lambda_crit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub word_dim: usize,
    pub hidden: usize,
    pub joint_dim: usize,
    pub max_question_len: usize,
    pub pretrain: StageSpec,
    pub strengthen: StageSpec,
    pub joint: StageSpec,
    /// `None` uses `min(384, n_train / 10)`.
    pub batch_size: Option<usize>,
    pub val_fraction: f64,
    pub proposal: ProposalParams,
    pub bucket_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            word_dim: 16,
            hidden: 32,
            joint_dim: 32,
            max_question_len: 14,
            pretrain: StageSpec {
                epochs: 20,
                lr: 1e-3,
                lambda_infl: 0.0,
                lambda_crit: 0.0,
            },
            strengthen: StageSpec {
                epochs: 15,
                lr: 1e-5,
                lambda_infl: 20.0,
                lambda_crit: 0.0,
            },
            joint: StageSpec {
                epochs: 15,
                lr: 1e-5,
                lambda_infl: 20.0,
                lambda_crit: 2000.0,
            },
            batch_size: Some(8),
            val_fraction: 0.1,
            proposal: ProposalParams::default(),
            bucket_size: crate::losses::DEFAULT_BUCKET_SIZE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: Stage) -> &StageSpec {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Strengthen => &self.strengthen,
            Stage::Joint => &self.joint,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageSpec {
        match stage {
            Stage::Pretrain => &mut self.pretrain,
            Stage::Strengthen => &mut self.strengthen,
            Stage::Joint => &mut self.joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for st in Stage::ALL {
            let s = self.stage(st);
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{st}: learning rate must be positive"
                )));
            }
            if s.lambda_infl < 0.0 || s.lambda_crit < 0.0 {
                return Err(Error::Config(format!(
                    "{st}: loss weights must be non-negative"
                )));
            }
        }
        if self.pretrain.lambda_infl != 0.0 || self.pretrain.lambda_crit != 0.0 {
            return Err(Error::Config(
                "pretrain uses the cross-entropy loss only".into(),
            ));
        }
        if self.strengthen.lambda_crit != 0.0 {
            return Err(Error::Config(
                "strengthen stage has no self-critical term".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.batch_size == Some(0) || self.proposal.size == 0 {
            return Err(Error::Config(
                "batch and proposal sizes must be positive".into(),
            ));
        }
        if self.word_dim == 0
            || self.hidden == 0
            || self.joint_dim == 0
            || self.max_question_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_for(&self, n_train: usize) -> usize {
        self.batch_size
            .unwrap_or_else(|| (n_train / 10).clamp(1, 384))
    }
}

/// Instances with their proposal sets and weight rows, ready for training.
pub struct Prepared {
    pub model_config: QaConfig,
    pub answers: Vec<String>,
    pub train: Vec<QaInstance>,
    pub train_proposals: Vec<Option<Vec<usize>>>,
    pub val: Vec<QaInstance>,
    pub test: Vec<QaInstance>,
    pub test_proposals: Vec<Option<Vec<usize>>>,
    pub weights: WeightTable,
}

fn proposals(
    records: &[CorpusRecord],
    instances: &[QaInstance],
    params: &ProposalParams,
    corpus: &ToyCorpus,
) -> Result<Vec<Option<Vec<usize>>>> {
    let tagger = LexiconTagger::bundled();
    records
        .iter()
        .zip(instances)
        .map(|(r, inst)| {
            let set = proposals_for_record(r, params, &corpus.embeddings, &tagger)?;
            Ok(proposal_usable(Some(&set.indices), inst.num_objects()).then_some(set.indices))
        })
        .collect()
}

/// Splits off the validation set and builds proposal sets and weights.
pub fn prepare(corpus: &ToyCorpus, cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    let meta = &corpus.meta;
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 20)));
    let n_val = (corpus.train.len() as f64 * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| -> Vec<CorpusRecord> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| corpus.train[i].clone()).collect()
    };
    let train_records = pick(train_idx);
    let val_records = pick(val_idx);
    if train_records.is_empty() || corpus.test.is_empty() {
        return Err(Error::EmptyDataset("training or test split"));
    }

    let train = to_instances(&train_records, &meta.answers, &meta.vocab)?;
    let val = to_instances(&val_records, &meta.answers, &meta.vocab)?;
    let test = to_instances(&corpus.test, &meta.answers, &meta.vocab)?;
    let max_len = train
        .iter()
        .chain(&test)
        .map(|i| i.tokens.len())
        .max()
        .unwrap_or(1);
    if max_len > cfg.max_question_len {
        return Err(Error::Config(format!(
            "questions of {max_len} words exceed max_question_len {}",
            cfg.max_question_len
        )));
    }
    let model_config = QaConfig {
        vocab_size: meta.vocab.len(),
        word_dim: cfg.word_dim,
        hidden: cfg.hidden,
        object_dim: meta.object_dim,
        joint_dim: cfg.joint_dim,
        num_answers: meta.answers.len(),
        max_question_len: cfg.max_question_len,
    };
    Ok(Prepared {
        train_proposals: proposals(&train_records, &train, &cfg.proposal, corpus)?,
        test_proposals: proposals(&corpus.test, &test, &cfg.proposal, corpus)?,
        weights: WeightTable::from_store(&meta.answers, &corpus.embeddings),
        answers: meta.answers.clone(),
        model_config,
        train,
        val,
        test,
    })
}

/// Mean soft score of the argmax prediction.
pub fn mean_soft_score(model: &QaModel, instances: &[QaInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset("score set"));
    }
    let mut total = 0.0;
    for inst in instances {
        total += soft_score(argmax(&model.predict_probs(inst)?), &inst.gold);
    }
    Ok(total / instances.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub val_score: f64,
    pub test: EvalReport,
}

/// Held-out scores after one epoch; test scores are diagnostics only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: Stage,
    pub epoch: usize,
    pub val_score: f64,
    pub test_score: f64,
}

pub struct StageTrace {
    /// Parameters of the best epoch by validation soft score.
    pub model: QaModel,
    pub best_epoch: usize,
    pub val_score: f64,
    pub log: Vec<LossLogRow>,
    pub epochs: Vec<EpochRow>,
}

/// One stage of training from `init`. Ties in validation score go to the
/// later epoch, so a stage whose argmax predictions do not move still
/// hands on its trained parameters.
pub fn train_stage(
    prep: &Prepared,
    init: &QaModel,
    stage: Stage,
    spec: &StageSpec,
    cfg: &TrainConfig,
) -> Result<StageTrace> {
    let loss_cfg = LossConfig {
        lambda_infl: spec.lambda_infl,
        lambda_crit: spec.lambda_crit,
        bucket_size: cfg.bucket_size,
    };
    let needs_proposals = loss_cfg.lambda_infl != 0.0 || loss_cfg.lambda_crit != 0.0;
    if needs_proposals && !prep.train_proposals.iter().any(Option::is_some) {
        return Err(Error::InvalidProposal(format!(
            "stage {stage} needs proposal sets but no training instance has a usable one"
        )));
    }
    let held_out = if prep.val.is_empty() {
        &prep.train
    } else {
        &prep.val
    };
    let mut model = init.clone();
    let mut state = AdamState::new(AdamConfig::with_lr(spec.lr), &model.params);
    let seed = sub_seed(cfg.seed, 30 + stage.index() as u64);
    let mut batcher = Batcher::new(prep.train.len(), cfg.batch_for(prep.train.len()), seed);
    let mut trace = StageTrace {
        model: init.clone(),
        best_epoch: 0,
        val_score: mean_soft_score(init, held_out)?,
        log: Vec::new(),
        epochs: Vec::new(),
    };
    let mut step = 0;
    for epoch in 1..=spec.epochs {
        for batch in batcher.epoch() {
            let breakdown = batch_step(prep, &mut model, &mut state, &batch, &loss_cfg)
                .map_err(|e| divergence(stage.name(), step, e))?;
            trace
                .log
                .push(LossLogRow::new(stage.name(), epoch, step, &breakdown));
            step += 1;
        }
        let val_score = mean_soft_score(&model, held_out)?;
        trace.epochs.push(EpochRow {
            stage,
            epoch,
            val_score,
            test_score: mean_soft_score(&model, &prep.test)?,
        });
        if trace.best_epoch == 0 || val_score >= trace.val_score {
            trace.model = model.clone();
            trace.best_epoch = epoch;
            trace.val_score = val_score;
        }
    }
    Ok(trace)
}

fn batch_step(
    prep: &Prepared,
    model: &mut QaModel,
    state: &mut AdamState,
    batch: &[usize],
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut grads: Vec<Array> = model
        .params
        .values()
        .iter()
        .map(|v| Array::zeros(v.shape()))
        .collect();
    let mut total = LossBreakdown::default();
    for &i in batch {
        let inst = &prep.train[i];
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let jl = joint_loss(
            model,
            &tape,
            &params,
            inst,
            prep.train_proposals[i].as_deref(),
            prep.weights.row(inst.answer),
            loss_cfg,
        )?;
        let refs: Vec<&Tensor> = params.iter().collect();
        accumulate(&mut grads, &grad(&jl.loss, &refs, false)?);
        total.vqa += jl.breakdown.vqa;
        total.infl += jl.breakdown.infl;
        total.crit += jl.breakdown.crit;
        total.joint += jl.breakdown.joint;
    }
    let n = batch.len() as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    adam_step(&mut model.params, &grads, state)?;
    Ok(LossBreakdown {
        vqa: total.vqa / n,
        infl: total.infl / n,
        crit: total.crit / n,
        joint: total.joint / n,
    })
}

/// Where stage outputs go and which stages to run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// First stage to run; earlier stages are loaded from `out_dir`.
    pub from: Option<Stage>,
    /// Last stage to run.
    pub until: Option<Stage>,
}

pub struct StagesOutcome {
    pub reports: Vec<StageReport>,
    pub models: Vec<(Stage, QaModel)>,
    pub logs: Vec<LossLogRow>,
    pub epochs: Vec<EpochRow>,
}

pub fn checkpoint_meta(
    stage: Stage,
    epoch: usize,
    val: f64,
    model: &QaModel,
    cfg: &TrainConfig,
) -> serde_json::Value {
    json!({
        "kind": "qa",
        "stage": stage.name(),
        "best_epoch": epoch,
        "val_score": val,
        "model": model.config,
        "train": cfg,
    })
}

pub fn load_stage_checkpoint(path: &Path) -> Result<QaModel> {
    let ckpt = Checkpoint::load(path)?;
    let config: QaConfig =
        serde_json::from_value(ckpt.meta.get("model").cloned().ok_or_else(|| {
            Error::Checkpoint(format!("{}: no model configuration", path.display()))
        })?)?;
    QaModel::from_params(config, ckpt.params)
}

/// Runs pretrain → strengthen → joint, evaluating each stage on test.
pub fn run_stages(prep: &Prepared, cfg: &TrainConfig, opts: &RunOptions) -> Result<StagesOutcome> {
    let from = opts.from.unwrap_or(Stage::Pretrain);
    let until = opts.until.unwrap_or(Stage::Joint);
    let mut current = if from == Stage::Pretrain {
        QaModel::new(prep.model_config.clone(), sub_seed(cfg.seed, 40))?
    } else {
        let prev = Stage::ALL[from.index() - 1];
        let dir = opts.out_dir.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "starting at {from} needs the {prev} checkpoint directory"
            ))
        })?;
        load_stage_checkpoint(&dir.join(prev.checkpoint_file()))?
    };
    let mut out = StagesOutcome {
        reports: Vec::new(),
        models: Vec::new(),
        logs: Vec::new(),
        epochs: Vec::new(),
    };
    for stage in Stage::ALL.into_iter().filter(|s| *s >= from && *s <= until) {
        let trace = train_stage(prep, &current, stage, cfg.stage(stage), cfg)?;
        let (model, epoch, val) = (trace.model, trace.best_epoch, trace.val_score);
        let test = evaluate(&model, &prep.test, &prep.test_proposals)?;
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Checkpoint {
                meta: checkpoint_meta(stage, epoch, val, &model, cfg),
                params: model.params.clone(),
            }
            .save(&dir.join(stage.checkpoint_file()))?;
            super::report::write_csv(&dir.join(format!("{}_log.csv", stage.name())), &trace.log)?;
            super::report::write_csv(
                &dir.join(format!("{}_epochs.csv", stage.name())),
                &trace.epochs,
            )?;
            super::report::write_json(&dir.join(format!("{}_eval.json", stage.name())), &test)?;
        }
        out.reports.push(StageReport {
            stage,
            best_epoch: epoch,
            val_score: val,
            test,
        });
        out.logs.extend(trace.log);
        out.epochs.extend(trace.epochs);
        out.models.push((stage, model.clone()));
        current = model;
    }
    Ok(out)
}

//! `selfcrit`: runs the synthetic and toy QA experiments, sweeps,
//! gradient checks and sensitivity inspection.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error
//! (including training divergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use selfcrit_core::gradcheck;
use selfcrit_core::harness::config::ExperimentConfig;
use selfcrit_core::harness::report::{write_csv, write_json, write_synthetic};
use selfcrit_core::harness::stages::{
    load_stage_checkpoint, prepare, run_stages, RunOptions, Stage,
};
use selfcrit_core::harness::sweep::{run_sweep, SweepAxis, SweepGrid};
use selfcrit_core::harness::synthetic::run_synthetic;
use selfcrit_core::harness::toyqa::{gen_toy_qa, ToyCorpus};
use selfcrit_core::losses::WeightTable;
use selfcrit_core::metrics::{evaluate, EvalRow};
use selfcrit_core::proposal::ProposalMethod;
use selfcrit_core::sensitivity::SensitivityReport;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "selfcrit",
    version,
    about = "Self-critical gradient-sensitivity training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-Gaussian prior-shift experiment.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Toy question-answering corpus with shifted answer priors.
    Toyqa {
        #[command(subcommand)]
        command: ToyqaCommand,
    },
    /// Ablation grid over loss weights or proposal-set size.
    Sweep(SweepArgs),
    /// Finite-difference checks of every primitive and of the joint loss.
    Gradcheck(GradcheckArgs),
    /// Dump the sensitivity report of one instance.
    Inspect(InspectArgs),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Pretrain and fine-tune for every mixing probability.
    Run(SynthArgs),
}

#[derive(Subcommand)]
enum ToyqaCommand {
    /// Write a corpus directory.
    Gen(GenArgs),
    /// Run pretrain, strengthen and joint stages.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of every section.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LossArgs {
    /// Weight of the influence-strengthening term.
    #[arg(long)]
    lambda_infl: Option<f64>,
    /// Weight of the self-critical term.
    #[arg(long)]
    lambda_crit: Option<f64>,
}

#[derive(Args)]
struct ProposalArgs {
    /// How proposal sets are built.
    #[arg(long, value_parser = ["visual", "textual", "qa"])]
    proposal_method: Option<String>,
    /// Maximum number of proposed objects.
    #[arg(long)]
    proposal_size: Option<usize>,
    /// Number of higher-ranked wrong answers the self-critical term looks at.
    #[arg(long)]
    bucket_size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value = "out/synthetic")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "out/corpus")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    proposal: ProposalArgs,
    /// Corpus directory; generated from the `[toyqa]` section when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "out/toyqa")]
    out_dir: PathBuf,
    /// Run only this stage, starting from the previous stage's checkpoint in `--out-dir`.
    #[arg(long, value_parser = ["pretrain", "strengthen", "joint"])]
    stage: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    proposal: ProposalArgs,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Writes the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    proposal: ProposalArgs,
    /// Preset axis; the `[sweep]` config section is used when absent.
    #[arg(long, value_parser = ["infl", "crit", "size"])]
    axis: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "out/sweep")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random probe points per check.
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Parameter coordinates probed per point for the joint loss.
    #[arg(long, default_value_t = 8)]
    coords: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    proposal: ProposalArgs,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    instance: usize,
}

/// Marks errors that come from the user's input rather than from a run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<UsageError>()
            || e.downcast_ref::<selfcrit_core::Error>()
                .is_some_and(selfcrit_core::Error::is_config_error)
    });
    if config {
        1
    } else {
        2
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_loss(cfg: &mut ExperimentConfig, loss: &LossArgs) -> Result<()> {
    for (name, v) in [
        ("--lambda-infl", loss.lambda_infl),
        ("--lambda-crit", loss.lambda_crit),
    ] {
        if v.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(usage(format!("{name} must be a non-negative number")));
        }
    }
    if let Some(v) = loss.lambda_infl {
        cfg.synthetic.lambda_infl = v;
        cfg.train.strengthen.lambda_infl = v;
        cfg.train.joint.lambda_infl = v;
    }
    if let Some(v) = loss.lambda_crit {
        cfg.synthetic.lambda_crit = v;
        cfg.train.joint.lambda_crit = v;
    }
    Ok(())
}

fn apply_proposal(cfg: &mut ExperimentConfig, p: &ProposalArgs) -> Result<()> {
    if let Some(m) = &p.proposal_method {
        cfg.train.proposal.method = m.parse::<ProposalMethod>()?;
    }
    if let Some(k) = p.proposal_size {
        if k == 0 {
            return Err(usage("--proposal-size must be positive"));
        }
        cfg.train.proposal.size = k;
    }
    if let Some(b) = p.bucket_size {
        cfg.train.bucket_size = b;
    }
    Ok(())
}

fn corpus(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ToyCorpus> {
    match dir {
        Some(d) => {
            ToyCorpus::load(d).with_context(|| format!("loading corpus from {}", d.display()))
        }
        None => Ok(gen_toy_qa(&cfg.toyqa)?),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth_run(args: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_loss(&mut cfg, &args.loss)?;
    cfg.synthetic.validate()?;
    let runs = run_synthetic(&cfg.synthetic)?;
    write_synthetic(&args.out_dir, &runs)?;
    for r in &runs {
        let res = &r.result;
        println!(
            "p = {:<5} pretrained accuracy {:.3}  fine-tuned accuracy {:.3}  boundary x {} -> {}",
            res.p,
            res.pretrain_accuracy,
            res.finetune_accuracy,
            fmt_opt(res.pretrain_boundary_x),
            fmt_opt(res.finetune_boundary_x),
        );
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), |v| format!("{v:.3}"))
}

fn toyqa_gen(args: GenArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let corpus = gen_toy_qa(&cfg.toyqa)?;
    corpus.save(&args.out_dir)?;
    println!(
        "wrote {} train and {} test scenes to {}",
        corpus.train.len(),
        corpus.test.len(),
        args.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    stage: Stage,
    best_epoch: usize,
    val_score: f64,
    soft_score: f64,
    fsr: f64,
    total: usize,
    counted: usize,
    false_sensitive: usize,
    excluded: usize,
}

impl StageSummary {
    fn new(stage: Stage, best_epoch: usize, val_score: f64, test: EvalRow) -> Self {
        StageSummary {
            stage,
            best_epoch,
            val_score,
            soft_score: test.soft_score,
            fsr: test.fsr,
            total: test.total,
            counted: test.counted,
            false_sensitive: test.false_sensitive,
            excluded: test.excluded,
        }
    }
}

fn toyqa_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_loss(&mut cfg, &args.loss)?;
    apply_proposal(&mut cfg, &args.proposal)?;
    cfg.train.validate()?;
    let stage = args.stage.as_deref().map(str::parse::<Stage>).transpose()?;
    let corpus = corpus(&cfg, args.corpus.as_deref())?;
    let prep = prepare(&corpus, &cfg.train)?;
    let opts = RunOptions {
        out_dir: Some(args.out_dir.clone()),
        from: stage,
        until: stage,
    };
    let outcome = run_stages(&prep, &cfg.train, &opts)?;
    let summary: Vec<StageSummary> = outcome
        .reports
        .iter()
        .map(|r| StageSummary::new(r.stage, r.best_epoch, r.val_score, r.test.row()))
        .collect();
    let name = match stage {
        Some(s) => format!("summary_{s}.csv"),
        None => "summary.csv".to_string(),
    };
    write_csv(&args.out_dir.join(name), &summary)?;
    for s in &summary {
        println!(
            "{:<10} epoch {:>2}  val {:.4}  test soft score {:.4}  FSR {:.4} ({}/{}, {} excluded)",
            s.stage.name(),
            s.best_epoch,
            s.val_score,
            s.soft_score,
            s.fsr,
            s.false_sensitive,
            s.counted,
            s.excluded
        );
    }
    Ok(())
}

fn toyqa_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_proposal(&mut cfg, &args.proposal)?;
    let corpus = corpus(&cfg, args.corpus.as_deref())?;
    let prep = prepare(&corpus, &cfg.train)?;
    let model = load_stage_checkpoint(&args.checkpoint)?;
    let report = evaluate(&model, &prep.test, &prep.test_proposals)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_proposal(&mut cfg, &args.proposal)?;
    let grid = match (&args.axis, &cfg.sweep) {
        (Some(axis), _) => SweepGrid::preset(axis.parse::<SweepAxis>()?),
        (None, Some(grid)) => grid.clone(),
        (None, None) => return Err(usage("give --axis or a [sweep] section in --config")),
    };
    let corpus = corpus(&cfg, args.corpus.as_deref())?;
    let rows = run_sweep(&corpus, &cfg.train, &grid, args.threads)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let name = args
        .axis
        .as_deref()
        .map_or("sweep.csv".to_string(), |a| format!("sweep_{a}.csv"));
    write_csv(&args.out_dir.join(&name), &rows)?;
    for r in &rows {
        println!(
            "lambda_infl {:>5} lambda_crit {:>6} |I| {:>2}  soft score {:.4}  FSR {:.4}  (pretrained {:.4} / {:.4})",
            r.lambda_infl, r.lambda_crit, r.proposal_size, r.soft_score, r.fsr, r.pretrain_soft_score, r.pretrain_fsr
        );
    }
    println!("wrote {}", args.out_dir.join(name).display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.points == 0 || args.coords == 0 {
        return Err(usage("--points and --coords must be positive"));
    }
    let mut results = gradcheck::check_primitives(args.seed, args.points)?;
    results.extend(gradcheck::check_second_order(args.seed, args.points)?);
    results.push(gradcheck::check_joint_loss(
        args.seed,
        args.points,
        args.coords,
    )?);
    results.push(gradcheck::check_joint_loss_rows(
        args.seed,
        args.points,
        args.coords,
    )?);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{status:<4} {:<32} max rel error {:.2e} (tol {:.0e}, {} points, {} skipped)",
            r.name, r.max_rel_error, r.tolerance, r.points, r.skipped
        );
    }
    if failed > 0 {
        anyhow::bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_proposal(&mut cfg, &args.proposal)?;
    let corpus = corpus(&cfg, args.corpus.as_deref())?;
    let prep = prepare(&corpus, &cfg.train)?;
    let model = load_stage_checkpoint(&args.checkpoint)?;
    let inst = prep.test.get(args.instance).ok_or_else(|| {
        usage(format!(
            "--instance {} out of range for {} test instances",
            args.instance,
            prep.test.len()
        ))
    })?;
    let proposal = prep.test_proposals[args.instance]
        .as_deref()
        .ok_or_else(|| {
            anyhow::anyhow!("test instance {} has no usable proposal set", args.instance)
        })?;
    let weights = WeightTable::from_store(&prep.answers, &corpus.embeddings);
    let report = SensitivityReport::compute(
        &model,
        inst,
        proposal,
        cfg.train.bucket_size,
        weights.row(inst.answer),
    )?;
    print_json(&report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            command: SynthCommand::Run(a),
        } => synth_run(a),
        Command::Toyqa { command } => match command {
            ToyqaCommand::Gen(a) => toyqa_gen(a),
            ToyqaCommand::Train(a) => toyqa_train(a),
            ToyqaCommand::Eval(a) => toyqa_eval(a),
        },
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line front end.
//!
//! Every subcommand takes `--config <file.toml>`, `--seed` and `--out`.
//! Per-seed results go under `<out>/seed-<seed>/`; `<out>/summary.json`
//! aggregates them and `<out>/timing.json` holds wall-clock times.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::causes;
use crate::config::ExperimentConfig;
use crate::dataset_io::{load_dataset, save_dataset};
use crate::gradcheck::{loss_gradcheck, LossCheckConfig, LossKind};
use crate::graph::{DataSplits, Dataset, PllSample};
use crate::metrics::{self, EpochLog, RunSummary, Timing};
use crate::model::{Checkpoint, Model};
use crate::theorem::{truth_mass_path, verify_theorem3};
use crate::train::{self, EpochRecord, Method, RunOutput};

#[derive(Debug, Parser)]
#[command(name = "gpcd", version, about = "Partial-label graph classification with potential-cause discovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment file; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run this seed only instead of the configured seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// No per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DataSource {
    /// Directory written by `gen-data` (one seed); otherwise data is
    /// generated from the config for each seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Gpcd,
    WoLambda,
    WoAuxiliary,
    BaselineCe,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gpcd => Method::Gpcd,
            MethodArg::WoLambda => Method::WoLambda,
            MethodArg::WoAuxiliary => Method::WoAuxiliary,
            MethodArg::BaselineCe => Method::BaselineCe,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted graphs, add candidate-label noise and save the splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one method.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
        #[arg(long, value_enum, default_value = "gpcd")]
        method: MethodArg,
    },
    /// Evaluate a saved model checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
        #[arg(long)]
        model: PathBuf,
    },
    /// GPCD and both ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
    },
    /// Candidate cross-entropy baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
    },
    /// Finite-difference check of the training objectives.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train GPCD and dump prototypes and node attributions.
    Causes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
    },
    /// Grid search for the minimizer of the candidate-power objective.
    VerifyTheorem3 {
        #[command(flatten)]
        common: Common,
        /// Check this lambda only.
        #[arg(long)]
        lambda: Option<u32>,
        #[arg(long)]
        grid_step: Option<f64>,
    },
    /// Baseline on full, causally pruned and fully supervised graphs.
    OraclePrune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
    },
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(Cli::parse_from(args))
}

struct Ctx {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    out: PathBuf,
    quiet: bool,
    timing: Timing,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.train.validate()?;
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        std::fs::write(common.out.join("config.toml"), cfg.to_toml_string())?;
        Ok(Self {
            seeds: cfg.resolve_seeds(common.seed),
            cfg,
            out: common.out.clone(),
            quiet: common.quiet,
            timing: Timing::default(),
        })
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    fn splits(&self, data: &DataSource, seed: u64) -> Result<DataSplits> {
        match &data.data {
            Some(dir) => load_splits(dir),
            None => Ok(self.cfg.data.build(seed)?),
        }
    }

    fn finish(&self, summary: &Value) -> Result<()> {
        metrics::write_json(&self.out.join(metrics::SUMMARY_JSON), summary)?;
        metrics::write_json(&self.out.join(metrics::TIMING_JSON), &self.timing)?;
        Ok(())
    }
}

pub fn load_splits(dir: &Path) -> Result<DataSplits> {
    let load = |name: &str| -> Result<Dataset> {
        let p = dir.join(name);
        load_dataset(&p).with_context(|| format!("loading {}", p.display()))
    };
    Ok(DataSplits {
        train: load(TRAIN_FILE)?,
        validation: load(VALIDATION_FILE)?,
        test: load(TEST_FILE)?,
    })
}

pub fn save_splits(splits: &DataSplits, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_dataset(&splits.train, &dir.join(TRAIN_FILE))?;
    save_dataset(&splits.validation, &dir.join(VALIDATION_FILE))?;
    save_dataset(&splits.test, &dir.join(TEST_FILE))?;
    Ok(())
}

/// Trains `method`, streaming epochs to `dir/epochs.jsonl`, then writes the
/// csv, summary and checkpoint.
fn train_logged(
    splits: &DataSplits,
    ctx: &mut Ctx,
    seed: u64,
    method: Method,
    dir: &Path,
) -> Result<RunOutput> {
    let mut cfg = ctx.cfg.train.clone();
    cfg.seed = seed;
    let mut log = EpochLog::create(dir)?;
    let mut log_err = None;
    let quiet = ctx.quiet;
    let mut observer = |r: &EpochRecord| {
        if !quiet {
            eprintln!(
                "seed {seed} {} epoch {:>3} loss {:.4} val {:.3} test {:.3} protos {}",
                r.run, r.epoch, r.train_loss.total, r.val_acc, r.test_acc, r.prototypes
            );
        }
        if log_err.is_none() {
            log_err = log.append(r).err();
        }
    };
    let start = Instant::now();
    let out = train::run_method(splits, &cfg, method, Some(&mut observer))?;
    ctx.timing.record(format!("seed-{seed}/{}", method.name()), start.elapsed().as_secs_f64());
    if let Some(e) = log_err {
        return Err(e.into());
    }
    write_run_files(&out, method, seed, dir)?;
    Ok(out)
}

fn write_run_files(out: &RunOutput, method: Method, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    metrics::write_epochs_csv(dir, &out.epochs)?;
    metrics::write_json(&dir.join(metrics::SUMMARY_JSON), &RunSummary::new(out, method, seed))?;
    metrics::write_json(&dir.join("model.json"), &out.model.to_checkpoint())?;
    if let Some(p) = &out.prototypes {
        metrics::write_json(&dir.join("prototypes.json"), &p.summary())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MethodAggregate {
    seeds: Vec<u64>,
    test_acc: Vec<f64>,
    mean_test_acc: f64,
    stderr_test_acc: f64,
    topk_precision: Vec<f64>,
}

fn aggregate(seeds: &[u64], runs: &[&RunOutput]) -> MethodAggregate {
    let acc: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
    let (mean, se) = metrics::mean_stderr(&acc);
    MethodAggregate {
        seeds: seeds.to_vec(),
        test_acc: acc,
        mean_test_acc: mean,
        stderr_test_acc: se,
        topk_precision: runs
            .iter()
            .filter_map(|r| r.cause_recovery.map(|c| c.topk_precision))
            .collect(),
    }
}

fn train_methods(common: &Common, data: &DataSource, command: &str, methods: &[Method]) -> Result<Value> {
    let mut ctx = Ctx::new(common)?;
    let seeds = ctx.seeds.clone();
    let mut by_method: Vec<Vec<RunOutput>> = methods.iter().map(|_| Vec::new()).collect();
    for &seed in &seeds {
        let splits = ctx.splits(data, seed)?;
        for (m, runs) in methods.iter().zip(by_method.iter_mut()) {
            let dir = if methods.len() == 1 {
                ctx.seed_dir(seed)
            } else {
                ctx.seed_dir(seed).join(m.name())
            };
            runs.push(train_logged(&splits, &mut ctx, seed, *m, &dir)?);
        }
    }
    let mut per_method = serde_json::Map::new();
    for (m, runs) in methods.iter().zip(&by_method) {
        let refs: Vec<&RunOutput> = runs.iter().collect();
        per_method.insert(m.name().into(), serde_json::to_value(aggregate(&seeds, &refs))?);
    }
    let summary = json!({ "command": command, "methods": per_method });
    ctx.finish(&summary)?;
    Ok(summary)
}

fn gen_data(common: &Common) -> Result<Value> {
    let mut ctx = Ctx::new(common)?;
    let mut per_seed = Vec::new();
    for seed in ctx.seeds.clone() {
        let start = Instant::now();
        let splits = ctx.cfg.data.build(seed)?;
        save_splits(&splits, &ctx.seed_dir(seed))?;
        ctx.timing.record(format!("seed-{seed}"), start.elapsed().as_secs_f64());
        let describe = |ds: &Dataset| {
            let mut hist = vec![0usize; ds.num_classes];
            ds.samples.iter().for_each(|s| hist[s.ground_truth] += 1);
            let mean_k = ds.samples.iter().map(|s| s.candidates.len()).sum::<usize>() as f64 / ds.len().max(1) as f64;
            json!({ "count": ds.len(), "class_counts": hist, "mean_candidates": mean_k })
        };
        per_seed.push(json!({
            "seed": seed,
            "train": describe(&splits.train),
            "validation": describe(&splits.validation),
            "test": describe(&splits.test),
        }));
    }
    let summary = json!({ "command": "gen-data", "seeds": per_seed });
    ctx.finish(&summary)?;
    Ok(summary)
}

fn eval(common: &Common, data: &DataSource, model_path: &Path) -> Result<Value> {
    let mut ctx = Ctx::new(common)?;
    let text = std::fs::read_to_string(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    let model = Model::from_checkpoint(&ck)?;
    let mut per_seed = Vec::new();
    for seed in ctx.seeds.clone() {
        let start = Instant::now();
        let splits = ctx.splits(data, seed)?;
        let recovery = train::cause_recovery(&splits.test, &model, None, ctx.cfg.train.beta)?;
        per_seed.push(json!({
            "seed": seed,
            "train_acc": train::evaluate(&splits.train, &model)?,
            "val_acc": train::evaluate(&splits.validation, &model)?,
            "test_acc": train::evaluate(&splits.test, &model)?,
            "topk_precision": recovery.map(|r| r.topk_precision),
        }));
        ctx.timing.record(format!("seed-{seed}"), start.elapsed().as_secs_f64());
    }
    let summary = json!({ "command": "eval", "seeds": per_seed });
    ctx.finish(&summary)?;
    Ok(summary)
}

fn gradcheck_cmd(common: &Common) -> Result<Value> {
    let mut ctx = Ctx::new(common)?;
    let mut per_seed = Vec::new();
    for seed in ctx.seeds.clone() {
        let start = Instant::now();
        let splits = ctx.cfg.data.build(seed)?;
        let n = ctx.cfg.gradcheck.graphs;
        if n == 0 || n > splits.train.len() {
            bail!("gradcheck.graphs must lie in 1..={}", splits.train.len());
        }
        let mut tcfg = ctx.cfg.train.clone();
        tcfg.seed = seed;
        let model = train::init_model(&splits.train, &tcfg)?;
        let samples: Vec<&PllSample> = splits.train.samples[..n].iter().collect();
        let check = LossCheckConfig {
            weights: tcfg.weights,
            lambda: tcfg.lambda,
            beta: tcfg.beta,
            g_reduction: tcfg.g_reduction,
            probes: ctx.cfg.gradcheck.probes,
            seed,
        };
        let pretrain = loss_gradcheck(&model, &samples, LossKind::Pretrain, &check)?;
        let auxiliary = loss_gradcheck(&model, &samples, LossKind::Auxiliary, &check)?;
        ctx.timing.record(format!("seed-{seed}"), start.elapsed().as_secs_f64());
        per_seed.push(json!({ "seed": seed, "pretrain": pretrain, "auxiliary": auxiliary }));
    }
    let summary = json!({ "command": "gradcheck", "seeds": per_seed });
    ctx.finish(&summary)?;
    Ok(summary)
}

fn causes_cmd(common: &Common, data: &DataSource) -> Result<Value> {
    let mut ctx = Ctx::new(common)?;
    let mut per_seed = Vec::new();
    for seed in ctx.seeds.clone() {
        let splits = ctx.splits(data, seed)?;
        let dir = ctx.seed_dir(seed);
        let out = train_logged(&splits, &mut ctx, seed, Method::Gpcd, &dir)?;
        let mut lines = String::new();
        for (i, s) in splits.test.samples.iter().enumerate() {
            let scores = causes::node_attribution(&s.graph, &out.model)?;
            let k = s.causal_mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count());
            let rec = json!({
                "index": i,
                "ground_truth": s.ground_truth,
                "attribution": scores,
                "top_k": causes::top_k(&scores, k),
                "causal_mask": s.causal_mask,
                "precision": s.causal_mask.as_ref().map(|m| causes::top_k_precision(&scores, m)),
            });
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
        std::fs::write(dir.join("attribution.jsonl"), lines)?;
        per_seed.push(json!({
            "seed": seed,
            "test_acc": out.test_acc,
            "cause_recovery": out.cause_recovery,
            "prototypes": out.prototypes.as_ref().map_or(0, |p| p.len()),
        }));
    }
    let summary = json!({ "command": "causes", "seeds": per_seed });
    ctx.finish(&summary)?;
    Ok(summary)
}

fn verify_theorem3_cmd(common: &Common, lambda: Option<u32>, grid_step: Option<f64>) -> Result<Value> {
    let mut ctx = Ctx::new(common)?;
    let t = &ctx.cfg.theorem;
    let lambdas = lambda.map_or_else(|| t.lambdas.clone(), |l| vec![l]);
    let step = grid_step.unwrap_or(t.grid_step);
    let start = Instant::now();
    let reports = lambdas
        .iter()
        .map(|&l| verify_theorem3(t.num_classes, &t.profile, l, step))
        .collect::<Result<Vec<_>, _>>()?;
    let path = truth_mass_path(t.num_classes, &t.profile, lambdas.iter().copied(), step)?;
    ctx.timing.record("grid", start.elapsed().as_secs_f64());
    let summary = json!({
        "command": "verify-theorem3",
        "num_classes": t.num_classes,
        "profile": t.profile,
        "reports": reports,
        "truth_mass_by_lambda": path,
    });
    ctx.finish(&summary)?;
    Ok(summary)
}

fn oracle_prune_cmd(common: &Common, data: &DataSource) -> Result<Value> {
    let mut ctx = Ctx::new(common)?;
    let seeds = ctx.seeds.clone();
    let mut runs: [Vec<RunOutput>; 3] = Default::default();
    for &seed in &seeds {
        let splits = ctx.splits(data, seed)?;
        let mut cfg = ctx.cfg.train.clone();
        cfg.seed = seed;
        let start = Instant::now();
        let o = train::oracle_prune_experiment(&splits, &cfg)?;
        ctx.timing.record(format!("seed-{seed}"), start.elapsed().as_secs_f64());
        for (slot, out) in runs.iter_mut().zip([o.full_pll, o.pruned_pll, o.full_supervised]) {
            let dir = ctx.seed_dir(seed).join(&out.run);
            let mut log = EpochLog::create(&dir)?;
            for e in &out.epochs {
                log.append(e)?;
            }
            write_run_files(&out, Method::BaselineCe, seed, &dir)?;
            slot.push(out);
        }
    }
    let mut per_run = serde_json::Map::new();
    for r in &runs {
        let refs: Vec<&RunOutput> = r.iter().collect();
        let name = refs.first().map_or(String::new(), |o| o.run.clone());
        per_run.insert(name, serde_json::to_value(aggregate(&seeds, &refs))?);
    }
    let summary = json!({ "command": "oracle-prune", "runs": per_run });
    ctx.finish(&summary)?;
    Ok(summary)
}

pub fn execute(cli: Cli) -> Result<()> {
    let summary = match &cli.command {
        Command::GenData { common } => gen_data(common)?,
        Command::Train { common, data, method } => {
            train_methods(common, data, "train", &[Method::from(*method)])?
        }
        Command::Eval { common, data, model } => eval(common, data, model)?,
        Command::Ablate { common, data } => train_methods(
            common,
            data,
            "ablate",
            &[Method::Gpcd, Method::WoLambda, Method::WoAuxiliary],
        )?,
        Command::Baseline { common, data } => train_methods(common, data, "baseline", &[Method::BaselineCe])?,
        Command::Gradcheck { common } => gradcheck_cmd(common)?,
        Command::Causes { common, data } => causes_cmd(common, data)?,
        Command::VerifyTheorem3 { common, lambda, grid_step } => verify_theorem3_cmd(common, *lambda, *grid_step)?,
        Command::OraclePrune { common, data } => oracle_prune_cmd(common, data)?,
    };
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(&summary)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

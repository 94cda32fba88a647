use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kernel_ope::harness::{
    emit_outputs, evaluate_policy, fit_method, kernel_dump, run_experiment, run_policy_study,
    ExperimentConfig, ExperimentKind, KernelSettings, Method, MomentSource, OptimizeConfig,
    Scale, TrainingKernel,
};
use kernel_ope::kernel::BasisSpec;
use kernel_ope::optimize::{PolicyArtifact, PtoOptions};
use kernel_ope::simenv::{self, read_dataset_csv, write_dataset_csv, EnvConfig};
use kernel_ope::types::{ActionSpace, ConstantPolicy, DeterministicPolicy};
use kernel_ope::EstimatorTag;

#[derive(Parser)]
#[command(name = "kernel-ope", version, about = "Kernelized off-policy evaluation and optimization of pricing policies")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a logged dataset from the travel-insurance environment.
    Simulate(SimulateArgs),
    /// Estimate the value of a policy on a dataset.
    Evaluate(EvaluateArgs),
    /// Dump kernel matrices as CSV.
    Kernel(KernelArgs),
    /// Fit a pricing policy (dsl, nn, pto).
    Optimize(OptimizeArgs),
    /// Run one of the Monte-Carlo studies.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct EnvArgs {
    /// Environment config (TOML); the bundled default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the environment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the higher-order elasticity term.
    #[arg(long)]
    no_hx: bool,
}

impl EnvArgs {
    fn load(&self) -> Result<EnvConfig> {
        let mut env = match &self.config {
            Some(p) => EnvConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => EnvConfig::default_config(),
        };
        if let Some(s) = self.seed {
            env.params.seed = s;
        }
        if self.no_hx {
            env.params.higher_order = false;
        }
        Ok(env)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Number of customers.
    #[arg(short, long, default_value_t = 10_000)]
    n: usize,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Dm,
    Ips,
    KipsNaive,
    KipsOptimal,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MomentArg {
    Oracle,
    Binned,
}

#[derive(Args)]
struct KernelOpts {
    /// Polynomial degree of the action basis.
    #[arg(long, default_value_t = 2)]
    basis_degree: u32,
    /// Conditional moments for the variance-optimal kernel.
    #[arg(long, value_enum, default_value_t = MomentArg::Binned)]
    moments: MomentArg,
    /// Feature column binned for the moment estimates.
    #[arg(long, default_value_t = 0)]
    moment_feature: usize,
    #[arg(long, default_value_t = 10)]
    moment_bins: usize,
    /// Add a small ridge to singular covariance matrices.
    #[arg(long)]
    ridge_jitter: bool,
}

impl KernelOpts {
    fn moment_source(&self) -> MomentSource {
        match self.moments {
            MomentArg::Oracle => MomentSource::Oracle,
            MomentArg::Binned => MomentSource::Binned {
                feature: self.moment_feature,
                bins: self.moment_bins,
            },
        }
    }

    fn settings(&self) -> KernelSettings {
        KernelSettings {
            basis: BasisSpec::polynomial(self.basis_degree),
            moments: self.moment_source(),
            ridge_jitter: self.ridge_jitter,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Dataset CSV written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// `constant:<action>` or `artifact:<path>`.
    #[arg(long)]
    policy: String,
    #[arg(long, value_enum, default_value_t = EstimatorArg::All)]
    estimator: EstimatorArg,
    #[command(flatten)]
    kernel: KernelOpts,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelKindArg {
    Naive,
    Optimal,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Dataset CSV written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = KernelKindArg::Naive)]
    kind: KernelKindArg,
    #[command(flatten)]
    kernel: KernelOpts,
    /// Number of leading records to dump.
    #[arg(long, default_value_t = 10)]
    records: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    method: String,
    /// Dataset CSV written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Hyperparameter config (TOML).
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Training seed.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// Output directory for `policy.json` and `training_log.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_parser = parse_kind)]
    kind: ExperimentKind,
    /// Experiment config (TOML); the preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "paper_scale")]
    desk_scale: bool,
    #[arg(long)]
    paper_scale: bool,
    /// Run without the higher-order elasticity term only.
    #[arg(long)]
    no_hx: bool,
    /// Override the replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Override the sample sizes (comma separated).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
}

fn parse_kind(s: &str) -> std::result::Result<ExperimentKind, String> {
    s.parse().map_err(|e: kernel_ope::Error| e.to_string())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Kernel(a) => kernel(a),
        Command::Optimize(a) => optimize(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let env = a.env.load()?;
    let sim = simenv::simulate(
        &env.params,
        a.n,
        &env.logging_policy()?,
        &env.historical_actions,
        &env.evaluation(),
    )?;
    write_dataset_csv(&sim, &a.out)?;
    log::info!("wrote {} records to {}", a.n, a.out.display());
    Ok(())
}

fn load_data(env: &EnvConfig, path: &Path) -> Result<simenv::Simulation> {
    read_dataset_csv(path, env).with_context(|| format!("reading {}", path.display()))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let env = a.env.load()?;
    let sim = load_data(&env, &a.data)?;
    let (policy, grid): (Box<dyn DeterministicPolicy>, ActionSpace) =
        if let Some(level) = a.policy.strip_prefix("constant:") {
            let level: f64 = level.parse().context("constant policy action")?;
            let grid = sim.evaluation.clone();
            let j = grid
                .index_of(level, 1e-9)
                .with_context(|| format!("action {level} is not on the evaluation grid {grid}"))?;
            (Box::new(ConstantPolicy::new(j, grid.len())?), grid)
        } else if let Some(path) = a.policy.strip_prefix("artifact:") {
            let art = PolicyArtifact::load(path)?;
            let grid = art.evaluation_actions.clone();
            (art.policy(), grid)
        } else {
            bail!("policy must be constant:<action> or artifact:<path>");
        };
    let estimators: Vec<EstimatorTag> = match a.estimator {
        EstimatorArg::Dm => vec![EstimatorTag::Dm],
        EstimatorArg::Ips => vec![EstimatorTag::Ips],
        EstimatorArg::KipsNaive => vec![EstimatorTag::KipsNaive],
        EstimatorArg::KipsOptimal => vec![EstimatorTag::KipsOptimal],
        EstimatorArg::All => {
            // IPS is only defined on the logged grid
            EstimatorTag::ALL
                .into_iter()
                .filter(|t| *t != EstimatorTag::Ips || grid == sim.historical)
                .collect()
        }
    };
    let rows = evaluate_policy(
        &sim,
        &env,
        policy.as_ref(),
        &grid,
        &estimators,
        &a.kernel.settings(),
        &PtoOptions::default(),
    )?;
    let mut w: csv::Writer<Box<dyn std::io::Write>> = match &a.out {
        Some(p) => csv::Writer::from_writer(Box::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => csv::Writer::from_writer(Box::new(std::io::stdout())),
    };
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn kernel(a: KernelArgs) -> Result<()> {
    let env = a.env.load()?;
    let sim = load_data(&env, &a.data)?;
    let grid = sim.evaluation.clone();
    let kind = match a.kind {
        KernelKindArg::Naive => TrainingKernel::Naive,
        KernelKindArg::Optimal => TrainingKernel::Optimal,
    };
    let ks = a.kernel.settings().kernels(kind, &sim, &env, &grid)?;
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for r in kernel_dump(&ks, &sim, &grid, a.records) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn optimize(a: OptimizeArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let env = a.env.load()?;
    let sim = load_data(&env, &a.data)?;
    let cfg = match &a.hyper {
        Some(p) => OptimizeConfig::load(p)?,
        None => OptimizeConfig::default(),
    };
    let grid = sim.evaluation.clone();
    let out = fit_method(method, &sim, &env, &cfg, &grid, a.train_seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    out.artifact.save(a.out.join("policy.json"))?;
    out.log.write(a.out.join("training_log.csv"))?;
    log::info!("wrote {} policy to {}", method, a.out.display());
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let scale = if a.paper_scale { Scale::Paper } else { Scale::Desk };
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::preset(a.kind, scale),
    };
    cfg.kind = a.kind;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if a.no_hx {
        cfg.higher_order = false;
    }
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    if let Some(s) = a.sizes {
        cfg.sample_sizes = s;
    }
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let results = match a.kind {
        // one fit serves both halves of the policy study
        ExperimentKind::PolicyGap | ExperimentKind::EstimatorBias => {
            let study = run_policy_study(&cfg)?;
            vec![study.gap, study.bias]
        }
        _ => vec![run_experiment(&cfg)?],
    };
    for r in &results {
        for p in emit_outputs(r, &dir)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

//! `slatelab` command-line tool.
//!
//! Exit codes: 0 success, 1 other failure, 2 log parse failure, 3 training
//! divergence, 4 configuration error, 5 degenerate analysis sample, 6
//! off-policy coverage violation.

use clap::{Args, Parser, Subcommand};
use slatelab::analysis::AnalysisError;
use slatelab::log::{IngestOptions, LogError};
use slatelab::models::{ModelError, ModelKind};
use slatelab::ope::OpeError;
use slatelab::pipeline::{self, Manifest, RunConfig, Stage, Trim};
use slatelab::sim::{ArmPolicy, SimError};
use slatelab::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Overrides the configured data directory.
const DATA_DIR_ENV: &str = "SLATELAB_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "slatelab",
    version,
    about = "Personalized story recommendation: models, experiments and off-policy evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; flags override it.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an interaction log and its sidecars into the data directory.
    Ingest {
        log: PathBuf,
        #[arg(long)]
        users: Option<PathBuf>,
        #[arg(long)]
        stories: Option<PathBuf>,
        /// sessionN or daily-top=P.
        #[arg(long)]
        trim: Option<Trim>,
        /// File name for the stored log.
        #[arg(long, default_value = "history.csv")]
        out: String,
    },
    /// Tune and fit engagement models on a stored log.
    Train {
        /// Model to fit when --compare is not given.
        #[arg(long, default_value = "mf", value_parser = parse_kind)]
        model: ModelKind,
        /// Comma-separated models to compare, e.g. mean,twfe,mf.
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        compare: Option<Vec<ModelKind>>,
        /// Hyperparameter grid, e.g. "k=4,8 l2=1e-4,1e-3".
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Log file in the data directory.
        #[arg(long)]
        log: Option<String>,
    },
    /// Build a synthetic world and its editorial history.
    Simulate {
        #[arg(long)]
        users: Option<u32>,
        #[arg(long)]
        stories: Option<u32>,
        /// Days of history.
        #[arg(long)]
        days: Option<i32>,
    },
    /// Run a two-arm experiment in the configured world.
    Experiment {
        /// Experiment length in days.
        #[arg(long)]
        days: Option<i32>,
        /// Treatment assignment probability.
        #[arg(long)]
        p: Option<f64>,
        /// treatment=POLICY,control=POLICY.
        #[arg(long)]
        arms: Option<String>,
        /// Serve the control policy in both arms.
        #[arg(long)]
        null: bool,
    },
    /// Treatment effects, heterogeneity and diagnostics.
    Analyze {
        /// Subgroup families, e.g. niche,heavy,new; "none" skips the table.
        #[arg(long, value_delimiter = ',')]
        subgroups: Option<Vec<String>>,
        /// Emit the covariate balance table.
        #[arg(long)]
        balance: Option<bool>,
        #[arg(long)]
        buckets: Option<usize>,
        /// Keep users with implausible sessions.
        #[arg(long)]
        no_trim: bool,
    },
    /// Doubly-robust values of counterfactual policies from editorial logs.
    EvaluatePolicy {
        /// Comma-separated: pers, pop, edit.
        #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
        policies: Option<Vec<ArmPolicy>>,
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        floor: Option<f64>,
        /// Compare the personalized value with the treatment arm.
        #[arg(long)]
        check_against_rct: Option<bool>,
    },
    /// Collect the tables into report.md.
    Report,
    /// simulate, train, experiment, analyze, evaluate-policy and report.
    Pipeline,
    /// Print the resolved configuration.
    Config,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model '{s}' (mean, twfe, mf)"))
}

fn parse_policy(s: &str) -> Result<ArmPolicy, String> {
    match s {
        "pers" | "personalized" => Ok(ArmPolicy::Personalized),
        "pop" | "popularity" => Ok(ArmPolicy::Popularity),
        "edit" | "editorial" => Ok(ArmPolicy::Editorial),
        _ => Err(format!("unknown policy '{s}' (pers, pop, edit)")),
    }
}

/// `k=4,8 l2=1e-4,1e-3`; either part may be omitted.
fn parse_grid(s: &str) -> Result<(Option<Vec<usize>>, Option<Vec<f64>>), Error> {
    let bad = |m: String| Error::Config(format!("--grid: {m}"));
    let (mut k, mut l2) = (None, None);
    for part in s.split_whitespace() {
        let (key, vals) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=values, got '{part}'")))?;
        match key {
            "k" => {
                k = Some(
                    vals.split(',')
                        .map(|v| v.parse().map_err(|_| bad(format!("bad k '{v}'"))))
                        .collect::<Result<_, _>>()?,
                )
            }
            "l2" => {
                l2 = Some(
                    vals.split(',')
                        .map(|v| v.parse().map_err(|_| bad(format!("bad l2 '{v}'"))))
                        .collect::<Result<_, _>>()?,
                )
            }
            _ => return Err(bad(format!("unknown key '{key}'"))),
        }
    }
    Ok((k, l2))
}

fn parse_arms(s: &str) -> Result<(Option<ArmPolicy>, Option<ArmPolicy>), Error> {
    let (mut t, mut c) = (None, None);
    for part in s.split(',') {
        let (arm, pol) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--arms: expected arm=policy, got '{part}'")))?;
        let pol = parse_policy(pol).map_err(|e| Error::Config(format!("--arms: {e}")))?;
        match arm {
            "treatment" => t = Some(pol),
            "control" => c = Some(pol),
            _ => return Err(Error::Config(format!("--arms: unknown arm '{arm}'"))),
        }
    }
    Ok((t, c))
}

fn load_config(g: &Global) -> Result<RunConfig, Error> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::io(p.display().to_string()))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Ok(d) = std::env::var(DATA_DIR_ENV) {
        cfg.paths.data_dir = d.into();
    }
    if let Some(d) = &g.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &g.model_dir {
        cfg.paths.model_dir = d.clone();
    }
    if let Some(d) = &g.report_dir {
        cfg.paths.report_dir = d.clone();
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Log(LogError::Parse { .. } | LogError::Invariant { .. } | LogError::Rejected(_)) => {
            2
        }
        Error::Model(ModelError::NonFiniteLoss { .. })
        | Error::Sim(SimError::Model(ModelError::NonFiniteLoss { .. })) => 3,
        Error::Config(_)
        | Error::Sim(SimError::Config(_))
        | Error::Model(ModelError::Config(_)) => 4,
        Error::Analysis(AnalysisError::DegenerateArm { .. }) => 5,
        Error::Ope(OpeError::CoverageViolation { .. }) => 6,
        _ => 1,
    }
}

fn announce(m: &Manifest) {
    println!("{}: {} files written", m.stage.name(), m.outputs.len());
    for f in &m.outputs {
        println!("  {}", f.path);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli.global)?;
    if let Some(n) = cli.global.threads {
        slatelab::par::set_threads(n);
    }
    match cli.command {
        Command::Ingest {
            log,
            users,
            stories,
            trim,
            out,
        } => {
            let (m, s) =
                pipeline::ingest_files(&cfg, &log, &IngestOptions { users, stories }, trim, &out)?;
            println!("records: {}", s.records);
            println!(
                "users: {} ({} without sidecar entry)",
                s.users, s.registered_users
            );
            println!(
                "stories: {} ({} without sidecar entry)",
                s.stories, s.registered_stories
            );
            match s.period {
                Some((lo, hi)) => println!("days: {lo}..={hi}"),
                None => println!("days: none (empty log)"),
            }
            println!("dropped users: {}", s.dropped_users.len());
            announce(&m);
        }
        Command::Train {
            model,
            compare,
            grid,
            epochs,
            learning_rate,
            log,
        } => {
            cfg.compare.models = compare.unwrap_or_else(|| vec![model]);
            if let Some(g) = grid {
                let (k, l2) = parse_grid(&g)?;
                if let Some(k) = k {
                    cfg.compare.train.k_grid = k;
                }
                if let Some(l2) = l2 {
                    cfg.compare.train.l2_grid = l2;
                }
            }
            if let Some(e) = epochs {
                cfg.compare.train.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.compare.train.learning_rate = lr;
            }
            if let Some(f) = log {
                cfg.compare.log_file = f;
            }
            let m = pipeline::compare_models(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.paths.report_dir.join("table1.csv"))
                    .map_err(Error::io("table1.csv"))?
            );
            announce(&m);
        }
        Command::Simulate {
            users,
            stories,
            days,
        } => {
            if let Some(n) = users {
                cfg.world.n_users = n;
            }
            if let Some(n) = stories {
                cfg.world.n_stories = n;
            }
            if let Some(d) = days {
                cfg.compare.history_days = d;
            }
            announce(&pipeline::simulate(&cfg)?);
        }
        Command::Experiment {
            days,
            p,
            arms,
            null,
        } => {
            if let Some(d) = days {
                cfg.experiment.duration_days = d;
            }
            if let Some(p) = p {
                cfg.experiment.assignment_prob = p;
            }
            if let Some(a) = arms {
                let (t, c) = parse_arms(&a)?;
                cfg.experiment.treatment = t.unwrap_or(cfg.experiment.treatment);
                cfg.experiment.control = c.unwrap_or(cfg.experiment.control);
            }
            if null {
                cfg.experiment.treatment = cfg.experiment.control;
            }
            announce(&pipeline::experiment(&cfg)?);
        }
        Command::Analyze {
            subgroups,
            balance,
            buckets,
            no_trim,
        } => {
            if let Some(s) = subgroups {
                cfg.analysis.subgroups = s
                    .into_iter()
                    .filter(|g| g != "none")
                    .map(|g| match g.as_str() {
                        "heavy" => "engagement".to_string(),
                        "new" => "section_users".to_string(),
                        _ => g,
                    })
                    .collect();
            }
            if let Some(b) = balance {
                cfg.analysis.balance = b;
            }
            if let Some(b) = buckets {
                cfg.analysis.n_buckets = b;
            }
            if no_trim {
                cfg.analysis.max_completions_per_session = None;
            }
            announce(&pipeline::analyze(&cfg)?);
        }
        Command::EvaluatePolicy {
            policies,
            bootstrap,
            floor,
            check_against_rct,
        } => {
            if let Some(p) = policies {
                cfg.ope.policies = p;
            }
            if let Some(b) = bootstrap {
                cfg.ope.dr.bootstrap = b;
            }
            if let Some(f) = floor {
                cfg.ope.floor = f;
            }
            if let Some(c) = check_against_rct {
                cfg.ope.check_against_rct = c;
            }
            let m = pipeline::evaluate(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.paths.report_dir.join("dr_comparison.csv"))
                    .map_err(Error::io("dr_comparison.csv"))?
            );
            announce(&m);
        }
        Command::Report => announce(&pipeline::report(&cfg)?),
        Command::Pipeline => {
            for s in Stage::ALL {
                announce(&pipeline::run_stage(s, &cfg)?);
            }
        }
        Command::Config => print!("{}", cfg.resolved().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Log(le) = &e {
                let lines = le.lines();
                if !lines.is_empty() {
                    let shown: Vec<String> = lines.iter().take(20).map(|l| l.to_string()).collect();
                    eprintln!("rejected lines: {}", shown.join(", "));
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

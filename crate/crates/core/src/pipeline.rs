//! The end-to-end run: simulate, compare models, experiment, analyze,
//! evaluate policies off-policy and write a report.
//!
//! Every stage reads its inputs from and writes its outputs to a fixed file
//! layout under three directories, so stages can run one at a time from the
//! command line or back to back. Each stage also writes
//! `manifest.<stage>.json` into the report directory with the config hash,
//! the derived seeds and SHA-256 digests of every file read and written.

use crate::analysis::AnalysisError;
use crate::analysis::{
    aipw_ate, aipw_score_regression, balance_table, bucket_engagement_analysis, build_outcomes,
    calibration_regression, covariate_matrix, diff_in_means, dominance_statistic, mde,
    mean_engagement_by_rank, regression_adjusted_ate, session_length_distribution,
    story_popularity_exposure, subgroup_ates, wilcoxon_one_sided, AipwConfig, EstimateReport,
    Outcome, Sample, ScoreTerm,
};
use crate::error::{Error, Result};
use crate::log::{
    compute_covariates, emit_log, emit_stories, emit_users, ingest, ingest_log, read_stories,
    read_users, trim_outliers, trim_top_daily_percentile, CovariateConfig, IngestOptions,
    LogDataset, Section, StoryId, StoryMeta, UserId, UserProfile,
};
use crate::models::{
    load_model, save_model, train, HistoryFilter, ModelKind, OutcomeModel, SplitSpec, TrainConfig,
};
use crate::ope::{
    compare_policies, dr_value, editorial_propensity, estimate_position_effects,
    fit_outcome_regressor, logged_interactions, onpolicy_vs_offpolicy_check, target_slates,
    topk_propensity, write_comparisons, write_propensities, DrConfig, EstimateScale,
    RegressorConfig, ScaledEstimate,
};
use crate::policy::{read_script, week_of, write_position_effects, write_script, PolicySpec};
use crate::seed::{derive, tag};
use crate::sim::{
    make_world, run_experiment, simulate_period, Arm, ArmPolicy, ExperimentPlan, PolicyAssignment,
    WorldConfig,
};
use crate::stats::StatsError;
use crate::stats::{mean, sd};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            model_dir: "models".into(),
            report_dir: "reports".into(),
        }
    }
}

impl Paths {
    /// Resolve relative directories against `root`.
    pub fn rooted(&self, root: &Path) -> Paths {
        let j = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                root.join(p)
            }
        };
        Paths {
            data_dir: j(&self.data_dir),
            model_dir: j(&self.model_dir),
            report_dir: j(&self.report_dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Log file in the data directory the models are compared on.
    pub log_file: String,
    pub models: Vec<ModelKind>,
    pub min_user_interactions: usize,
    pub min_story_interactions: usize,
    /// Length of the editorial history the models are compared on.
    pub history_days: i32,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            log_file: "history.csv".into(),
            models: vec![
                ModelKind::Mean,
                ModelKind::TwoWayFixedEffects,
                ModelKind::MatrixFactorization,
            ],
            min_user_interactions: 60,
            min_story_interactions: 60,
            history_days: 56,
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub n_buckets: usize,
    /// Users with a session holding more completions than this are dropped.
    pub max_completions_per_session: Option<u32>,
    pub aipw: AipwConfig,
    /// Name fragments selecting subgroup rows; empty skips the table.
    pub subgroups: Vec<String>,
    pub balance: bool,
    pub alpha: f64,
    pub power: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_buckets: 10,
            max_completions_per_session: Some(10),
            aipw: AipwConfig::default(),
            subgroups: vec![
                "niche".into(),
                "engagement".into(),
                "completion".into(),
                "section_users".into(),
            ],
            balance: true,
            alpha: 0.05,
            power: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeConfig {
    /// Floor on logging and target propensities.
    pub floor: f64,
    /// Target slates only rank stories whose logging propensity for the
    /// user's grade is at least this.
    pub support_min: f64,
    /// Mass given to slate ranks with no logged interaction.
    pub position_floor: f64,
    pub smooth_position_effects: bool,
    pub policies: Vec<ArmPolicy>,
    pub dr: DrConfig,
    pub regressor: RegressorConfig,
    pub check_against_rct: bool,
}

impl Default for OpeConfig {
    fn default() -> Self {
        OpeConfig {
            floor: crate::ope::DEFAULT_FLOOR,
            support_min: crate::ope::DEFAULT_FLOOR,
            position_floor: 1e-4,
            smooth_position_effects: false,
            policies: vec![
                ArmPolicy::Personalized,
                ArmPolicy::Popularity,
                ArmPolicy::Editorial,
            ],
            dr: DrConfig::default(),
            regressor: RegressorConfig::default(),
            check_against_rct: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Every stage seed is derived from it; seeds set inside the
    /// sub-configs are overwritten.
    pub seed: u64,
    pub paths: Paths,
    pub world: WorldConfig,
    pub compare: CompareConfig,
    pub experiment: ExperimentPlan,
    pub analysis: AnalysisConfig,
    pub ope: OpeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub world: u64,
    pub history: u64,
    pub compare_train: u64,
    pub compare_split: u64,
    pub experiment: u64,
    pub aipw: u64,
    pub regressor: u64,
    pub dr: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn seeds(&self) -> StageSeeds {
        let d = |name: &str| derive(self.seed, &[tag(name)]);
        StageSeeds {
            world: d("world"),
            history: d("history"),
            compare_train: d("compare-train"),
            compare_split: d("compare-split"),
            experiment: d("experiment"),
            aipw: d("aipw"),
            regressor: d("regressor"),
            dr: d("dr"),
        }
    }

    /// The config with every stage seed filled in from the root seed and
    /// the AIPW propensity tied to the assignment probability.
    pub fn resolved(&self) -> RunConfig {
        let s = self.seeds();
        let mut c = self.clone();
        c.world.seed = s.world;
        c.compare.train.seed = s.compare_train;
        c.compare.split.seed = s.compare_split;
        c.experiment.seed = s.experiment;
        c.analysis.aipw.seed = s.aipw;
        c.analysis.aipw.propensity = c.experiment.assignment_prob;
        c.ope.regressor.seed = s.regressor;
        c.ope.dr.seed = s.dr;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.experiment.validate()?;
        self.compare.train.validate()?;
        self.compare.split.validate()?;
        if self.compare.history_days <= 0 || self.compare.history_days % 7 != 0 {
            return Err(Error::Config(
                "compare.history_days must be a positive multiple of 7".into(),
            ));
        }
        if self.analysis.n_buckets == 0 {
            return Err(Error::Config("analysis.n_buckets must be positive".into()));
        }
        if !(self.ope.floor > 0.0 && self.ope.floor < 1.0) {
            return Err(Error::Config("ope.floor must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the config as given (before seed resolution). Directories
    /// are left out so a run moved elsewhere keeps its hash.
    pub fn hash(&self) -> String {
        let c = RunConfig {
            paths: Paths::default(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Simulate,
    Compare,
    Experiment,
    Analyze,
    Evaluate,
    Report,
}

impl Stage {
    /// The pipeline stages in order; ingestion runs on its own.
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Compare,
        Stage::Experiment,
        Stage::Analyze,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Simulate => "simulate",
            Stage::Compare => "compare",
            Stage::Experiment => "experiment",
            Stage::Analyze => "analyze",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// `data/…`, `models/…` or `reports/…`.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub version: String,
    pub config_sha256: String,
    pub root_seed: u64,
    pub seeds: StageSeeds,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Data,
    Models,
    Reports,
}

/// Files touched by a stage, for its manifest.
struct Ledger<'a> {
    paths: &'a Paths,
    /// (label, path) pairs.
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

impl<'a> Ledger<'a> {
    fn new(paths: &'a Paths) -> Self {
        Ledger {
            paths,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn path(&self, d: Dir, name: &str) -> PathBuf {
        match d {
            Dir::Data => self.paths.data_dir.join(name),
            Dir::Models => self.paths.model_dir.join(name),
            Dir::Reports => self.paths.report_dir.join(name),
        }
    }

    fn label(d: Dir, name: &str) -> String {
        let prefix = match d {
            Dir::Data => "data",
            Dir::Models => "models",
            Dir::Reports => "reports",
        };
        format!("{prefix}/{name}")
    }

    fn input(&mut self, d: Dir, name: &str) -> PathBuf {
        let p = self.path(d, name);
        self.inputs.push((Self::label(d, name), p.clone()));
        p
    }

    /// A file outside the run directories, labelled by its file name.
    fn external(&mut self, p: &Path) {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.inputs
            .push((format!("external/{name}"), p.to_path_buf()));
    }

    fn output(&mut self, d: Dir, name: &str) -> PathBuf {
        let p = self.path(d, name);
        self.outputs.push((Self::label(d, name), p.clone()));
        p
    }

    fn write(
        &mut self,
        d: Dir,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<()> {
        let p = self.output(d, name);
        let f = fs::File::create(&p).map_err(Error::io(p.display().to_string()))?;
        let mut w = BufWriter::new(f);
        body(&mut w)
            .and_then(|_| w.flush())
            .map_err(Error::io(p.display().to_string()))
    }

    fn digests(files: &[(String, PathBuf)]) -> Result<Vec<FileDigest>> {
        files
            .iter()
            .map(|(label, p)| {
                Ok(FileDigest {
                    path: label.clone(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect()
    }

    fn finish(mut self, stage: Stage, cfg: &RunConfig) -> Result<Manifest> {
        self.inputs.sort();
        self.inputs.dedup();
        let m = Manifest {
            stage,
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: cfg.hash(),
            root_seed: cfg.seed,
            seeds: cfg.seeds(),
            inputs: Self::digests(&self.inputs)?,
            outputs: Self::digests(&self.outputs)?,
        };
        let p = self.path(Dir::Reports, &format!("manifest.{}.json", stage.name()));
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&p, text + "\n").map_err(Error::io(p.display().to_string()))?;
        Ok(m)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path.display().to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn ensure_dirs(p: &Paths) -> Result<()> {
    for d in [&p.data_dir, &p.model_dir, &p.report_dir] {
        fs::create_dir_all(d).map_err(Error::io(d.display().to_string()))?;
    }
    Ok(())
}

fn open(p: &Path) -> Result<fs::File> {
    fs::File::open(p).map_err(Error::io(p.display().to_string()))
}

fn read_sidecars(
    l: &mut Ledger,
) -> Result<(BTreeMap<UserId, UserProfile>, BTreeMap<StoryId, StoryMeta>)> {
    let users = read_users(open(&l.input(Dir::Data, "users.csv"))?)?;
    let stories = read_stories(open(&l.input(Dir::Data, "stories.csv"))?)?;
    Ok((users, stories))
}

fn read_log(
    l: &mut Ledger,
    name: &str,
    users: &BTreeMap<UserId, UserProfile>,
    stories: &BTreeMap<StoryId, StoryMeta>,
) -> Result<LogDataset> {
    let (d, _) = ingest(
        open(&l.input(Dir::Data, name))?,
        Some(users.clone()),
        Some(stories.clone()),
    )?;
    Ok(d)
}

fn write_sidecars(l: &mut Ledger, d: &LogDataset) -> Result<()> {
    l.write(Dir::Data, "users.csv", |w| emit_users(d, w))?;
    l.write(Dir::Data, "stories.csv", |w| emit_stories(d, w))
}

pub fn read_assignment<R: std::io::Read>(r: R) -> Result<BTreeMap<UserId, Arm>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut arms = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("assignment row {}: {e}", i + 2)))?;
        let bad = || Error::Config(format!("assignment row {}: expected user_id,arm", i + 2));
        let u: u32 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let a = rec.get(1).and_then(Arm::parse).ok_or_else(bad)?;
        arms.insert(UserId(u), a);
    }
    Ok(arms)
}

fn write_assignment(arms: &BTreeMap<UserId, Arm>, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "user_id,arm")?;
    for (u, a) in arms {
        writeln!(w, "{},{}", u.0, a.as_str())?;
    }
    Ok(())
}

fn ratio(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Trim {
    /// Drop users with a session holding more completions than this.
    Session(u32),
    /// Drop the top share of users by most completions in one day.
    DailyTop(f64),
}

impl std::str::FromStr for Trim {
    type Err = String;

    /// `session10` or `daily-top=0.01`.
    fn from_str(s: &str) -> std::result::Result<Trim, String> {
        if let Some(n) = s.strip_prefix("session") {
            return n
                .parse()
                .map(Trim::Session)
                .map_err(|_| format!("bad session limit in '{s}'"));
        }
        if let Some(p) = s.strip_prefix("daily-top=") {
            return match p.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Ok(Trim::DailyTop(v)),
                _ => Err(format!("bad share in '{s}'")),
            };
        }
        Err(format!(
            "unknown trim rule '{s}' (expected sessionN or daily-top=P)"
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: usize,
    pub users: usize,
    pub stories: usize,
    pub registered_users: usize,
    pub registered_stories: usize,
    pub dropped_users: Vec<UserId>,
    pub period: Option<(i32, i32)>,
}

/// Parse an external log and its sidecars, optionally trim outlier users,
/// and store the result in the data directory as `out` plus `users.csv` and
/// `stories.csv`.
pub fn ingest_files(
    cfg: &RunConfig,
    log: &Path,
    opts: &IngestOptions,
    trim: Option<Trim>,
    out: &str,
) -> Result<(Manifest, IngestSummary)> {
    ensure_dirs(&cfg.paths)?;
    let mut l = Ledger::new(&cfg.paths);
    l.external(log);
    for p in opts.users.iter().chain(&opts.stories) {
        l.external(p);
    }
    let (data, rep) = ingest_log(log, opts)?;
    let (data, dropped_users) = match trim {
        None => (data, Vec::new()),
        Some(Trim::Session(n)) => trim_outliers(&data, n),
        Some(Trim::DailyTop(p)) => {
            let (d, t) = trim_top_daily_percentile(&data, p);
            (d, t.dropped)
        }
    };
    write_sidecars(&mut l, &data)?;
    l.write(Dir::Data, out, |w| emit_log(&data, w))?;
    let summary = IngestSummary {
        records: data.len(),
        users: data.users.len(),
        stories: data.stories.len(),
        registered_users: rep.registered_users.len(),
        registered_stories: rep.registered_stories.len(),
        dropped_users,
        period: data.period(),
    };
    Ok((l.finish(Stage::Ingest, cfg)?, summary))
}

/// Stage 1: a synthetic world and an editorial history to compare models on.
pub fn simulate(cfg: &RunConfig) -> Result<Manifest> {
    let r = cfg.resolved();
    r.validate()?;
    ensure_dirs(&r.paths)?;
    let world = make_world(&r.world)?;
    let editorial = PolicyAssignment::everyone(PolicySpec {
        slate_size: r.world.slate_size,
        ..PolicySpec::editorial(world.script.clone())
    });
    let history = simulate_period(
        &world,
        &editorial,
        0..r.compare.history_days,
        r.seeds().history,
    )?;
    let mut l = Ledger::new(&r.paths);
    write_sidecars(&mut l, &history)?;
    l.write(Dir::Data, "script.csv", |w| write_script(&world.script, w))?;
    l.write(Dir::Data, "position_effects.csv", |w| {
        write_position_effects(world.position_effects(), w)
    })?;
    l.write(Dir::Data, "history.csv", |w| emit_log(&history, w))?;
    l.finish(Stage::Simulate, cfg)
}

pub const TABLE1_HEADER: &str = "model,k,l2,val_mse,test_mse,n_train,n_val,n_test";

/// Stage 2: tune and fit each model on the filtered history; held-out MSEs
/// in `table1.csv`, the full grid in `tuning.csv`, fitted models in
/// `<kind>.model`.
pub fn compare_models(cfg: &RunConfig) -> Result<Manifest> {
    let r = cfg.resolved();
    r.validate()?;
    ensure_dirs(&r.paths)?;
    let mut l = Ledger::new(&r.paths);
    let (users, stories) = read_sidecars(&mut l)?;
    let history = read_log(&mut l, &r.compare.log_file, &users, &stories)?;
    let filter = HistoryFilter {
        min_user_interactions: r.compare.min_user_interactions,
        min_story_interactions: r.compare.min_story_interactions,
    };
    let data = filter.apply(&history);
    let mut table = vec![TABLE1_HEADER.to_string()];
    let mut tuning = vec!["model,k,l2,val_mse,test_mse,best_epoch,selected".to_string()];
    for kind in &r.compare.models {
        let (model, rep) = train(*kind, &data, &r.compare.train, &r.compare.split)?;
        let b = rep.best();
        table.push(format!(
            "{},{},{},{:.6},{},{},{},{}",
            kind.as_str(),
            b.k,
            b.l2,
            b.val_mse,
            b.test_mse.map_or("NA".into(), ratio),
            rep.n_train,
            rep.n_val,
            rep.n_test
        ));
        for (i, row) in rep.rows.iter().enumerate() {
            tuning.push(format!(
                "{},{},{},{:.6},{},{},{}",
                kind.as_str(),
                row.k,
                row.l2,
                row.val_mse,
                row.test_mse.map_or("NA".into(), ratio),
                row.best_epoch,
                i == rep.selected
            ));
        }
        let p = l.output(Dir::Models, &format!("{}.model", kind.as_str()));
        save_model(&model, &p)?;
    }
    l.write(Dir::Reports, "table1.csv", |w| {
        writeln!(w, "{}", table.join("\n"))
    })?;
    l.write(Dir::Reports, "tuning.csv", |w| {
        writeln!(w, "{}", tuning.join("\n"))
    })?;
    l.finish(Stage::Compare, cfg)
}

/// Stage 3: the two-arm experiment. Writes the pre-period and experiment
/// logs, the assignment table and the model the arms were served from.
pub fn experiment(cfg: &RunConfig) -> Result<Manifest> {
    let r = cfg.resolved();
    r.validate()?;
    ensure_dirs(&r.paths)?;
    let world = make_world(&r.world)?;
    let run = run_experiment(&world, &r.experiment)?;
    let mut l = Ledger::new(&r.paths);
    write_sidecars(&mut l, &run.pre)?;
    l.write(Dir::Data, "script.csv", |w| write_script(&world.script, w))?;
    l.write(Dir::Data, "pre.csv", |w| emit_log(&run.pre, w))?;
    l.write(Dir::Data, "experiment.csv", |w| {
        emit_log(&run.experiment, w)
    })?;
    l.write(Dir::Data, "assignment.csv", |w| {
        write_assignment(&run.arms, w)
    })?;
    if let Some(m) = &run.model {
        save_model(m, &l.output(Dir::Models, "experiment.model"))?;
    }
    l.finish(Stage::Experiment, cfg)
}

struct ExperimentData {
    pre: LogDataset,
    experiment: LogDataset,
    arms: BTreeMap<UserId, Arm>,
    model: Option<OutcomeModel>,
}

fn read_experiment(l: &mut Ledger) -> Result<ExperimentData> {
    let (users, stories) = read_sidecars(l)?;
    let pre = read_log(l, "pre.csv", &users, &stories)?;
    let experiment = read_log(l, "experiment.csv", &users, &stories)?;
    let arms = read_assignment(open(&l.input(Dir::Data, "assignment.csv"))?)?;
    let mp = l.path(Dir::Models, "experiment.model");
    let model = if mp.exists() {
        l.input(Dir::Models, "experiment.model");
        Some(load_model(&mp)?)
    } else {
        None
    };
    Ok(ExperimentData {
        pre,
        experiment,
        arms,
        model,
    })
}

fn csv_rows(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Stage 4: treatment effects, heterogeneity and diagnostics.
pub fn analyze(cfg: &RunConfig) -> Result<Manifest> {
    let r = cfg.resolved();
    r.validate()?;
    ensure_dirs(&r.paths)?;
    let a = &r.analysis;
    let mut l = Ledger::new(&r.paths);
    let ExperimentData {
        pre,
        experiment,
        mut arms,
        model,
    } = read_experiment(&mut l)?;
    let mut dropped = Vec::new();
    let experiment = match a.max_completions_per_session {
        Some(max) => {
            let (d, drop) = trim_outliers(&experiment, max);
            dropped = drop;
            d
        }
        None => experiment,
    };
    for u in &dropped {
        arms.remove(u);
    }
    let section = Section::Recommended;
    let covariates = compute_covariates(&pre, &CovariateConfig::new(r.experiment.start_day()));
    let outcomes = build_outcomes(&experiment, &arms, &section);

    let mut ate = vec![EstimateReport::HEADER.to_string()];
    let mut wilcoxon = String::new();
    for outcome in Outcome::ALL {
        let s = Sample::new(&outcomes, &arms, outcome);
        let (x, _) = covariate_matrix(&s.users, &pre.users, &covariates);
        ate.push(diff_in_means(&s)?.to_string());
        ate.push(regression_adjusted_ate(&s, &x)?.to_string());
        ate.push(aipw_ate(&s, &x, &a.aipw)?.report.to_string());
        if matches!(outcome, Outcome::EngagementSection | Outcome::EngagementAll) {
            let (t, c) = s.split();
            let w = wilcoxon_one_sided(&t, &c)?;
            writeln!(
                wilcoxon,
                "{}: W = {}, one-sided p = {:.6} ({}), n_treated = {}, n_control = {}",
                outcome.name(),
                w.statistic,
                w.p_value,
                if w.exact {
                    "exact"
                } else {
                    "normal approximation"
                },
                t.len(),
                c.len()
            )
            .expect("string write");
        }
    }
    l.write(Dir::Reports, "table5_ate.csv", |w| {
        writeln!(w, "{}", ate.join("\n"))
    })?;
    l.write(Dir::Reports, "wilcoxon.txt", |w| {
        w.write_all(wilcoxon.as_bytes())
    })?;

    let main = Sample::new(&outcomes, &arms, Outcome::EngagementSection);
    let (t, c) = main.split();
    let sample = format!(
        "users assigned: {}\nusers dropped by outlier trimming: {}\nusers who launched the app: treatment {}, control {}\n",
        arms.len() + dropped.len(),
        dropped.len(),
        t.len(),
        c.len()
    );
    l.write(Dir::Reports, "sample.txt", |w| {
        w.write_all(sample.as_bytes())
    })?;
    let m = mde(sd(&c), t.len(), c.len(), a.alpha, a.power);
    let mde_text = format!(
        "outcome: {}\ncontrol mean: {:.6}\ncontrol sd: {:.6}\nalpha: {}\npower: {}\nminimum detectable effect: {:.6} ({:.2}% of control mean)\n",
        Outcome::EngagementSection.name(),
        mean(&c),
        sd(&c),
        a.alpha,
        a.power,
        m,
        100.0 * m / mean(&c)
    );
    l.write(Dir::Reports, "mde.txt", |w| {
        w.write_all(mde_text.as_bytes())
    })?;

    if !a.subgroups.is_empty() {
        let mut rows = Vec::new();
        for outcome in [Outcome::EngagementSection, Outcome::EngagementAll] {
            for g in subgroup_ates(&outcomes, &arms, &covariates, outcome) {
                if g.group != "all" && !a.subgroups.iter().any(|k| g.group.contains(k.as_str())) {
                    continue;
                }
                rows.push(format!(
                    "{},{},{},{},{},{},{}",
                    outcome.name(),
                    g.group,
                    ratio(g.estimate),
                    ratio(g.std_error),
                    ratio(g.p_value),
                    g.n_treated,
                    g.n_control
                ));
            }
        }
        l.write(Dir::Reports, "table6_subgroups.csv", |w| {
            w.write_all(
                csv_rows("outcome,group,estimate,se,p,n_treated,n_control", rows).as_bytes(),
            )
        })?;
    }

    let pop = story_popularity_exposure(&experiment, &arms, &section, &covariates);
    let rows = pop.iter().map(|p| {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            p.arm.as_str(),
            ratio(p.niche_mean_rank),
            ratio(p.non_niche_mean_rank),
            ratio(p.niche_mean_percentile),
            ratio(p.non_niche_mean_percentile),
            ratio(p.difference),
            ratio(p.p_value),
            p.n_niche,
            p.n_non_niche
        )
    });
    let header = "arm,niche_mean_rank,non_niche_mean_rank,niche_mean_percentile,non_niche_mean_percentile,difference,p,n_niche,n_non_niche";
    l.write(Dir::Reports, "table7_popularity.csv", |w| {
        w.write_all(csv_rows(header, rows).as_bytes())
    })?;

    if a.balance {
        let rows = balance_table(&pre.users, &covariates, &arms)?
            .into_iter()
            .map(|b| {
                format!(
                    "{},{:.6},{:.6},{:.6},{:.6},{}",
                    b.covariate,
                    b.mean_treatment,
                    b.mean_control,
                    b.sd_treatment,
                    b.sd_control,
                    ratio(b.p_value)
                )
            });
        let header = "covariate,mean_treatment,mean_control,sd_treatment,sd_control,p";
        l.write(Dir::Reports, "balance.csv", |w| {
            w.write_all(csv_rows(header, rows).as_bytes())
        })?;
    }

    let (x, _) = covariate_matrix(&main.users, &pre.users, &covariates);
    let aipw = aipw_ate(&main, &x, &a.aipw)?;
    // Terms aliased with earlier ones in this sample are left out and
    // reported as NA.
    let mut terms: Vec<ScoreTerm> = Vec::new();
    let mut aliased = Vec::new();
    for t in ScoreTerm::ALL {
        let mut trial = terms.clone();
        trial.push(t);
        match aipw_score_regression(&aipw.scores, &main.users, &covariates, &trial) {
            Ok(_) => terms = trial,
            Err(AnalysisError::Stats(StatsError::RankDeficient { .. })) => aliased.push(t),
            Err(e) => return Err(e.into()),
        }
    }
    let coefs = aipw_score_regression(&aipw.scores, &main.users, &covariates, &terms)?;
    let rows = coefs
        .iter()
        .map(|c| {
            format!(
                "{},{:.6},{:.6},{}",
                c.term,
                c.coef,
                c.std_error,
                ratio(c.p_value)
            )
        })
        .chain(aliased.iter().map(|t| format!("{},NA,NA,NA", t.name())));
    l.write(Dir::Reports, "aipw_regression.csv", |w| {
        w.write_all(csv_rows("term,coef,se,p", rows).as_bytes())
    })?;

    if let Some(model) = &model {
        let rows = calibration_regression(model, &experiment, &arms, &covariates, &section)
            .into_iter()
            .map(|c| {
                format!(
                    "{},{},{},{},{},{},{}",
                    c.arm,
                    c.group,
                    ratio(c.slope),
                    ratio(c.std_error),
                    ratio(c.p_value),
                    ratio(c.r2),
                    c.n
                )
            });
        l.write(Dir::Reports, "calibration.csv", |w| {
            w.write_all(csv_rows("arm,group,slope,se,p,r2,n", rows).as_bytes())
        })?;
    }

    let rows = mean_engagement_by_rank(&experiment, &arms, &section)
        .into_iter()
        .map(|m| {
            format!(
                "{},{},{},{},{},{},{}",
                m.arm.as_str(),
                m.rank,
                ratio(m.mean),
                ratio(m.std_error),
                ratio(m.lo),
                ratio(m.hi),
                m.n
            )
        });
    l.write(Dir::Reports, "fig_rank_means.csv", |w| {
        w.write_all(csv_rows("arm,rank,mean,se,lo,hi,n", rows).as_bytes())
    })?;

    let hists = session_length_distribution(&experiment, &arms, &section);
    let max_len = hists
        .iter()
        .filter_map(|h| h.counts.keys().next_back())
        .copied()
        .max()
        .unwrap_or(0);
    let mut rows = Vec::new();
    for h in &hists {
        for len in 1..=max_len {
            rows.push(format!(
                "{},{},{},{:.6},{:.6}",
                h.arm.as_str(),
                len,
                h.counts.get(&len).copied().unwrap_or(0),
                h.frequency(len),
                h.cdf(len)
            ));
        }
    }
    l.write(Dir::Reports, "fig_session_lengths.csv", |w| {
        w.write_all(csv_rows("arm,length,sessions,frequency,cdf", rows).as_bytes())
    })?;
    if let [control, treatment] = hists.as_slice() {
        let text = format!(
            "mean session length: control {:.4}, treatment {:.4}\nlargest CDF gap F_control - F_treatment: {:.4}\n",
            control.mean(),
            treatment.mean(),
            dominance_statistic(treatment, control)
        );
        l.write(Dir::Reports, "session_dominance.txt", |w| {
            w.write_all(text.as_bytes())
        })?;
    }

    let rows = bucket_engagement_analysis(&experiment, &arms, &section, a.n_buckets, &covariates)?
        .into_iter()
        .map(|b| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                b.bucket,
                b.stories.len(),
                b.treatment_impressions,
                ratio(b.control_mean),
                ratio(b.treatment_mean),
                ratio(b.diff),
                ratio(b.std_error),
                ratio(b.p_value),
                b.n_records
            )
        });
    let header =
        "bucket,stories,treatment_impressions,control_mean,treatment_mean,diff,se,p,n_records";
    l.write(Dir::Reports, "fig_buckets.csv", |w| {
        w.write_all(csv_rows(header, rows).as_bytes())
    })?;

    l.finish(Stage::Analyze, cfg)
}

fn policy_name(p: ArmPolicy) -> &'static str {
    match p {
        ArmPolicy::Personalized => "personalized",
        ArmPolicy::Popularity => "popularity",
        ArmPolicy::Editorial => "editorial",
    }
}

pub const ONPOLICY_HEADER: &str =
    "rct_total,rct_se,dr_per_interaction,dr_se,mean_interactions,dr_total,dr_total_se,difference,se,z,p";

/// Stage 5: off-policy values of the configured policies from the control
/// arm's editorial logs, pairwise comparisons by user group, and a check of
/// the personalized value against the treatment arm.
pub fn evaluate(cfg: &RunConfig) -> Result<Manifest> {
    let r = cfg.resolved();
    r.validate()?;
    ensure_dirs(&r.paths)?;
    let o = &r.ope;
    if o.policies.is_empty() {
        return Err(Error::Config("ope.policies is empty".into()));
    }
    let mut l = Ledger::new(&r.paths);
    let ExperimentData {
        pre,
        experiment,
        arms,
        model,
    } = read_experiment(&mut l)?;
    let script = Arc::new(read_script(open(&l.input(Dir::Data, "script.csv"))?)?);
    let section = Section::Recommended;
    let all_logs = logged_interactions(&experiment, &section);
    let treated = |u: UserId| arms.get(&u).is_some_and(|a| a.is_treated());
    let editorial_logs: Vec<_> = all_logs
        .iter()
        .copied()
        .filter(|x| !treated(x.user))
        .collect();
    let logs: Vec<_> = all_logs
        .iter()
        .copied()
        .filter(|x| arms.get(&x.user) == Some(&Arm::Control))
        .collect();
    let catalog: Vec<StoryId> = experiment.stories.keys().copied().collect();
    let logging = editorial_propensity(&editorial_logs, &catalog, o.floor);
    let pe = estimate_position_effects(&pre, &section, o.position_floor, o.smooth_position_effects);

    let fit = |kind: ModelKind| -> Result<Arc<OutcomeModel>> {
        if let Some(m) = model.as_ref().filter(|m| m.kind == kind) {
            return Ok(Arc::new(m.clone()));
        }
        let mut tc = r.experiment.train.clone();
        tc.seed = derive(r.experiment.seed, &[tag("train")]);
        let split = SplitSpec {
            seed: derive(r.experiment.seed, &[tag("split")]),
            ..r.experiment.split
        };
        Ok(Arc::new(train(kind, &pre, &tc, &split)?.0))
    };
    let mf = fit(ModelKind::MatrixFactorization)?;
    let week = week_of(r.experiment.start_day());
    let mut users: Vec<(UserId, u8)> = logs.iter().map(|x| (x.user, x.grade)).collect();
    users.dedup();
    users.sort();
    users.dedup();

    let mut targets = Vec::new();
    for p in &o.policies {
        let mut spec = match p {
            ArmPolicy::Personalized => PolicySpec::personalized(mf.clone()),
            ArmPolicy::Popularity => PolicySpec::popularity(fit(ModelKind::TwoWayFixedEffects)?),
            ArmPolicy::Editorial => PolicySpec::editorial(script.clone()),
        };
        spec.slate_size = r.world.slate_size;
        let slates = target_slates(&spec, &users, week, |g| {
            logging.supported_stories(g, o.support_min)
        })?;
        targets.push((
            policy_name(*p).to_string(),
            topk_propensity(&slates, &pe.values, o.floor)?,
        ));
    }

    let covariates = compute_covariates(&pre, &CovariateConfig::new(r.experiment.start_day()));
    let reg = fit_outcome_regressor(
        &logs,
        mf.clone(),
        &pre.users,
        &pre.stories,
        &covariates,
        &o.regressor,
    )?;
    let groups: BTreeMap<UserId, bool> = users
        .iter()
        .map(|(u, _)| (*u, covariates.get(u).is_some_and(|c| c.is_heavy_engagement)))
        .collect();
    let named: Vec<(String, &crate::ope::PropensityModel)> =
        targets.iter().map(|(n, m)| (n.clone(), m)).collect();
    let rows = compare_policies(&logs, &named, &logging, &reg, &groups, &o.dr)?;

    l.write(Dir::Reports, "position_effects.csv", |w| {
        writeln!(w, "rank,probability,observed")?;
        for (i, v) in pe.values.iter().enumerate() {
            writeln!(
                w,
                "{},{v:.6},{}",
                i + 1,
                !pe.unobserved.contains(&(i as u8 + 1))
            )?;
        }
        Ok(())
    })?;
    l.write(Dir::Reports, "propensity_logging.csv", |w| {
        write_propensities(&logging, w).map_err(std::io::Error::other)
    })?;
    for (name, m) in &targets {
        l.write(Dir::Reports, &format!("propensity_{name}.csv"), |w| {
            write_propensities(m, w).map_err(std::io::Error::other)
        })?;
    }
    l.write(Dir::Reports, "dr_comparison.csv", |w| {
        write_comparisons(&rows, w)
    })?;
    let notes = format!(
        "logs: {} control-arm interactions from {} users\n\
         logging propensity: editorial exposure frequencies by grade, floor {}\n\
         target propensity: top-{} slate under estimated position effects, floor {}\n\
         outcome regressor: cross-fitted ridge ({} folds, lambda {}) on factor representations and user/story covariates\n\
         bootstrap: {} user-level resamples\n",
        logs.len(),
        users.len(),
        o.floor,
        r.world.slate_size,
        o.floor,
        o.regressor.folds,
        o.regressor.ridge_lambda,
        o.dr.bootstrap
    );
    l.write(Dir::Reports, "dr_notes.txt", |w| {
        w.write_all(notes.as_bytes())
    })?;

    let pers = targets.iter().find(|(n, _)| n == "personalized");
    if let (true, ArmPolicy::Personalized, Some((_, target))) =
        (o.check_against_rct, r.experiment.treatment, pers)
    {
        let dr = dr_value(&logs, target, &logging, &reg, &o.dr)?;
        let outcomes = build_outcomes(&experiment, &arms, &section);
        let s = Sample::new(&outcomes, &arms, Outcome::EngagementSection);
        let (t, _) = s.split();
        let mut n_logs: BTreeMap<UserId, usize> = s
            .users
            .iter()
            .zip(&s.treated)
            .filter(|p| !*p.1)
            .map(|(u, _)| (*u, 0))
            .collect();
        for x in &logs {
            if let Some(n) = n_logs.get_mut(&x.user) {
                *n += 1;
            }
        }
        let mean_interactions = n_logs.values().sum::<usize>() as f64 / n_logs.len().max(1) as f64;
        let rct = ScaledEstimate {
            value: mean(&t),
            std_error: sd(&t) / (t.len() as f64).sqrt(),
            scale: EstimateScale::PerUserTotal,
        };
        let total = dr.to_total(mean_interactions);
        let check = onpolicy_vs_offpolicy_check(&rct, &total)?;
        let line = format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            rct.value,
            rct.std_error,
            dr.value,
            dr.std_error,
            mean_interactions,
            total.value,
            total.std_error,
            check.difference,
            check.std_error,
            check.z,
            check.p_value
        );
        l.write(Dir::Reports, "onpolicy_check.csv", |w| {
            w.write_all(csv_rows(ONPOLICY_HEADER, [line]).as_bytes())
        })?;
    }
    l.finish(Stage::Evaluate, cfg)
}

fn markdown_table(csv_text: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv_text.lines().filter(|l| !l.is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        writeln!(out, "| {} |", cells.join(" | ")).expect("string write");
        if i == 0 {
            writeln!(out, "|{}", " --- |".repeat(cells.len())).expect("string write");
        }
    }
    out
}

const REPORT_SECTIONS: [(&str, &str); 15] = [
    ("Held-out error by model", "table1.csv"),
    ("Average treatment effects", "table5_ate.csv"),
    ("Rank-sum tests", "wilcoxon.txt"),
    ("Analysis sample", "sample.txt"),
    ("Minimum detectable effect", "mde.txt"),
    ("Effects by user type", "table6_subgroups.csv"),
    ("Popularity of shown stories", "table7_popularity.csv"),
    ("AIPW score regression", "aipw_regression.csv"),
    ("Model calibration", "calibration.csv"),
    ("Covariate balance", "balance.csv"),
    ("Session lengths", "session_dominance.txt"),
    ("Effects by impression bucket", "fig_buckets.csv"),
    ("Off-policy comparison", "dr_comparison.csv"),
    ("Off-policy setup", "dr_notes.txt"),
    ("On-policy check", "onpolicy_check.csv"),
];

/// Stage 6: collect whatever tables exist into `report.md`.
pub fn report(cfg: &RunConfig) -> Result<Manifest> {
    let r = cfg.resolved();
    ensure_dirs(&r.paths)?;
    let mut l = Ledger::new(&r.paths);
    let mut md = String::from("# Run report\n\n");
    writeln!(
        md,
        "Root seed {}, config sha256 `{}`.\n",
        cfg.seed,
        cfg.hash()
    )
    .expect("string write");
    for (title, file) in REPORT_SECTIONS {
        let p = l.path(Dir::Reports, file);
        if !p.exists() {
            continue;
        }
        l.input(Dir::Reports, file);
        let text = fs::read_to_string(&p).map_err(Error::io(p.display().to_string()))?;
        writeln!(md, "## {title}\n").expect("string write");
        if file.ends_with(".csv") {
            md.push_str(&markdown_table(&text));
        } else {
            writeln!(md, "```\n{}```", text).expect("string write");
        }
        md.push('\n');
    }
    l.write(Dir::Reports, "report.md", |w| w.write_all(md.as_bytes()))?;
    l.finish(Stage::Report, cfg)
}

/// Run one pipeline stage. Ingestion needs its own arguments; see
/// [`ingest_files`].
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<Manifest> {
    match stage {
        Stage::Ingest => Err(Error::Config("ingest is not a pipeline stage".into())),
        Stage::Simulate => simulate(cfg),
        Stage::Compare => compare_models(cfg),
        Stage::Experiment => experiment(cfg),
        Stage::Analyze => analyze(cfg),
        Stage::Evaluate => evaluate(cfg),
        Stage::Report => report(cfg),
    }
}

/// Every stage in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<Manifest>> {
    Stage::ALL.iter().map(|s| run_stage(*s, cfg)).collect()
}

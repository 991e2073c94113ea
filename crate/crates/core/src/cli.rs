//! Command-line surface: run-config resolution, subcommands and output files.
//!
//! Settings resolve with the precedence flags > environment > config file >
//! defaults. clap handles the first two (every override flag has a `CBM_*`
//! variable); [`resolve`] lays the result over the file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    class_distribution, eligibility_stats, load_csv, write_csv as write_cohort_csv, ClassMapping, Cohort, IngestOptions,
};
use crate::community::{max_avg_threshold, sweep_communities, ThresholdGrid, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::profile::{
    aggregate_users, cosine_similarity, fit_scaler, write_profiles_csv, write_similarity_csv, AggregateOptions,
    ScalingMode,
};
use crate::protocols::{
    config_hash, injection_sweep, report_context_breakdown, run, ClassifierConfig, ExperimentReport, ProtocolConfig,
    SimilarityConfig,
};
use crate::sampling::{Protocol, SmoteConfig, SplitSpec};
use crate::synth::{generate_cohort, write_ground_truth, GeneratorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub context: String,
    pub counts: Vec<usize>,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            context: "eating".into(),
            counts: vec![0, 25, 50, 100, 200],
        }
    }
}

/// Everything a config file may set. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for generation, splits, oversampling and models.
    pub seed: u64,
    /// Worker threads; all available cores when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Output directory (or file, for single-output commands).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Cohort CSV used when none is given on the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<PathBuf>,
    /// `three-class` or `five-class`.
    pub mapping: String,
    /// The generator's own `seed` is replaced by the master seed.
    pub generator: GeneratorConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    pub split: SplitSpec,
    pub smote: SmoteConfig,
    pub classifier: ClassifierConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_policy: Option<ThresholdPolicy>,
    pub ulm_min_per_class: usize,
    pub feature_scaling: ScalingMode,
    pub similarity: SimilarityConfig,
    /// Grid for community sweeps and the default per-user-max search.
    pub threshold_grid: ThresholdGrid,
    pub injection: InjectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ProtocolConfig::new(Protocol::Plm);
        RunConfig {
            seed: 0,
            threads: None,
            out: None,
            cohort: None,
            mapping: "three-class".into(),
            generator: GeneratorConfig::default(),
            protocol: None,
            split: p.split,
            smote: p.smote,
            classifier: p.classifier,
            threshold_policy: None,
            ulm_min_per_class: p.ulm_min_per_class,
            feature_scaling: p.feature_scaling,
            similarity: p.similarity,
            threshold_grid: ThresholdGrid::default(),
            injection: InjectionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        ClassMapping::by_name(&self.mapping)?;
        self.generator.validate()?;
        self.split.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        if self.injection.counts.is_empty() {
            return Err(Error::Config("injection counts are empty".into()));
        }
        if let Some(policy) = &self.threshold_policy {
            policy.validate()?;
        }
        if let Some(protocol) = self.protocol {
            self.protocol_config(protocol).validate()?;
        }
        Ok(())
    }

    /// The protocol settings this config describes for `protocol`. A CBM
    /// run without a policy uses per-user-max over `threshold_grid`.
    pub fn protocol_config(&self, protocol: Protocol) -> ProtocolConfig {
        let threshold_policy = match protocol {
            Protocol::Cbm => Some(self.threshold_policy.clone().unwrap_or(ThresholdPolicy::PerUserMax {
                grid: self.threshold_grid.clone(),
                selection: Default::default(),
            })),
            _ => None,
        };
        ProtocolConfig {
            protocol,
            split: self.split.clone(),
            smote: self.smote,
            classifier: self.classifier.clone(),
            threshold_policy,
            ulm_min_per_class: self.ulm_min_per_class,
            feature_scaling: self.feature_scaling,
            similarity: self.similarity,
            seed: self.seed,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.generator.clone()
        }
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Overrides shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run-config file.
    #[arg(long, global = true, env = "CBM_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "CBM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "CBM_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "CBM_THREADS")]
    pub threads: Option<usize>,
    /// plm, hm, ulm or cbm.
    #[arg(long, global = true, env = "CBM_PROTOCOL")]
    pub protocol: Option<String>,
    /// fixed:<th>, max-avg:<th>, per-user-max or per-user-max-validation.
    #[arg(long, global = true, env = "CBM_THRESHOLD_POLICY")]
    pub threshold_policy: Option<String>,
    /// Comma-separated increasing thresholds in [0, 1].
    #[arg(long, global = true, env = "CBM_GRID")]
    pub grid: Option<String>,
}

#[derive(Debug, Parser)]
#[command(name = "cbm", version, about = "Community-based personalization of mood classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort CSV and its ground-truth sidecar.
    Synth,
    /// Class distribution and eligibility statistics.
    Stats {
        cohort: Option<PathBuf>,
        #[arg(long)]
        by_context: bool,
    },
    /// Per-user profiles and the cosine-similarity matrix.
    Similarity {
        cohort: Option<PathBuf>,
        /// minmax, zscore or none.
        #[arg(long)]
        scaling: Option<String>,
        #[arg(long)]
        include_labels: bool,
    },
    /// Community sizes per user and threshold.
    Communities { cohort: Option<PathBuf> },
    /// Evaluate one protocol over every user.
    Run { cohort: Option<PathBuf> },
    /// Side-by-side table of run reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Population models with a growing number of target-context reports.
    Inject {
        cohort: Option<PathBuf>,
        #[arg(long)]
        context: Option<String>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Mean of the per-user best thresholds in a per-user-max CBM report.
    MaxAvg { report: PathBuf },
}

/// Lay flag/env overrides over the config file (or defaults).
pub fn resolve(overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(out) = &overrides.out {
        config.out = Some(out.clone());
    }
    if let Some(threads) = overrides.threads {
        config.threads = Some(threads);
    }
    if let Some(p) = &overrides.protocol {
        config.protocol = Some(p.parse()?);
    }
    if let Some(g) = &overrides.grid {
        config.threshold_grid = ThresholdGrid::parse(g)?;
        if let Some(ThresholdPolicy::PerUserMax { grid, .. }) = &mut config.threshold_policy {
            *grid = config.threshold_grid.clone();
        }
    }
    if let Some(text) = &overrides.threshold_policy {
        config.threshold_policy = Some(ThresholdPolicy::parse(text, Some(config.threshold_grid.clone()))?);
    }
    config.validate()?;
    Ok(config)
}

/// Run `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
    }
}

/// Provenance line written at the top of every CSV output.
pub fn provenance(seed: u64, hash: &str) -> String {
    format!("# seed={seed}, config_hash={hash}\n")
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// CSV with the provenance line prepended.
fn write_csv(path: &Path, seed: u64, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(provenance(seed, hash).into_bytes());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

fn with_provenance(path: &Path, seed: u64, hash: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut bytes = provenance(seed, hash).into_bytes();
    fill(&mut bytes)?;
    write_file(path, &bytes)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cohort_path(config: &RunConfig, arg: &Option<PathBuf>) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| config.cohort.clone())
        .ok_or_else(|| Error::Config("no cohort CSV given (argument or `cohort` in the config)".into()))
}

pub fn load_cohort(config: &RunConfig, path: &Path) -> Result<Cohort> {
    load_csv(path, ClassMapping::by_name(&config.mapping)?, &IngestOptions::default())
}

pub fn cmd_synth(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let generator = config.generator_config();
    let (cohort, truth) = generate_cohort(&generator)?;
    let dir = out_dir(config)?;
    let hash = config_hash(&generator)?;
    let csv_path = dir.join("cohort.csv");
    with_provenance(&csv_path, generator.seed, &hash, |b| write_cohort_csv(&cohort, b))?;
    let truth_path = dir.join("ground_truth.json");
    write_ground_truth(&truth, &truth_path)?;
    let config_path = dir.join("generator.json");
    write_json(&config_path, &generator)?;
    Ok(vec![csv_path, truth_path, config_path])
}

#[derive(Debug, Serialize)]
struct StatsOutput {
    seed: u64,
    config_hash: String,
    reports: usize,
    users: usize,
    class_distribution: crate::cohort::ClassDistribution,
    eligibility: crate::cohort::EligibilityReport,
}

/// Returns the JSON text; writes it to `out` when set.
pub fn cmd_stats(config: &RunConfig, cohort: &Option<PathBuf>, by_context: bool) -> Result<String> {
    let cohort = load_cohort(config, &cohort_path(config, cohort)?)?;
    let stats = StatsOutput {
        seed: config.seed,
        config_hash: config.hash()?,
        reports: cohort.reports().len(),
        users: cohort.n_users(),
        class_distribution: class_distribution(&cohort, by_context && cohort.has_context())?,
        eligibility: eligibility_stats(&cohort),
    };
    let text = serde_json::to_string_pretty(&stats)? + "\n";
    if let Some(out) = &config.out {
        write_file(out, text.as_bytes())?;
    }
    Ok(text)
}

pub fn cmd_similarity(
    config: &RunConfig,
    cohort: &Option<PathBuf>,
    scaling: Option<&str>,
    include_labels: bool,
) -> Result<Vec<PathBuf>> {
    let cohort = load_cohort(config, &cohort_path(config, cohort)?)?;
    let mode = match scaling {
        Some(s) => s.parse()?,
        None => config.similarity.scaling,
    };
    let options = AggregateOptions {
        include_label_fractions: include_labels || config.similarity.include_label_fractions,
    };
    let profiles = aggregate_users(&cohort, &fit_scaler(&cohort, mode), options);
    let matrix = cosine_similarity(&profiles);
    let dir = out_dir(config)?;
    let hash = config.hash()?;
    let profiles_path = dir.join("profiles.csv");
    with_provenance(&profiles_path, config.seed, &hash, |b| write_profiles_csv(&profiles, b))?;
    let sim_path = dir.join("similarity.csv");
    with_provenance(&sim_path, config.seed, &hash, |b| write_similarity_csv(&matrix, b))?;
    Ok(vec![profiles_path, sim_path])
}

pub fn cmd_communities(config: &RunConfig, cohort: &Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let cohort = load_cohort(config, &cohort_path(config, cohort)?)?;
    let matrix = crate::protocols::similarity_for(&cohort, &config.similarity);
    let sweep = sweep_communities(&matrix, &config.threshold_grid);
    let dir = out_dir(config)?;
    let hash = config.hash()?;
    let sizes_path = dir.join("communities.csv");
    with_provenance(&sizes_path, config.seed, &hash, |b| sweep.write_csv(b))?;
    let rows: Vec<Vec<String>> = sweep
        .summary()
        .iter()
        .map(|r| {
            vec![
                r.threshold.to_string(),
                r.mean_community_size.to_string(),
                r.modelable_users.to_string(),
            ]
        })
        .collect();
    let summary_path = dir.join("communities_summary.csv");
    write_csv(
        &summary_path,
        config.seed,
        &hash,
        &["threshold", "mean_community_size", "modelable_users"],
        &rows,
    )?;
    let json_path = dir.join("communities.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "seed": config.seed,
            "config_hash": hash,
            "sweep": sweep,
            "summary": sweep.summary(),
        }),
    )?;
    Ok(vec![sizes_path, summary_path, json_path])
}

/// Run the configured protocol and return the report with the files
/// written for it.
pub fn cmd_run(config: &RunConfig, cohort: &Option<PathBuf>) -> Result<(ExperimentReport, Vec<PathBuf>)> {
    let protocol = config
        .protocol
        .ok_or_else(|| Error::Config("no protocol given (--protocol or `protocol` in the config)".into()))?;
    let cohort = load_cohort(config, &cohort_path(config, cohort)?)?;
    let pc = config.protocol_config(protocol);
    let report = with_threads(config.threads, || run(&cohort, &pc))?;
    let dir = out_dir(config)?;
    let mut written = Vec::new();

    let report_path = dir.join(format!("{protocol}_report.json"));
    write_json(&report_path, &report)?;
    written.push(report_path);

    let users: Vec<Vec<String>> = report
        .users
        .iter()
        .map(|u| {
            let s = u.summary;
            let status = if u.is_ok() { "ok" } else { "skipped" };
            vec![
                u.user_id.clone(),
                status.to_string(),
                opt(s.map(|s| s.accuracy.mean)),
                opt(s.map(|s| s.accuracy.std)),
                opt(s.map(|s| s.macro_f1.mean)),
                opt(s.map(|s| s.macro_f1.std)),
                opt(s.and_then(|s| s.auc).map(|a| a.mean)),
                opt(s.and_then(|s| s.auc).map(|a| a.std)),
                opt(u.threshold),
                u.community_size.map(|c| c.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    let users_path = dir.join(format!("{protocol}_users.csv"));
    write_csv(
        &users_path,
        report.seed,
        &report.config_hash,
        &[
            "user_id",
            "status",
            "accuracy",
            "accuracy_std",
            "macro_f1",
            "macro_f1_std",
            "auc",
            "auc_std",
            "threshold",
            "community_size",
        ],
        &users,
    )?;
    written.push(users_path);

    if !report.threshold_summary.is_empty() {
        let rows: Vec<Vec<String>> = report
            .threshold_summary
            .iter()
            .map(|r| {
                vec![
                    r.threshold.to_string(),
                    opt(r.mean_accuracy),
                    r.mean_community_size.to_string(),
                    r.modelable_users.to_string(),
                ]
            })
            .collect();
        let path = dir.join(format!("{protocol}_thresholds.csv"));
        write_csv(
            &path,
            report.seed,
            &report.config_hash,
            &["threshold", "mean_accuracy", "mean_community_size", "modelable_users"],
            &rows,
        )?;
        written.push(path);
    }

    if cohort.has_context() && report.aggregate.is_some() {
        let breakdown = report_context_breakdown(&report)?;
        let rows: Vec<Vec<String>> = breakdown
            .groups
            .iter()
            .chain(std::iter::once(&breakdown.overall))
            .map(|g| {
                vec![
                    g.group.clone(),
                    g.support.to_string(),
                    g.correct.to_string(),
                    g.accuracy.to_string(),
                ]
            })
            .collect();
        let path = dir.join(format!("{protocol}_contexts.csv"));
        write_csv(
            &path,
            report.seed,
            &report.config_hash,
            &["context", "support", "correct", "accuracy"],
            &rows,
        )?;
        written.push(path);
    }
    Ok((report, written))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub protocol: Protocol,
    pub seed: u64,
    pub config_hash: String,
    pub users: usize,
    pub accuracy: Option<(f64, f64)>,
    pub macro_f1: Option<(f64, f64)>,
    pub auc: Option<(f64, f64)>,
}

pub fn compare_rows(reports: &[ExperimentReport]) -> Vec<CompareRow> {
    reports
        .iter()
        .map(|r| {
            let a = r.aggregate.as_ref();
            CompareRow {
                protocol: r.protocol,
                seed: r.seed,
                config_hash: r.config_hash.clone(),
                users: a.map_or(0, |a| a.users),
                accuracy: a.map(|a| (a.accuracy.mean, a.accuracy.std_across_users)),
                macro_f1: a.map(|a| (a.macro_f1.mean, a.macro_f1.std_across_users)),
                auc: a.and_then(|a| a.auc).map(|m| (m.mean, m.std_across_users)),
            }
        })
        .collect()
}

/// Returns the rendered table; writes `compare.csv` when `out` is set.
pub fn cmd_compare(config: &RunConfig, paths: &[PathBuf]) -> Result<String> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str::<ExperimentReport>(&text)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_rows(&reports);
    let pair = |v: Option<(f64, f64)>| {
        v.map_or(("".to_string(), "".to_string()), |(m, s)| {
            (m.to_string(), s.to_string())
        })
    };
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let (acc, acc_sd) = pair(r.accuracy);
            let (f1, f1_sd) = pair(r.macro_f1);
            let (auc, auc_sd) = pair(r.auc);
            vec![
                r.protocol.to_string(),
                r.users.to_string(),
                acc,
                acc_sd,
                f1,
                f1_sd,
                auc,
                auc_sd,
                r.seed.to_string(),
                r.config_hash.clone(),
            ]
        })
        .collect();
    let mut table = format!(
        "{:<9}{:>7}{:>18}{:>18}{:>18}\n",
        "protocol", "users", "accuracy", "macro_f1", "auc"
    );
    let cell = |v: Option<(f64, f64)>| v.map_or("-".to_string(), |(m, s)| format!("{:.3} ± {:.3}", m, s));
    for r in &rows {
        table += &format!(
            "{:<9}{:>7}{:>18}{:>18}{:>18}\n",
            r.protocol.to_string(),
            r.users,
            cell(r.accuracy),
            cell(r.macro_f1),
            cell(r.auc)
        );
    }
    if let Some(out) = &config.out {
        let hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
        write_csv(
            out,
            config.seed,
            &hashes.join("+"),
            &[
                "protocol",
                "users",
                "accuracy",
                "accuracy_std",
                "macro_f1",
                "macro_f1_std",
                "auc",
                "auc_std",
                "seed",
                "config_hash",
            ],
            &records,
        )?;
    }
    Ok(table)
}

pub fn cmd_inject(
    config: &RunConfig,
    cohort: &Option<PathBuf>,
    context: Option<&str>,
    counts: Option<&[usize]>,
) -> Result<Vec<PathBuf>> {
    let cohort = load_cohort(config, &cohort_path(config, cohort)?)?;
    let context = context.unwrap_or(&config.injection.context);
    let counts = counts.unwrap_or(&config.injection.counts);
    let pc = config.protocol_config(Protocol::Plm);
    let report = with_threads(config.threads, || injection_sweep(&cohort, context, counts, &pc))?;
    let dir = out_dir(config)?;
    let json_path = dir.join("injection.json");
    write_json(&json_path, &report)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.count.to_string(),
                r.overall_accuracy.mean.to_string(),
                r.overall_accuracy.std.to_string(),
                r.context_accuracy.mean.to_string(),
                r.context_accuracy.std.to_string(),
                r.other_accuracy.mean.to_string(),
                r.other_accuracy.std.to_string(),
            ]
        })
        .collect();
    let csv_path = dir.join("injection.csv");
    write_csv(
        &csv_path,
        report.seed,
        &report.config_hash,
        &[
            "count",
            "overall_accuracy",
            "overall_std",
            "context_accuracy",
            "context_std",
            "other_accuracy",
            "other_std",
        ],
        &rows,
    )?;
    Ok(vec![json_path, csv_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxAvgOutput {
    pub seed: u64,
    pub config_hash: String,
    pub users: usize,
    pub threshold: f64,
}

pub fn cmd_max_avg(config: &RunConfig, path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: ExperimentReport = serde_json::from_str(&text)?;
    if !matches!(report.config.threshold_policy, Some(ThresholdPolicy::PerUserMax { .. })) {
        return Err(Error::Config("max-avg needs a per-user-max CBM report".into()));
    }
    let best = report.chosen_thresholds();
    let output = MaxAvgOutput {
        seed: report.seed,
        config_hash: report.config_hash.clone(),
        users: best.len(),
        threshold: max_avg_threshold(&best)?,
    };
    let text = serde_json::to_string_pretty(&output)? + "\n";
    if let Some(out) = &config.out {
        write_file(out, text.as_bytes())?;
    }
    Ok(text)
}

/// Dispatch a parsed command line; returns what to print on stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    let config = resolve(&cli.overrides)?;
    let listing = |paths: Vec<PathBuf>| {
        paths
            .iter()
            .map(|p| format!("wrote {}\n", p.display()))
            .collect::<String>()
    };
    match &cli.command {
        Command::Synth => cmd_synth(&config).map(listing),
        Command::Stats { cohort, by_context } => cmd_stats(&config, cohort, *by_context),
        Command::Similarity {
            cohort,
            scaling,
            include_labels,
        } => cmd_similarity(&config, cohort, scaling.as_deref(), *include_labels).map(listing),
        Command::Communities { cohort } => cmd_communities(&config, cohort).map(listing),
        Command::Run { cohort } => cmd_run(&config, cohort).map(|(_, paths)| listing(paths)),
        Command::Compare { reports } => cmd_compare(&config, reports),
        Command::Inject {
            cohort,
            context,
            counts,
        } => cmd_inject(&config, cohort, context.as_deref(), counts.as_deref()).map(listing),
        Command::MaxAvg { report } => cmd_max_avg(&config, report),
    }
}

/// The machine-readable form of a failure, as printed on stderr.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({ "error": { "code": err.code(), "message": err.to_string() } }).to_string()
}

/// Entry point shared by the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let err = Error::Config(e.to_string().trim_end().to_string());
            eprintln!("{}", error_json(&err));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cbm").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 3}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"generator": {"n_user": 3}}"#),
            Err(Error::Config(_))
        ));
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"seed": 4, "protocol": "hm", "threads": 3}"#).unwrap();
        let p = path.to_str().unwrap();
        let from_file = resolve(&parse(&["--config", p, "synth"]).overrides).unwrap();
        assert_eq!(
            (from_file.seed, from_file.protocol, from_file.threads),
            (4, Some(Protocol::Hm), Some(3))
        );
        let flagged = resolve(&parse(&["--config", p, "--seed", "9", "--protocol", "cbm", "synth"]).overrides).unwrap();
        assert_eq!(
            (flagged.seed, flagged.protocol, flagged.threads),
            (9, Some(Protocol::Cbm), Some(3))
        );
    }

    #[test]
    fn grid_flag_reaches_the_policy() {
        let cli = parse(&[
            "--grid",
            "0.5,0.9",
            "--threshold-policy",
            "per-user-max",
            "--protocol",
            "cbm",
            "synth",
        ]);
        let config = resolve(&cli.overrides).unwrap();
        let pc = config.protocol_config(Protocol::Cbm);
        let Some(ThresholdPolicy::PerUserMax { grid, .. }) = pc.threshold_policy else {
            panic!("expected per-user-max");
        };
        assert_eq!(grid.values(), [0.5, 0.9]);
    }

    #[test]
    fn cbm_defaults_to_per_user_max() {
        let pc = RunConfig::default().protocol_config(Protocol::Cbm);
        assert!(matches!(pc.threshold_policy, Some(ThresholdPolicy::PerUserMax { .. })));
        assert!(RunConfig::default()
            .protocol_config(Protocol::Hm)
            .threshold_policy
            .is_none());
    }

    #[test]
    fn bad_overrides_fail_validation() {
        assert!(resolve(&parse(&["--grid", "0.9,0.5", "synth"]).overrides).is_err());
        assert!(resolve(&parse(&["--threads", "0", "synth"]).overrides).is_err());
        assert!(resolve(&parse(&["--protocol", "xyz", "synth"]).overrides).is_err());
        assert!(resolve(&parse(&["--threshold-policy", "fixed:1.5", "synth"]).overrides).is_err());
    }

    #[test]
    fn error_json_shape() {
        let v: serde_json::Value = serde_json::from_str(&error_json(&Error::Config("nope".into()))).unwrap();
        assert_eq!(v["error"]["code"], "config");
        assert!(v["error"]["message"].as_str().unwrap().contains("nope"));
    }

    #[test]
    fn provenance_line() {
        assert_eq!(provenance(7, "ab"), "# seed=7, config_hash=ab\n");
    }
}

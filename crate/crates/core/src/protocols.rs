//! End-to-end evaluation runners for PLM, HM, ULM and CBM, plus the
//! per-context breakdown and context-injection sweep.
//!
//! Every (user, repeat) task draws its randomness from the task seed of
//! `(seed, protocol, user ordinal, repeat)`, so results do not depend on
//! scheduling. Metrics are averaged over repeats per user, then over users.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{eligibility_stats, Cohort, EligibilityReport, NO_CONTEXT};
use crate::community::{detect_community, Community, Selection, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::forest::{self, Classifier, ForestParams, HyperGrid};
use crate::metrics::{aggregate_stats, MeanStd, MetricsBundle};
use crate::profile::{
    aggregate_users, column_medians, cosine_similarity, fit_scaler, AggregateOptions, ScalingMode, ScalingParams,
    SimilarityMatrix,
};
use crate::sampling::{floor_fraction, make_split, smote_oversample, LabeledRows, Protocol, SmoteConfig, SplitSpec};
use crate::seed::{self, Stream};

/// Task-seed tag of the context-injection sweep.
pub const INJECTION_TAG: u64 = 5;

/// Share of the target's training rows held out when thresholds are chosen
/// on validation data.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ClassifierConfig {
    Forest {
        #[serde(default)]
        params: ForestParams,
    },
    /// Per-task grid search; the winning parameters are refit on the full
    /// training set.
    Grid {
        #[serde(default)]
        grid: HyperGrid,
        #[serde(default)]
        base: ForestParams,
    },
    Majority,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig::Forest {
            params: ForestParams::default(),
        }
    }
}

/// How CBM builds the user profiles that communities are detected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityConfig {
    #[serde(default)]
    pub scaling: ScalingMode,
    #[serde(default)]
    pub include_label_fractions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub smote: SmoteConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    /// Required for CBM, forbidden otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_policy: Option<ThresholdPolicy>,
    #[serde(default = "default_ulm_min")]
    pub ulm_min_per_class: usize,
    /// Scaling of classifier inputs, fit on each training set.
    #[serde(default)]
    pub feature_scaling: ScalingMode,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_ulm_min() -> usize {
    2
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol) -> Self {
        ProtocolConfig {
            protocol,
            split: SplitSpec::default(),
            smote: SmoteConfig::default(),
            classifier: ClassifierConfig::default(),
            threshold_policy: None,
            ulm_min_per_class: default_ulm_min(),
            feature_scaling: ScalingMode::default(),
            similarity: SimilarityConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        match (self.protocol, &self.threshold_policy) {
            (Protocol::Cbm, None) => return Err(Error::Config("cbm requires a threshold_policy".into())),
            (Protocol::Cbm, Some(policy)) => policy.validate()?,
            (p, Some(_)) => return Err(Error::Config(format!("{p} does not take a threshold_policy"))),
            (_, None) => {}
        }
        match &self.classifier {
            ClassifierConfig::Forest { params } => params.validate()?,
            ClassifierConfig::Grid { grid, base } => {
                base.validate()?;
                if grid.candidates(base).is_empty() {
                    return Err(Error::Config("hyperparameter grid is empty".into()));
                }
                for p in grid.candidates(base) {
                    p.validate()?;
                }
            }
            ClassifierConfig::Majority => {}
        }
        if self.ulm_min_per_class == 0 {
            return Err(Error::Config("ulm_min_per_class must be positive".into()));
        }
        Ok(())
    }

    fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.seed,
            ..self.split.clone()
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub report_id: String,
    pub context: Option<String>,
    pub truth: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: MetricsBundle,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserStatus {
    Ok,
    Skipped { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    /// Over the repeats whose test set admits an AUC.
    pub auc: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub community_size: usize,
    /// Mean selection accuracy over repeats; `None` for an empty community.
    pub mean_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user_id: String,
    pub status: UserStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<UserSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub community_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub threshold_scores: Vec<ThresholdScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repeats: Vec<RepeatOutcome>,
}

impl UserResult {
    fn skipped(user: &str, reason: impl Into<String>) -> Self {
        UserResult {
            user_id: user.to_string(),
            status: UserStatus::Skipped { reason: reason.into() },
            summary: None,
            threshold: None,
            community_size: None,
            threshold_scores: Vec::new(),
            repeats: Vec::new(),
        }
    }

    fn ok(user: &str, repeats: Vec<RepeatOutcome>) -> Result<Self> {
        let summary = summarize(&repeats)?;
        Ok(UserResult {
            user_id: user.to_string(),
            status: UserStatus::Ok,
            summary: Some(summary),
            threshold: None,
            community_size: None,
            threshold_scores: Vec::new(),
            repeats,
        })
    }

    pub fn is_ok(&self) -> bool {
        self.status == UserStatus::Ok
    }
}

fn summarize(repeats: &[RepeatOutcome]) -> Result<UserSummary> {
    let acc: Vec<f64> = repeats.iter().map(|r| r.metrics.accuracy).collect();
    let f1: Vec<f64> = repeats.iter().map(|r| r.metrics.macro_f1).collect();
    let auc: Vec<f64> = repeats.iter().filter_map(|r| r.metrics.auc_ovr_macro).collect();
    Ok(UserSummary {
        accuracy: aggregate_stats(&acc)?,
        macro_f1: aggregate_stats(&f1)?,
        auc: aggregate_stats(&auc).ok(),
    })
}

/// A cohort-level metric: mean of per-user means, the population std of
/// those means, and the population std over every (user, repeat) run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetric {
    pub mean: f64,
    pub std_across_users: f64,
    pub std_across_runs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub users: usize,
    pub accuracy: AggregateMetric,
    pub macro_f1: AggregateMetric,
    pub auc: Option<AggregateMetric>,
}

fn aggregate_metric(user_means: &[f64], runs: &[f64]) -> Result<AggregateMetric> {
    let users = aggregate_stats(user_means)?;
    Ok(AggregateMetric {
        mean: users.mean,
        std_across_users: users.std,
        std_across_runs: aggregate_stats(runs)?.std,
    })
}

pub fn aggregate(users: &[UserResult]) -> Option<Aggregate> {
    let ok: Vec<&UserResult> = users.iter().filter(|u| u.is_ok()).collect();
    let summaries: Vec<&UserSummary> = ok.iter().filter_map(|u| u.summary.as_ref()).collect();
    if summaries.is_empty() {
        return None;
    }
    let runs = |f: &dyn Fn(&MetricsBundle) -> Option<f64>| -> Vec<f64> {
        ok.iter()
            .flat_map(|u| u.repeats.iter().filter_map(|r| f(&r.metrics)))
            .collect()
    };
    let acc = aggregate_metric(
        &summaries.iter().map(|s| s.accuracy.mean).collect::<Vec<_>>(),
        &runs(&|m| Some(m.accuracy)),
    )
    .ok()?;
    let f1 = aggregate_metric(
        &summaries.iter().map(|s| s.macro_f1.mean).collect::<Vec<_>>(),
        &runs(&|m| Some(m.macro_f1)),
    )
    .ok()?;
    let auc = aggregate_metric(
        &summaries
            .iter()
            .filter_map(|s| s.auc.map(|a| a.mean))
            .collect::<Vec<_>>(),
        &runs(&|m| m.auc_ovr_macro),
    )
    .ok();
    Some(Aggregate {
        users: summaries.len(),
        accuracy: acc,
        macro_f1: f1,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummaryRow {
    pub threshold: f64,
    /// Mean over users with a non-empty community.
    pub mean_accuracy: Option<f64>,
    /// Mean over all users, counting empty communities as zero.
    pub mean_community_size: f64,
    pub modelable_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub reports: usize,
    pub users: usize,
    pub features: usize,
    pub class_order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub config_hash: String,
    pub config: ProtocolConfig,
    pub cohort: CohortSummary,
    pub users_total: usize,
    pub users_skipped: usize,
    /// Set when thresholds were chosen on the test split.
    pub optimistic_threshold_selection: bool,
    pub aggregate: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub threshold_summary: Vec<ThresholdSummaryRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligibility: Option<EligibilityReport>,
    pub users: Vec<UserResult>,
}

impl ExperimentReport {
    pub fn user(&self, user_id: &str) -> Option<&UserResult> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    /// Per-user best thresholds of the users that have one.
    pub fn chosen_thresholds(&self) -> IndexMap<String, f64> {
        self.users
            .iter()
            .filter(|u| u.is_ok())
            .filter_map(|u| u.threshold.map(|t| (u.user_id.clone(), t)))
            .collect()
    }
}

fn build_classifier(
    config: &ClassifierConfig,
    train: &LabeledRows,
    n_classes: usize,
    smote: &SmoteConfig,
    task: u64,
) -> Result<Box<dyn Classifier>> {
    let model_seed = seed::stream_seed(task, Stream::Model);
    Ok(match config {
        ClassifierConfig::Forest { params } => Box::new(forest::fit(
            train,
            n_classes,
            &ForestParams {
                seed: model_seed,
                ..params.clone()
            },
        )?),
        ClassifierConfig::Grid { grid, base } => {
            let search = forest::grid_search(train, n_classes, grid, base, Some(smote).filter(|s| s.enabled), task)?;
            Box::new(forest::fit(
                &smote_oversample(train, n_classes, smote, task).rows,
                n_classes,
                &ForestParams {
                    seed: model_seed,
                    ..search.best
                },
            )?)
        }
        ClassifierConfig::Majority => Box::new(forest::majority_baseline(train, n_classes)?),
    })
}

/// Train on `train` (imputed with train medians, scaled with a train-fit
/// scaler, oversampled) and evaluate on `eval`.
pub fn evaluate_positions(
    cohort: &Cohort,
    config: &ProtocolConfig,
    train: &[usize],
    eval: &[usize],
    task: u64,
    repeat: usize,
) -> Result<RepeatOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if eval.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let reports = cohort.reports();
    let nf = cohort.schema().feature_count();
    let n_classes = cohort.mapping().n_classes();
    let raw = |p: &usize| reports[*p].features.as_slice();
    let medians = column_medians(train.iter().map(raw), nf);
    let scaler = ScalingParams::fit(train.iter().map(raw), nf, config.feature_scaling);
    let prepare = |p: &usize| -> Vec<f64> {
        reports[*p]
            .features
            .iter()
            .enumerate()
            .map(|(f, v)| scaler.scale(f, v.unwrap_or(medians[f])))
            .collect()
    };
    let rows = LabeledRows {
        features: train.iter().map(prepare).collect(),
        labels: train.iter().map(|p| reports[*p].class).collect(),
    };
    let model = match &config.classifier {
        ClassifierConfig::Grid { .. } => build_classifier(&config.classifier, &rows, n_classes, &config.smote, task)?,
        other => {
            let balanced = smote_oversample(&rows, n_classes, &config.smote, task).rows;
            build_classifier(other, &balanced, n_classes, &config.smote, task)?
        }
    };
    let test: Vec<Vec<f64>> = eval.iter().map(prepare).collect();
    let truth: Vec<usize> = eval.iter().map(|p| reports[*p].class).collect();
    let proba = model.predict_proba(&test)?;
    let pred: Vec<usize> = proba.iter().map(|p| forest::argmax(p)).collect();
    let metrics = MetricsBundle::compute(&truth, &pred, &proba, n_classes)?;
    let predictions = eval
        .iter()
        .zip(&pred)
        .map(|(p, &predicted)| Prediction {
            report_id: reports[*p].report_id.clone(),
            context: reports[*p].context.clone(),
            truth: reports[*p].class,
            predicted,
        })
        .collect();
    Ok(RepeatOutcome {
        repeat,
        train_size: train.len(),
        test_size: eval.len(),
        metrics,
        predictions,
    })
}

fn task_of(config: &ProtocolConfig, protocol: Protocol, ordinal: usize, repeat: usize) -> u64 {
    seed::task_seed(config.seed, protocol.tag(), ordinal as u64, repeat as u64)
}

/// All repeats of one (protocol, user, community), scored on the test split
/// or, with `validation`, on a slice held out from the target's train rows.
fn run_repeats(
    cohort: &Cohort,
    config: &ProtocolConfig,
    protocol: Protocol,
    user: &str,
    community: Option<&Community>,
    validation: bool,
) -> Result<Vec<RepeatOutcome>> {
    let spec = config.split_spec();
    let ordinal = cohort
        .user_ordinal(user)
        .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
    (0..spec.repeats)
        .map(|repeat| {
            let split = make_split(cohort, protocol, user, community, &spec, repeat)?;
            let leaked = !split.is_disjoint()
                || (protocol == Protocol::Plm && split.train.iter().any(|&p| cohort.reports()[p].user_id == user));
            if leaked {
                return Err(Error::Leakage {
                    user: user.to_string(),
                    repeat,
                });
            }
            let task = task_of(config, protocol, ordinal, repeat);
            if !validation {
                return evaluate_positions(cohort, config, &split.train, &split.test, task, repeat);
            }
            let mut own = split.target_train.clone();
            if own.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "{} target training row(s), need 2 for validation",
                    own.len()
                )));
            }
            own.shuffle(&mut seed::rng_for(task, Stream::Validation));
            let n_val = floor_fraction(VALIDATION_FRACTION, own.len()).clamp(1, own.len() - 1);
            let mut held: Vec<usize> = own[..n_val].to_vec();
            held.sort_unstable();
            let train: Vec<usize> = split
                .train
                .iter()
                .copied()
                .filter(|p| held.binary_search(p).is_err())
                .collect();
            evaluate_positions(cohort, config, &train, &held, task, repeat)
        })
        .collect()
}

fn mean_accuracy(repeats: &[RepeatOutcome]) -> f64 {
    repeats.iter().map(|r| r.metrics.accuracy).sum::<f64>() / repeats.len() as f64
}

/// Errors that describe a user's data rather than a broken run become
/// skip reasons; the rest abort.
fn skip_or_abort(user: &str, err: Error) -> Result<UserResult> {
    match err {
        Error::Leakage { .. } | Error::Io { .. } | Error::Config(_) | Error::Json(_) | Error::Csv(_) => Err(err),
        other => Ok(UserResult::skipped(user, other.to_string())),
    }
}

fn run_simple_user(cohort: &Cohort, config: &ProtocolConfig, protocol: Protocol, user: &str) -> Result<UserResult> {
    if protocol == Protocol::Ulm {
        let own = cohort.user_reports(user)?;
        let mut counts = vec![0usize; cohort.mapping().n_classes()];
        for &p in own {
            counts[cohort.reports()[p].class] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            let name = &cohort.mapping().class_order()[c];
            if n == 0 {
                return Ok(UserResult::skipped(user, format!("class absent: {name}")));
            }
            if n < config.ulm_min_per_class {
                return Ok(UserResult::skipped(
                    user,
                    format!("too few `{name}` reports: {n} < {}", config.ulm_min_per_class),
                ));
            }
        }
    }
    match run_repeats(cohort, config, protocol, user, None, false) {
        Ok(repeats) => UserResult::ok(user, repeats),
        Err(e) => skip_or_abort(user, e),
    }
}

/// Profiles and cosine similarities used for community detection.
pub fn similarity_for(cohort: &Cohort, config: &SimilarityConfig) -> SimilarityMatrix {
    let scaler = fit_scaler(cohort, config.scaling);
    let profiles = aggregate_users(
        cohort,
        &scaler,
        AggregateOptions {
            include_label_fractions: config.include_label_fractions,
        },
    );
    cosine_similarity(&profiles)
}

fn run_cbm_user(cohort: &Cohort, config: &ProtocolConfig, sim: &SimilarityMatrix, user: &str) -> Result<UserResult> {
    let policy = config
        .threshold_policy
        .as_ref()
        .ok_or_else(|| Error::Config("cbm requires a threshold_policy".into()))?;
    match policy {
        ThresholdPolicy::Fixed { threshold } | ThresholdPolicy::MaxAvg { threshold } => {
            let community = detect_community(sim, user, *threshold)?;
            if community.is_empty() {
                return Ok(UserResult::skipped(
                    user,
                    format!("empty community at threshold {threshold}"),
                ));
            }
            let mut result = match run_repeats(cohort, config, Protocol::Cbm, user, Some(&community), false) {
                Ok(repeats) => UserResult::ok(user, repeats)?,
                Err(e) => return skip_or_abort(user, e),
            };
            result.threshold = Some(*threshold);
            result.community_size = Some(community.len());
            Ok(result)
        }
        ThresholdPolicy::PerUserMax { grid, selection } => {
            let validation = *selection == Selection::Validation;
            // Splits depend on the community only through its member set,
            // so thresholds sharing a set share one evaluation.
            let mut cache: HashMap<Vec<String>, std::result::Result<Vec<RepeatOutcome>, String>> = HashMap::new();
            let mut scores = Vec::with_capacity(grid.values().len());
            let mut best: Option<(usize, f64)> = None;
            let mut communities = Vec::with_capacity(grid.values().len());
            for (i, &threshold) in grid.values().iter().enumerate() {
                let community = detect_community(sim, user, threshold)?;
                let mut mean = None;
                if !community.is_empty() {
                    if !cache.contains_key(&community.members) {
                        let outcome =
                            match run_repeats(cohort, config, Protocol::Cbm, user, Some(&community), validation) {
                                Ok(r) => Ok(r),
                                Err(e) => match skip_or_abort(user, e)?.status {
                                    UserStatus::Skipped { reason } => Err(reason),
                                    UserStatus::Ok => unreachable!("skip_or_abort never yields ok"),
                                },
                            };
                        cache.insert(community.members.clone(), outcome);
                    }
                    if let Ok(repeats) = &cache[&community.members] {
                        let m = mean_accuracy(repeats);
                        mean = Some(m);
                        // Ties go to the larger threshold.
                        if best.is_none_or(|(_, b)| m >= b) {
                            best = Some((i, m));
                        }
                    }
                }
                scores.push(ThresholdScore {
                    threshold,
                    community_size: community.len(),
                    mean_accuracy: mean,
                });
                communities.push(community);
            }
            let Some((best_index, _)) = best else {
                let reason = cache
                    .values()
                    .find_map(|r| r.as_ref().err().cloned())
                    .unwrap_or_else(|| "empty community at every threshold".into());
                let mut skipped = UserResult::skipped(user, reason);
                skipped.threshold_scores = scores;
                return Ok(skipped);
            };
            let community = &communities[best_index];
            let repeats = if validation {
                match run_repeats(cohort, config, Protocol::Cbm, user, Some(community), false) {
                    Ok(r) => r,
                    Err(e) => return skip_or_abort(user, e),
                }
            } else {
                cache
                    .remove(&community.members)
                    .and_then(|r| r.ok())
                    .ok_or_else(|| Error::Config("threshold cache lost its best entry".into()))?
            };
            let mut result = UserResult::ok(user, repeats)?;
            result.threshold = Some(grid.values()[best_index]);
            result.community_size = Some(community.len());
            result.threshold_scores = scores;
            Ok(result)
        }
    }
}

fn threshold_summary(users: &[UserResult], policy: &ThresholdPolicy) -> Vec<ThresholdSummaryRow> {
    let n = users.len().max(1) as f64;
    match policy {
        ThresholdPolicy::PerUserMax { grid, .. } => grid
            .values()
            .iter()
            .enumerate()
            .map(|(i, &threshold)| {
                let scores: Vec<&ThresholdScore> = users.iter().filter_map(|u| u.threshold_scores.get(i)).collect();
                let accs: Vec<f64> = scores.iter().filter_map(|s| s.mean_accuracy).collect();
                ThresholdSummaryRow {
                    threshold,
                    mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
                    mean_community_size: scores.iter().map(|s| s.community_size as f64).sum::<f64>() / n,
                    modelable_users: accs.len(),
                }
            })
            .collect(),
        ThresholdPolicy::Fixed { threshold } | ThresholdPolicy::MaxAvg { threshold } => {
            let ok: Vec<&UserResult> = users.iter().filter(|u| u.is_ok()).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|u| u.summary.map(|s| s.accuracy.mean)).collect();
            vec![ThresholdSummaryRow {
                threshold: *threshold,
                mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
                mean_community_size: ok.iter().filter_map(|u| u.community_size).sum::<usize>() as f64 / n,
                modelable_users: ok.len(),
            }]
        }
    }
}

/// Evaluate a single user under `config.protocol`; identical to that
/// user's entry in `run`.
pub fn run_user(cohort: &Cohort, config: &ProtocolConfig, user: &str) -> Result<UserResult> {
    config.validate()?;
    cohort
        .user_ordinal(user)
        .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
    match config.protocol {
        Protocol::Cbm => run_cbm_user(cohort, config, &similarity_for(cohort, &config.similarity), user),
        p => run_simple_user(cohort, config, p, user),
    }
}

/// Run `config.protocol` over every user of `cohort`.
pub fn run(cohort: &Cohort, config: &ProtocolConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let protocol = config.protocol;
    if matches!(protocol, Protocol::Plm | Protocol::Hm | Protocol::Cbm) && cohort.n_users() < 2 {
        return Err(Error::InsufficientData(format!("{protocol} needs at least 2 users")));
    }
    let users = cohort.user_ids();
    let sim = (protocol == Protocol::Cbm).then(|| similarity_for(cohort, &config.similarity));
    let results: Vec<UserResult> = users
        .par_iter()
        .map(|user| match &sim {
            Some(sim) => run_cbm_user(cohort, config, sim, user),
            None => run_simple_user(cohort, config, protocol, user),
        })
        .collect::<Result<_>>()?;

    let threshold_summary = config
        .threshold_policy
        .as_ref()
        .map(|p| threshold_summary(&results, p))
        .unwrap_or_default();
    let optimistic = matches!(
        config.threshold_policy,
        Some(ThresholdPolicy::PerUserMax {
            selection: Selection::Test,
            ..
        })
    );
    Ok(ExperimentReport {
        protocol,
        seed: config.seed,
        config_hash: config_hash(config)?,
        config: config.clone(),
        cohort: CohortSummary {
            reports: cohort.reports().len(),
            users: cohort.n_users(),
            features: cohort.schema().feature_count(),
            class_order: cohort.mapping().class_order().to_vec(),
        },
        users_total: results.len(),
        users_skipped: results.iter().filter(|u| !u.is_ok()).count(),
        optimistic_threshold_selection: optimistic,
        aggregate: aggregate(&results),
        threshold_summary,
        eligibility: (protocol == Protocol::Ulm).then(|| eligibility_stats(cohort)),
        users: results,
    })
}

fn with_protocol(config: &ProtocolConfig, protocol: Protocol) -> ProtocolConfig {
    ProtocolConfig {
        protocol,
        ..config.clone()
    }
}

pub fn run_plm(cohort: &Cohort, config: &ProtocolConfig) -> Result<ExperimentReport> {
    run(cohort, &with_protocol(config, Protocol::Plm))
}

pub fn run_hm(cohort: &Cohort, config: &ProtocolConfig) -> Result<ExperimentReport> {
    run(cohort, &with_protocol(config, Protocol::Hm))
}

pub fn run_ulm(cohort: &Cohort, config: &ProtocolConfig) -> Result<ExperimentReport> {
    run(cohort, &with_protocol(config, Protocol::Ulm))
}

pub fn run_cbm(cohort: &Cohort, config: &ProtocolConfig) -> Result<ExperimentReport> {
    run(cohort, &with_protocol(config, Protocol::Cbm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBreakdown {
    /// Sorted by group name.
    pub groups: Vec<GroupAccuracy>,
    pub overall: GroupAccuracy,
}

/// Accuracy per context over pooled predictions.
pub fn context_breakdown<'a>(predictions: impl IntoIterator<Item = &'a Prediction>) -> Result<ContextBreakdown> {
    let mut groups: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    let mut any_context = false;
    let (mut support, mut correct) = (0, 0);
    for p in predictions {
        any_context |= p.context.is_some();
        let key = p.context.clone().unwrap_or_else(|| NO_CONTEXT.to_string());
        let entry = groups.entry(key).or_default();
        entry.0 += 1;
        support += 1;
        if p.truth == p.predicted {
            entry.1 += 1;
            correct += 1;
        }
    }
    if !any_context {
        return Err(Error::MissingContextColumn);
    }
    let row = |group: String, support: usize, correct: usize| GroupAccuracy {
        group,
        support,
        correct,
        accuracy: correct as f64 / support as f64,
    };
    Ok(ContextBreakdown {
        groups: groups.into_iter().map(|(g, (s, c))| row(g, s, c)).collect(),
        overall: row("overall".into(), support, correct),
    })
}

/// Pooled test predictions of every successful user and repeat.
pub fn report_context_breakdown(report: &ExperimentReport) -> Result<ContextBreakdown> {
    context_breakdown(
        report
            .users
            .iter()
            .filter(|u| u.is_ok())
            .flat_map(|u| u.repeats.iter().flat_map(|r| r.predictions.iter())),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRow {
    pub count: usize,
    pub overall_accuracy: MeanStd,
    pub context_accuracy: MeanStd,
    pub other_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub seed: u64,
    pub config_hash: String,
    pub config: ProtocolConfig,
    pub target_context: String,
    pub counts: Vec<usize>,
    pub test_context_reports: usize,
    pub test_other_reports: usize,
    pub rows: Vec<InjectionRow>,
}

/// One repeat's fixed test set and injection pool.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    pub task: u64,
    /// Held-out reports of both groups, sorted.
    pub test: Vec<usize>,
    /// Non-target-context training reports.
    pub other_train: Vec<usize>,
    /// Shuffled target-context reports outside the test set.
    pub pool: Vec<usize>,
}

impl InjectionPlan {
    /// Sorted training positions with the first `count` pool reports added.
    pub fn train(&self, count: usize) -> Vec<usize> {
        let mut train: Vec<usize> = self.other_train.iter().chain(&self.pool[..count]).copied().collect();
        train.sort_unstable();
        train
    }
}

struct InjectionLayout {
    ctx: Vec<usize>,
    other: Vec<usize>,
    n_ctx_test: usize,
    n_other_test: usize,
}

fn injection_layout(
    cohort: &Cohort,
    target_context: &str,
    needed: usize,
    split: &SplitSpec,
) -> Result<InjectionLayout> {
    split.validate()?;
    if !cohort.has_context() {
        return Err(Error::MissingContextColumn);
    }
    let (ctx, other): (Vec<usize>, Vec<usize>) =
        (0..cohort.reports().len()).partition(|&p| cohort.reports()[p].context.as_deref() == Some(target_context));
    let test_share = 1.0 - split.target_train_fraction;
    let n_ctx_test = floor_fraction(test_share, ctx.len());
    let n_other_test = floor_fraction(test_share, other.len());
    let available = ctx.len() - n_ctx_test;
    if needed > available || n_ctx_test == 0 || n_other_test == 0 {
        return Err(Error::InsufficientContextReports {
            context: target_context.to_string(),
            needed: needed.max(1),
            available,
        });
    }
    Ok(InjectionLayout {
        ctx,
        other,
        n_ctx_test,
        n_other_test,
    })
}

fn plan_for(layout: &InjectionLayout, seed_: u64, repeat: usize) -> InjectionPlan {
    let task = seed::task_seed(seed_, INJECTION_TAG, 0, repeat as u64);
    let mut rng = seed::rng_for(task, Stream::Split);
    let mut ctx = layout.ctx.clone();
    let mut other = layout.other.clone();
    ctx.shuffle(&mut rng);
    other.shuffle(&mut rng);
    let mut test: Vec<usize> = ctx[..layout.n_ctx_test]
        .iter()
        .chain(&other[..layout.n_other_test])
        .copied()
        .collect();
    test.sort_unstable();
    InjectionPlan {
        task,
        test,
        other_train: other[layout.n_other_test..].to_vec(),
        pool: ctx[layout.n_ctx_test..].to_vec(),
    }
}

/// The plan `injection_sweep` uses for `repeat`. `max_count` is the largest
/// injection the plan must support.
pub fn injection_plan(
    cohort: &Cohort,
    target_context: &str,
    max_count: usize,
    config: &ProtocolConfig,
    repeat: usize,
) -> Result<InjectionPlan> {
    let layout = injection_layout(cohort, target_context, max_count, &config.split)?;
    Ok(plan_for(&layout, config.seed, repeat))
}

/// Population-level models trained on every non-target-context training
/// report plus exactly `c` target-context reports, for each `c` in
/// `counts`. Each repeat fixes one held-out test set (the target share of
/// `1 - target_train_fraction` of both groups) and nests the injected
/// reports: the first `c` of one shuffled pool.
pub fn injection_sweep(
    cohort: &Cohort,
    target_context: &str,
    counts: &[usize],
    config: &ProtocolConfig,
) -> Result<InjectionReport> {
    if counts.is_empty() {
        return Err(Error::Config("injection counts are empty".into()));
    }
    let needed = counts.iter().copied().max().unwrap_or(0);
    let layout = injection_layout(cohort, target_context, needed, &config.split)?;

    let per_repeat: Vec<Vec<(f64, f64, f64)>> = (0..config.split.repeats)
        .into_par_iter()
        .map(|repeat| {
            let plan = plan_for(&layout, config.seed, repeat);
            counts
                .iter()
                .map(|&c| {
                    let outcome = evaluate_positions(cohort, config, &plan.train(c), &plan.test, plan.task, repeat)?;
                    let (mut n_ctx, mut ok_ctx, mut n_other, mut ok_other) = (0, 0, 0, 0);
                    for p in &outcome.predictions {
                        let hit = (p.truth == p.predicted) as usize;
                        if p.context.as_deref() == Some(target_context) {
                            n_ctx += 1;
                            ok_ctx += hit;
                        } else {
                            n_other += 1;
                            ok_other += hit;
                        }
                    }
                    Ok((
                        outcome.metrics.accuracy,
                        ok_ctx as f64 / n_ctx as f64,
                        ok_other as f64 / n_other as f64,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let rows = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let column = |f: fn(&(f64, f64, f64)) -> f64| per_repeat.iter().map(|r| f(&r[i])).collect::<Vec<_>>();
            Ok(InjectionRow {
                count,
                overall_accuracy: aggregate_stats(&column(|t| t.0))?,
                context_accuracy: aggregate_stats(&column(|t| t.1))?,
                other_accuracy: aggregate_stats(&column(|t| t.2))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(InjectionReport {
        seed: config.seed,
        config_hash: config_hash(config)?,
        config: config.clone(),
        target_context: target_context.to_string(),
        counts: counts.to_vec(),
        test_context_reports: layout.n_ctx_test,
        test_other_reports: layout.n_other_test,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ClassMapping, FeatureSchema, Report};
    use crate::community::ThresholdGrid;
    use crate::synth::{generate_cohort, GeneratorConfig};

    fn cohort(seed: u64) -> Cohort {
        let config = GeneratorConfig {
            n_users: 8,
            reports_mean: 24,
            reports_spread: 4,
            n_features: 6,
            seed,
            ..GeneratorConfig::default()
        };
        generate_cohort(&config).unwrap().0
    }

    fn config(protocol: Protocol) -> ProtocolConfig {
        let mut c = ProtocolConfig::new(protocol);
        c.classifier = ClassifierConfig::Forest {
            params: ForestParams {
                n_trees: 5,
                ..ForestParams::default()
            },
        };
        c.split.repeats = 2;
        c.seed = 3;
        c
    }

    fn per_user_max(selection: Selection) -> ProtocolConfig {
        let mut c = config(Protocol::Cbm);
        c.threshold_policy = Some(ThresholdPolicy::PerUserMax {
            grid: ThresholdGrid::default(),
            selection,
        });
        c
    }

    #[test]
    fn policy_must_match_protocol() {
        assert!(matches!(config(Protocol::Cbm).validate(), Err(Error::Config(_))));
        let mut plm = config(Protocol::Plm);
        plm.threshold_policy = Some(ThresholdPolicy::Fixed { threshold: 0.5 });
        assert!(matches!(plm.validate(), Err(Error::Config(_))));
        assert!(config(Protocol::Hm).validate().is_ok());
    }

    #[test]
    fn plm_tests_only_the_target() {
        let cohort = cohort(1);
        let report = run(&cohort, &config(Protocol::Plm)).unwrap();
        assert_eq!(report.users_total, 8);
        for user in &report.users {
            assert!(user.is_ok(), "{:?}", user.status);
            assert_eq!(user.repeats.len(), 2);
            for r in &user.repeats {
                assert!(r.predictions.iter().all(|p| p.report_id.starts_with(&user.user_id)));
            }
        }
        assert!(report.aggregate.is_some());
    }

    #[test]
    fn run_user_matches_run() {
        let cohort = cohort(2);
        let cfg = per_user_max(Selection::Test);
        let report = run(&cohort, &cfg).unwrap();
        let single = run_user(&cohort, &cfg, "u003").unwrap();
        assert_eq!(report.user("u003"), Some(&single));
    }

    // Exhaustive oracle: one Fixed run per grid threshold under the same seeds.
    #[test]
    fn per_user_max_is_the_fixed_argmax() {
        let cohort = cohort(4);
        let cfg = per_user_max(Selection::Test);
        let grid = ThresholdGrid::default();
        for user in ["u000", "u005"] {
            let best = run_user(&cohort, &cfg, user).unwrap();
            let mut oracle: Option<(f64, f64, UserResult)> = None;
            for &th in grid.values() {
                let mut fixed = cfg.clone();
                fixed.threshold_policy = Some(ThresholdPolicy::Fixed { threshold: th });
                let r = run_user(&cohort, &fixed, user).unwrap();
                let Some(s) = r.summary else { continue };
                if oracle.as_ref().is_none_or(|(_, a, _)| s.accuracy.mean >= *a) {
                    oracle = Some((th, s.accuracy.mean, r));
                }
            }
            let (th, acc, fixed) = oracle.unwrap();
            assert_eq!(best.threshold, Some(th));
            assert_eq!(best.summary.unwrap().accuracy.mean, acc);
            assert_eq!(best.repeats, fixed.repeats);
            assert_eq!(best.community_size, fixed.community_size);
        }
    }

    #[test]
    fn validation_selection_refits_on_the_test_split() {
        let cohort = cohort(5);
        let report = run(&cohort, &per_user_max(Selection::Validation)).unwrap();
        assert!(!report.optimistic_threshold_selection);
        let user = report.users.iter().find(|u| u.is_ok()).unwrap();
        let th = user.threshold.unwrap();
        let mut fixed = per_user_max(Selection::Test);
        fixed.threshold_policy = Some(ThresholdPolicy::Fixed { threshold: th });
        let oracle = run_user(&cohort, &fixed, &user.user_id).unwrap();
        assert_eq!(user.repeats, oracle.repeats);
        assert!(
            run(&cohort, &per_user_max(Selection::Test))
                .unwrap()
                .optimistic_threshold_selection
        );
    }

    #[test]
    fn fixed_threshold_above_every_similarity_skips() {
        let cohort = cohort(6);
        let mut cfg = config(Protocol::Cbm);
        cfg.threshold_policy = Some(ThresholdPolicy::Fixed { threshold: 1.0 });
        let report = run(&cohort, &cfg).unwrap();
        assert_eq!(report.users_skipped, 8);
        assert!(report.aggregate.is_none());
    }

    fn manual_cohort() -> Cohort {
        // u0 lacks negatives; u1 has every class.
        let mut reports = Vec::new();
        let labels = [(0, [5, 5, 4, 3, 3, 3, 4, 5]), (1, [1, 2, 3, 3, 4, 5, 1, 4])];
        for (u, raw) in labels {
            for (j, &l) in raw.iter().enumerate() {
                reports.push(Report {
                    report_id: format!("u{u}-{j}"),
                    user_id: format!("u{u}"),
                    raw_label: l,
                    class: ClassMapping::three_class().class_of(l).unwrap(),
                    context: None,
                    features: vec![Some(j as f64), Some(l as f64)],
                });
            }
        }
        let schema = FeatureSchema::new(vec!["a".into(), "b".into()]).unwrap();
        Cohort::new(schema, ClassMapping::three_class(), reports).unwrap()
    }

    #[test]
    fn ulm_skips_users_missing_a_class() {
        let report = run(&manual_cohort(), &config(Protocol::Ulm)).unwrap();
        let u0 = report.user("u0").unwrap();
        assert_eq!(
            u0.status,
            UserStatus::Skipped {
                reason: "class absent: negative".into()
            }
        );
        assert!(report.user("u1").unwrap().is_ok());
        assert!(report.eligibility.is_some());
    }

    #[test]
    fn ulm_min_per_class_is_enforced() {
        let mut cfg = config(Protocol::Ulm);
        cfg.ulm_min_per_class = 3;
        let report = run(&manual_cohort(), &cfg).unwrap();
        let UserStatus::Skipped { reason } = &report.user("u1").unwrap().status else {
            panic!("u1 should be skipped");
        };
        assert_eq!(reason, "too few `neutral` reports: 2 < 3");
    }

    fn pred(context: Option<&str>, truth: usize, predicted: usize) -> Prediction {
        Prediction {
            report_id: String::new(),
            context: context.map(str::to_string),
            truth,
            predicted,
        }
    }

    #[test]
    fn context_breakdown_fixture() {
        let preds = [
            pred(Some("eating"), 0, 0),
            pred(Some("eating"), 1, 0),
            pred(Some("working"), 2, 2),
            pred(None, 1, 1),
        ];
        let b = context_breakdown(&preds).unwrap();
        let names: Vec<&str> = b.groups.iter().map(|g| g.group.as_str()).collect();
        let mut expected = vec![NO_CONTEXT, "eating", "working"];
        expected.sort_unstable();
        assert_eq!(names, expected);
        let eating = b.groups.iter().find(|g| g.group == "eating").unwrap();
        assert_eq!((eating.support, eating.correct, eating.accuracy), (2, 1, 0.5));
        assert_eq!(b.overall.accuracy, 0.75);
        let weighted: f64 = b.groups.iter().map(|g| g.accuracy * g.support as f64).sum::<f64>() / 4.0;
        assert!((weighted - b.overall.accuracy).abs() < 1e-12);
    }

    #[test]
    fn context_breakdown_needs_contexts() {
        assert!(matches!(
            context_breakdown(&[pred(None, 0, 0)]),
            Err(Error::MissingContextColumn)
        ));
    }

    #[test]
    fn injection_plan_nests_and_holds_out() {
        let cohort = cohort(7);
        let cfg = config(Protocol::Plm);
        let is_eating = |p: &usize| cohort.reports()[*p].context.as_deref() == Some("eating");
        let plan = injection_plan(&cohort, "eating", 10, &cfg, 0).unwrap();
        assert!(!plan.train(0).iter().any(is_eating));
        assert_eq!(plan.train(10).iter().filter(|p| is_eating(p)).count(), 10);
        let five = plan.train(5);
        assert!(five.iter().all(|p| plan.train(10).contains(p)));
        assert!(plan.train(10).iter().all(|p| plan.test.binary_search(p).is_err()));
        assert_eq!(plan, injection_plan(&cohort, "eating", 10, &cfg, 0).unwrap());
    }

    #[test]
    fn injection_sweep_rows_and_limits() {
        let cohort = cohort(8);
        let cfg = config(Protocol::Plm);
        let report = injection_sweep(&cohort, "eating", &[0, 5], &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].count, 0);
        assert!(matches!(
            injection_sweep(&cohort, "eating", &[100_000], &cfg),
            Err(Error::InsufficientContextReports { .. })
        ));
        assert!(matches!(
            injection_sweep(&manual_cohort(), "eating", &[0], &cfg),
            Err(Error::MissingContextColumn)
        ));
    }

    #[test]
    fn aggregate_reports_both_spreads() {
        let cohort = cohort(9);
        let report = run(&cohort, &config(Protocol::Hm)).unwrap();
        let agg = report.aggregate.unwrap();
        let means: Vec<f64> = report.users.iter().map(|u| u.summary.unwrap().accuracy.mean).collect();
        let runs: Vec<f64> = report
            .users
            .iter()
            .flat_map(|u| u.repeats.iter().map(|r| r.metrics.accuracy))
            .collect();
        assert!((agg.accuracy.mean - means.iter().sum::<f64>() / means.len() as f64).abs() < 1e-12);
        assert_eq!(agg.accuracy.std_across_users, aggregate_stats(&means).unwrap().std);
        assert_eq!(agg.accuracy.std_across_runs, aggregate_stats(&runs).unwrap().std);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = config(Protocol::Hm);
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.seed += 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}

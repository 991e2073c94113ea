//! Seeded generator of clustered, class-skewed cohorts with context tags.
//!
//! Users are assigned to clusters round-robin. A report's features are
//! `centroid[cluster] + user_offset + class_offset[cluster][class] +
//! context_shift (shifted context only) + noise`, all in units of
//! `noise_std`. Centroid coordinates are Gaussian, scaled so that per
//! feature two centroids differ by about `cluster_separation` within-cluster
//! standard deviations, where the within-cluster spread counts both report
//! noise and the user offsets. Class offsets point in cluster-specific
//! directions, so the same feature pattern can mean different classes in
//! different clusters.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{self, ClassMapping, Cohort, FeatureSchema, Report};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Length of a class offset per unit of `label_signal`, in noise units.
pub const SIGNAL_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_clusters: usize,
    pub n_users: usize,
    pub reports_mean: usize,
    /// Reports per user are uniform on `mean - spread ..= mean + spread`.
    pub reports_spread: usize,
    pub n_features: usize,
    /// Global class priors keyed by three-class name.
    pub class_priors: IndexMap<String, f64>,
    /// Cluster `c` moves `prior_tilt * cos(2 pi c / n_clusters)` of mass
    /// from neutral to positive; the tilts cancel across clusters.
    pub prior_tilt: f64,
    pub cluster_separation: f64,
    pub label_signal: f64,
    pub contexts: IndexMap<String, f64>,
    pub shifted_context: String,
    pub context_shift: f64,
    /// Std of each user's persistent per-feature offset.
    pub user_spread: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_clusters: 4,
            n_users: 60,
            reports_mean: 40,
            reports_spread: 10,
            n_features: 20,
            class_priors: [("positive", 0.52), ("neutral", 0.38), ("negative", 0.10)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            prior_tilt: 0.2,
            cluster_separation: 2.0,
            label_signal: 0.7,
            contexts: [("eating", 0.3), ("working", 0.3), ("resting", 0.4)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            shifted_context: "eating".into(),
            context_shift: 0.5,
            user_spread: 1.2,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

fn check_proportions(name: &str, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut sum = 0.0;
    for v in values {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!("{name} must be non-negative")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} must sum to 1, got {sum}")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.n_users == 0 || self.n_features == 0 {
            return Err(Error::Config(
                "cluster, user and feature counts must be positive".into(),
            ));
        }
        if self.reports_spread >= self.reports_mean {
            return Err(Error::Config("reports_spread must be below reports_mean".into()));
        }
        let mapping = ClassMapping::three_class();
        if self.class_priors.len() != mapping.n_classes()
            || mapping.class_order().iter().any(|c| !self.class_priors.contains_key(c))
        {
            return Err(Error::Config(format!(
                "class_priors must name exactly {:?}",
                mapping.class_order()
            )));
        }
        check_proportions("class_priors", self.class_priors.values().copied())?;
        if self.contexts.is_empty() {
            return Err(Error::Config("at least one context is required".into()));
        }
        check_proportions("contexts", self.contexts.values().copied())?;
        if !self.contexts.contains_key(&self.shifted_context) {
            return Err(Error::Config(format!(
                "shifted_context `{}` is not a context",
                self.shifted_context
            )));
        }
        if !(0.0..=1.0).contains(&self.label_signal) {
            return Err(Error::Config("label_signal must be in [0, 1]".into()));
        }
        for (name, v) in [
            ("cluster_separation", self.cluster_separation),
            ("prior_tilt", self.prior_tilt),
            ("user_spread", self.user_spread),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !self.context_shift.is_finite() {
            return Err(Error::Config("context_shift must be finite".into()));
        }
        if self.noise_std == 0.0 {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        for c in 0..self.n_clusters {
            if self.cluster_priors(c).iter().any(|&p| p < 0.0) {
                return Err(Error::Config("prior_tilt pushes a cluster prior below zero".into()));
            }
        }
        Ok(())
    }

    /// Class priors of cluster `c` in three-class order.
    pub fn cluster_priors(&self, c: usize) -> Vec<f64> {
        let mapping = ClassMapping::three_class();
        let mut p: Vec<f64> = mapping.class_order().iter().map(|k| self.class_priors[k]).collect();
        let t = self.prior_tilt * (2.0 * std::f64::consts::PI * c as f64 / self.n_clusters as f64).cos();
        let pos = mapping.class_index("positive").unwrap_or(2);
        let neu = mapping.class_index("neutral").unwrap_or(1);
        p[pos] += t;
        p[neu] -= t;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub user_clusters: IndexMap<String, usize>,
    pub cluster_priors: Vec<Vec<f64>>,
    /// Per report: log prior + Gaussian log-likelihood of each class given
    /// the report's user and context, up to a shared constant.
    pub report_logits: IndexMap<String, Vec<f64>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_cohort(config: &GeneratorConfig) -> Result<(Cohort, GroundTruth)> {
    config.validate()?;
    let mapping = ClassMapping::three_class();
    let n_classes = mapping.n_classes();
    let nf = config.n_features;
    let sigma = config.noise_std;
    let mut rng = seed::rng_for(seed::mix(config.seed), Stream::Generate);

    let within = sigma * (1.0 + config.user_spread * config.user_spread).sqrt();
    let centroid_scale = config.cluster_separation * within / std::f64::consts::SQRT_2;
    let centroids: Vec<Vec<f64>> = (0..config.n_clusters)
        .map(|_| (0..nf).map(|_| centroid_scale * normal(&mut rng)).collect())
        .collect();
    let offset_len = config.label_signal * SIGNAL_SCALE * sigma;
    let class_offsets: Vec<Vec<Vec<f64>>> = (0..config.n_clusters)
        .map(|_| {
            (0..n_classes)
                .map(|_| unit_vector(&mut rng, nf).into_iter().map(|x| x * offset_len).collect())
                .collect()
        })
        .collect();
    let shift: Vec<f64> = (0..nf)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * config.context_shift * sigma)
        .collect();
    let priors: Vec<Vec<f64>> = (0..config.n_clusters).map(|c| config.cluster_priors(c)).collect();
    let class_dists: Vec<WeightedIndex<f64>> = priors
        .iter()
        .map(|p| WeightedIndex::new(p).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;
    let context_names: Vec<&String> = config.contexts.keys().collect();
    let context_dist =
        WeightedIndex::new(config.contexts.values().copied()).map_err(|e| Error::Config(e.to_string()))?;

    let width = (config.n_users - 1).to_string().len().max(3);
    let mut reports = Vec::new();
    let mut user_clusters = IndexMap::new();
    let mut report_logits = IndexMap::new();
    for u in 0..config.n_users {
        let cluster = u % config.n_clusters;
        let user_id = format!("u{u:0width$}");
        user_clusters.insert(user_id.clone(), cluster);
        let user_offset: Vec<f64> = (0..nf).map(|_| config.user_spread * sigma * normal(&mut rng)).collect();
        let n_reports =
            rng.random_range(config.reports_mean - config.reports_spread..=config.reports_mean + config.reports_spread);
        for j in 0..n_reports {
            let class = class_dists[cluster].sample(&mut rng);
            let context = context_names[context_dist.sample(&mut rng)].clone();
            let shifted = context == config.shifted_context;
            // Mean of the report's features before the class offset.
            let base: Vec<f64> = (0..nf)
                .map(|f| centroids[cluster][f] + user_offset[f] + if shifted { shift[f] } else { 0.0 })
                .collect();
            let features: Vec<f64> = (0..nf)
                .map(|f| base[f] + class_offsets[cluster][class][f] + sigma * normal(&mut rng))
                .collect();
            let logits: Vec<f64> = (0..n_classes)
                .map(|k| {
                    let sq: f64 = (0..nf)
                        .map(|f| (features[f] - base[f] - class_offsets[cluster][k][f]).powi(2))
                        .sum();
                    priors[cluster][k].ln() - sq / (2.0 * sigma * sigma)
                })
                .collect();
            let raw_label = match mapping.class_order()[class].as_str() {
                "negative" => 1 + rng.random_range(0..2u8),
                "neutral" => 3,
                _ => 4 + rng.random_range(0..2u8),
            };
            let report_id = format!("{user_id}-{j:03}");
            report_logits.insert(report_id.clone(), logits);
            reports.push(Report {
                report_id,
                user_id: user_id.clone(),
                raw_label,
                class,
                context: Some(context),
                features: features.into_iter().map(Some).collect(),
            });
        }
    }
    let width = (nf - 1).to_string().len().max(2);
    let schema = FeatureSchema::new((0..nf).map(|f| format!("f{f:0width$}")).collect())?;
    let cohort = Cohort::new(schema, mapping, reports)?;
    Ok((
        cohort,
        GroundTruth {
            user_clusters,
            cluster_priors: priors,
            report_logits,
        },
    ))
}

/// Write `cohort` in the canonical CSV format.
pub fn emit_csv(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    cohort::write_csv(cohort, BufWriter::new(file))
}

pub fn write_ground_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), truth)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{load_csv, IngestOptions};
    use crate::profile::{aggregate_users, cosine_similarity, fit_scaler, AggregateOptions, ScalingMode};

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_users: 12,
            reports_mean: 20,
            reports_spread: 5,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let (a, ta) = generate_cohort(&small(3)).unwrap();
        let (b, tb) = generate_cohort(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_cohort(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shape_and_round_robin() {
        let (cohort, truth) = generate_cohort(&small(1)).unwrap();
        assert_eq!(cohort.n_users(), 12);
        assert_eq!(cohort.schema().feature_count(), 20);
        for (i, (user, &cluster)) in truth.user_clusters.iter().enumerate() {
            assert_eq!(cluster, i % 4);
            let n = cohort.user_reports(user).unwrap().len();
            assert!((15..=25).contains(&n));
        }
        assert_eq!(truth.report_logits.len(), cohort.reports().len());
        for r in cohort.reports() {
            let expected = ClassMapping::three_class().class_of(r.raw_label).unwrap();
            assert_eq!(r.class, expected);
        }
    }

    #[test]
    fn class_fractions_near_priors() {
        for seed in 0..3 {
            let (cohort, _) = generate_cohort(&GeneratorConfig {
                seed,
                ..GeneratorConfig::default()
            })
            .unwrap();
            let n = cohort.reports().len() as f64;
            let mut counts = [0usize; 3];
            for r in cohort.reports() {
                counts[r.class] += 1;
            }
            for (k, prior) in [(0, 0.10), (1, 0.38), (2, 0.52)] {
                assert!(
                    (counts[k] as f64 / n - prior).abs() <= 0.05,
                    "seed {seed} class {k}: {counts:?}"
                );
            }
        }
    }

    #[test]
    fn cluster_priors_cancel() {
        let cfg = GeneratorConfig::default();
        for k in 0..3 {
            let mean: f64 = (0..4).map(|c| cfg.cluster_priors(c)[k]).sum::<f64>() / 4.0;
            let global = [0.10, 0.38, 0.52][k];
            assert!((mean - global).abs() < 1e-12);
        }
    }

    #[test]
    fn within_cluster_similarity_exceeds_cross() {
        let mut gap = 0.0;
        for seed in 0..5 {
            let (cohort, truth) = generate_cohort(&GeneratorConfig {
                seed,
                ..GeneratorConfig::default()
            })
            .unwrap();
            let scaler = fit_scaler(&cohort, ScalingMode::MinMax);
            let sim = cosine_similarity(&aggregate_users(&cohort, &scaler, AggregateOptions::default()));
            let clusters: Vec<usize> = truth.user_clusters.values().copied().collect();
            let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
            for i in 0..sim.len() {
                for j in 0..sim.len() {
                    if i == j {
                        continue;
                    }
                    if clusters[i] == clusters[j] {
                        within += sim.get(i, j);
                        nw += 1;
                    } else {
                        cross += sim.get(i, j);
                        nc += 1;
                    }
                }
            }
            gap += within / nw as f64 - cross / nc as f64;
        }
        assert!(gap / 5.0 >= 0.02, "mean gap {}", gap / 5.0);
    }

    #[test]
    fn csv_round_trip() {
        let (cohort, _) = generate_cohort(&small(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        emit_csv(&cohort, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), cohort.reports().len() + 1);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 20 + 4);
        let back = load_csv(&path, ClassMapping::three_class(), &IngestOptions::default()).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = GeneratorConfig::default();
        cfg.contexts.insert("eating".into(), 0.5);
        assert!(generate_cohort(&cfg).is_err());
        let cfg = GeneratorConfig {
            label_signal: 1.5,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GeneratorConfig {
            shifted_context: "sleeping".into(),
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GeneratorConfig {
            prior_tilt: 0.5,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

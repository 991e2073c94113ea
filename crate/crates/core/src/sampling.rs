//! Seeded train/test split construction for the four protocols and SMOTE
//! oversampling of training rows.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::community::Community;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Guards `floor(fraction * n)` against representation error, so that
/// `0.7 * 10` yields 7.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Plm,
    Hm,
    Ulm,
    Cbm,
}

impl Protocol {
    /// Tag mixed into every task seed.
    pub fn tag(self) -> u64 {
        match self {
            Protocol::Plm => 1,
            Protocol::Hm => 2,
            Protocol::Ulm => 3,
            Protocol::Cbm => 4,
        }
    }

    pub fn all() -> [Protocol; 4] {
        [Protocol::Plm, Protocol::Hm, Protocol::Ulm, Protocol::Cbm]
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Plm => "plm",
            Protocol::Hm => "hm",
            Protocol::Ulm => "ulm",
            Protocol::Cbm => "cbm",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plm" => Ok(Protocol::Plm),
            "hm" => Ok(Protocol::Hm),
            "ulm" => Ok(Protocol::Ulm),
            "cbm" => Ok(Protocol::Cbm),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_population_fraction")]
    pub population_fraction: f64,
    #[serde(default = "default_target_train_fraction")]
    pub target_train_fraction: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Stratify the target's split by class when every present class has
    /// at least two reports.
    #[serde(default = "default_true")]
    pub stratify: bool,
    /// Master seed; protocol runners set it from their own config.
    #[serde(skip)]
    pub seed: u64,
}

fn default_population_fraction() -> f64 {
    0.9
}
fn default_target_train_fraction() -> f64 {
    0.7
}
fn default_repeats() -> usize {
    5
}
fn default_true() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            population_fraction: 0.9,
            target_train_fraction: 0.7,
            repeats: 5,
            stratify: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("population_fraction", self.population_fraction),
            ("target_train_fraction", self.target_train_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if self.target_train_fraction >= 1.0 {
            return Err(Error::Config("target_train_fraction must leave a test share".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        Ok(())
    }
}

/// Report positions (indices into `Cohort::reports`), each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// The target's own rows within `train`.
    pub target_train: Vec<usize>,
}

impl Split {
    pub fn is_disjoint(&self) -> bool {
        // Both sides are sorted.
        let (mut i, mut j) = (0, 0);
        while i < self.train.len() && j < self.test.len() {
            match self.train[i].cmp(&self.test[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    pub fn to_ids(&self, cohort: &Cohort) -> SplitIds {
        let ids = |v: &[usize]| v.iter().map(|&p| cohort.reports()[p].report_id.clone()).collect();
        SplitIds {
            train_ids: ids(&self.train),
            test_ids: ids(&self.test),
        }
    }
}

/// Audit form of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

pub fn floor_fraction(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + FLOOR_EPS).floor() as usize
}

/// Split the target's report positions into (train, test).
pub fn partition_target(
    cohort: &Cohort,
    positions: &[usize],
    train_fraction: f64,
    stratify: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "target has {n} report(s), need at least 2"
        )));
    }
    let want = floor_fraction(train_fraction, n).clamp(1, n - 1);
    let k = cohort.mapping().n_classes();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &p in positions {
        strata[cohort.reports()[p].class].push(p);
    }
    let present: Vec<usize> = (0..k).filter(|&c| !strata[c].is_empty()).collect();
    let stratified = stratify && present.iter().all(|&c| strata[c].len() >= 2);

    let mut train = Vec::with_capacity(want);
    let mut test = Vec::with_capacity(n - want);
    if stratified {
        let quotas = apportion(
            &present.iter().map(|&c| strata[c].len()).collect::<Vec<_>>(),
            train_fraction,
            want,
        );
        for (&c, quota) in present.iter().zip(quotas) {
            let stratum = &mut strata[c];
            stratum.shuffle(rng);
            train.extend_from_slice(&stratum[..quota]);
            test.extend_from_slice(&stratum[quota..]);
        }
    } else {
        let mut all = positions.to_vec();
        all.shuffle(rng);
        train.extend_from_slice(&all[..want]);
        test.extend_from_slice(&all[want..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Largest-remainder apportionment of `total` training slots over strata,
/// keeping at least one train and one test row per stratum (sizes >= 2).
fn apportion(sizes: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let ideal: Vec<f64> = sizes.iter().map(|&s| fraction * s as f64).collect();
    let mut quota: Vec<usize> = sizes
        .iter()
        .zip(&ideal)
        .map(|(&s, &x)| ((x + FLOOR_EPS).floor() as usize).clamp(1, s - 1))
        .collect();
    let remainder = |i: usize, q: &[usize]| ideal[i] - q[i] as f64;
    loop {
        let sum: usize = quota.iter().sum();
        if sum < total {
            let pick = (0..sizes.len())
                .filter(|&i| quota[i] < sizes[i] - 1)
                .max_by(|&a, &b| remainder(a, &quota).total_cmp(&remainder(b, &quota)).then(b.cmp(&a)));
            match pick {
                Some(i) => quota[i] += 1,
                None => break,
            }
        } else if sum > total {
            let pick = (0..sizes.len())
                .filter(|&i| quota[i] > 1)
                .min_by(|&a, &b| remainder(a, &quota).total_cmp(&remainder(b, &quota)).then(a.cmp(&b)));
            match pick {
                Some(i) => quota[i] -= 1,
                None => break,
            }
        } else {
            break;
        }
    }
    quota
}

/// Row-level sample without replacement of `fraction` of `pool`.
pub fn sample_pool(pool: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    let k = floor_fraction(fraction, pool.len()).clamp(1, pool.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Build the split for one (protocol, target, repeat). All randomness comes
/// from the task seed of `(spec.seed, protocol, target ordinal, repeat)`:
/// the target partition is drawn first, then the population sample.
pub fn make_split(
    cohort: &Cohort,
    protocol: Protocol,
    target: &str,
    community: Option<&Community>,
    spec: &SplitSpec,
    repeat: usize,
) -> Result<Split> {
    let ordinal = cohort
        .user_ordinal(target)
        .ok_or_else(|| Error::UnknownUser(target.to_string()))?;
    let task = seed::task_seed(spec.seed, protocol.tag(), ordinal as u64, repeat as u64);
    let mut rng = seed::rng_for(task, Stream::Split);
    let own = cohort.user_reports(target)?;
    let (target_train, test) = partition_target(cohort, own, spec.target_train_fraction, spec.stratify, &mut rng)?;

    let pool: Vec<usize> = match protocol {
        Protocol::Ulm => Vec::new(),
        Protocol::Plm | Protocol::Hm => (0..cohort.reports().len())
            .filter(|&p| cohort.reports()[p].user_id != target)
            .collect(),
        Protocol::Cbm => {
            let community = community
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::EmptyCommunity(target.to_string()))?;
            if community.members.iter().any(|m| m == target) {
                return Err(Error::Config("community contains its own target".into()));
            }
            let mut pool = Vec::new();
            for member in &community.members {
                pool.extend_from_slice(cohort.user_reports(member)?);
            }
            pool.sort_unstable();
            pool
        }
    };
    let mut train = sample_pool(&pool, spec.population_fraction, &mut rng);
    let target_train = match protocol {
        Protocol::Plm => Vec::new(),
        _ => target_train,
    };
    train.extend_from_slice(&target_train);
    train.sort_unstable();
    Ok(Split {
        train,
        test,
        target_train,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoteConfig {
    #[serde(default = "default_k")]
    pub k_neighbors: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_k() -> usize {
    5
}

impl Default for SmoteConfig {
    fn default() -> Self {
        SmoteConfig {
            k_neighbors: 5,
            enabled: true,
        }
    }
}

/// Feature rows with class indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledRows {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledRows {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowOrigin {
    Original(usize),
    /// `base + lambda * (neighbor - base)`.
    Synthetic {
        base: usize,
        neighbor: usize,
        lambda: f64,
    },
    /// Copy of a lone minority row with tiny Gaussian jitter.
    Jittered {
        base: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Oversampled {
    pub rows: LabeledRows,
    pub origin: Vec<RowOrigin>,
}

/// Standard deviation of the jitter applied when a class has one row.
pub const SINGLETON_JITTER: f64 = 1e-6;

/// Raise every present class to the majority count. Originals come first,
/// unchanged and in order; synthetic rows follow, class by class.
pub fn smote_oversample(rows: &LabeledRows, n_classes: usize, config: &SmoteConfig, seed: u64) -> Oversampled {
    let mut out = rows.clone();
    let mut origin: Vec<RowOrigin> = (0..rows.len()).map(RowOrigin::Original).collect();
    if !config.enabled || rows.is_empty() {
        return Oversampled { rows: out, origin };
    }
    let counts = rows.class_counts(n_classes);
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut rng = seed::rng_for(seed, Stream::Smote);
    let jitter = Normal::new(0.0, SINGLETON_JITTER).expect("valid sigma");

    for class in 0..n_classes {
        let n = counts[class];
        if n == 0 || n == target {
            continue;
        }
        let members: Vec<usize> = (0..rows.len()).filter(|&i| rows.labels[i] == class).collect();
        let deficit = target - n;
        if n == 1 {
            let base = members[0];
            for _ in 0..deficit {
                out.features.push(
                    rows.features[base]
                        .iter()
                        .map(|x| x + jitter.sample(&mut rng))
                        .collect(),
                );
                out.labels.push(class);
                origin.push(RowOrigin::Jittered { base });
            }
            continue;
        }
        let k = config.k_neighbors.max(1).min(n - 1);
        let dim = rows.features[members[0]].len();
        let flat: Vec<f64> = members.iter().flat_map(|&m| rows.features[m].iter().copied()).collect();
        let mut neighbors: Vec<Option<Vec<usize>>> = vec![None; n];
        for _ in 0..deficit {
            let b = rng.random_range(0..n);
            let list = neighbors[b].get_or_insert_with(|| nearest_neighbors(&flat, dim, &members, b, k));
            let nb = list[rng.random_range(0..k)];
            let lambda: f64 = rng.random();
            let (x, y) = (&rows.features[members[b]], &rows.features[nb]);
            out.features
                .push(x.iter().zip(y).map(|(a, c)| a + lambda * (c - a)).collect());
            out.labels.push(class);
            origin.push(RowOrigin::Synthetic {
                base: members[b],
                neighbor: nb,
                lambda,
            });
        }
    }
    Oversampled { rows: out, origin }
}

/// The `k` same-class rows closest to `members[b]` (Euclidean), nearest
/// first, ties by row index. `flat` holds the members' features row-major.
fn nearest_neighbors(flat: &[f64], dim: usize, members: &[usize], b: usize, k: usize) -> Vec<usize> {
    let x = &flat[b * dim..(b + 1) * dim];
    // Sorted (distance, row) of the best k seen so far.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, (y, &m)) in flat.chunks_exact(dim).zip(members).enumerate() {
        if i == b {
            continue;
        }
        let d: f64 = y.iter().zip(x).map(|(a, c)| (a - c) * (a - c)).sum();
        let cand = (d, m);
        if best.len() == k && (d, m) >= *best.last().expect("k > 0") {
            continue;
        }
        let pos = best.partition_point(|e| e.0.total_cmp(&cand.0).then(e.1.cmp(&cand.1)).is_lt());
        best.insert(pos, cand);
        best.truncate(k);
    }
    best.into_iter().map(|(_, m)| m).collect()
}

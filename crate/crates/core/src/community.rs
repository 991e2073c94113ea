//! Threshold-based community detection over a similarity matrix.
//!
//! A community is a per-target neighborhood: every other user whose stored
//! similarity to the target is at least the threshold.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::SimilarityMatrix;

/// Strictly increasing thresholds in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidGrid("grid is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidThreshold(*v));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("values must be strictly increasing".into()));
        }
        Ok(ThresholdGrid(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Parse a comma-separated list such as `0,0.5,0.9`.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidGrid(format!("`{s}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

impl Default for ThresholdGrid {
    /// 0.0..=0.8 in steps of 0.1, then 0.85, 0.90, 0.95..=0.99.
    fn default() -> Self {
        let mut v: Vec<f64> = (0..=8).map(|i| i as f64 / 10.0).collect();
        v.extend([0.85, 0.90, 0.95, 0.96, 0.97, 0.98, 0.99]);
        ThresholdGrid(v)
    }
}

impl TryFrom<Vec<f64>> for ThresholdGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ThresholdGrid::new(v)
    }
}

impl From<ThresholdGrid> for Vec<f64> {
    fn from(g: ThresholdGrid) -> Self {
        g.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Community {
    pub target: String,
    pub threshold: f64,
    /// Members in matrix order.
    pub members: Vec<String>,
}

impl Community {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// How a CBM run picks the threshold for each target user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThresholdPolicy {
    Fixed {
        threshold: f64,
    },
    /// Sweep the grid and keep the accuracy-maximizing threshold.
    PerUserMax {
        #[serde(default)]
        grid: ThresholdGrid,
        #[serde(default)]
        selection: Selection,
    },
    /// A fixed threshold taken as the mean of other users' best thresholds.
    MaxAvg {
        threshold: f64,
    },
}

/// Which data the per-user threshold search scores candidates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Score on the test split (optimistic).
    #[default]
    Test,
    /// Score on a slice held out from the target's training rows, then refit.
    Validation,
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ThresholdPolicy::Fixed { threshold } | ThresholdPolicy::MaxAvg { threshold } => {
                if !(0.0..=1.0).contains(threshold) {
                    return Err(Error::InvalidThreshold(*threshold));
                }
            }
            ThresholdPolicy::PerUserMax { grid, .. } => {
                ThresholdGrid::new(grid.values().to_vec())?;
            }
        }
        Ok(())
    }

    /// Parse `fixed:<th>`, `max-avg:<th>`, `per-user-max` or
    /// `per-user-max-validation`.
    pub fn parse(text: &str, grid: Option<ThresholdGrid>) -> Result<Self> {
        let (kind, arg) = match text.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (text, None),
        };
        let threshold = || -> Result<f64> {
            let th = arg
                .ok_or_else(|| Error::Config(format!("policy `{kind}` needs a threshold")))?
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold in `{text}`")))?;
            if !(0.0..=1.0).contains(&th) {
                return Err(Error::InvalidThreshold(th));
            }
            Ok(th)
        };
        match kind {
            "fixed" => Ok(ThresholdPolicy::Fixed {
                threshold: threshold()?,
            }),
            "max-avg" => Ok(ThresholdPolicy::MaxAvg {
                threshold: threshold()?,
            }),
            "per-user-max" | "per-user-max-validation" => Ok(ThresholdPolicy::PerUserMax {
                grid: grid.unwrap_or_default(),
                selection: if kind == "per-user-max" {
                    Selection::Test
                } else {
                    Selection::Validation
                },
            }),
            other => Err(Error::Config(format!("unknown threshold policy `{other}`"))),
        }
    }
}

pub fn detect_community(matrix: &SimilarityMatrix, target: &str, threshold: f64) -> Result<Community> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidThreshold(threshold));
    }
    let t = matrix.index_of(target)?;
    let members = matrix
        .row(t)
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != t && s >= threshold)
        .map(|(j, _)| matrix.user_ids()[j].clone())
        .collect();
    Ok(Community {
        target: target.to_string(),
        threshold,
        members,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunitySweep {
    pub thresholds: Vec<f64>,
    pub user_ids: Vec<String>,
    /// `sizes[user][threshold]`.
    pub sizes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub threshold: f64,
    pub mean_community_size: f64,
    /// Users whose community is non-empty at this threshold.
    pub modelable_users: usize,
}

impl CommunitySweep {
    pub fn summary(&self) -> Vec<SweepSummaryRow> {
        let n = self.user_ids.len().max(1) as f64;
        self.thresholds
            .iter()
            .enumerate()
            .map(|(k, &threshold)| SweepSummaryRow {
                threshold,
                mean_community_size: self.sizes.iter().map(|r| r[k] as f64).sum::<f64>() / n,
                modelable_users: self.sizes.iter().filter(|r| r[k] > 0).count(),
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["user_id".to_string()];
        header.extend(self.thresholds.iter().map(|t| t.to_string()));
        w.write_record(&header)?;
        for (user, row) in self.user_ids.iter().zip(&self.sizes) {
            let mut rec = vec![user.clone()];
            rec.extend(row.iter().map(|s| s.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
        Ok(())
    }
}

pub fn sweep_communities(matrix: &SimilarityMatrix, grid: &ThresholdGrid) -> CommunitySweep {
    let n = matrix.len();
    let sizes = (0..n)
        .map(|i| {
            let mut others: Vec<f64> = matrix
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &s)| s)
                .collect();
            others.sort_by(f64::total_cmp);
            // Count of values >= th via binary search on the sorted row.
            grid.values()
                .iter()
                .map(|&th| others.len() - others.partition_point(|&s| s < th))
                .collect()
        })
        .collect();
    CommunitySweep {
        thresholds: grid.values().to_vec(),
        user_ids: matrix.user_ids().to_vec(),
        sizes,
    }
}

/// Mean of the per-user accuracy-maximizing thresholds; the cold-start
/// threshold for a new user.
pub fn max_avg_threshold(per_user_best: &IndexMap<String, f64>) -> Result<f64> {
    if per_user_best.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(per_user_best.values().sum::<f64>() / per_user_best.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, seed: u64) -> SimilarityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![vec![1.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                // Coarse values so that exact boundary hits are common.
                let s = rng.random_range(0..=20) as f64 / 20.0;
                v[i][j] = s;
                v[j][i] = s;
            }
        }
        SimilarityMatrix::from_values((0..n).map(|i| format!("u{i}")).collect(), v).unwrap()
    }

    #[test]
    fn inclusive_filter() {
        let ids = ["T", "B", "C", "D"].map(String::from).to_vec();
        let m = SimilarityMatrix::from_values(
            ids,
            vec![
                vec![1.0, 0.90, 0.84, 0.85],
                vec![0.90, 1.0, 0.5, 0.5],
                vec![0.84, 0.5, 1.0, 0.5],
                vec![0.85, 0.5, 0.5, 1.0],
            ],
        )
        .unwrap();
        assert_eq!(detect_community(&m, "T", 0.85).unwrap().members, ["B", "D"]);
        assert_eq!(detect_community(&m, "T", 0.0).unwrap().members, ["B", "C", "D"]);
        assert!(detect_community(&m, "T", 0.95).unwrap().is_empty());
        assert!(matches!(detect_community(&m, "X", 0.5), Err(Error::UnknownUser(_))));
        assert!(matches!(
            detect_community(&m, "T", 1.5),
            Err(Error::InvalidThreshold(_))
        ));
    }

    #[test]
    fn detect_matches_linear_scan() {
        let m = random_matrix(40, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = rng.random_range(0..40);
            let th = rng.random_range(0.0..=1.0);
            let got = detect_community(&m, &format!("u{t}"), th).unwrap().members;
            let mut want = Vec::new();
            for j in 0..40 {
                if j != t && m.get(t, j) >= th {
                    want.push(format!("u{j}"));
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn sweep_matches_cells() {
        let m = random_matrix(25, 3);
        let grid = ThresholdGrid::default();
        let sweep = sweep_communities(&m, &grid);
        for (i, user) in m.user_ids().iter().enumerate() {
            assert_eq!(sweep.sizes[i][0], 24);
            for (k, &th) in grid.values().iter().enumerate() {
                assert_eq!(sweep.sizes[i][k], detect_community(&m, user, th).unwrap().len());
                if k > 0 {
                    assert!(sweep.sizes[i][k] <= sweep.sizes[i][k - 1]);
                }
            }
        }
        let summary = sweep.summary();
        assert_eq!(summary[0].modelable_users, 25);
        assert_eq!(summary[0].mean_community_size, 24.0);
    }

    #[test]
    fn grid_validation() {
        assert!(ThresholdGrid::new(vec![]).is_err());
        assert!(ThresholdGrid::new(vec![0.5, 0.5]).is_err());
        assert!(ThresholdGrid::new(vec![0.6, 0.5]).is_err());
        assert!(ThresholdGrid::new(vec![-0.1]).is_err());
        assert_eq!(ThresholdGrid::parse("0, 0.5,0.9").unwrap().values(), [0.0, 0.5, 0.9]);
        let d = ThresholdGrid::default();
        assert_eq!(d.values().len(), 16);
        assert!(d.values().contains(&0.85) && d.values().contains(&0.99));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            ThresholdPolicy::parse("fixed:0.9", None).unwrap(),
            ThresholdPolicy::Fixed { threshold: 0.9 }
        );
        assert!(ThresholdPolicy::parse("fixed", None).is_err());
        assert!(ThresholdPolicy::parse("max-avg:1.2", None).is_err());
        assert!(matches!(
            ThresholdPolicy::parse("per-user-max-validation", None).unwrap(),
            ThresholdPolicy::PerUserMax {
                selection: Selection::Validation,
                ..
            }
        ));
    }

    #[test]
    fn max_avg() {
        let m: IndexMap<String, f64> = [("A".to_string(), 0.8), ("B".to_string(), 0.8)].into_iter().collect();
        assert_eq!(max_avg_threshold(&m).unwrap(), 0.8);
        assert!(matches!(max_avg_threshold(&IndexMap::new()), Err(Error::EmptyInput)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: IndexMap<String, f64> = (0..10).map(|i| (format!("u{i}"), rng.random::<f64>())).collect();
        let mut total = 0.0;
        for v in m.values() {
            total += v;
        }
        assert!((max_avg_threshold(&m).unwrap() - total / 10.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn monotone_containment(seed in any::<u64>(), t in 0usize..15, a in 0u32..=20, b in 0u32..=20) {
            let m = random_matrix(15, seed);
            let (lo, hi) = (a.min(b) as f64 / 20.0, a.max(b) as f64 / 20.0);
            let user = format!("u{t}");
            let wide = detect_community(&m, &user, lo).unwrap();
            let narrow = detect_community(&m, &user, hi).unwrap();
            prop_assert!(narrow.members.iter().all(|u| wide.members.contains(u)));
            prop_assert!(!wide.members.contains(&user));
            for (j, id) in m.user_ids().iter().enumerate() {
                if j != t && m.get(t, j) == hi {
                    prop_assert!(narrow.members.contains(id));
                }
            }
        }
    }
}

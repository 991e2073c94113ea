//! Per-feature scaling, mean-based user aggregation and the normalized
//! cosine similarity matrix between user profiles.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    #[default]
    MinMax,
    ZScore,
    None,
}

impl FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(ScalingMode::MinMax),
            "zscore" => Ok(ScalingMode::ZScore),
            "none" => Ok(ScalingMode::None),
            other => Err(Error::Config(format!("unknown scaling mode `{other}`"))),
        }
    }
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingMode::MinMax => "minmax",
            ScalingMode::ZScore => "zscore",
            ScalingMode::None => "none",
        })
    }
}

/// Learned per-feature scaling. For `MinMax`, `(offset, spread)` are
/// `(min, max - min)`; for `ZScore`, `(mean, std)`; for `None`, `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub mode: ScalingMode,
    pub offset: Vec<f64>,
    pub spread: Vec<f64>,
    /// Features with zero spread (or no observed values); they scale to 0.
    pub constant: Vec<bool>,
}

impl ScalingParams {
    /// Fit over the non-missing entries of each column of `rows`.
    pub fn fit<'a, I>(rows: I, n_features: usize, mode: ScalingMode) -> Self
    where
        I: IntoIterator<Item = &'a [Option<f64>]>,
    {
        let mut min = vec![f64::INFINITY; n_features];
        let mut max = vec![f64::NEG_INFINITY; n_features];
        let mut count = vec![0usize; n_features];
        let mut sum = vec![0.0; n_features];
        let mut sum_sq = vec![0.0; n_features];
        let mut seen_rows: Vec<&[Option<f64>]> = Vec::new();
        for row in rows {
            for (f, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    min[f] = min[f].min(v);
                    max[f] = max[f].max(v);
                    count[f] += 1;
                    sum[f] += v;
                }
            }
            if mode == ScalingMode::ZScore {
                seen_rows.push(row);
            }
        }
        let mut offset = vec![0.0; n_features];
        let mut spread = vec![1.0; n_features];
        let mut constant = vec![false; n_features];
        for f in 0..n_features {
            if count[f] == 0 {
                constant[f] = true;
                continue;
            }
            match mode {
                ScalingMode::MinMax => {
                    offset[f] = min[f];
                    spread[f] = max[f] - min[f];
                    constant[f] = spread[f] == 0.0;
                }
                ScalingMode::ZScore => {
                    let mean = sum[f] / count[f] as f64;
                    offset[f] = mean;
                    for row in &seen_rows {
                        if let Some(v) = row[f] {
                            sum_sq[f] += (v - mean).powi(2);
                        }
                    }
                    spread[f] = (sum_sq[f] / count[f] as f64).sqrt();
                    constant[f] = spread[f] == 0.0;
                }
                ScalingMode::None => {
                    constant[f] = max[f] == min[f];
                }
            }
        }
        ScalingParams {
            mode,
            offset,
            spread,
            constant,
        }
    }

    pub fn n_features(&self) -> usize {
        self.offset.len()
    }

    pub fn scale(&self, feature: usize, value: f64) -> f64 {
        match self.mode {
            ScalingMode::None => value,
            _ if self.constant[feature] => 0.0,
            _ => (value - self.offset[feature]) / self.spread[feature],
        }
    }

    pub fn scale_row(&self, row: &[Option<f64>]) -> Vec<Option<f64>> {
        row.iter()
            .enumerate()
            .map(|(f, v)| v.map(|x| self.scale(f, x)))
            .collect()
    }
}

pub fn fit_scaler(cohort: &Cohort, mode: ScalingMode) -> ScalingParams {
    ScalingParams::fit(
        cohort.reports().iter().map(|r| r.features.as_slice()),
        cohort.schema().feature_count(),
        mode,
    )
}

/// Median of the non-missing values; `None` if there are none.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Column medians over the non-missing entries of already-scaled rows,
/// 0 for all-missing columns.
pub fn column_medians<'a, I>(rows: I, n_features: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [Option<f64>]>,
{
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n_features];
    for row in rows {
        for (f, v) in row.iter().enumerate() {
            if let Some(v) = v {
                columns[f].push(*v);
            }
        }
    }
    columns.iter_mut().map(|c| median(c).unwrap_or(0.0)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Append per-class label fractions to each profile.
    #[serde(default)]
    pub include_label_fractions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfileMatrix {
    pub user_ids: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major `|U| x columns`.
    pub values: Vec<Vec<f64>>,
}

/// Mean of each user's scaled non-missing values per feature. A user with
/// no observed value for a feature gets the cohort-wide scaled median.
pub fn aggregate_users(cohort: &Cohort, scaler: &ScalingParams, options: AggregateOptions) -> UserProfileMatrix {
    let n_features = cohort.schema().feature_count();
    let scaled: Vec<Vec<Option<f64>>> = cohort.reports().iter().map(|r| scaler.scale_row(&r.features)).collect();
    let medians = column_medians(scaled.iter().map(Vec::as_slice), n_features);
    let n_classes = cohort.mapping().n_classes();

    let mut values = Vec::with_capacity(cohort.n_users());
    for user in cohort.users() {
        let positions = cohort.user_reports(user).expect("indexed user");
        let mut sum = vec![0.0; n_features];
        let mut count = vec![0usize; n_features];
        for &pos in positions {
            for (f, v) in scaled[pos].iter().enumerate() {
                if let Some(v) = v {
                    sum[f] += v;
                    count[f] += 1;
                }
            }
        }
        let mut row: Vec<f64> = (0..n_features)
            .map(|f| {
                if count[f] == 0 {
                    medians[f]
                } else {
                    sum[f] / count[f] as f64
                }
            })
            .collect();
        if options.include_label_fractions {
            let mut classes = vec![0usize; n_classes];
            for &pos in positions {
                classes[cohort.reports()[pos].class] += 1;
            }
            row.extend(classes.iter().map(|&c| c as f64 / positions.len() as f64));
        }
        values.push(row);
    }

    let mut columns = cohort.schema().names().to_vec();
    if options.include_label_fractions {
        columns.extend(cohort.mapping().class_order().iter().map(|c| format!("frac_{c}")));
    }
    UserProfileMatrix {
        user_ids: cohort.user_ids(),
        columns,
        values,
    }
}

/// Pairwise similarities on the [0, 1] scale: `(cos + 1) / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    user_ids: Vec<String>,
    /// Row-major `|U| x |U|`.
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Build from raw stored values, checking shape, range and symmetry.
    pub fn from_values(user_ids: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = user_ids.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(Error::LengthMismatch(n, values.len()));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i][j];
                if !(0.0..=1.0).contains(&v) || (v - values[j][i]).abs() > 1e-12 {
                    return Err(Error::Config(format!("invalid similarity at ({i}, {j})")));
                }
            }
        }
        Ok(SimilarityMatrix {
            user_ids,
            values: values.into_iter().flatten().collect(),
        })
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn index_of(&self, user: &str) -> Result<usize> {
        self.user_ids
            .iter()
            .position(|u| u == user)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.values[i * n..(i + 1) * n]
    }
}

pub fn cosine_similarity(profiles: &UserProfileMatrix) -> SimilarityMatrix {
    let n = profiles.user_ids.len();
    let norms: Vec<f64> = profiles
        .values
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let raw = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = profiles.values[i]
                    .iter()
                    .zip(&profiles.values[j])
                    .map(|(a, b)| a * b)
                    .sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            let stored = (raw + 1.0) / 2.0;
            values[i * n + j] = stored;
            values[j * n + i] = stored;
        }
    }
    SimilarityMatrix {
        user_ids: profiles.user_ids.clone(),
        values,
    }
}

/// The target's similarities to every other user, in matrix order.
pub fn similarity_row(matrix: &SimilarityMatrix, target: &str) -> Result<Vec<(String, f64)>> {
    let t = matrix.index_of(target)?;
    Ok(matrix
        .row(t)
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(j, &v)| (matrix.user_ids[j].clone(), v))
        .collect())
}

pub fn write_profiles_csv<W: Write>(profiles: &UserProfileMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["user_id".to_string()];
    header.extend(profiles.columns.iter().cloned());
    w.write_record(&header)?;
    for (user, row) in profiles.user_ids.iter().zip(&profiles.values) {
        let mut rec = vec![user.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<profiles csv>", e))?;
    Ok(())
}

pub fn write_similarity_csv<W: Write>(matrix: &SimilarityMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["user_id".to_string()];
    header.extend(matrix.user_ids.iter().cloned());
    w.write_record(&header)?;
    for (i, user) in matrix.user_ids.iter().enumerate() {
        let mut rec = vec![user.clone()];
        rec.extend(matrix.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<similarity csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{read_csv, ClassMapping, IngestOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn profiles(rows: Vec<Vec<f64>>) -> UserProfileMatrix {
        UserProfileMatrix {
            user_ids: (0..rows.len()).map(|i| format!("u{i}")).collect(),
            columns: (0..rows[0].len()).map(|i| format!("f{i}")).collect(),
            values: rows,
        }
    }

    /// Eq. of cosine similarity written out term by term.
    fn naive_stored(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        if na == 0.0 || nb == 0.0 {
            return 0.5;
        }
        (dot / (na.sqrt() * nb.sqrt()) + 1.0) / 2.0
    }

    #[test]
    fn minmax_and_constant_columns() {
        let rows = [
            vec![Some(0.0), Some(5.0)],
            vec![Some(10.0), Some(5.0)],
            vec![None, Some(5.0)],
        ];
        let p = ScalingParams::fit(rows.iter().map(Vec::as_slice), 2, ScalingMode::MinMax);
        assert_eq!((p.offset[0], p.offset[0] + p.spread[0]), (0.0, 10.0));
        assert!(p.constant[1]);
        assert_eq!(p.scale(1, 5.0), 0.0);
        assert_eq!(p.scale(0, 5.0), 0.5);
    }

    #[test]
    fn minmax_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let col: Vec<f64> = (0..100).map(|_| rng.random_range(-50.0..50.0)).collect();
        let rows: Vec<Vec<Option<f64>>> = col.iter().map(|&v| vec![Some(v)]).collect();
        let p = ScalingParams::fit(rows.iter().map(Vec::as_slice), 1, ScalingMode::MinMax);
        let mut lo = col[0];
        let mut hi = col[0];
        for &v in &col {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        assert_eq!(p.offset[0], lo);
        assert_eq!(p.spread[0], hi - lo);
    }

    #[test]
    fn zscore_fit() {
        let rows = [vec![Some(1.0)], vec![Some(3.0)]];
        let p = ScalingParams::fit(rows.iter().map(Vec::as_slice), 1, ScalingMode::ZScore);
        assert_eq!(p.offset[0], 2.0);
        assert_eq!(p.spread[0], 1.0);
        assert_eq!(p.scale(0, 3.0), 1.0);
    }

    fn cohort(text: &str) -> Cohort {
        read_csv(text.as_bytes(), ClassMapping::three_class(), &IngestOptions::default()).unwrap()
    }

    #[test]
    fn aggregation_is_mean() {
        let c = cohort("user_id,label,a,b\nA,5,1,2\nA,4,3,4\nB,1,7,9\n");
        let scaler = fit_scaler(&c, ScalingMode::None);
        let m = aggregate_users(&c, &scaler, AggregateOptions::default());
        assert_eq!(m.values[0], vec![2.0, 3.0]);
        assert_eq!(m.values[1], vec![7.0, 9.0]);
    }

    #[test]
    fn aggregation_imputes_with_scaled_median() {
        let c = cohort("user_id,label,a,b\nA,5,0,\nA,4,10,\nB,1,4,1\nC,1,6,3\nC,2,8,5\n");
        let scaler = fit_scaler(&c, ScalingMode::MinMax);
        let m = aggregate_users(&c, &scaler, AggregateOptions::default());
        // Column b scaled: {0, 0.5, 1}; median 0.5.
        assert_eq!(m.values[0][1], 0.5);
        assert_eq!(m.values[0][0], 0.5);
    }

    #[test]
    fn label_fractions_appended() {
        let c = cohort("user_id,label,a\nA,5,1\nA,1,3\nB,3,7\n");
        let scaler = fit_scaler(&c, ScalingMode::None);
        let m = aggregate_users(
            &c,
            &scaler,
            AggregateOptions {
                include_label_fractions: true,
            },
        );
        assert_eq!(m.columns, ["a", "frac_negative", "frac_neutral", "frac_positive"]);
        assert_eq!(m.values[0], vec![2.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn aggregation_matches_per_cell_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut text = String::from("user_id,label,a,b,c\n");
        for u in 0..20 {
            for _ in 0..15 {
                let cells: Vec<String> = (0..3)
                    .map(|_| {
                        if rng.random_bool(0.1) {
                            String::new()
                        } else {
                            format!("{}", rng.random_range(0.0..100.0))
                        }
                    })
                    .collect();
                text.push_str(&format!("u{u},{},{}\n", rng.random_range(1..=5), cells.join(",")));
            }
        }
        let c = cohort(&text);
        let scaler = fit_scaler(&c, ScalingMode::MinMax);
        let m = aggregate_users(&c, &scaler, AggregateOptions::default());
        for (ui, user) in c.users().enumerate() {
            for f in 0..3 {
                let vals: Vec<f64> = c
                    .reports()
                    .iter()
                    .filter(|r| r.user_id == user)
                    .filter_map(|r| r.features[f])
                    .map(|v| (v - scaler.offset[f]) / scaler.spread[f])
                    .collect();
                if !vals.is_empty() {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    assert!((m.values[ui][f] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cosine_fixtures() {
        let m = cosine_similarity(&profiles(vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]));
        assert_eq!(m.get(0, 1), 1.0);
        let m = cosine_similarity(&profiles(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(m.get(0, 1), 0.5);
        let m = cosine_similarity(&profiles(vec![vec![1.0, 0.0], vec![1.0, 1.0]]));
        // 0.5 * (1 + 1/sqrt(2))
        assert!((m.get(0, 1) - 0.853_553_390_593_273_8).abs() < 1e-9);
    }

    #[test]
    fn zero_profile_convention() {
        let m = cosine_similarity(&profiles(vec![vec![0.0, 0.0], vec![1.0, 2.0]]));
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 0.5);
    }

    #[test]
    fn row_extraction() {
        let m = cosine_similarity(&profiles(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]));
        let row = similarity_row(&m, "u0").unwrap();
        assert_eq!(row.len(), 2);
        assert!(row.iter().all(|(u, _)| u != "u0"));
        assert_eq!(row[0].1, m.get(0, 1));
        assert_eq!(row[1].1, m.get(0, 2));
        assert!(matches!(similarity_row(&m, "zz"), Err(Error::UnknownUser(_))));
    }

    #[test]
    fn row_extraction_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = cosine_similarity(&profiles(rows));
        for t in 0..30 {
            let row = similarity_row(&m, &format!("u{t}")).unwrap();
            let mut k = 0;
            for j in 0..30 {
                if j != t {
                    assert_eq!(row[k], (format!("u{j}"), m.get(t, j)));
                    k += 1;
                }
            }
        }
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..12, 1usize..8).prop_flat_map(|(n, f)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, f), n))
    }

    proptest! {
        #[test]
        fn symmetric_unit_diagonal_and_oracle(rows in matrix_strategy()) {
            let m = cosine_similarity(&profiles(rows.clone()));
            for i in 0..rows.len() {
                prop_assert_eq!(m.get(i, i), 1.0);
                for j in 0..rows.len() {
                    let v = m.get(i, j);
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert!((v - m.get(j, i)).abs() <= 1e-12);
                    if i != j {
                        prop_assert!((v - naive_stored(&rows[i], &rows[j])).abs() <= 1e-9);
                    }
                }
            }
        }

        #[test]
        fn scale_invariance(rows in matrix_strategy(), c in 0.01f64..100.0) {
            let base = cosine_similarity(&profiles(rows.clone()));
            let mut scaled = rows.clone();
            for v in scaled[0].iter_mut() {
                *v *= c;
            }
            let other = cosine_similarity(&profiles(scaled));
            for j in 0..rows.len() {
                prop_assert!((base.get(0, j) - other.get(0, j)).abs() <= 1e-9);
            }
        }

        #[test]
        fn permutation_equivariance(rows in matrix_strategy(), seed in any::<u64>()) {
            let n = rows.len();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            let base = cosine_similarity(&profiles(rows.clone()));
            let permuted = cosine_similarity(&profiles(perm.iter().map(|&i| rows[i].clone()).collect()));
            for a in 0..n {
                for b in 0..n {
                    prop_assert_eq!(permuted.get(a, b), base.get(perm[a], perm[b]));
                }
            }
        }
    }
}

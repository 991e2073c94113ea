//! Random forest classifier (CART trees with Gini impurity over bootstrap
//! samples), a majority-class baseline and exhaustive grid search with
//! stratified k-fold cross-validation.
//!
//! Splits are numeric: candidate thresholds are midpoints between
//! consecutive distinct values present in a node, and `x <= threshold`
//! goes left. Each node draws features in random order until
//! `features_per_split` non-constant ones have been evaluated.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{smote_oversample, LabeledRows, SmoteConfig};
use crate::seed::{self, Stream};

pub const MAX_CLASSES: usize = 8;

/// Common surface of fitted classifiers.
pub trait Classifier: Send + Sync {
    fn n_classes(&self) -> usize;

    fn n_features(&self) -> usize;

    fn predict_proba(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;

    /// Argmax of [`Classifier::predict_proba`]; ties go to the lowest class index.
    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(rows)?.iter().map(|p| argmax(p)).collect())
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_width(expected: usize, rows: &[Vec<f64>]) -> Result<()> {
    match rows.iter().find(|r| r.len() != expected) {
        Some(r) => Err(Error::WidthMismatch {
            expected,
            found: r.len(),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or too small to split.
    #[serde(default)]
    pub max_depth: Option<usize>,
    #[serde(default = "default_min_split")]
    pub min_samples_split: usize,
    /// `None` means `ceil(sqrt(n_features))`.
    #[serde(default)]
    pub features_per_split: Option<usize>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_trees() -> usize {
    100
}
fn default_min_split() -> usize {
    2
}
fn default_bootstrap() -> bool {
    true
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0
            || self.min_samples_split == 0
            || self.max_depth == Some(0)
            || self.features_per_split == Some(0)
        {
            return Err(Error::Config("forest parameters must be positive".into()));
        }
        Ok(())
    }

    fn resolved_features(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Weighted class counts of the training rows reaching this leaf.
    Leaf { counts: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn leaf_for(&self, row: &[f64]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub n_classes: usize,
    pub n_features: usize,
    /// Normalized total impurity decrease per feature; all zero when no
    /// tree split.
    pub feature_importances: Vec<f64>,
    pub trees: Vec<DecisionTree>,
}

impl Classifier for ForestModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_proba(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_width(self.n_features, rows)?;
        let scale = 1.0 / self.trees.len() as f64;
        Ok(rows
            .iter()
            .map(|row| {
                let mut p = vec![0.0; self.n_classes];
                for tree in &self.trees {
                    let counts = tree.leaf_for(row);
                    let total: u32 = counts.iter().sum();
                    for (pk, &c) in p.iter_mut().zip(counts) {
                        *pk += c as f64 / total as f64;
                    }
                }
                for pk in p.iter_mut() {
                    *pk *= scale;
                }
                p
            })
            .collect())
    }
}
/// Rows prepared for tree induction: per-feature value ranks and the row
/// order sorted by rank, computed once per fit and shared by all trees.
struct Prepared {
    n_rows: usize,
    n_classes: usize,
    ranks: Vec<Vec<u32>>,
    /// Rows in ascending rank order, per feature.
    order: Vec<Vec<u32>>,
    /// Distinct sorted values per feature, indexed by rank.
    distinct: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

impl Prepared {
    fn new(rows: &LabeledRows, n_classes: usize) -> Self {
        let n_rows = rows.len();
        let n_features = rows.features[0].len();
        let mut ranks = Vec::with_capacity(n_features);
        let mut orders = Vec::with_capacity(n_features);
        let mut distinct = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let col: Vec<f64> = rows.features.iter().map(|r| r[f]).collect();
            let mut order: Vec<u32> = (0..n_rows as u32).collect();
            order.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            let mut r = vec![0u32; n_rows];
            let mut d = Vec::new();
            for &i in &order {
                let v = col[i as usize];
                if d.last() != Some(&v) {
                    d.push(v);
                }
                r[i as usize] = (d.len() - 1) as u32;
            }
            ranks.push(r);
            orders.push(order);
            distinct.push(d);
        }
        Prepared {
            n_rows,
            n_classes,
            ranks,
            order: orders,
            distinct,
            labels: rows.labels.iter().map(|&l| l as u8).collect(),
        }
    }

    fn n_features(&self) -> usize {
        self.ranks.len()
    }
}

struct BestSplit {
    feature: usize,
    /// Rows with rank <= this go left.
    left_max_rank: u32,
    threshold: f64,
    score: f64,
    left_counts: [u32; MAX_CLASSES],
}

/// Per-tree working state over the `m` rows drawn into the tree, addressed
/// by tree-local index. `lists` holds, for every feature, the local indices
/// sorted by rank; a node owns the same `[start, end)` range in every
/// feature's list, and splits partition all lists stably so no node sorts.
struct Builder<'a> {
    data: &'a Prepared,
    m: usize,
    /// Per feature, the rank of each local row.
    ranks: Vec<u32>,
    weights: Vec<u32>,
    labels: Vec<u8>,
    lists: Vec<u32>,
    buffer: Vec<u32>,
    goes_left: Vec<u8>,
    features: Vec<usize>,
}

impl<'a> Builder<'a> {
    fn new(data: &'a Prepared, weight: &[u32]) -> Self {
        let n_features = data.n_features();
        let mut local = vec![u32::MAX; data.n_rows];
        let mut weights = Vec::new();
        let mut labels = Vec::new();
        for (row, &w) in weight.iter().enumerate() {
            if w > 0 {
                local[row] = weights.len() as u32;
                weights.push(w);
                labels.push(data.labels[row]);
            }
        }
        let m = weights.len();
        let mut ranks = vec![0u32; n_features * m];
        let mut lists = Vec::with_capacity(n_features * m);
        for f in 0..n_features {
            let global = &data.ranks[f];
            let out = &mut ranks[f * m..(f + 1) * m];
            for &row in &data.order[f] {
                let l = local[row as usize];
                if l != u32::MAX {
                    out[l as usize] = global[row as usize];
                    lists.push(l);
                }
            }
        }
        Builder {
            data,
            m,
            ranks,
            weights,
            labels,
            lists,
            buffer: vec![0; m],
            goes_left: vec![0; m],
            features: (0..n_features).collect(),
        }
    }

    fn best_split(
        &mut self,
        start: usize,
        end: usize,
        counts: &[u32; MAX_CLASSES],
        total: u32,
        per_split: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<BestSplit> {
        let k = self.data.n_classes;
        let n_features = self.data.n_features();
        let m = self.m;
        let mut best: Option<BestSplit> = None;
        let mut best_score = f64::NEG_INFINITY;
        let mut evaluated = 0;
        // Lazy Fisher-Yates: draw features without replacement until enough
        // non-constant ones have been scored.
        for drawn in 0..n_features {
            if evaluated >= per_split {
                break;
            }
            let pick = rng.random_range(drawn..n_features);
            self.features.swap(drawn, pick);
            let f = self.features[drawn];
            let list = &self.lists[f * m + start..f * m + end];
            let ranks = &self.ranks[f * m..(f + 1) * m];
            if ranks[list[0] as usize] == ranks[list[list.len() - 1] as usize] {
                continue;
            }
            evaluated += 1;

            let mut left = [0u32; MAX_CLASSES];
            let mut n_left = 0u32;
            // Running sums of squared class weights on each side.
            let mut sl: u64 = 0;
            let mut sr: u64 = counts[..k].iter().map(|&c| c as u64 * c as u64).sum();
            let mut rank = ranks[list[0] as usize];
            for i in 0..list.len() - 1 {
                let row = list[i] as usize;
                let w = self.weights[row] as u64;
                let c = self.labels[row] as usize;
                let l = left[c] as u64;
                let r = (counts[c] - left[c]) as u64;
                sl += (2 * l + w) * w;
                sr -= (2 * r - w) * w;
                left[c] += w as u32;
                n_left += w as u32;
                let next = ranks[list[i + 1] as usize];
                if rank == next {
                    continue;
                }
                // score = sl / n_left + sr / n_right, compared without dividing.
                let (nl, nr) = (n_left as f64, (total - n_left) as f64);
                let num = sl as f64 * nr + sr as f64 * nl;
                let den = nl * nr;
                if num > best_score * den {
                    best_score = num / den;
                    let lo = self.data.distinct[f][rank as usize];
                    let hi = self.data.distinct[f][next as usize];
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        left_max_rank: rank,
                        threshold,
                        score: best_score,
                        left_counts: left,
                    });
                }
                rank = next;
            }
        }
        best
    }

    /// Stable partition of every feature list in `[start, end)`; returns
    /// the number of rows going left.
    fn partition(&mut self, start: usize, end: usize, split: &BestSplit) -> usize {
        let m = self.m;
        let fs = split.feature;
        let ranks = &self.ranks[fs * m..(fs + 1) * m];
        let mut n_left = 0;
        for &l in &self.lists[fs * m + start..fs * m + end] {
            let left = ranks[l as usize] <= split.left_max_rank;
            self.goes_left[l as usize] = left as u8;
            n_left += left as usize;
        }
        for f in 0..self.data.n_features() {
            if f == fs {
                // Already ordered: the left rows form the prefix.
                continue;
            }
            let seg = &mut self.lists[f * m + start..f * m + end];
            let right = &mut self.buffer[..seg.len()];
            // Branch-free: every index is written to both sides and only the
            // matching cursor advances.
            let (mut wl, mut wr) = (0, 0);
            for i in 0..seg.len() {
                let l = seg[i];
                let go = self.goes_left[l as usize] as usize;
                seg[wl] = l;
                right[wr] = l;
                wl += go;
                wr += 1 - go;
            }
            seg[wl..].copy_from_slice(&right[..wr]);
        }
        n_left
    }
}

fn fit_tree(data: &Prepared, params: &ForestParams, tree_seed: u64, importances: &mut [f64]) -> DecisionTree {
    let mut rng = seed::rng_for(tree_seed, Stream::Model);
    let n = data.n_rows;
    let k = data.n_classes;
    let mut weight = vec![0u32; n];
    if params.bootstrap {
        for _ in 0..n {
            weight[rng.random_range(0..n)] += 1;
        }
    } else {
        weight.fill(1);
    }
    let mut builder = Builder::new(data, &weight);
    let per_split = params.resolved_features(data.n_features());

    let mut root_counts = [0u32; MAX_CLASSES];
    for i in 0..n {
        root_counts[data.labels[i] as usize] += weight[i];
    }
    let root_weight: f64 = root_counts.iter().map(|&c| c as f64).sum();

    let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { counts: Vec::new() }];
    // (node index, start, end, depth, class counts)
    let mut stack = vec![(0usize, 0usize, builder.m, 0usize, root_counts)];
    while let Some((node, start, end, depth, counts)) = stack.pop() {
        let total: u32 = counts[..k].iter().sum();
        let pure = counts[..k].iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = params.max_depth.is_some_and(|d| depth >= d);
        let split = if pure || depth_capped || end - start < params.min_samples_split {
            None
        } else {
            builder.best_split(start, end, &counts, total, per_split, &mut rng)
        };
        let Some(split) = split else {
            nodes[node] = TreeNode::Leaf {
                counts: counts[..k].to_vec(),
            };
            continue;
        };

        let parent_term: f64 = counts[..k].iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>() / total as f64;
        importances[split.feature] += (split.score - parent_term) / root_weight;

        let mid = start + builder.partition(start, end, &split);
        let mut right_counts = counts;
        for c in 0..k {
            right_counts[c] -= split.left_counts[c];
        }
        let left = nodes.len();
        nodes.push(TreeNode::Leaf { counts: Vec::new() });
        nodes.push(TreeNode::Leaf { counts: Vec::new() });
        nodes[node] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right: left + 1,
        };
        stack.push((left + 1, mid, end, depth + 1, right_counts));
        stack.push((left, start, mid, depth + 1, split.left_counts));
    }
    DecisionTree { nodes }
}

pub fn fit(rows: &LabeledRows, n_classes: usize, params: &ForestParams) -> Result<ForestModel> {
    params.validate()?;
    if rows.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if n_classes == 0 || n_classes > MAX_CLASSES || rows.labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::Config(format!(
            "labels must lie in 0..{n_classes} (at most {MAX_CLASSES} classes)"
        )));
    }
    let n_features = rows.features[0].len();
    if n_features == 0 {
        return Err(Error::EmptySchema);
    }
    check_width(n_features, &rows.features)?;
    if rows.features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("training rows contain non-finite values".into()));
    }
    let data = Prepared::new(rows, n_classes);
    let grown: Vec<(DecisionTree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut imp = vec![0.0; n_features];
            let tree = fit_tree(&data, params, seed::mix(params.seed ^ seed::mix(t as u64)), &mut imp);
            (tree, imp)
        })
        .collect();
    let mut importances = vec![0.0; n_features];
    let mut trees = Vec::with_capacity(grown.len());
    for (tree, imp) in grown {
        for (a, b) in importances.iter_mut().zip(imp) {
            *a += b;
        }
        trees.push(tree);
    }
    let sum: f64 = importances.iter().sum();
    if sum > 0.0 {
        for v in importances.iter_mut() {
            *v /= sum;
        }
    } else {
        importances.fill(0.0);
    }
    Ok(ForestModel {
        params: params.clone(),
        n_classes,
        n_features,
        feature_importances: importances,
        trees,
    })
}

pub fn predict(model: &impl Classifier, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
    model.predict(rows)
}

pub fn predict_proba(model: &impl Classifier, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    model.predict_proba(rows)
}

/// Feature importances sorted descending (ties keep feature order).
pub fn gini_importance(model: &ForestModel, feature_names: &[String]) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = model
        .feature_importances
        .iter()
        .enumerate()
        .map(|(i, &v)| (feature_names.get(i).cloned().unwrap_or_else(|| format!("f{i}")), v))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

/// Predicts the modal training class with probability one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityModel {
    pub class: usize,
    pub n_classes: usize,
    pub n_features: usize,
}

impl Classifier for MajorityModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_proba(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_width(self.n_features, rows)?;
        let mut one_hot = vec![0.0; self.n_classes];
        one_hot[self.class] = 1.0;
        Ok(vec![one_hot; rows.len()])
    }
}

pub fn majority_baseline(rows: &LabeledRows, n_classes: usize) -> Result<MajorityModel> {
    if rows.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let counts = rows.class_counts(n_classes);
    let mut class = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[class] {
            class = c;
        }
    }
    Ok(MajorityModel {
        class,
        n_classes,
        n_features: rows.features[0].len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    #[serde(default = "default_grid_trees")]
    pub n_trees: Vec<usize>,
    #[serde(default = "default_grid_depth")]
    pub max_depth: Vec<Option<usize>>,
    #[serde(default = "default_grid_split")]
    pub min_samples_split: Vec<usize>,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_grid_trees() -> Vec<usize> {
    vec![50, 100]
}
fn default_grid_depth() -> Vec<Option<usize>> {
    vec![None, Some(10)]
}
fn default_grid_split() -> Vec<usize> {
    vec![2, 5]
}
fn default_folds() -> usize {
    3
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            n_trees: default_grid_trees(),
            max_depth: default_grid_depth(),
            min_samples_split: default_grid_split(),
            folds: default_folds(),
        }
    }
}

impl HyperGrid {
    /// Candidates in enumeration order (trees, then depth, then split size).
    pub fn candidates(&self, base: &ForestParams) -> Vec<ForestParams> {
        let mut out = Vec::new();
        for &n_trees in &self.n_trees {
            for &max_depth in &self.max_depth {
                for &min_samples_split in &self.min_samples_split {
                    out.push(ForestParams {
                        n_trees,
                        max_depth,
                        min_samples_split,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub params: ForestParams,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: ForestParams,
    pub table: Vec<CvRow>,
}

/// Exhaustive search scored by mean stratified k-fold accuracy; SMOTE, when
/// given, is applied to each training fold only. Ties go to the earliest
/// candidate.
pub fn grid_search(
    rows: &LabeledRows,
    n_classes: usize,
    grid: &HyperGrid,
    base: &ForestParams,
    smote: Option<&SmoteConfig>,
    seed: u64,
) -> Result<GridSearchResult> {
    let folds = grid.folds;
    if folds < 2 {
        return Err(Error::Config("grid search needs at least 2 folds".into()));
    }
    let counts = rows.class_counts(n_classes);
    if rows.is_empty() {
        return Err(Error::InsufficientRows {
            folds,
            detail: "no rows".into(),
        });
    }
    if let Some((c, n)) = counts.iter().enumerate().find(|&(_, &n)| n > 0 && n < folds) {
        return Err(Error::InsufficientRows {
            folds,
            detail: format!("class {c} has {n} row(s)"),
        });
    }
    let candidates = grid.candidates(base);
    if candidates.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }

    let mut rng = seed::rng_for(seed, Stream::Search);
    let mut fold_of = vec![0usize; rows.len()];
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..rows.len()).filter(|&i| rows.labels[i] == c).collect();
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold_of[i] = j % folds;
        }
    }
    let subset = |keep: &dyn Fn(usize) -> bool| {
        let mut out = LabeledRows::default();
        for i in (0..rows.len()).filter(|&i| keep(i)) {
            out.features.push(rows.features[i].clone());
            out.labels.push(rows.labels[i]);
        }
        out
    };
    let splits: Vec<(LabeledRows, LabeledRows)> = (0..folds)
        .map(|k| {
            let mut train = subset(&|i| fold_of[i] != k);
            if let Some(cfg) = smote {
                train = smote_oversample(&train, n_classes, cfg, seed::mix(seed ^ k as u64)).rows;
            }
            (train, subset(&|i| fold_of[i] == k))
        })
        .collect();

    let mut table = Vec::with_capacity(candidates.len());
    for params in candidates {
        let fold_accuracies = splits
            .iter()
            .map(|(train, test)| {
                let model = fit(train, n_classes, &params)?;
                crate::metrics::accuracy(&test.labels, &model.predict(&test.features)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_accuracy = fold_accuracies.iter().sum::<f64>() / folds as f64;
        table.push(CvRow {
            params,
            fold_accuracies,
            mean_accuracy,
        });
    }
    let mut best = 0;
    for (i, row) in table.iter().enumerate() {
        if row.mean_accuracy > table[best].mean_accuracy {
            best = i;
        }
    }
    Ok(GridSearchResult {
        best: table[best].params.clone(),
        table,
    })
}

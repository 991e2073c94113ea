//! Report cohorts: schema, class mapping, CSV ingestion and per-user
//! eligibility statistics.
//!
//! The on-disk format is a headered CSV with the columns `user_id`,
//! optional `report_id`, `label` (integer 1..=5), optional `context`, and
//! then one numeric column per feature, in schema order. An empty feature
//! cell is a missing value. Lines starting with `#` are comments.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const USER_COLUMN: &str = "user_id";
pub const REPORT_COLUMN: &str = "report_id";
pub const LABEL_COLUMN: &str = "label";
pub const CONTEXT_COLUMN: &str = "context";

/// Ordered, duplicate-free feature names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    feature_names: Vec<String>,
}

impl FeatureSchema {
    pub fn new(feature_names: Vec<String>) -> Result<Self> {
        if feature_names.is_empty() {
            return Err(Error::EmptySchema);
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }
        Ok(FeatureSchema { feature_names })
    }

    pub fn names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }
}

/// Total map from raw Likert responses 1..=5 onto an ordered class list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapping {
    name: String,
    /// `table[raw - 1]` is the index into `class_order`.
    table: [usize; 5],
    class_order: Vec<String>,
}

impl ClassMapping {
    pub fn new(name: impl Into<String>, table: [usize; 5], class_order: Vec<String>) -> Result<Self> {
        if class_order.is_empty() {
            return Err(Error::InvalidMapping("no output classes".into()));
        }
        if let Some(bad) = table.iter().find(|&&c| c >= class_order.len()) {
            return Err(Error::InvalidMapping(format!("class index {bad} out of range")));
        }
        for c in 0..class_order.len() {
            if !table.contains(&c) {
                return Err(Error::InvalidMapping(format!(
                    "class `{}` is never produced",
                    class_order[c]
                )));
            }
        }
        let unique: HashSet<_> = class_order.iter().collect();
        if unique.len() != class_order.len() {
            return Err(Error::InvalidMapping("duplicate class names".into()));
        }
        Ok(ClassMapping {
            name: name.into(),
            table,
            class_order,
        })
    }

    /// 1,2 → negative; 3 → neutral; 4,5 → positive.
    pub fn three_class() -> Self {
        ClassMapping {
            name: "three-class".into(),
            table: [0, 0, 1, 2, 2],
            class_order: vec!["negative".into(), "neutral".into(), "positive".into()],
        }
    }

    pub fn five_class() -> Self {
        ClassMapping {
            name: "five-class".into(),
            table: [0, 1, 2, 3, 4],
            class_order: (1..=5).map(|l| l.to_string()).collect(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "three-class" => Ok(Self::three_class()),
            "five-class" => Ok(Self::five_class()),
            other => Err(Error::InvalidMapping(format!("unknown mapping `{other}`"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_order(&self) -> &[String] {
        &self.class_order
    }

    pub fn n_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn class_of(&self, raw_label: u8) -> Option<usize> {
        match raw_label {
            1..=5 => Some(self.table[raw_label as usize - 1]),
            _ => None,
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_order.iter().position(|c| c == name)
    }

    /// The class that raw label 1 maps to ("negative" under three-class).
    pub fn lowest_class(&self) -> usize {
        self.table[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub user_id: String,
    pub raw_label: u8,
    pub class: usize,
    pub context: Option<String>,
    /// `None` marks a missing value.
    pub features: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Field delimiter, `b','` when `None`.
    pub delimiter: Option<u8>,
}

/// An immutable, validated table of reports grouped by user.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    schema: FeatureSchema,
    mapping: ClassMapping,
    reports: Vec<Report>,
    /// Users in first-appearance order, each with its report positions.
    user_index: IndexMap<String, Vec<usize>>,
}

impl Cohort {
    pub fn new(schema: FeatureSchema, mapping: ClassMapping, reports: Vec<Report>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let mut ids = HashSet::with_capacity(reports.len());
        let mut user_index: IndexMap<String, Vec<usize>> = IndexMap::new();
        for (pos, r) in reports.iter().enumerate() {
            if !ids.insert(r.report_id.as_str()) {
                return Err(Error::DuplicateReportId(r.report_id.clone()));
            }
            if r.features.len() != schema.feature_count() {
                return Err(Error::RaggedRow {
                    row: pos + 1,
                    expected: schema.feature_count(),
                    found: r.features.len(),
                });
            }
            match mapping.class_of(r.raw_label) {
                Some(c) if c == r.class => {}
                _ => {
                    return Err(Error::BadLabel {
                        row: pos + 1,
                        value: r.raw_label.to_string(),
                    })
                }
            }
            user_index.entry(r.user_id.clone()).or_default().push(pos);
        }
        Ok(Cohort {
            schema,
            mapping,
            reports,
            user_index,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn mapping(&self) -> &ClassMapping {
        &self.mapping
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn n_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_index.keys().map(String::as_str)
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.user_index.keys().cloned().collect()
    }

    /// Position of the user in canonical (first-appearance) order.
    pub fn user_ordinal(&self, user: &str) -> Option<usize> {
        self.user_index.get_index_of(user)
    }

    pub fn user_reports(&self, user: &str) -> Result<&[usize]> {
        self.user_index
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn has_context(&self) -> bool {
        self.reports.iter().any(|r| r.context.is_some())
    }

    /// Reassign class labels through a different mapping.
    pub fn remap(&self, mapping: ClassMapping) -> Cohort {
        let reports = self
            .reports
            .iter()
            .map(|r| Report {
                class: mapping.class_of(r.raw_label).expect("validated raw label"),
                ..r.clone()
            })
            .collect();
        Cohort {
            schema: self.schema.clone(),
            mapping,
            reports,
            user_index: self.user_index.clone(),
        }
    }

    pub fn schema_sidecar(&self) -> SchemaSidecar {
        SchemaSidecar {
            feature_names: self.schema.names().to_vec(),
            mapping: self.mapping.name().to_string(),
            class_order: self.mapping.class_order().to_vec(),
        }
    }
}

/// JSON description of a cohort's schema written next to outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSidecar {
    pub feature_names: Vec<String>,
    pub mapping: String,
    pub class_order: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>, mapping: ClassMapping, options: &IngestOptions) -> Result<Cohort> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, mapping, options)
}

pub fn read_csv<R: Read>(input: R, mapping: ClassMapping, options: &IngestOptions) -> Result<Cohort> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter.unwrap_or(b','))
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(input);
    let headers = reader.headers()?.clone();

    let mut seen = HashSet::new();
    for h in headers.iter() {
        if !seen.insert(h) {
            return Err(Error::DuplicateColumn(h.to_string()));
        }
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let user_col = find(USER_COLUMN).ok_or_else(|| Error::MissingColumn(USER_COLUMN.into()))?;
    let label_col = find(LABEL_COLUMN).ok_or_else(|| Error::MissingColumn(LABEL_COLUMN.into()))?;
    let report_col = find(REPORT_COLUMN);
    let context_col = find(CONTEXT_COLUMN);
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != user_col && i != label_col && Some(i) != report_col && Some(i) != context_col)
        .collect();
    let schema = FeatureSchema::new(feature_cols.iter().map(|&i| headers[i].to_string()).collect())?;

    let mut reports = Vec::new();
    for (ordinal, record) in reader.records().enumerate() {
        let record = record?;
        let row = ordinal + 1;
        if record.len() != headers.len() {
            return Err(Error::RaggedRow {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let label_text = record[label_col].trim();
        let raw_label: u8 = label_text
            .parse::<u8>()
            .ok()
            .filter(|l| (1..=5).contains(l))
            .ok_or_else(|| Error::BadLabel {
                row,
                value: label_text.to_string(),
            })?;
        let class = mapping.class_of(raw_label).expect("label in range");
        let features = feature_cols
            .iter()
            .map(|&i| {
                let cell = record[i].trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(Some)
                    .ok_or_else(|| Error::BadFeatureValue {
                        row,
                        column: headers[i].to_string(),
                        value: cell.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let report_id = match report_col {
            Some(i) if !record[i].is_empty() => record[i].to_string(),
            _ => ordinal.to_string(),
        };
        let context = context_col.map(|i| record[i].to_string()).filter(|c| !c.is_empty());
        reports.push(Report {
            report_id,
            user_id: record[user_col].to_string(),
            raw_label,
            class,
            context,
            features,
        });
    }
    Cohort::new(schema, mapping, reports)
}

/// Write the canonical CSV form: `user_id,report_id,label,context,<features>`.
pub fn write_csv<W: Write>(cohort: &Cohort, output: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(output);
    let mut header = vec![USER_COLUMN, REPORT_COLUMN, LABEL_COLUMN, CONTEXT_COLUMN];
    header.extend(cohort.schema().names().iter().map(String::as_str));
    writer.write_record(&header)?;
    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for r in cohort.reports() {
        fields.clear();
        fields.push(r.user_id.clone());
        fields.push(r.report_id.clone());
        fields.push(r.raw_label.to_string());
        fields.push(r.context.clone().unwrap_or_default());
        fields.extend(r.features.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        writer.write_record(&fields)?;
    }
    writer.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilityReport {
    pub class_order: Vec<String>,
    pub per_user_class_counts: IndexMap<String, IndexMap<String, usize>>,
    /// `users_by_class_presence[k]` counts users with exactly `k` classes
    /// present (index 0 is always zero for a non-empty user).
    pub users_by_class_presence: Vec<usize>,
    /// `(n, users with at least n reports of the lowest class)` for
    /// n in `1..=max count`.
    pub negative_count_curve: Vec<(usize, usize)>,
}

impl EligibilityReport {
    pub fn users_with_exactly(&self, classes: usize) -> usize {
        self.users_by_class_presence.get(classes).copied().unwrap_or(0)
    }
}

/// Per-user class counts and the minimum-negative-count curve. The
/// "negative" class is whatever raw label 1 maps to.
pub fn eligibility_stats(cohort: &Cohort) -> EligibilityReport {
    let mapping = cohort.mapping();
    let k = mapping.n_classes();
    let negative = mapping.lowest_class();
    let mut per_user = IndexMap::new();
    let mut presence = vec![0usize; k + 1];
    let mut negatives = Vec::new();
    for user in cohort.users() {
        let mut counts = vec![0usize; k];
        for &pos in cohort.user_reports(user).expect("indexed user") {
            counts[cohort.reports()[pos].class] += 1;
        }
        presence[counts.iter().filter(|&&c| c > 0).count()] += 1;
        negatives.push(counts[negative]);
        per_user.insert(
            user.to_string(),
            mapping
                .class_order()
                .iter()
                .cloned()
                .zip(counts)
                .collect::<IndexMap<_, _>>(),
        );
    }
    let max_negative = negatives.iter().copied().max().unwrap_or(0);
    // Users with count >= n, via a histogram suffix sum.
    let mut hist = vec![0usize; max_negative + 2];
    for &n in &negatives {
        hist[n] += 1;
    }
    let mut curve = Vec::with_capacity(max_negative);
    let mut at_least = 0;
    for n in (1..=max_negative).rev() {
        at_least += hist[n];
        curve.push((n, at_least));
    }
    curve.reverse();
    EligibilityReport {
        class_order: mapping.class_order().to_vec(),
        per_user_class_counts: per_user,
        users_by_class_presence: presence,
        negative_count_curve: curve,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub total: usize,
    pub counts: IndexMap<String, usize>,
    pub fractions: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub overall: GroupDistribution,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_context: Option<IndexMap<String, GroupDistribution>>,
}

/// Group key used for reports that carry no context tag.
pub const NO_CONTEXT: &str = "(none)";

pub fn class_distribution(cohort: &Cohort, by_context: bool) -> Result<ClassDistribution> {
    if cohort.reports().is_empty() {
        return Err(Error::EmptyCohort);
    }
    let k = cohort.mapping().n_classes();
    let overall = distribution(cohort, cohort.reports().iter().map(|r| r.class), k);
    let by_context = by_context.then(|| {
        let mut groups: IndexMap<String, Vec<usize>> = IndexMap::new();
        for r in cohort.reports() {
            let key = r.context.as_deref().unwrap_or(NO_CONTEXT);
            groups.entry(key.to_string()).or_default().push(r.class);
        }
        groups
            .into_iter()
            .map(|(ctx, classes)| (ctx, distribution(cohort, classes.into_iter(), k)))
            .collect()
    });
    Ok(ClassDistribution { overall, by_context })
}

fn distribution(cohort: &Cohort, classes: impl Iterator<Item = usize>, k: usize) -> GroupDistribution {
    let mut counts = vec![0usize; k];
    for c in classes {
        counts[c] += 1;
    }
    let total: usize = counts.iter().sum();
    let names = cohort.mapping().class_order();
    GroupDistribution {
        total,
        counts: names.iter().cloned().zip(counts.iter().copied()).collect(),
        fractions: names
            .iter()
            .cloned()
            .zip(counts.iter().map(|&c| c as f64 / total as f64))
            .collect(),
    }
}

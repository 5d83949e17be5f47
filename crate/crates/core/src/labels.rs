//! Categories, domains, partial labels and the per-category loss weights.
//!
//! A label cell is one of present (`1`), absent (`0`) or unknown (`-2`). A
//! sample from domain `d` may only carry known labels for categories in that
//! domain's label space; everything else is unknown.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type CategoryId = usize;
pub type DomainId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("label code {0} is not one of 1, 0, -2")]
    BadCode(i64),
    #[error("domain registry is empty")]
    EmptyRegistry,
    #[error("domain ids must be dense 0..D-1, found {found} at position {position}")]
    NonDenseDomainId { position: usize, found: DomainId },
    #[error("domain {0} has an empty label space")]
    EmptyLabelSpace(DomainId),
    #[error("domain {domain} labels category {category}, but only {categories} categories exist")]
    CategoryOutOfRange {
        domain: DomainId,
        category: CategoryId,
        categories: usize,
    },
    #[error("category {0} has no positive or no negative known labels")]
    DegenerateCategory(CategoryId),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("unknown domain id {0}")]
    UnknownDomain(DomainId),
}

/// One cell of a partial label matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum LabelValue {
    Present,
    Absent,
    Unknown,
}

impl LabelValue {
    pub const fn code(self) -> i64 {
        match self {
            LabelValue::Present => 1,
            LabelValue::Absent => 0,
            LabelValue::Unknown => -2,
        }
    }

    pub fn is_known(self) -> bool {
        self != LabelValue::Unknown
    }

    /// `Some(1.0)` / `Some(0.0)` for known cells.
    pub fn as_target(self) -> Option<f64> {
        match self {
            LabelValue::Present => Some(1.0),
            LabelValue::Absent => Some(0.0),
            LabelValue::Unknown => None,
        }
    }
}

impl TryFrom<i64> for LabelValue {
    type Error = LabelError;

    fn try_from(code: i64) -> Result<Self, Self::Error> {
        match code {
            1 => Ok(LabelValue::Present),
            0 => Ok(LabelValue::Absent),
            -2 => Ok(LabelValue::Unknown),
            other => Err(LabelError::BadCode(other)),
        }
    }
}

impl From<LabelValue> for i64 {
    fn from(v: LabelValue) -> i64 {
        v.code()
    }
}

impl fmt::Display for LabelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub id: DomainId,
    pub name: String,
    pub label_space: BTreeSet<CategoryId>,
}

/// Ordered set of domains sharing one global category space of size `categories`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRegistry {
    categories: usize,
    domains: Vec<Domain>,
}

impl DomainRegistry {
    pub fn new(categories: usize, domains: Vec<Domain>) -> Result<Self, LabelError> {
        for (position, d) in domains.iter().enumerate() {
            if d.id != position {
                return Err(LabelError::NonDenseDomainId {
                    position,
                    found: d.id,
                });
            }
            if d.label_space.is_empty() {
                return Err(LabelError::EmptyLabelSpace(d.id));
            }
            if let Some(&c) = d.label_space.iter().find(|&&c| c >= categories) {
                return Err(LabelError::CategoryOutOfRange {
                    domain: d.id,
                    category: c,
                    categories,
                });
            }
        }
        Ok(Self {
            categories,
            domains,
        })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domain(&self, id: DomainId) -> Result<&Domain, LabelError> {
        self.domains.get(id).ok_or(LabelError::UnknownDomain(id))
    }
}

/// Common categories (labeled by every domain) and each domain's exclusive remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPartition {
    pub common: BTreeSet<CategoryId>,
    pub exclusive: BTreeMap<DomainId, BTreeSet<CategoryId>>,
}

impl CategoryPartition {
    pub fn is_common(&self, c: CategoryId) -> bool {
        self.common.contains(&c)
    }

    pub fn exclusive_to(&self, d: DomainId) -> BTreeSet<CategoryId> {
        self.exclusive.get(&d).cloned().unwrap_or_default()
    }
}

pub fn category_partition(registry: &DomainRegistry) -> Result<CategoryPartition, LabelError> {
    let mut spaces = registry.domains().iter().map(|d| &d.label_space);
    let first = spaces.next().ok_or(LabelError::EmptyRegistry)?;
    let common: BTreeSet<CategoryId> = spaces.fold(first.clone(), |acc, s| {
        acc.intersection(s).copied().collect()
    });
    let exclusive = registry
        .domains()
        .iter()
        .map(|d| (d.id, d.label_space.difference(&common).copied().collect()))
        .collect();
    Ok(CategoryPartition { common, exclusive })
}

/// n×C grid of labels with per-sample ids and domain tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialLabelMatrix {
    categories: usize,
    labels: Vec<LabelValue>,
    sample_ids: Vec<String>,
    domain_of: Vec<DomainId>,
}

impl PartialLabelMatrix {
    pub fn new(
        categories: usize,
        labels: Vec<LabelValue>,
        sample_ids: Vec<String>,
        domain_of: Vec<DomainId>,
    ) -> Result<Self, LabelError> {
        let n = sample_ids.len();
        if domain_of.len() != n || labels.len() != n * categories {
            return Err(LabelError::ShapeMismatch(format!(
                "{} ids, {} domain tags, {} labels for {} categories",
                n,
                domain_of.len(),
                labels.len(),
                categories
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(LabelError::DuplicateSampleId(id.clone()));
            }
        }
        Ok(Self {
            categories,
            labels,
            sample_ids,
            domain_of,
        })
    }

    pub fn samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn get(&self, sample: usize, category: CategoryId) -> LabelValue {
        self.labels[sample * self.categories + category]
    }

    pub fn set(&mut self, sample: usize, category: CategoryId, value: LabelValue) {
        self.labels[sample * self.categories + category] = value;
    }

    pub fn row(&self, sample: usize) -> &[LabelValue] {
        &self.labels[sample * self.categories..(sample + 1) * self.categories]
    }

    pub fn column(&self, category: CategoryId) -> impl Iterator<Item = LabelValue> + '_ {
        (0..self.samples()).map(move |i| self.get(i, category))
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn domain_of(&self) -> &[DomainId] {
        &self.domain_of
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut labels = Vec::with_capacity(rows.len() * self.categories);
        for &r in rows {
            labels.extend_from_slice(self.row(r));
        }
        Self {
            categories: self.categories,
            labels,
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            domain_of: rows.iter().map(|&r| self.domain_of[r]).collect(),
        }
    }

    /// Row-wise concatenation; fails on category-count mismatch or id collision.
    pub fn concat(parts: &[&Self]) -> Result<Self, LabelError> {
        let categories = parts.first().map_or(0, |p| p.categories);
        if parts.iter().any(|p| p.categories != categories) {
            return Err(LabelError::ShapeMismatch(
                "cannot concatenate label matrices with different category counts".into(),
            ));
        }
        Self::new(
            categories,
            parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            parts.iter().flat_map(|p| p.sample_ids.iter().cloned()).collect(),
            parts.iter().flat_map(|p| p.domain_of.iter().copied()).collect(),
        )
    }

    /// Known-label (positive, negative) counts of one category.
    pub fn counts(&self, category: CategoryId) -> (usize, usize) {
        self.column(category)
            .fold((0, 0), |(p, n), v| match v {
                LabelValue::Present => (p + 1, n),
                LabelValue::Absent => (p, n + 1),
                LabelValue::Unknown => (p, n),
            })
    }
}

/// Per-category task weight `alpha` and class-balance weight `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeightTable {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl TaskWeightTable {
    pub fn categories(&self) -> usize {
        self.alpha.len()
    }

    /// Unit weights; no task weighting and no class balancing.
    pub fn uniform(categories: usize) -> Self {
        Self {
            alpha: vec![1.0; categories],
            beta: vec![1.0; categories],
        }
    }
}

/// `beta_c = N_c / P_c` over known labels of the whole matrix.
pub fn class_balance_weights(matrix: &PartialLabelMatrix) -> Result<Vec<f64>, LabelError> {
    (0..matrix.categories())
        .map(|c| match matrix.counts(c) {
            (0, _) | (_, 0) => Err(LabelError::DegenerateCategory(c)),
            (p, n) => Ok(n as f64 / p as f64),
        })
        .collect()
}

pub fn task_weight_table(
    partition: &CategoryPartition,
    matrix: &PartialLabelMatrix,
    alpha_common: f64,
    alpha_other: f64,
) -> Result<TaskWeightTable, LabelError> {
    let beta = class_balance_weights(matrix)?;
    let alpha = (0..matrix.categories())
        .map(|c| {
            if partition.is_common(c) {
                alpha_common
            } else {
                alpha_other
            }
        })
        .collect();
    Ok(TaskWeightTable { alpha, beta })
}

/// A known label found outside its sample's domain label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelViolation {
    pub sample: usize,
    pub category: CategoryId,
    pub value: LabelValue,
}

/// Every cell whose category lies outside its domain's label space but is not unknown.
/// Samples tagged with an unregistered domain are reported on every known cell.
pub fn validate_label_matrix(
    matrix: &PartialLabelMatrix,
    registry: &DomainRegistry,
) -> Result<(), Vec<LabelViolation>> {
    let empty = BTreeSet::new();
    let mut violations = Vec::new();
    for sample in 0..matrix.samples() {
        let space = registry
            .domain(matrix.domain_of()[sample])
            .map_or(&empty, |d| &d.label_space);
        for (category, &value) in matrix.row(sample).iter().enumerate() {
            if value.is_known() && !space.contains(&category) {
                violations.push(LabelViolation {
                    sample,
                    category,
                    value,
                });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(id: DomainId, space: impl IntoIterator<Item = CategoryId>) -> Domain {
        Domain {
            id,
            name: format!("d{id}"),
            label_space: space.into_iter().collect(),
        }
    }

    fn column_matrix(codes: &[i64]) -> PartialLabelMatrix {
        PartialLabelMatrix::new(
            1,
            codes.iter().map(|&c| LabelValue::try_from(c).unwrap()).collect(),
            (0..codes.len()).map(|i| format!("s{i}")).collect(),
            vec![0; codes.len()],
        )
        .unwrap()
    }

    #[test]
    fn label_codes_round_trip_and_reject_others() {
        for code in [1, 0, -2] {
            assert_eq!(LabelValue::try_from(code).unwrap().code(), code);
        }
        for code in [2, -1, 3, i64::MIN] {
            assert_eq!(LabelValue::try_from(code), Err(LabelError::BadCode(code)));
        }
    }

    #[test]
    fn nih_chexpert_style_partition_has_seven_common() {
        // 14-category internal space, 13-category external space, 7 shared.
        let internal = domain(0, 0..14);
        let external = domain(1, (7..14).chain(14..20));
        let reg = DomainRegistry::new(20, vec![internal, external]).unwrap();
        let p = category_partition(&reg).unwrap();
        assert_eq!(p.common.len(), 7);
        assert_eq!(p.exclusive[&0], (0..7).collect());
        assert_eq!(p.exclusive[&1], (14..20).collect());
    }

    #[test]
    fn identical_and_disjoint_spaces() {
        let reg = DomainRegistry::new(4, vec![domain(0, 0..4), domain(1, 0..4)]).unwrap();
        let p = category_partition(&reg).unwrap();
        assert_eq!(p.common, (0..4).collect());
        assert!(p.exclusive.values().all(|s| s.is_empty()));

        let reg = DomainRegistry::new(4, vec![domain(0, [0, 1]), domain(1, [2, 3])]).unwrap();
        let p = category_partition(&reg).unwrap();
        assert!(p.common.is_empty());
        assert_eq!(p.exclusive[&0], [0, 1].into_iter().collect());
        assert_eq!(p.exclusive[&1], [2, 3].into_iter().collect());
    }

    #[test]
    fn empty_registry_is_an_error() {
        let reg = DomainRegistry::new(3, vec![]).unwrap();
        assert_eq!(category_partition(&reg), Err(LabelError::EmptyRegistry));
    }

    #[test]
    fn registry_rejects_bad_domains() {
        assert!(matches!(
            DomainRegistry::new(3, vec![domain(1, [0])]),
            Err(LabelError::NonDenseDomainId { .. })
        ));
        assert_eq!(
            DomainRegistry::new(3, vec![domain(0, [])]),
            Err(LabelError::EmptyLabelSpace(0))
        );
        assert!(matches!(
            DomainRegistry::new(3, vec![domain(0, [5])]),
            Err(LabelError::CategoryOutOfRange { category: 5, .. })
        ));
    }

    #[test]
    fn beta_counts_only_known_labels() {
        // 6 negatives, 2 positives, 4 unknowns.
        let m = column_matrix(&[0, 0, 1, -2, 0, -2, 0, 1, -2, 0, 0, -2]);
        assert_eq!(m.counts(0), (2, 6));
        assert_eq!(class_balance_weights(&m).unwrap(), vec![3.0]);

        let m = column_matrix(&[1, 0, 1, 0, -2]);
        assert_eq!(class_balance_weights(&m).unwrap(), vec![1.0]);
    }

    #[test]
    fn one_sided_category_is_degenerate() {
        let m = column_matrix(&[1, 1, -2]);
        assert_eq!(
            class_balance_weights(&m),
            Err(LabelError::DegenerateCategory(0))
        );
        let m = column_matrix(&[0, -2]);
        assert_eq!(
            class_balance_weights(&m),
            Err(LabelError::DegenerateCategory(0))
        );
    }

    #[test]
    fn alpha_follows_partition() {
        let reg = DomainRegistry::new(3, vec![domain(0, 0..3), domain(1, [0, 1])]).unwrap();
        let p = category_partition(&reg).unwrap();
        let m = PartialLabelMatrix::new(
            3,
            [1, 0, 1, 0, 1, 0, 1, 1, -2, 0, 0, -2]
                .into_iter()
                .map(|c| LabelValue::try_from(c).unwrap())
                .collect(),
            (0..4).map(|i| i.to_string()).collect(),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let t = task_weight_table(&p, &m, 3.0, 1.0).unwrap();
        assert_eq!(t.alpha, vec![3.0, 3.0, 1.0]);
        assert_eq!(t.beta, vec![1.0, 1.0, 1.0]);
        let flat = task_weight_table(&p, &m, 1.0, 1.0).unwrap();
        assert!(flat.alpha.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn out_of_space_known_label_is_a_violation() {
        let reg = DomainRegistry::new(3, vec![domain(0, [0, 1])]).unwrap();
        let m = PartialLabelMatrix::new(
            3,
            vec![LabelValue::Absent, LabelValue::Present, LabelValue::Present],
            vec!["a".into()],
            vec![0],
        )
        .unwrap();
        let v = validate_label_matrix(&m, &reg).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].sample, v[0].category), (0, 2));

        let masked = PartialLabelMatrix::new(
            3,
            vec![LabelValue::Unknown; 3],
            vec!["a".into()],
            vec![0],
        )
        .unwrap();
        assert!(validate_label_matrix(&masked, &reg).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = PartialLabelMatrix::new(
            1,
            vec![LabelValue::Absent; 2],
            vec!["x".into(), "x".into()],
            vec![0, 0],
        );
        assert_eq!(r, Err(LabelError::DuplicateSampleId("x".into())));
    }
}

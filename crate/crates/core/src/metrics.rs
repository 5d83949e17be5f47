//! ROC AUC via tie-averaged Mann-Whitney ranks, and the per-category report
//! with its three aggregates (all categories, common, internal-only).

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{CategoryId, CategoryPartition, DomainId, LabelValue, PartialLabelMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("AUC needs at least one positive and one negative ({positives} / {negatives})")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

/// `(sum of positive ranks - P(P+1)/2) / (P N)` with tied scores sharing
/// their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum keeps every quantity an integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j averaged: (i + 1 + j) / 2
        let twice_avg = (i + 1 + j) as u64;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_avg * tied_pos;
        i = j;
    }
    let p = positives as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * negatives as u64) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAuc {
    /// `None` when the category has no positive or no negative known label.
    pub auc: Option<f64>,
    pub counts: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_category: BTreeMap<CategoryId, CategoryAuc>,
    pub mean: Option<f64>,
    pub mean_common: Option<f64>,
    pub mean_internal_only: Option<f64>,
}

impl MetricsReport {
    pub fn auc(&self, c: CategoryId) -> Option<f64> {
        self.per_category.get(&c).and_then(|a| a.auc)
    }

    /// Builds a report from per-category AUCs.
    pub fn from_aucs(
        per_category: BTreeMap<CategoryId, CategoryAuc>,
        partition: &CategoryPartition,
        internal_domain: DomainId,
    ) -> Self {
        let internal_only = partition.exclusive_to(internal_domain);
        let mean_of = |keep: &dyn Fn(CategoryId) -> bool| -> Option<f64> {
            let vals: Vec<f64> = per_category
                .iter()
                .filter(|(&c, _)| keep(c))
                .filter_map(|(_, a)| a.auc)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mean = mean_of(&|_| true);
        let mean_common = mean_of(&|c| partition.is_common(c));
        let mean_internal_only = mean_of(&|c| internal_only.contains(&c));
        Self {
            per_category,
            mean,
            mean_common,
            mean_internal_only,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-category AUC over known labels, plus the three aggregates.
pub fn metrics_report(
    p: ArrayView2<f64>,
    labels: &PartialLabelMatrix,
    partition: &CategoryPartition,
    internal_domain: DomainId,
) -> MetricsReport {
    let mut per_category = BTreeMap::new();
    for c in 0..labels.categories() {
        let mut scores = Vec::new();
        let mut truth = Vec::new();
        for i in 0..labels.samples() {
            match labels.get(i, c) {
                LabelValue::Present => {
                    scores.push(p[[i, c]]);
                    truth.push(true);
                }
                LabelValue::Absent => {
                    scores.push(p[[i, c]]);
                    truth.push(false);
                }
                LabelValue::Unknown => {}
            }
        }
        let positives = truth.iter().filter(|&&t| t).count();
        per_category.insert(
            c,
            CategoryAuc {
                auc: auc(&scores, &truth).ok(),
                counts: LabelCounts {
                    positives,
                    negatives: truth.len() - positives,
                },
            },
        );
    }
    MetricsReport::from_aucs(per_category, partition, internal_domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn small_auc_example() {
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn separated_and_constant_scores() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_labels() {
        assert_eq!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::DegenerateLabels {
                positives: 2,
                negatives: 0
            })
        );
        assert!(matches!(
            auc(&[0.1], &[true, false]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    fn partition() -> CategoryPartition {
        CategoryPartition {
            common: [0, 1].into_iter().collect(),
            exclusive: BTreeMap::from([(0, [2].into_iter().collect()), (1, Default::default())]),
        }
    }

    fn matrix(rows: &[[i64; 3]]) -> PartialLabelMatrix {
        PartialLabelMatrix::new(
            3,
            rows.iter()
                .flat_map(|r| r.iter().map(|&v| LabelValue::try_from(v).unwrap()))
                .collect(),
            (0..rows.len()).map(|i| i.to_string()).collect(),
            vec![0; rows.len()],
        )
        .unwrap()
    }

    #[test]
    fn aggregates_skip_degenerate_categories() {
        // category 2 is entirely unknown
        let y = matrix(&[[0, 1, -2], [0, 0, -2], [1, 1, -2], [1, 0, -2]]);
        let p = array![[0.1, 0.9, 0.5], [0.4, 0.2, 0.5], [0.35, 0.3, 0.5], [0.8, 0.6, 0.5]];
        let r = metrics_report(p.view(), &y, &partition(), 0);
        assert_eq!(r.auc(0), Some(0.75));
        // positives 0.9, 0.3 vs negatives 0.2, 0.6: three of four pairs ordered
        assert_eq!(r.auc(1), Some(0.75));
        assert_eq!(r.auc(2), None);
        assert_eq!(r.mean, Some(0.75));
        assert_eq!(r.mean_common, Some(0.75));
        assert_eq!(r.mean_internal_only, None);
        assert_eq!(r.per_category[&2].counts, LabelCounts { positives: 0, negatives: 0 });
    }

    #[test]
    fn two_common_categories_average() {
        let per = BTreeMap::from([
            (0, CategoryAuc { auc: Some(0.8), counts: LabelCounts { positives: 1, negatives: 1 } }),
            (1, CategoryAuc { auc: Some(0.6), counts: LabelCounts { positives: 1, negatives: 1 } }),
        ]);
        let r = MetricsReport::from_aucs(per, &partition(), 0);
        assert!((r.mean.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(r.mean, r.mean_common);
        assert_eq!(r.mean_internal_only, None);
    }

    #[test]
    fn all_degenerate_report_is_empty() {
        let y = matrix(&[[-2, -2, -2], [1, 1, 1]]);
        let r = metrics_report(array![[0.2, 0.2, 0.2], [0.4, 0.4, 0.4]].view(), &y, &partition(), 0);
        assert!(r.per_category.values().all(|a| a.auc.is_none()));
        assert_eq!((r.mean, r.mean_common, r.mean_internal_only), (None, None, None));
    }

    #[test]
    fn seven_plus_seven_aggregation() {
        let common: std::collections::BTreeSet<_> = (7..14).collect();
        let part = CategoryPartition {
            common,
            exclusive: BTreeMap::from([(0, (0..7).collect()), (1, (14..20).collect())]),
        };
        let per: BTreeMap<_, _> = (0..14)
            .map(|c| {
                (c, CategoryAuc {
                    auc: Some(if c < 7 { 0.9 } else { 0.7 }),
                    counts: LabelCounts { positives: 1, negatives: 1 },
                })
            })
            .collect();
        let r = MetricsReport::from_aucs(per, &part, 0);
        assert!((r.mean_internal_only.unwrap() - 0.9).abs() < 1e-15);
        assert!((r.mean_common.unwrap() - 0.7).abs() < 1e-15);
        assert!((r.mean.unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn report_json_has_stable_key_order() {
        let y = matrix(&[[0, 1, 0], [1, 0, 1]]);
        let p = array![[0.2, 0.7, 0.1], [0.6, 0.3, 0.9]];
        let r = metrics_report(p.view(), &y, &partition(), 0);
        let a = r.to_json();
        let back: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back.to_json(), a);
        assert!(a.find("\"mean\"").unwrap() < a.find("\"mean_common\"").unwrap());
    }
}

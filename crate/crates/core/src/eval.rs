//! Per-client ROC-AUC of the local, community and ideal schemes, and the
//! tables built from them.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AeParams;
use crate::community::CommunityPartition;
use crate::data::{ClientDataset, ClientId, TestSet};
use crate::error::{Error, Result};

/// Area under the ROC curve with outliers (`truth == true`) as positives.
///
/// Computed as the Mann–Whitney statistic from average ranks, so tied
/// scores count one half.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores"));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share the average 1-based rank
        let avg_rank = (start + end + 1) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| truth[i]).count();
        pos_rank_sum += avg_rank * positives as f64;
        start = end;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Local,
    Community,
    Ideal,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Local, Scheme::Community, Scheme::Ideal];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Local => "local",
            Scheme::Community => "community",
            Scheme::Ideal => "ideal",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub scheme: Scheme,
    pub per_client_auc: BTreeMap<ClientId, f64>,
    pub mean: f64,
    pub std: f64,
}

impl SchemeResult {
    pub fn from_aucs(scheme: Scheme, per_client_auc: BTreeMap<ClientId, f64>) -> Self {
        let values: Vec<f64> = per_client_auc.values().copied().collect();
        let (mean, std) = mean_std(&values);
        Self {
            scheme,
            per_client_auc,
            mean,
            std,
        }
    }

    pub fn subset_stats(&self, ids: &[ClientId]) -> (f64, f64) {
        let vals: Vec<f64> = ids
            .iter()
            .filter_map(|id| self.per_client_auc.get(id).copied())
            .collect();
        mean_std(&vals)
    }
}

/// Scores every client's test set with the model assigned to it.
pub fn evaluate_scheme(
    test_sets: &[TestSet],
    model_for_client: &BTreeMap<ClientId, &AeParams>,
    scheme: Scheme,
) -> Result<SchemeResult> {
    let aucs: Vec<(ClientId, f64)> = test_sets
        .par_iter()
        .map(|set| {
            let model = model_for_client.get(&set.client).ok_or_else(|| {
                Error::MissingArtifact(format!("{scheme} model for client {}", set.client))
            })?;
            let scores = model.scores(set.features.view())?;
            Ok((
                set.client,
                roc_auc(scores.as_slice().expect("contiguous"), &set.truth)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(SchemeResult::from_aucs(scheme, aucs.into_iter().collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub p: usize,
    pub inlier_class: u32,
    pub scheme: Scheme,
    pub mean: f64,
    pub std: f64,
}

/// Inlier classes whose clients were not grouped exactly as their ideal group.
pub fn mismatched_classes(partition: &CommunityPartition, ideal: &CommunityPartition) -> Vec<u32> {
    let mut out = Vec::new();
    for group in &ideal.groups {
        let class = group[0].inlier_class;
        let exact = group
            .iter()
            .all(|&id| partition.group_of(id) == Some(group.as_slice()));
        if !exact {
            out.push(class);
        }
    }
    out
}

/// Per-inlier-class AUC rows for the classes whose detected community
/// differs from the ideal group.
pub fn breakdown_by_inlier(
    p: usize,
    results: &[SchemeResult],
    partition: &CommunityPartition,
    ideal: &CommunityPartition,
) -> Vec<BreakdownRow> {
    let mut rows = Vec::new();
    for class in mismatched_classes(partition, ideal) {
        let members: Vec<ClientId> = ideal
            .groups
            .iter()
            .find(|g| g[0].inlier_class == class)
            .cloned()
            .unwrap_or_default();
        for r in results {
            let (mean, std) = r.subset_stats(&members);
            rows.push(BreakdownRow {
                p,
                inlier_class: class,
                scheme: r.scheme,
                mean,
                std,
            });
        }
    }
    rows
}

/// Training-set class counts per client.
pub fn class_histograms(clients: &[ClientDataset]) -> BTreeMap<ClientId, BTreeMap<u32, usize>> {
    clients
        .iter()
        .map(|c| {
            let mut h = BTreeMap::new();
            for class in c.row_classes() {
                *h.entry(class).or_insert(0) += 1;
            }
            (c.id, h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn auc_small_cases() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.9, 0.95], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedAuc)
        ));
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn histograms_have_two_bins() {
        let client = ClientDataset {
            id: ClientId::new(0, 0),
            inlier_class: 0,
            outlier_class: 3,
            contamination: 0.1,
            rows: (0..667).collect(),
            train: Array2::zeros((667, 1)),
            truth: (0..667).map(|k| k >= 600).collect(),
        };
        let h = class_histograms(&[client]);
        let bins = &h[&ClientId::new(0, 0)];
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[&0], 600);
        assert_eq!(bins[&3], 67);
        assert_eq!(bins.values().sum::<usize>(), 667);
    }

    #[test]
    fn breakdown_only_lists_mismatched_classes() {
        let ids: Vec<ClientId> = (0..3)
            .flat_map(|c| (0..2).map(move |j| ClientId::new(c, j)))
            .collect();
        let ideal = CommunityPartition::ideal(&ids);
        let aucs: BTreeMap<ClientId, f64> = ids.iter().map(|&id| (id, 0.5)).collect();
        let results: Vec<SchemeResult> = Scheme::ALL
            .iter()
            .map(|&s| SchemeResult::from_aucs(s, aucs.clone()))
            .collect();
        assert!(breakdown_by_inlier(2, &results, &ideal, &ideal).is_empty());

        let merged =
            CommunityPartition::from_groups(vec![ids[..4].to_vec(), ids[4..].to_vec()]).unwrap();
        let rows = breakdown_by_inlier(2, &results, &merged, &ideal);
        let classes: Vec<u32> = rows.iter().map(|r| r.inlier_class).collect();
        assert_eq!(classes, vec![0, 0, 0, 1, 1, 1]);
    }
}

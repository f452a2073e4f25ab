use std::collections::BTreeMap;

use fedcomm_core::association::{rethreshold, AssociationGraph, DirectedRecord};
use fedcomm_core::autoencoder::AeParams;
use fedcomm_core::community::{partition_metrics, CommunityPartition};
use fedcomm_core::data::{
    partition_clients, synth_patterns, ClientId, PartitionConfig, SyntheticSpec,
};
use fedcomm_core::eval::roc_auc;
use fedcomm_core::fedavg::aggregate;
use fedcomm_core::ocsvm::gram_matrix;
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;

fn brute_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti && !tj {
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / total
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..200).prop_flat_map(|n| {
        (
            // a coarse grid makes ties common
            prop::collection::vec((0u32..40).prop_map(|k| f64::from(k) / 8.0 - 2.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn ids(classes: u32, per: u32) -> Vec<ClientId> {
    (0..classes)
        .flat_map(|c| (0..per).map(move |j| ClientId::new(c, j)))
        .collect()
}

fn rand_index_pairs(a: &CommunityPartition, b: &CommunityPartition) -> (f64, f64, f64, f64) {
    // (both together, only a, only b, n pairs)
    let nodes: Vec<ClientId> = a.assignment.keys().copied().collect();
    let (mut both, mut only_a, mut only_b, mut n) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let sa = a.assignment[&nodes[i]] == a.assignment[&nodes[j]];
            let sb = b.assignment[&nodes[i]] == b.assignment[&nodes[j]];
            n += 1.0;
            match (sa, sb) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                _ => {}
            }
        }
    }
    (both, only_a, only_b, n)
}

fn brute_ari(a: &CommunityPartition, b: &CommunityPartition) -> f64 {
    let (both, only_a, only_b, n) = rand_index_pairs(a, b);
    let sa = both + only_a;
    let sb = both + only_b;
    let expected = sa * sb / n;
    let max = (sa + sb) / 2.0;
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_matches_pair_counting((scores, truth) in labelled_scores()) {
        prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
        let fast = roc_auc(&scores, &truth).unwrap();
        prop_assert!((fast - brute_auc(&scores, &truth)).abs() <= 1e-12);
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        prop_assert!((roc_auc(&warped, &truth).unwrap() - fast).abs() <= 1e-12);
        let flipped: Vec<bool> = truth.iter().map(|t| !t).collect();
        prop_assert!((roc_auc(&scores, &flipped).unwrap() - (1.0 - fast)).abs() <= 1e-12);
    }

    #[test]
    fn gram_matrix_is_psd(
        raw in prop::collection::vec(0.0f64..1.0, 6..60),
        gamma in 0.05f64..20.0,
    ) {
        let n = raw.len() / 3;
        let x = Array2::from_shape_vec((n, 3), raw[..n * 3].to_vec()).unwrap();
        let k = gram_matrix(x.view(), gamma);
        let m = DMatrix::from_fn(n, n, |i, j| k[[i, j]]);
        prop_assert!((&m - m.transpose()).amax() == 0.0);
        let min_eig = m.symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-10, "min eigenvalue {}", min_eig);
        for i in 0..n {
            prop_assert_eq!(k[[i, i]], 1.0);
        }
    }

    #[test]
    fn ari_matches_pair_counting(
        labels_a in prop::collection::vec(0u8..4, 12),
        labels_b in prop::collection::vec(0u8..4, 12),
    ) {
        let nodes = ids(3, 4);
        let a = CommunityPartition::from_labels(nodes.iter().copied().zip(labels_a));
        let b = CommunityPartition::from_labels(nodes.iter().copied().zip(labels_b));
        let m = partition_metrics(&a, &b).unwrap();
        prop_assert!((m.adjusted_rand_index - brute_ari(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(m.exact_match, a == b);
        let same = partition_metrics(&a, &a).unwrap();
        prop_assert_eq!(same.adjusted_rand_index, 1.0);
    }

    #[test]
    fn aggregate_stays_within_client_range(
        flats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 17), 1..6),
        counts in prop::collection::vec(1usize..50, 6),
    ) {
        let dims = [2usize, 3, 2];
        let updates: Vec<(AeParams, usize)> = flats
            .iter()
            .zip(&counts)
            .map(|(f, &n)| (AeParams::from_flat(&dims, f).unwrap(), n))
            .collect();
        let out = aggregate(&updates).unwrap().flatten();
        let total: usize = updates.iter().map(|(_, n)| n).sum();
        for k in 0..17 {
            let lo = flats.iter().map(|f| f[k]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[k] >= lo && out[k] <= hi);
            let mean: f64 = flats.iter().zip(&counts).map(|(f, &n)| f[k] * n as f64).sum::<f64>()
                / total as f64;
            prop_assert!((out[k] - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        }
    }

    #[test]
    fn edges_grow_with_q(
        fractions in prop::collection::vec(0.0f64..1.0, 36),
        own in prop::collection::vec(0.7f64..1.0, 6),
    ) {
        let nodes = ids(3, 2);
        let mut records = Vec::new();
        let mut k = 0;
        for &m in &nodes {
            for &d in &nodes {
                if m != d {
                    records.push(DirectedRecord {
                        model_owner: m,
                        data_owner: d,
                        inlier_fraction: fractions[k],
                        bit: false,
                    });
                }
                k += 1;
            }
        }
        let graph = AssociationGraph {
            nodes: nodes.clone(),
            edges: Vec::new(),
            records,
            own_inlier_fraction: nodes.iter().copied().zip(own).collect::<BTreeMap<_, _>>(),
        };
        let qs = [0.0, 0.01, 0.05, 0.08, 0.1, 0.3, 1.0];
        for w in qs.windows(2) {
            let small = rethreshold(&graph, w[0]).edge_set();
            let large = rethreshold(&graph, w[1]).edge_set();
            prop_assert!(small.is_subset(&large));
        }
    }

    #[test]
    fn partitions_are_disjoint_and_contaminated(p in 1usize..6, d in 0.02f64..0.3, seed in any::<u64>()) {
        let spec = SyntheticSpec { n_classes: 4, n_per_class: 120, n_features: 3, separation: 0.2, noise_sigma: 0.05 };
        let ds = synth_patterns(&spec, 5).unwrap();
        let cfg = PartitionConfig { p, d, selected_classes: vec![], seed, max_train_per_client: None };
        let clients = partition_clients(&ds, &cfg).unwrap();
        prop_assert_eq!(clients.len(), 4 * p);
        let mut seen = std::collections::BTreeSet::new();
        for c in &clients {
            for &r in &c.rows {
                prop_assert!(seen.insert(r), "row {} used twice", r);
            }
            prop_assert!(c.n_outliers() >= 1);
            prop_assert_ne!(c.inlier_class, c.outlier_class);
            for (class, &out) in c.row_classes().zip(&c.truth) {
                prop_assert_eq!(class == c.outlier_class, out);
            }
        }
    }
}

/// Central differences over every coordinate of a small network.
pub fn gradient_relative_error(params: &AeParams, batch: &Array2<f64>) -> f64 {
    let analytic = params.grad(batch.view()).unwrap().flatten();
    let flat = params.flatten();
    let h = 1e-5;
    let mut numeric = vec![0.0; flat.len()];
    for k in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[k] += h;
        minus[k] -= h;
        let lp = AeParams::from_flat(&params.layer_dims, &plus)
            .unwrap()
            .loss(batch.view())
            .unwrap();
        let lm = AeParams::from_flat(&params.layer_dims, &minus)
            .unwrap()
            .loss(batch.view())
            .unwrap();
        numeric[k] = (lp - lm) / (2.0 * h);
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(&analytic).max(norm(&numeric)).max(1e-300)
}

/// Glorot weights with random (non-zero) biases, so no ReLU sits exactly
/// at its kink.
pub fn random_params(input_dim: usize, seed: u64) -> AeParams {
    use rand::Rng as _;
    let mut params = AeParams::init_with_hidden(input_dim, &[5, 3, 5], seed).unwrap();
    let mut rng = fedcomm_core::seed::rng(seed ^ 0x5eed);
    for b in &mut params.biases {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    params
}

#[test]
fn gradient_matches_finite_differences() {
    use rand::Rng as _;
    let mut rng = fedcomm_core::seed::rng(99);
    for probe in 0..3u64 {
        let params = random_params(7, probe);
        let batch = Array2::from_shape_simple_fn((3, 7), || rng.random::<f64>());
        let err = gradient_relative_error(&params, &batch);
        assert!(err < 1e-4, "probe {probe}: relative error {err}");
    }
}

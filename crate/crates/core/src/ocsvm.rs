//! ν-one-class SVM with an RBF kernel, trained by SMO.
//!
//! The dual is
//!
//! ```text
//! min ½ αᵀKα   s.t.  0 ≤ αᵢ ≤ 1/(νn),  Σ αᵢ = 1
//! ```
//!
//! and the decision function is `f(x) = Σ αᵢ k(svᵢ, x) − ρ`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// RBF width selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    /// `1 / (n_features * var)` where `var` is the variance of all entries
    /// of the training matrix taken together.
    #[default]
    Scale,
    Fixed(f64),
}

impl Gamma {
    pub fn resolve(&self, train: ArrayView2<'_, f64>) -> Result<f64> {
        let g = match *self {
            Gamma::Fixed(g) => g,
            Gamma::Scale => {
                let var = train.var(0.0);
                if var > 0.0 {
                    1.0 / (train.ncols() as f64 * var)
                } else {
                    1.0
                }
            }
        };
        if g > 0.0 && g.is_finite() {
            Ok(g)
        } else {
            Err(Error::InvalidParameter(format!(
                "gamma must be positive, got {g}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcsvmParams {
    pub nu: f64,
    #[serde(default)]
    pub gamma: Gamma,
    /// KKT violation tolerance, on the libsvm scale (alphas summing to νn).
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Working-pair selections allowed per training sample.
    #[serde(default = "default_iter_factor")]
    pub max_iter_per_sample: usize,
}

fn default_tol() -> f64 {
    1e-3
}

fn default_iter_factor() -> usize {
    200
}

impl Default for OcsvmParams {
    fn default() -> Self {
        Self {
            nu: 0.1,
            gamma: Gamma::Scale,
            tol: default_tol(),
            max_iter_per_sample: default_iter_factor(),
        }
    }
}

impl OcsvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "nu = {} outside (0, 1]",
                self.nu
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        if let Gamma::Fixed(g) = self.gamma {
            if g.is_nan() || g <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "gamma must be positive, got {g}"
                )));
            }
        }
        Ok(())
    }
}

/// Trained one-class SVM. Immutable after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub support_vectors: Array2<f64>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub n_train: usize,
    pub converged: bool,
    pub iterations: usize,
}

pub fn rbf_kernel(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(rbf_unchecked(x, y, gamma))
}

fn rbf_unchecked(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

pub fn gram_matrix(x: ArrayView2<'_, f64>, gamma: f64) -> Array2<f64> {
    let n = x.nrows();
    let sq: Vec<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
    let dots = x.dot(&x.t());
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let d2 = (sq[i] + sq[j] - 2.0 * dots[(i, j)]).max(0.0);
            let v = (-gamma * d2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Fits a ν-OCSVM. Non-convergence within the iteration budget is reported
/// through [`OcsvmModel::converged`], not as an error.
pub fn fit(train: ArrayView2<'_, f64>, params: &OcsvmParams, seed: u64) -> Result<OcsvmModel> {
    params.validate()?;
    let n = train.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "OC-SVM needs at least 2 training rows, got {n}"
        )));
    }
    if train.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("OC-SVM training data"));
    }
    let gamma = params.gamma.resolve(train)?;
    let nu = params.nu;
    let upper = 1.0 / (nu * n as f64);
    let k = gram_matrix(train, gamma);

    // Feasible start: floor(νn) coordinates at the bound, one fractional
    // remainder, placed on a seeded permutation of the samples.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "ocsvm-init", &[])));
    let mut alpha = vec![0.0; n];
    let mut remaining = 1.0f64;
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let a = upper.min(remaining);
        alpha[i] = a;
        remaining -= a;
    }

    let mut grad: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| k[(i, j)] * alpha[j]).sum())
        .collect();

    let max_iter = params.max_iter_per_sample.saturating_mul(n);
    // Tolerance applies to the dual scaled so that the alphas sum to νn, the
    // usual libsvm formulation; here they sum to 1.
    let scale = nu * n as f64;
    let mut iterations = 0;
    let mut converged = false;
    // Bound tests carry a small slack so that values clipped to the bound
    // compare as "at the bound".
    let at_upper = |a: f64| a >= upper * (1.0 - 1e-12);
    let at_lower = |a: f64| a <= upper * 1e-12;
    while iterations < max_iter {
        // i: largest -G among coordinates that may grow; j: smallest -G among
        // those that may shrink. Strict comparisons keep the lowest index on ties.
        let mut i_best = None;
        let mut max_up = f64::NEG_INFINITY;
        let mut j_best = None;
        let mut min_low = f64::INFINITY;
        for t in 0..n {
            if !at_upper(alpha[t]) && -grad[t] > max_up {
                max_up = -grad[t];
                i_best = Some(t);
            }
            if !at_lower(alpha[t]) && -grad[t] < min_low {
                min_low = -grad[t];
                j_best = Some(t);
            }
        }
        let (Some(i), Some(j)) = (i_best, j_best) else {
            converged = true;
            break;
        };
        if (max_up - min_low) * scale < params.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let curvature = (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(1e-12);
        let mut delta = (grad[j] - grad[i]) / curvature;
        delta = delta.min(upper - alpha[i]).min(alpha[j]);
        if delta <= 0.0 {
            // Degenerate pair: clamp the coordinates onto their bounds so the
            // next sweep picks a different pair.
            if at_upper(alpha[i]) {
                alpha[i] = upper;
            }
            if at_lower(alpha[j]) {
                alpha[j] = 0.0;
            }
            continue;
        }
        alpha[i] += delta;
        alpha[j] -= delta;
        if at_upper(alpha[i]) {
            let fix = alpha[i] - upper;
            alpha[i] = upper;
            alpha[j] += fix;
        }
        if at_lower(alpha[j]) {
            let fix = alpha[j];
            alpha[j] = 0.0;
            alpha[i] += fix;
        }
        for (t, g) in grad.iter_mut().enumerate() {
            *g += delta * (k[(t, i)] - k[(t, j)]);
        }
    }

    // Gradient drifts under incremental updates; recompute before using it.
    let grad: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| k[(i, j)] * alpha[j]).sum())
        .collect();
    let rho = compute_rho(&alpha, &grad, upper);

    let sv: Vec<usize> = (0..n).filter(|&i| alpha[i] > 0.0).collect();
    Ok(OcsvmModel {
        support_vectors: train.select(Axis(0), &sv),
        alphas: sv.iter().map(|&i| alpha[i]).collect(),
        rho,
        gamma,
        nu,
        n_train: n,
        converged,
        iterations,
    })
}

fn compute_rho(alpha: &[f64], grad: &[f64], upper: f64) -> f64 {
    let mut free_sum = 0.0;
    let mut n_free = 0usize;
    let mut lb = f64::NEG_INFINITY;
    let mut ub = f64::INFINITY;
    for (&a, &g) in alpha.iter().zip(grad) {
        if a >= upper * (1.0 - 1e-12) {
            lb = lb.max(g);
        } else if a <= upper * 1e-12 {
            ub = ub.min(g);
        } else {
            free_sum += g;
            n_free += 1;
        }
    }
    if n_free > 0 {
        free_sum / n_free as f64
    } else {
        let (lb, ub) = match (lb.is_finite(), ub.is_finite()) {
            (true, true) => (lb, ub),
            (true, false) => (lb, lb),
            (false, true) => (ub, ub),
            (false, false) => (0.0, 0.0),
        };
        (lb + ub) / 2.0
    }
}

impl OcsvmModel {
    pub fn n_features(&self) -> usize {
        self.support_vectors.ncols()
    }

    pub fn n_support(&self) -> usize {
        self.alphas.len()
    }

    /// Signed distance to the boundary; positive on the inlier side.
    pub fn decision(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                found: x.len(),
            });
        }
        Ok(self.decision_unchecked(x))
    }

    fn decision_unchecked(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.support_vectors
            .outer_iter()
            .zip(&self.alphas)
            .map(|(sv, &a)| a * rbf_unchecked(sv, x, self.gamma))
            .sum::<f64>()
            - self.rho
    }

    pub fn decision_function(&self, data: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if data.nrows() > 0 && data.ncols() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                found: data.ncols(),
            });
        }
        Ok(data
            .outer_iter()
            .map(|row| self.decision_unchecked(row))
            .collect())
    }

    /// Binary labels, 1 = inlier (decision ≥ 0), 0 = outlier.
    pub fn predict(&self, data: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        Ok(self
            .decision_function(data)?
            .iter()
            .map(|&f| u8::from(f >= 0.0))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&ModelBlob {
            version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })
        .map_err(|e| Error::InvalidData(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let blob: ModelBlob =
            serde_json::from_str(s).map_err(|e| Error::InvalidData(e.to_string()))?;
        if blob.version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported OC-SVM model version {}",
                blob.version
            )));
        }
        Ok(blob.model)
    }
}

/// Versioned exchange payload.
#[derive(Serialize, Deserialize)]
struct ModelBlob {
    version: u32,
    model: OcsvmModel,
}

/// Fits one model per training matrix in parallel; seeds are per index.
pub fn fit_many(
    trains: &[ArrayView2<'_, f64>],
    params: &OcsvmParams,
    seeds: &[u64],
) -> Result<Vec<OcsvmModel>> {
    trains
        .par_iter()
        .zip(seeds)
        .map(|(x, &s)| fit(*x, params, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn cluster(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.5, 0.1).unwrap();
        Array2::from_shape_fn((n, dim), |_| normal.sample(&mut rng))
    }

    #[test]
    fn kernel_closed_form() {
        let x = array![0.0, 0.0];
        let y = array![1.0, 0.0];
        let v = rbf_kernel(x.view(), y.view(), 1.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(rbf_kernel(x.view(), x.view(), 3.0).unwrap(), 1.0);
        assert!(rbf_kernel(x.view(), y.view(), 0.0).is_err());
        assert!(rbf_kernel(x.view(), array![1.0].view(), 1.0).is_err());
    }

    #[test]
    fn two_points_nu_one() {
        let x = array![[0.1, 0.2], [0.7, 0.4]];
        let params = OcsvmParams {
            nu: 1.0,
            ..Default::default()
        };
        let m = fit(x.view(), &params, 0).unwrap();
        assert_eq!(m.n_support(), 2);
        for a in &m.alphas {
            assert!((a - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn nu_property_and_feasibility() {
        let x = cluster(500, 4, 3);
        let params = OcsvmParams::default();
        let m = fit(x.view(), &params, 1).unwrap();
        assert!(m.converged);
        let sum: f64 = m.alphas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-8);
        let upper = 1.0 / (0.1 * 500.0);
        assert!(m.alphas.iter().all(|&a| a > 0.0 && a <= upper + 1e-12));
        let f = m.decision_function(x.view()).unwrap();
        let neg = f.iter().filter(|&&v| v < 0.0).count() as f64 / 500.0;
        assert!((0.05..=0.15).contains(&neg), "outlier fraction {neg}");
        assert!(m.n_support() as f64 / 500.0 >= 0.05);
    }

    #[test]
    fn free_support_vectors_sit_on_boundary() {
        let x = cluster(200, 3, 8);
        let params = OcsvmParams {
            tol: 1e-8,
            ..Default::default()
        };
        let m = fit(x.view(), &params, 0).unwrap();
        let upper = 1.0 / (0.1 * 200.0);
        for (sv, &a) in m.support_vectors.outer_iter().zip(&m.alphas) {
            if a < upper * (1.0 - 1e-9) {
                assert!(m.decision(sv).unwrap().abs() < 1e-6);
            }
        }
    }

    #[test]
    fn far_point_decision_is_minus_rho() {
        let x = cluster(100, 3, 2);
        let m = fit(x.view(), &OcsvmParams::default(), 0).unwrap();
        let far = array![100.0, 100.0, 100.0];
        assert!((m.decision(far.view()).unwrap() + m.rho).abs() < 1e-12);
    }

    #[test]
    fn duplicated_training_set_keeps_boundary() {
        let x = cluster(80, 2, 5);
        let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let params = OcsvmParams {
            tol: 1e-7,
            gamma: Gamma::Fixed(4.0),
            ..Default::default()
        };
        let a = fit(x.view(), &params, 0).unwrap();
        let b = fit(doubled.view(), &params, 0).unwrap();
        for u in 0..=10 {
            for v in 0..=10 {
                let p = array![u as f64 / 10.0, v as f64 / 10.0];
                let (fa, fb) = (a.decision(p.view()).unwrap(), b.decision(p.view()).unwrap());
                assert!((fa - fb).abs() < 1e-4, "{fa} vs {fb}");
            }
        }
    }

    #[test]
    fn predict_is_sign_of_decision() {
        let x = cluster(120, 3, 4);
        let m = fit(x.view(), &OcsvmParams::default(), 0).unwrap();
        let labels = m.predict(x.view()).unwrap();
        let f = m.decision_function(x.view()).unwrap();
        assert_eq!(labels.len(), 120);
        for (l, v) in labels.iter().zip(f.iter()) {
            assert_eq!(*l == 1, *v >= 0.0);
        }
        assert!(m.predict(Array2::zeros((0, 3)).view()).unwrap().is_empty());
        assert!(m.predict(Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = cluster(10, 2, 0);
        let bad_nu = OcsvmParams {
            nu: 0.0,
            ..Default::default()
        };
        assert!(fit(x.view(), &bad_nu, 0).is_err());
        assert!(fit(x.slice(ndarray::s![..1, ..]), &OcsvmParams::default(), 0).is_err());
    }

    #[test]
    fn fit_is_deterministic_and_serializes() {
        let x = cluster(60, 3, 9);
        let a = fit(x.view(), &OcsvmParams::default(), 42).unwrap();
        let b = fit(x.view(), &OcsvmParams::default(), 42).unwrap();
        assert_eq!(a, b);
        let back = OcsvmModel::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn scale_gamma_uses_pooled_variance() {
        let x = array![[0.0, 0.0], [1.0, 1.0]];
        assert!((Gamma::Scale.resolve(x.view()).unwrap() - 2.0).abs() < 1e-15);
        // constant columns, but the entries still vary
        let cols = array![[0.0, 1.0], [0.0, 1.0]];
        assert!((Gamma::Scale.resolve(cols.view()).unwrap() - 2.0).abs() < 1e-15);
        let flat = array![[0.3, 0.3], [0.3, 0.3]];
        assert_eq!(Gamma::Scale.resolve(flat.view()).unwrap(), 1.0);
    }
}

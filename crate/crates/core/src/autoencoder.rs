//! Fully connected autoencoder `[D, 64, 32, 64, D]` with ReLU hidden
//! layers and a sigmoid output. The anomaly score of a sample is its mean
//! squared reconstruction error.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::seed;

pub const HIDDEN: [usize; 3] = [64, 32, 64];
const CHECKPOINT_MAGIC: &[u8; 4] = b"FCAE";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights and biases. `weights[l]` has shape `(layer_dims[l], layer_dims[l + 1])`.
///
/// The canonical flat order is layer by layer, each layer's weight matrix in
/// row-major order followed by its bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AeParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl AeParams {
    /// Glorot-uniform weights and zero biases for the standard topology.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self> {
        Self::init_with_hidden(input_dim, &HIDDEN, seed)
    }

    pub fn init_with_hidden(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "layer widths must be positive".into(),
            ));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(input_dim);
        let mut rng = seed::rng(seed::derive(seed, "ae-init", &[]));
        let weights = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                Array2::from_shape_simple_fn((w[0], w[1]), || dist.sample(&mut rng))
            })
            .collect();
        let biases = dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_dims: dims,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Self {
        Self {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims
                .windows(2)
                .map(|w| Array2::zeros((w[0], w[1])))
                .collect(),
            biases: layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn from_flat(layer_dims: &[usize], flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(layer_dims);
        if flat.len() != params.n_params() {
            return Err(Error::DimensionMismatch {
                expected: params.n_params(),
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for (w, b) in params.weights.iter_mut().zip(params.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| {
                *v = it.next().expect("length checked");
            });
        }
        Ok(params)
    }

    pub fn same_shape(&self, other: &AeParams) -> bool {
        self.layer_dims == other.layer_dims
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: batch.ncols(),
            });
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("autoencoder input"));
        }
        Ok(())
    }

    /// Activations of every layer, input included.
    fn activations(&self, batch: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(batch.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w);
            z += b;
            if l == last {
                z.mapv_inplace(sigmoid);
            } else {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn reconstruct(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        Ok(self.activations(batch).pop().expect("at least one layer"))
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.reconstruct(batch)?.row(0).to_owned())
    }

    /// Per-sample mean squared reconstruction error.
    pub fn scores(&self, batch: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let recon = self.reconstruct(batch)?;
        Ok(per_sample_mse(batch, recon.view()))
    }

    pub fn anomaly_score(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self.scores(x.insert_axis(Axis(0)))?[0])
    }

    /// Mean over the batch of per-sample mean squared error.
    pub fn loss(&self, batch: ArrayView2<'_, f64>) -> Result<f64> {
        if batch.nrows() == 0 {
            return Err(Error::EmptyInput("loss batch"));
        }
        Ok(self.scores(batch)?.mean().expect("non-empty"))
    }

    /// Exact gradient of [`AeParams::loss`] by backpropagation.
    pub fn grad(&self, batch: ArrayView2<'_, f64>) -> Result<AeParams> {
        if batch.nrows() == 0 {
            return Err(Error::EmptyInput("gradient batch"));
        }
        self.check_batch(batch)?;
        Ok(self.grad_unchecked(batch))
    }

    fn grad_unchecked(&self, batch: ArrayView2<'_, f64>) -> AeParams {
        let acts = self.activations(batch);
        let n_layers = self.weights.len();
        let scale = 2.0 / (batch.nrows() * self.input_dim()) as f64;
        let output = &acts[n_layers];
        // dL/dz at the sigmoid output layer.
        let mut delta = Array2::<f64>::zeros(output.raw_dim());
        Zip::from(&mut delta)
            .and(output)
            .and(&batch)
            .for_each(|d, &y, &x| *d = scale * (y - x) * y * (1.0 - y));

        let mut grads = AeParams::zeros(&self.layer_dims);
        for l in (0..n_layers).rev() {
            grads.weights[l] = acts[l].t().dot(&delta);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                // ReLU subgradient is 0 at 0.
                Zip::from(&mut back).and(&acts[l]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads
    }

    /// `self -= lr * g`
    pub fn apply_step(&mut self, g: &AeParams, lr: f64) {
        for (w, gw) in self.weights.iter_mut().zip(&g.weights) {
            w.scaled_add(-lr, gw);
        }
        for (b, gb) in self.biases.iter_mut().zip(&g.biases) {
            b.scaled_add(-lr, gb);
        }
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.layer_dims.len() + self.n_params()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidData(format!("autoencoder checkpoint: {why}"));
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if word(4) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let n_dims = word(8) as usize;
        if n_dims < 2 || bytes.len() < 12 + 8 * n_dims {
            return Err(bad("truncated header"));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let dims: Vec<usize> = (0..n_dims).map(|k| u64_at(12 + 8 * k) as usize).collect();
        let body = &bytes[12 + 8 * n_dims..];
        let n_params: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if body.len() != 8 * n_params {
            return Err(bad("payload length does not match layer dims"));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(&dims, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&bytes).map_err(|e| Error::IncompatibleArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn per_sample_mse(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array1<f64> {
    let d = x.ncols() as f64;
    x.outer_iter()
        .zip(y.outer_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / d)
        .collect()
}

/// One pass of mini-batch SGD over a seeded shuffle of `data`; the final
/// partial batch is included.
pub fn sgd_epoch(
    params: &AeParams,
    data: ArrayView2<'_, f64>,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<AeParams> {
    if data.nrows() == 0 {
        return Err(Error::EmptyInput("training data"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParameter(
            "batch size must be positive".into(),
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate {lr}")));
    }
    params.check_batch(data)?;
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut out = params.clone();
    for chunk in order.chunks(batch_size) {
        let batch = data.select(Axis(0), chunk);
        let g = out.grad_unchecked(batch.view());
        out.apply_step(&g, lr);
    }
    Ok(out)
}

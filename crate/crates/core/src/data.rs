//! Datasets, IDX ingestion, synthetic patterns and the per-client
//! contaminated partitioning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix in `[0, 1]` with one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    /// Sorted distinct labels.
    pub class_ids: Vec<u32>,
    /// `(rows, cols)` when the rows are flattened images.
    pub image_shape: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<u32>,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: features.nrows(),
                labels: labels.len(),
            });
        }
        if let Some((r, c)) = image_shape {
            if r * c != features.ncols() {
                return Err(Error::InvalidData(format!(
                    "image shape {r}x{c} does not match {} features",
                    features.ncols()
                )));
            }
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("feature values outside [0, 1]".into()));
        }
        let mut class_ids = labels.clone();
        class_ids.sort_unstable();
        class_ids.dedup();
        Ok(Self {
            features,
            labels,
            class_ids,
            image_shape,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Row indices of every sample labelled `class`, in dataset order.
    pub fn rows_of_class(&self, class: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_count(&self, class: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), rows)
    }

    /// Splits off `per_class` random samples of every class as a held-out set.
    /// Returns `(remaining, held_out)`.
    pub fn split_holdout(&self, per_class: usize, seed: u64) -> Result<(Self, Self)> {
        let mut keep = Vec::new();
        let mut hold = Vec::new();
        for &c in &self.class_ids {
            let mut rows = self.rows_of_class(c);
            if rows.len() <= per_class {
                return Err(Error::InsufficientSamples {
                    class: c,
                    available: rows.len(),
                    required: per_class + 1,
                });
            }
            rows.shuffle(&mut seed::rng(seed::derive(
                seed,
                "holdout",
                &[u64::from(c)],
            )));
            hold.extend_from_slice(&rows[..per_class]);
            keep.extend_from_slice(&rows[per_class..]);
        }
        keep.sort_unstable();
        hold.sort_unstable();
        let pick = |rows: &[usize]| {
            LabeledDataset::new(
                self.select_rows(rows),
                rows.iter().map(|&r| self.labels[r]).collect(),
                self.image_shape,
            )
        };
        Ok((pick(&keep)?, pick(&hold)?))
    }
}

// ---------------------------------------------------------------------------
// IDX files

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn truncated(path: &Path, expected: usize, found: usize) -> Error {
    Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found,
    }
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0).ok_or_else(|| truncated(path, 16, bytes.len()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let header = |at| read_u32(bytes, at).ok_or_else(|| truncated(path, 16, bytes.len()));
    let (count, rows, cols) = (
        header(4)? as usize,
        header(8)? as usize,
        header(12)? as usize,
    );
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    Ok((count, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0).ok_or_else(|| truncated(path, 8, bytes.len()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32(bytes, 4).ok_or_else(|| truncated(path, 8, bytes.len()))? as usize;
    if bytes.len() < 8 + count {
        return Err(truncated(path, 8 + count, bytes.len()));
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Encodes images and labels as a pair of IDX byte buffers.
pub fn encode_idx(rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Loads an IDX image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(images_path, &img)?;
    let labels = parse_idx_labels(labels_path, &lab)?;
    if count != labels.len() {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let features = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .expect("pixel count checked against header");
    LabeledDataset::new(
        features,
        labels.into_iter().map(u32::from).collect(),
        Some((rows, cols)),
    )
}

/// Average-pools flattened square-grid images by `factor` along both axes.
pub fn avg_pool(ds: &LabeledDataset, factor: usize) -> Result<LabeledDataset> {
    if factor <= 1 {
        return Ok(ds.clone());
    }
    let (rows, cols) = ds
        .image_shape
        .ok_or_else(|| Error::InvalidParameter("pooling requires image data".into()))?;
    if rows % factor != 0 || cols % factor != 0 {
        return Err(Error::InvalidParameter(format!(
            "pool factor {factor} does not divide {rows}x{cols}"
        )));
    }
    let (pr, pc) = (rows / factor, cols / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = Array2::<f64>::zeros((ds.n_samples(), pr * pc));
    for (src, mut dst) in ds.features.outer_iter().zip(out.outer_iter_mut()) {
        for r in 0..rows {
            for c in 0..cols {
                dst[(r / factor) * pc + c / factor] += src[r * cols + c];
            }
        }
        dst.mapv_inplace(|v| (v * scale).clamp(0.0, 1.0));
    }
    LabeledDataset::new(out, ds.labels.clone(), Some((pr, pc)))
}

// ---------------------------------------------------------------------------
// Synthetic patterns

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub n_features: usize,
    pub separation: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_per_class: 500,
            n_features: 16,
            separation: 0.5,
            noise_sigma: 0.05,
        }
    }
}

/// Draws `n_classes` pattern centers in the unit cube, pairwise at least
/// `separation` apart.
fn draw_centers(spec: &SyntheticSpec, rng: &mut seed::Rng) -> Result<Vec<Vec<f64>>> {
    const MAX_ATTEMPTS: usize = 10_000;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0;
    while centers.len() < spec.n_classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::InvalidParameter(format!(
                "cannot place {} centers {} apart in {} dimensions",
                spec.n_classes, spec.separation, spec.n_features
            )));
        }
        let cand: Vec<f64> = (0..spec.n_features).map(|_| rng.random::<f64>()).collect();
        let far = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= spec.separation
        });
        if far {
            centers.push(cand);
        }
    }
    Ok(centers)
}

/// Gaussian clusters around well-separated centers, one cluster per class.
pub fn synth_patterns(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.n_classes < 2 {
        return Err(Error::InvalidParameter(
            "n_classes must be at least 2".into(),
        ));
    }
    if spec.n_features == 0 || spec.n_per_class == 0 {
        return Err(Error::InvalidParameter(
            "n_features and n_per_class must be positive".into(),
        ));
    }
    if !(spec.separation >= 0.0 && spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(
            "separation and noise_sigma must be non-negative".into(),
        ));
    }
    let centers = draw_centers(spec, &mut seed::rng(seed::derive(seed, "centers", &[])))?;
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = spec.n_classes * spec.n_per_class;
    let mut features = Array2::<f64>::zeros((n, spec.n_features));
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(seed, "samples", &[class as u64]));
        for k in 0..spec.n_per_class {
            let mut row = features.row_mut(class * spec.n_per_class + k);
            for (v, &c) in row.iter_mut().zip(center) {
                let eps = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                *v = (c + eps).clamp(0.0, 1.0);
            }
            labels.push(class as u32);
        }
    }
    LabeledDataset::new(features, labels, None)
}

// ---------------------------------------------------------------------------
// Clients

/// Client identity: inlier class and position within the group sharing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ClientId {
    pub inlier_class: u32,
    pub index: u32,
}

impl ClientId {
    pub fn new(inlier_class: u32, index: u32) -> Self {
        Self {
            inlier_class,
            index,
        }
    }

    /// Packs the id into one integer for seed derivation.
    pub fn key(&self) -> u64 {
        (u64::from(self.inlier_class) << 32) | u64::from(self.index)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}.{}", self.inlier_class, self.index)
    }
}

impl FromStr for ClientId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidData(format!("bad client id `{s}`"));
        let (c, j) = s
            .strip_prefix('m')
            .and_then(|rest| rest.split_once('.'))
            .ok_or_else(bad)?;
        Ok(ClientId::new(
            c.parse().map_err(|_| bad())?,
            j.parse().map_err(|_| bad())?,
        ))
    }
}

impl From<ClientId> for String {
    fn from(id: ClientId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for ClientId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Clients per inlier class.
    pub p: usize,
    /// Contamination fraction, strictly between 0 and 0.5.
    pub d: f64,
    /// Classes taking part; empty means every class in the dataset.
    #[serde(default)]
    pub selected_classes: Vec<u32>,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound on rows per client training set.
    #[serde(default)]
    pub max_train_per_client: Option<usize>,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Config("p must be a positive integer".into()));
        }
        if !(self.d > 0.0 && self.d < 0.5) {
            return Err(Error::Config(format!(
                "contamination d = {} outside (0, 0.5)",
                self.d
            )));
        }
        if matches!(self.max_train_per_client, Some(cap) if cap < 2) {
            return Err(Error::Config(
                "max_train_per_client must be at least 2".into(),
            ));
        }
        Ok(())
    }

    fn classes(&self, ds: &LabeledDataset) -> Result<Vec<u32>> {
        let mut classes = if self.selected_classes.is_empty() {
            ds.class_ids.clone()
        } else {
            self.selected_classes.clone()
        };
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Config(
                "at least two classes must be selected".into(),
            ));
        }
        if let Some(&c) = classes
            .iter()
            .find(|c| ds.class_ids.binary_search(c).is_err())
        {
            return Err(Error::MissingClass(c));
        }
        Ok(classes)
    }
}

/// One client's contaminated local training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: ClientId,
    pub inlier_class: u32,
    pub outlier_class: u32,
    pub contamination: f64,
    /// Source row per training sample (inliers first, then outliers).
    pub rows: Vec<usize>,
    pub train: Array2<f64>,
    /// `true` marks an outlier. Read only by the evaluator.
    pub truth: Vec<bool>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.train.nrows()
    }

    pub fn n_outliers(&self) -> usize {
        self.truth.iter().filter(|&&t| t).count()
    }

    /// True class of each training row.
    pub fn row_classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.truth.iter().map(|&out| {
            if out {
                self.outlier_class
            } else {
                self.inlier_class
            }
        })
    }

    pub fn spec(&self) -> ClientSpec {
        let n_in = self.truth.iter().filter(|&&t| !t).count();
        ClientSpec {
            id: self.id,
            inlier_class: self.inlier_class,
            outlier_class: self.outlier_class,
            contamination: self.contamination,
            inlier_rows: self.rows[..n_in].to_vec(),
            outlier_rows: self.rows[n_in..].to_vec(),
        }
    }
}

/// Serializable description of a client: which dataset rows it owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: ClientId,
    pub inlier_class: u32,
    pub outlier_class: u32,
    pub contamination: f64,
    pub inlier_rows: Vec<usize>,
    pub outlier_rows: Vec<usize>,
}

impl ClientSpec {
    pub fn materialize(&self, ds: &LabeledDataset) -> Result<ClientDataset> {
        let rows: Vec<usize> = self
            .inlier_rows
            .iter()
            .chain(&self.outlier_rows)
            .copied()
            .collect();
        if let Some(&r) = rows.iter().find(|&&r| r >= ds.n_samples()) {
            return Err(Error::InvalidData(format!(
                "client {} references row {r} beyond dataset size {}",
                self.id,
                ds.n_samples()
            )));
        }
        let mut truth = vec![false; self.inlier_rows.len()];
        truth.resize(rows.len(), true);
        Ok(ClientDataset {
            id: self.id,
            inlier_class: self.inlier_class,
            outlier_class: self.outlier_class,
            contamination: self.contamination,
            train: ds.select_rows(&rows),
            rows,
            truth,
        })
    }
}

/// Outlier count that brings `n_inliers` to contamination `d`; never zero.
pub fn outlier_count(n_inliers: usize, d: f64) -> usize {
    ((d * n_inliers as f64 / (1.0 - d)).round() as usize).max(1)
}

/// Largest inlier count whose contaminated total fits in `cap` rows.
fn inlier_cap(cap: usize, d: f64) -> usize {
    (1..=cap)
        .rev()
        .find(|&n| n + outlier_count(n, d) <= cap)
        .unwrap_or(0)
}

fn even_split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|j| total / parts + usize::from(j < total % parts))
        .collect()
}

/// Outlier class of each client in the group of `classes[pos]`: cycles
/// through the other classes starting just after the inlier class.
pub fn circular_outlier_classes(classes: &[u32], pos: usize, p: usize) -> Vec<u32> {
    let n = classes.len();
    (0..p)
        .map(|j| classes[(pos + 1 + j % (n - 1)) % n])
        .collect()
}

/// Splits a dataset into `|classes| * p` contaminated, pairwise disjoint
/// client training sets.
pub fn partition_clients(ds: &LabeledDataset, cfg: &PartitionConfig) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let classes = cfg.classes(ds)?;
    let p = cfg.p;
    let d = cfg.d;

    let mut pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &c in &classes {
        let mut rows = ds.rows_of_class(c);
        if rows.len() < 2 * p {
            return Err(Error::InsufficientSamples {
                class: c,
                available: rows.len(),
                required: 2 * p,
            });
        }
        rows.shuffle(&mut seed::rng(seed::derive(
            cfg.seed,
            "partition",
            &[u64::from(c)],
        )));
        pools.insert(c, rows);
    }

    let outlier_classes: Vec<Vec<u32>> = (0..classes.len())
        .map(|pos| circular_outlier_classes(&classes, pos, p))
        .collect();

    // Inlier budget per class, shrunk until every class can also cover the
    // outliers other groups draw from it.
    let cap = cfg.max_train_per_client.map(|c| inlier_cap(c, d) * p);
    let mut budget: Vec<usize> = classes
        .iter()
        .map(|c| {
            let full = ((1.0 - d) * pools[c].len() as f64).floor() as usize;
            cap.map_or(full, |cap| full.min(cap))
        })
        .collect();
    loop {
        let mut demand = vec![0usize; classes.len()];
        for (pos, outs) in outlier_classes.iter().enumerate() {
            for (&n_in, &c_out) in even_split(budget[pos], p).iter().zip(outs) {
                let k = classes
                    .binary_search(&c_out)
                    .expect("outlier class is selected");
                demand[k] += outlier_count(n_in, d);
            }
        }
        let mut changed = false;
        for (k, c) in classes.iter().enumerate() {
            let available = pools[c].len();
            if budget[k] + demand[k] > available {
                budget[k] = available.saturating_sub(demand[k]);
                changed = true;
            }
        }
        for (k, &c) in classes.iter().enumerate() {
            if budget[k] < p {
                return Err(Error::InsufficientSamples {
                    class: c,
                    available: pools[&c].len(),
                    required: p + demand[k],
                });
            }
        }
        if !changed {
            break;
        }
    }

    let mut cursors: BTreeMap<u32, usize> =
        classes.iter().zip(&budget).map(|(&c, &b)| (c, b)).collect();
    let mut clients = Vec::with_capacity(classes.len() * p);
    for (pos, &c_in) in classes.iter().enumerate() {
        let mut start = 0;
        for (j, (n_in, &c_out)) in even_split(budget[pos], p)
            .into_iter()
            .zip(&outlier_classes[pos])
            .enumerate()
        {
            let inlier_rows = pools[&c_in][start..start + n_in].to_vec();
            start += n_in;
            let n_out = outlier_count(n_in, d);
            let cur = cursors.get_mut(&c_out).expect("outlier class is selected");
            let outlier_rows = pools[&c_out][*cur..*cur + n_out].to_vec();
            *cur += n_out;
            let spec = ClientSpec {
                id: ClientId::new(c_in, j as u32),
                inlier_class: c_in,
                outlier_class: c_out,
                contamination: d,
                inlier_rows,
                outlier_rows,
            };
            clients.push(spec.materialize(ds)?);
        }
    }
    Ok(clients)
}

/// A client's held-out evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub client: ClientId,
    pub rows: Vec<usize>,
    pub features: Array2<f64>,
    /// `true` marks an outlier.
    pub truth: Vec<bool>,
}

/// Samples a test set per client with the client's own inlier/outlier
/// classes and contamination ratio.
pub fn make_test_sets(
    test: &LabeledDataset,
    clients: &[ClientDataset],
    n_per_client: usize,
    seed: u64,
) -> Result<Vec<TestSet>> {
    if n_per_client < 2 {
        return Err(Error::InvalidParameter(
            "test sets need at least 2 samples".into(),
        ));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in test.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    clients
        .iter()
        .map(|client| {
            let n_out = ((client.contamination * n_per_client as f64).round() as usize)
                .clamp(1, n_per_client - 1);
            let n_in = n_per_client - n_out;
            let mut rng = seed::rng(seed::derive(seed, "test-set", &[client.id.key()]));
            let mut draw = |class: u32, k: usize| -> Result<Vec<usize>> {
                let pool = by_class.get(&class).ok_or(Error::MissingClass(class))?;
                if pool.len() < k {
                    return Err(Error::InsufficientSamples {
                        class,
                        available: pool.len(),
                        required: k,
                    });
                }
                Ok(index::sample(&mut rng, pool.len(), k)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect())
            };
            let mut rows = draw(client.inlier_class, n_in)?;
            rows.extend(draw(client.outlier_class, n_out)?);
            let mut truth = vec![false; n_in];
            truth.resize(n_per_client, true);
            Ok(TestSet {
                client: client.id,
                features: test.select_rows(&rows),
                rows,
                truth,
            })
        })
        .collect()
}

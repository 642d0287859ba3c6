//! Multinomial logistic probes over pooled residual states.
//!
//! A probe is `softmax(x · W + b)` with one column of `W` per class; training
//! minimizes mean cross-entropy plus an l2 penalty on `W` (bias unregularized)
//! by full-batch gradient descent in `f64`. Class order is the alphabetical
//! order of the labels present in the training set, and every downstream
//! report references it. Probe columns are the class *directions* in residual
//! space — they feed the logit-lens and neuron-attribution stages — which is
//! why features are never standardized: the probe must live in raw residual
//! coordinates.
//!
//! Probes persist in the same manifest+blob container as models, at `f64`
//! precision, so a saved probe reloads bit-exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::GroupLabel;
use crate::engine::Pooling;
use crate::linalg::Matrix;
use crate::model::container::{BlobBuilder, BlobReader, Dtype, TensorEntry};
use crate::model::ModelError;
use crate::rng::SplitMix64;

pub const PROBE_FORMAT: &str = "neurolens.probe";
pub const PROBE_VERSION: u32 = 1;

#[derive(thiserror::Error, Debug)]
pub enum ProbeError {
    #[error("degenerate training data: need at least 2 classes, found {0}")]
    DegenerateData(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("unknown class {0}: not in the probe's class order")]
    UnknownClass(GroupLabel),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("probe manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("probe container error: {0}")]
    Container(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2_lambda: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self { lr: 0.1, epochs: 500, l2_lambda: 1e-3, seed: 0 }
    }
}

/// Trained probe. `w` is `d_model × |classes|`; column `c` is the direction
/// for `class_order[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub class_order: Vec<GroupLabel>,
    /// Provenance: how features were pooled and which layer they came from.
    pub pooling: Pooling,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[actual][predicted]`, indexed by class order.
    pub confusion: Vec<Vec<usize>>,
    pub class_order: Vec<GroupLabel>,
}

/// The exact objective train_probe descends: mean cross-entropy over the
/// batch plus `l2 · ‖W‖²`, with gradients for `W` and `b`.
///
/// `labels[i]` indexes the class of `features[i]` in column order.
pub fn loss_and_grad(
    w: &Matrix,
    b: &[f64],
    features: &[Vec<f64>],
    labels: &[usize],
    l2: f64,
) -> (f64, Matrix, Vec<f64>) {
    let d = w.rows();
    let c = w.cols();
    let n = features.len();
    let mut loss = 0.0;
    let mut grad_w = Matrix::zeros(d, c);
    let mut grad_b = vec![0.0; c];
    for (x, &y) in features.iter().zip(labels) {
        let mut logits = crate::linalg::vec_mat(x, w);
        for (z, bv) in logits.iter_mut().zip(b) {
            *z += bv;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss -= logits[y] - log_z;
        // dL/dz = softmax(z) - onehot(y), accumulated into x ⊗ dz.
        for k in 0..c {
            let p = (logits[k] - log_z).exp();
            let dz = p - if k == y { 1.0 } else { 0.0 };
            grad_b[k] += dz;
            for (r, &xv) in x.iter().enumerate() {
                grad_w.data_mut()[r * c + k] += xv * dz;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    for g in grad_w.data_mut() {
        *g *= inv_n;
    }
    for g in grad_b.iter_mut() {
        *g *= inv_n;
    }
    // l2 on W only; bias stays unregularized.
    let mut penalty = 0.0;
    for (g, &wv) in grad_w.data_mut().iter_mut().zip(w.data()) {
        penalty += wv * wv;
        *g += 2.0 * l2 * wv;
    }
    (loss + l2 * penalty, grad_w, grad_b)
}

fn class_order_of(features: &[(Vec<f64>, GroupLabel)]) -> Vec<GroupLabel> {
    let mut order: Vec<GroupLabel> = Vec::new();
    for (_, label) in features {
        if !order.contains(label) {
            order.push(*label);
        }
    }
    order.sort();
    order
}

/// Train and also return the per-epoch loss curve (loss measured before each
/// update; the final entry is the converged value).
pub fn train_probe_with_curve(
    features: &[(Vec<f64>, GroupLabel)],
    hyper: &ProbeHyper,
) -> Result<(ProbeModel, Vec<f64>)> {
    if !(hyper.lr.is_finite() && hyper.lr > 0.0) || !(hyper.l2_lambda.is_finite() && hyper.l2_lambda >= 0.0)
    {
        return Err(ProbeError::BadHyper(format!(
            "lr {} / l2_lambda {}",
            hyper.lr, hyper.l2_lambda
        )));
    }
    let class_order = class_order_of(features);
    if class_order.len() < 2 {
        return Err(ProbeError::DegenerateData(class_order.len()));
    }
    let d = features
        .first()
        .map(|(x, _)| x.len())
        .ok_or(ProbeError::DegenerateData(0))?;
    for (x, _) in features {
        if x.len() != d {
            return Err(ProbeError::DimensionMismatch { expected: d, got: x.len() });
        }
    }
    let c = class_order.len();
    let xs: Vec<Vec<f64>> = features.iter().map(|(x, _)| x.clone()).collect();
    let ys: Vec<usize> = features
        .iter()
        .map(|(_, label)| {
            class_order
                .iter()
                .position(|cl| cl == label)
                .expect("labels collected from this very slice")
        })
        .collect();

    // Init: W ~ 0.01·N(0,1) drawn row-major, b = 0.
    let mut rng = SplitMix64::new(hyper.seed);
    let mut w = Matrix::zeros(d, c);
    for v in w.data_mut() {
        *v = 0.01 * rng.next_gaussian();
    }
    let mut b = vec![0.0; c];

    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut previous: Option<f64> = None;
    for _ in 0..hyper.epochs {
        let (loss, grad_w, grad_b) = loss_and_grad(&w, &b, &xs, &ys, hyper.l2_lambda);
        curve.push(loss);
        if let Some(prev) = previous {
            if (prev - loss).abs() < 1e-7 {
                break;
            }
        }
        previous = Some(loss);
        for (wv, g) in w.data_mut().iter_mut().zip(grad_w.data()) {
            *wv -= hyper.lr * g;
        }
        for (bv, g) in b.iter_mut().zip(&grad_b) {
            *bv -= hyper.lr * g;
        }
    }

    Ok((
        ProbeModel {
            w,
            b,
            class_order,
            pooling: Pooling::MeanAllPositions,
            layer: 0,
        },
        curve,
    ))
}

/// Train a probe by full-batch gradient descent; deterministic per seed.
/// Stops at `epochs` or when the epoch-to-epoch loss delta drops below 1e-7.
pub fn train_probe(
    features: &[(Vec<f64>, GroupLabel)],
    hyper: &ProbeHyper,
) -> Result<ProbeModel> {
    train_probe_with_curve(features, hyper).map(|(model, _)| model)
}

/// Class probabilities for one feature vector, aligned with `class_order`.
pub fn probe_predict(probe: &ProbeModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != probe.w.rows() {
        return Err(ProbeError::DimensionMismatch {
            expected: probe.w.rows(),
            got: x.len(),
        });
    }
    let mut logits = crate::linalg::vec_mat(x, &probe.w);
    for (z, bv) in logits.iter_mut().zip(&probe.b) {
        *z += bv;
    }
    crate::linalg::softmax_in_place(&mut logits);
    Ok(logits)
}

/// Argmax class; ties break to the earliest class-order position.
pub fn probe_predict_label(probe: &ProbeModel, x: &[f64]) -> Result<GroupLabel> {
    let probs = probe_predict(probe, x)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(probe.class_order[best])
}

/// Accuracy, macro-F1, and the confusion matrix over a test set.
///
/// Macro-F1 averages per-class F1 uniformly over the probe's class order; a
/// class absent from both truth and prediction contributes F1 = 0.
pub fn evaluate_probe(
    probe: &ProbeModel,
    test: &[(Vec<f64>, GroupLabel)],
) -> Result<ProbeMetrics> {
    if test.is_empty() {
        return Err(ProbeError::EmptyTestSet);
    }
    let c = probe.class_order.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (x, actual) in test {
        let actual_idx = probe
            .class_order
            .iter()
            .position(|cl| cl == actual)
            .ok_or(ProbeError::UnknownClass(*actual))?;
        let predicted = probe_predict_label(probe, x)?;
        let predicted_idx = probe
            .class_order
            .iter()
            .position(|cl| *cl == predicted)
            .expect("prediction drawn from class_order");
        confusion[actual_idx][predicted_idx] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / total as f64;
    let mut f1_sum = 0.0;
    for k in 0..c {
        let tp = confusion[k][k];
        let fp: usize = (0..c).filter(|&i| i != k).map(|i| confusion[i][k]).sum();
        let fn_: usize = (0..c).filter(|&j| j != k).map(|j| confusion[k][j]).sum();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(ProbeMetrics {
        accuracy,
        macro_f1: f1_sum / c as f64,
        confusion,
        class_order: probe.class_order.clone(),
    })
}

/// Column `w_c`: the probe's direction for class `c` (bias excluded).
pub fn probe_direction(probe: &ProbeModel, class: GroupLabel) -> Result<Vec<f64>> {
    let idx = probe
        .class_order
        .iter()
        .position(|cl| *cl == class)
        .ok_or(ProbeError::UnknownClass(class))?;
    Ok(probe.w.column(idx))
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeManifest {
    format: String,
    version: u32,
    d_model: usize,
    class_order: Vec<GroupLabel>,
    pooling: Pooling,
    layer: usize,
    blob: String,
    tensors: Vec<TensorEntry>,
}

/// Write `probe.json` + `probe.bin` into `dir`; returns the manifest path.
pub fn save_probe(probe: &ProbeModel, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| ProbeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut blob = BlobBuilder::new();
    blob.push(
        "probe.w",
        Dtype::F64,
        &[probe.w.rows(), probe.w.cols()],
        probe.w.data(),
    );
    blob.push("probe.b", Dtype::F64, &[probe.b.len()], &probe.b);
    let manifest = ProbeManifest {
        format: PROBE_FORMAT.into(),
        version: PROBE_VERSION,
        d_model: probe.w.rows(),
        class_order: probe.class_order.clone(),
        pooling: probe.pooling,
        layer: probe.layer,
        blob: "probe.bin".into(),
        tensors: blob.entries,
    };
    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        std::fs::write(path, bytes).map_err(|source| ProbeError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    write(&dir.join("probe.bin"), &blob.bytes)?;
    let manifest_path = dir.join("probe.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    write(&manifest_path, format!("{json}\n").as_bytes())?;
    Ok(manifest_path)
}

pub fn load_probe(manifest_path: &Path) -> Result<ProbeModel> {
    let bytes = std::fs::read(manifest_path).map_err(|source| ProbeError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: ProbeManifest = serde_json::from_slice(&bytes)?;
    if manifest.format != PROBE_FORMAT || manifest.version != PROBE_VERSION {
        return Err(ProbeError::Container(ModelError::WrongFormat {
            found: manifest.format,
            version: manifest.version,
        }));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|source| ProbeError::Io {
        path: blob_path.clone(),
        source,
    })?;
    let c = manifest.class_order.len();
    let mut reader = BlobReader::new(manifest.tensors, blob);
    let w = Matrix::from_vec(
        manifest.d_model,
        c,
        reader.take("probe.w", Dtype::F64, &[manifest.d_model, c])?,
    );
    let b = reader.take("probe.b", Dtype::F64, &[c])?;
    reader.finish()?;
    Ok(ProbeModel {
        w,
        b,
        class_order: manifest.class_order,
        pooling: manifest.pooling,
        layer: manifest.layer,
    })
}

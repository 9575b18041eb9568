//! Keyword baseline: utterance-pooled MFCCs, PCA, and a one-vs-rest linear
//! hinge-loss classifier with nested cross-validation over the PCA size and
//! the regularization constant.
//!
//! Each utterance becomes a fixed vector by concatenating the per-coefficient
//! mean and standard deviation of its 12 MFCCs over time.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{pad_min_duration, AudioBuffer, DEFAULT_MIN_PAD_SECONDS};
use crate::features::{self, FeatureError, Spectrogram};
use crate::seed;

pub const N_MFCC: usize = 13;
pub const C_GRID: [f64; 3] = [0.1, 1.0, 10.0];
pub const K_GRID: [usize; 3] = [4, 8, 12];
const SGD_ITERS: usize = 600;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("k = {k} exceeds the {d} input dimensions")]
    BadK { k: usize, d: usize },
    #[error("class `{0}` has fewer than two samples")]
    DegenerateClass(String),
    #[error("need at least two classes")]
    SingleClass,
    #[error("ragged feature matrix")]
    Ragged,
    #[error(transparent)]
    Features(#[from] FeatureError),
}

/// Per-coefficient mean then standard deviation over frames.
pub fn pool(spec: &Spectrogram) -> Vec<f64> {
    let (t, d) = (spec.n_frames.max(1) as f64, spec.n_bins);
    let mut mean = vec![0.0; d];
    for f in 0..spec.n_frames {
        for (m, v) in mean.iter_mut().zip(spec.frame(f)) {
            *m += v / t;
        }
    }
    let mut var = vec![0.0; d];
    for f in 0..spec.n_frames {
        for ((s, v), m) in var.iter_mut().zip(spec.frame(f)).zip(&mean) {
            *s += (v - m) * (v - m) / t;
        }
    }
    mean.extend(var.into_iter().map(f64::sqrt));
    mean
}

/// Pooled 24-dimensional descriptor of an utterance.
pub fn utterance_features(buf: &AudioBuffer) -> Result<Vec<f64>, BaselineError> {
    let padded = pad_min_duration(buf, DEFAULT_MIN_PAD_SECONDS);
    Ok(pool(&features::mfcc(&padded, N_MFCC)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × d`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues, descending.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((ci, xi), mi)| ci * (xi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, &zi) in self.components.iter().zip(z) {
            x.iter_mut().zip(c).for_each(|(xi, ci)| *xi += zi * ci);
        }
        x
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| {
                if self.total_variance > 0.0 {
                    v / self.total_variance
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn check_matrix(x: &[Vec<f64>]) -> Result<usize, BaselineError> {
    if x.len() < 2 {
        return Err(BaselineError::TooFewSamples(x.len()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(BaselineError::Ragged);
    }
    Ok(d)
}

/// Top-`k` eigenvectors of the sample covariance (n − 1 denominator). When
/// fewer than `k` directions carry variance, only those are returned.
pub fn fit_pca(x: &[Vec<f64>], k: usize) -> Result<PcaModel, BaselineError> {
    let d = check_matrix(x)?;
    if k > d {
        return Err(BaselineError::BadK { k, d });
    }
    let n = x.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n - 1) as f64;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let lambda = eig.eigenvalues[j];
        if lambda <= tol {
            warn!(
                "covariance has rank {}; returning {} of {k} components",
                components.len(),
                components.len()
            );
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        components.push(v);
        explained_variance.push(lambda);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// Per-class linear scorers over standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvrClassifier {
    pub classes: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub c: f64,
}

impl OvrClassifier {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| b + w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Index of the highest score; ties go to the lowest index.
    pub fn predict_index(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }

    pub fn predict(&self, x: &[f64]) -> &str {
        &self.classes[self.predict_index(x)]
    }
}

pub fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in s.iter().enumerate().skip(1) {
        if v > s[best] {
            best = i;
        }
    }
    best
}

/// Minimizes `½‖w‖²/(C·n) + mean hinge(y·(w·x + b))` by full-batch
/// subgradient descent with a `1/√t` step, returning the best iterate.
fn fit_binary(z: &[Vec<f64>], y: &[f64], c: f64) -> (Vec<f64>, f64) {
    let (n, d) = (z.len(), z[0].len());
    let lambda = 1.0 / (c * n as f64);
    let objective = |w: &[f64], b: f64| {
        let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        let hinge: f64 = z
            .iter()
            .zip(y)
            .map(|(x, &yi)| {
                (1.0 - yi * (b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())).max(0.0)
            })
            .sum();
        reg + hinge / n as f64
    };
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let mut best = (objective(&w, b), w.clone(), b);
    for t in 1..=SGD_ITERS {
        let mut gw: Vec<f64> = w.iter().map(|v| lambda * v).collect();
        let mut gb = 0.0;
        for (x, &yi) in z.iter().zip(y) {
            let margin = yi * (b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>());
            if margin < 1.0 {
                gw.iter_mut()
                    .zip(x)
                    .for_each(|(g, xi)| *g -= yi * xi / n as f64);
                gb -= yi / n as f64;
            }
        }
        let eta = 0.5 / (t as f64).sqrt();
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= eta * g);
        b -= eta * gb;
        let obj = objective(&w, b);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
    }
    (best.1, best.2)
}

/// Classes in order of first appearance.
fn class_list(labels: &[String]) -> Vec<String> {
    let mut classes: Vec<String> = Vec::new();
    for l in labels {
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    classes
}

pub fn fit_ovr(x: &[Vec<f64>], labels: &[String], c: f64) -> Result<OvrClassifier, BaselineError> {
    let d = check_matrix(x)?;
    let classes = class_list(labels);
    if classes.len() < 2 {
        return Err(BaselineError::SingleClass);
    }
    if let Some(bad) = classes
        .iter()
        .find(|k| labels.iter().filter(|l| l == k).count() < 2)
    {
        return Err(BaselineError::DegenerateClass(bad.clone()));
    }
    let n = x.len() as f64;
    let feature_mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let feature_scale: Vec<f64> = (0..d)
        .map(|j| {
            let v = x
                .iter()
                .map(|r| (r[j] - feature_mean[j]).powi(2))
                .sum::<f64>()
                / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| {
            (0..d)
                .map(|j| (r[j] - feature_mean[j]) / feature_scale[j])
                .collect()
        })
        .collect();
    let (mut weights, mut biases) = (Vec::new(), Vec::new());
    for class in &classes {
        let y: Vec<f64> = labels
            .iter()
            .map(|l| if l == class { 1.0 } else { -1.0 })
            .collect();
        let (w, b) = fit_binary(&z, &y, c);
        weights.push(w);
        biases.push(b);
    }
    Ok(OvrClassifier {
        classes,
        weights,
        biases,
        feature_mean,
        feature_scale,
        c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub pca: PcaModel,
    pub classifier: OvrClassifier,
}

impl BaselineModel {
    pub fn fit(x: &[Vec<f64>], labels: &[String], k: usize, c: f64) -> Result<Self, BaselineError> {
        let pca = fit_pca(x, k)?;
        let proj: Vec<Vec<f64>> = x.iter().map(|r| pca.project(r)).collect();
        Ok(Self {
            classifier: fit_ovr(&proj, labels, c)?,
            pca,
        })
    }

    pub fn predict(&self, features: &[f64]) -> &str {
        self.classifier.predict(&self.pca.project(features))
    }
}

/// MFCC → pooling → PCA → highest class score.
pub fn classify_utterance<'m>(
    buf: &AudioBuffer,
    model: &'m BaselineModel,
) -> Result<&'m str, BaselineError> {
    Ok(model.predict(&utterance_features(buf)?))
}

pub fn accuracy(truth: &[String], predicted: &[String]) -> f64 {
    let correct = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    correct as f64 / truth.len().max(1) as f64
}

/// Stratified fold ids: each class's items are shuffled with the seed and
/// dealt round-robin.
pub fn stratified_folds(labels: &[String], folds: usize, seed_value: u64) -> Vec<usize> {
    let mut fold_of = vec![0; labels.len()];
    for (ci, class) in class_list(labels).iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| &labels[i] == class).collect();
        idx.shuffle(&mut seed::rng(seed_value, "folds", ci as u64));
        for (j, i) in idx.into_iter().enumerate() {
            fold_of[i] = (ci + j) % folds;
        }
    }
    fold_of
}

fn subset<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

/// Mean held-out accuracy of `(k, C)` over `folds` stratified folds.
pub fn cv_accuracy(
    x: &[Vec<f64>],
    labels: &[String],
    k: usize,
    c: f64,
    folds: usize,
    seed_value: u64,
) -> Result<f64, BaselineError> {
    let fold_of = stratified_folds(labels, folds, seed_value);
    let mut accs = Vec::with_capacity(folds);
    for f in 0..folds {
        let tr: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] != f).collect();
        let te: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] == f).collect();
        if te.is_empty() {
            continue;
        }
        let model =
            BaselineModel::fit(&subset(x, &tr), &subset(labels, &tr), k.min(x[0].len()), c)?;
        let pred: Vec<String> = te
            .iter()
            .map(|&i| model.predict(&x[i]).to_string())
            .collect();
        accs.push(accuracy(&subset(labels, &te), &pred));
    }
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

/// Grid point with the best inner-CV accuracy; earlier grid points win ties.
pub fn select_hyperparameters(
    x: &[Vec<f64>],
    labels: &[String],
    folds: usize,
    seed_value: u64,
) -> Result<(usize, f64, f64), BaselineError> {
    let mut best: Option<(usize, f64, f64)> = None;
    for &k in &K_GRID {
        for &c in &C_GRID {
            let acc = cv_accuracy(x, labels, k, c, folds, seed_value)?;
            if best.is_none_or(|b| acc > b.2) {
                best = Some((k, c, acc));
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedCvReport {
    /// `(k, C, held-out accuracy)` per outer fold.
    pub outer: Vec<(usize, f64, f64)>,
    pub mean_accuracy: f64,
}

/// Outer folds estimate accuracy; inner folds inside each outer training
/// split choose `(k, C)`.
pub fn nested_cv(
    x: &[Vec<f64>],
    labels: &[String],
    outer_folds: usize,
    inner_folds: usize,
    seed_value: u64,
) -> Result<NestedCvReport, BaselineError> {
    let fold_of = stratified_folds(labels, outer_folds, seed_value);
    let mut outer = Vec::new();
    for f in 0..outer_folds {
        let tr: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] != f).collect();
        let te: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] == f).collect();
        if te.is_empty() {
            continue;
        }
        let (xt, lt) = (subset(x, &tr), subset(labels, &tr));
        let (k, c, _) =
            select_hyperparameters(&xt, &lt, inner_folds, seed_value.wrapping_add(1 + f as u64))?;
        let model = BaselineModel::fit(&xt, &lt, k, c)?;
        let pred: Vec<String> = te
            .iter()
            .map(|&i| model.predict(&x[i]).to_string())
            .collect();
        outer.push((k, c, accuracy(&subset(labels, &te), &pred)));
    }
    let mean_accuracy = outer.iter().map(|o| o.2).sum::<f64>() / outer.len().max(1) as f64;
    Ok(NestedCvReport {
        outer,
        mean_accuracy,
    })
}

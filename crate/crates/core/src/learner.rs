//! Deterministic binary classifiers: L2-regularized logistic regression
//! trained by full-batch gradient descent, and Gaussian naive Bayes.
//!
//! Features are z-scored with statistics from the training rows only.
//! Training rows are put into a canonical order before any reduction, so the
//! fitted parameters do not depend on the order rows were supplied in.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::metrics::{auc, Metric};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    NaiveBayes,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logreg" => Ok(ModelKind::Logreg),
            "naive_bayes" => Ok(ModelKind::NaiveBayes),
            _ => Err(format!("unknown classifier `{s}`")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Logreg => "logreg",
            ModelKind::NaiveBayes => "naive_bayes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub learning_rate: f64,
    pub l2: f64,
    pub max_iter: usize,
    /// Gradient-norm stopping threshold.
    pub tol: f64,
    pub seed: u64,
    /// Keep protected-attribute columns as model inputs.
    pub include_protected: bool,
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logreg,
            learning_rate: 0.1,
            l2: 1e-3,
            max_iter: 500,
            tol: 1e-8,
            seed: 0,
            include_protected: false,
            decision_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be >= 0".into()));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::Config("decision_threshold must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Dense row-major design matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: Vec<u8>,
    d: usize,
    pub feature_names: Vec<String>,
    /// Input columns holding protected-attribute indicators.
    pub protected_columns: Vec<usize>,
}

impl Dataset {
    pub fn new(
        rows: &[Vec<f64>],
        y: Vec<u8>,
        feature_names: Vec<String>,
        protected_columns: Vec<usize>,
    ) -> Result<Self> {
        let d = feature_names.len();
        if rows.len() != y.len() {
            return Err(Error::Dimension {
                expected: rows.len(),
                got: y.len(),
            });
        }
        let mut x = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: r.len(),
                });
            }
            x.extend_from_slice(r);
        }
        if protected_columns.iter().any(|&c| c >= d) {
            return Err(Error::Config("protected column out of range".into()));
        }
        Ok(Self {
            x,
            y,
            d,
            feature_names,
            protected_columns,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    /// Rows selected by index (with repetition), keeping the schema.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            d: self.d,
            feature_names: self.feature_names.clone(),
            protected_columns: self.protected_columns.clone(),
        }
    }

    fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.y[a].cmp(&self.y[b]).then_with(|| {
                self.row(a)
                    .iter()
                    .zip(self.row(b))
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
        });
        idx
    }
}

/// Per-column z-score transform. Constant columns get `sd = 1` and are
/// flagged so the model can pin their weight at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut sd = Vec::with_capacity(d);
        let mut constant = Vec::with_capacity(d);
        for s in var {
            let s = (s / n).sqrt();
            let is_const = !(s > 1e-12);
            constant.push(is_const);
            sd.push(if is_const { 1.0 } else { s });
        }
        Self { mean, sd, constant }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean negative log-likelihood plus `l2/2 * |w|^2` (bias unpenalized), over
/// already-standardized rows.
pub struct LogisticObjective<'a> {
    pub rows: &'a [Vec<f64>],
    pub y: &'a [u8],
    pub l2: f64,
}

impl LogisticObjective<'_> {
    pub fn loss(&self, w: &[f64], b: f64) -> f64 {
        let n = self.rows.len() as f64;
        let nll: f64 = self
            .rows
            .iter()
            .zip(self.y)
            .map(|(r, &y)| {
                let z = dot(w, r) + b;
                softplus(z) - f64::from(y) * z
            })
            .sum();
        nll / n + 0.5 * self.l2 * dot(w, w)
    }

    pub fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let n = self.rows.len() as f64;
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (r, &y) in self.rows.iter().zip(self.y) {
            let resid = sigmoid(dot(w, r) + b) - f64::from(y);
            for (g, v) in gw.iter_mut().zip(r) {
                *g += resid * v;
            }
            gb += resid;
        }
        for (g, wi) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wi;
        }
        (gw, gb / n)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Params {
    Logreg {
        weights: Vec<f64>,
        bias: f64,
    },
    NaiveBayes {
        /// P(y = 1).
        prior: f64,
        /// Class-conditional means and variances, index 0 = class 0.
        means: [Vec<f64>; 2],
        variances: [Vec<f64>; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Constant-score stand-in for an untrainable set.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    /// Width of the raw input vector.
    pub input_dim: usize,
    /// Raw input columns the model reads, in order.
    pub columns: Vec<usize>,
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub params: Params,
    pub decision_threshold: f64,
    pub config: TrainConfig,
    pub fit_info: FitInfo,
}

impl Model {
    /// Model scoring every input at `rate` (clamped away from 0 and 1).
    pub fn constant(rate: f64, input_dim: usize, cfg: &TrainConfig) -> Self {
        let p = rate.clamp(1e-6, 1.0 - 1e-6);
        Self {
            kind: ModelKind::Logreg,
            input_dim,
            columns: Vec::new(),
            feature_names: Vec::new(),
            standardizer: Standardizer {
                mean: Vec::new(),
                sd: Vec::new(),
                constant: Vec::new(),
            },
            params: Params::Logreg {
                weights: Vec::new(),
                bias: (p / (1.0 - p)).ln(),
            },
            decision_threshold: cfg.decision_threshold,
            config: *cfg,
            fit_info: FitInfo {
                iterations: 0,
                converged: true,
                grad_norm: 0.0,
                constant: true,
            },
        }
    }

    /// Standardized model inputs for a raw feature vector.
    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite feature".into()));
        }
        let picked: Vec<f64> = self.columns.iter().map(|&c| x[c]).collect();
        Ok(self.standardizer.apply(&picked))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardize(x)?;
        Ok(match &self.params {
            Params::Logreg { weights, bias } => sigmoid(dot(weights, &z) + bias),
            Params::NaiveBayes {
                prior,
                means,
                variances,
            } => {
                let ll = |c: usize| -> f64 {
                    z.iter()
                        .zip(means[c].iter().zip(&variances[c]))
                        .map(|(v, (m, s2))| {
                            -0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + (v - m).powi(2) / s2)
                        })
                        .sum()
                };
                let l1 = prior.ln() + ll(1);
                let l0 = (1.0 - prior).ln() + ll(0);
                sigmoid(l1 - l0)
            }
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(self.predict_proba(x)? >= self.decision_threshold))
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match &self.params {
            Params::Logreg { weights, .. } => Some(weights),
            Params::NaiveBayes { .. } => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Fits the classifier selected by `cfg.kind`.
///
/// Fails on an empty or single-class training set, and on non-finite
/// features.
pub fn fit(train: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Training("empty training set".into()));
    }
    let positives = train.y.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::Training("single-class training set".into()));
    }
    if train.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite feature".into()));
    }

    let columns: Vec<usize> = (0..train.d)
        .filter(|c| cfg.include_protected || !train.protected_columns.contains(c))
        .collect();
    let order = train.canonical_order();
    let picked: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| columns.iter().map(|&c| train.row(i)[c]).collect())
        .collect();
    let y: Vec<u8> = order.iter().map(|&i| train.y[i]).collect();
    let standardizer = Standardizer::fit(&picked.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let z: Vec<Vec<f64>> = picked.iter().map(|r| standardizer.apply(r)).collect();

    let (params, fit_info) = match cfg.kind {
        ModelKind::Logreg => fit_logreg(&z, &y, &standardizer.constant, cfg)?,
        ModelKind::NaiveBayes => fit_naive_bayes(&z, &y),
    };
    Ok(Model {
        kind: cfg.kind,
        input_dim: train.d,
        feature_names: columns
            .iter()
            .map(|&c| train.feature_names[c].clone())
            .collect(),
        columns,
        standardizer,
        params,
        decision_threshold: cfg.decision_threshold,
        config: *cfg,
        fit_info,
    })
}

fn fit_logreg(
    z: &[Vec<f64>],
    y: &[u8],
    constant: &[bool],
    cfg: &TrainConfig,
) -> Result<(Params, FitInfo)> {
    let objective = LogisticObjective {
        rows: z,
        y,
        l2: cfg.l2,
    };
    let d = constant.len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < cfg.max_iter {
        let (mut gw, gb) = objective.gradient(&w, b);
        for (g, &c) in gw.iter_mut().zip(constant) {
            if c {
                *g = 0.0;
            }
        }
        grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Training(format!(
                "gradient descent diverged at iteration {iterations}; lower learning_rate"
            )));
        }
        if grad_norm <= cfg.tol {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * gb;
        iterations += 1;
    }
    Ok((
        Params::Logreg { weights: w, bias: b },
        FitInfo {
            iterations,
            converged: grad_norm <= cfg.tol,
            grad_norm,
            constant: false,
        },
    ))
}

fn fit_naive_bayes(z: &[Vec<f64>], y: &[u8]) -> (Params, FitInfo) {
    let d = z.first().map_or(0, Vec::len);
    let mut counts = [0.0f64; 2];
    let mut means = [vec![0.0; d], vec![0.0; d]];
    for (r, &c) in z.iter().zip(y) {
        let c = usize::from(c);
        counts[c] += 1.0;
        for (m, v) in means[c].iter_mut().zip(r) {
            *m += v;
        }
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|m| *m /= counts[c]);
    }
    let mut variances = [vec![0.0; d], vec![0.0; d]];
    for (r, &c) in z.iter().zip(y) {
        let c = usize::from(c);
        for ((s, v), m) in variances[c].iter_mut().zip(r).zip(&means[c]) {
            *s += (v - m).powi(2);
        }
    }
    // variance smoothing relative to the (unit) standardized scale
    let eps = 1e-9;
    for c in 0..2 {
        variances[c]
            .iter_mut()
            .for_each(|s| *s = *s / counts[c] + eps);
    }
    (
        Params::NaiveBayes {
            prior: counts[1] / (counts[0] + counts[1]),
            means,
            variances,
        },
        FitInfo {
            iterations: 1,
            converged: true,
            grad_norm: 0.0,
            constant: false,
        },
    )
}

/// Scores every row of `data`.
pub fn score_all(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    (0..data.len()).map(|i| model.predict_proba(data.row(i))).collect()
}

/// AUC of `model` on `data`.
pub fn evaluate_auc(model: &Model, data: &Dataset) -> Result<Metric> {
    let scores = score_all(model, data)?;
    auc(&scores, data.labels())
}

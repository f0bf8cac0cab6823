//! Treatment-effect estimation: CEVAE, S/T/X/R meta-learners, propensity
//! scores, difference in means and percentile-bootstrap intervals.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adam_step, bernoulli_logpmf_logits, gaussian_logpdf, kl_diag_gaussian, reparameterize, Activation, AdamState,
    AutodiffError, Mlp, ParamStore, Tape, Tensor, Var,
};
use crate::dataset::{sigmoid, FeatureMatrix};
use crate::gbm::{self, BoostedModel, GbmError, Objective, TrainConfig};
use crate::linalg::{cholesky_solve, LinalgError, Matrix};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum CausalError {
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("{failed} of {total} bootstrap replicates failed (limit 10%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("column '{0}' not found")]
    MissingColumn(String),
    #[error(transparent)]
    Gbm(#[from] GbmError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

type Res<T> = Result<T, CausalError>;

/// Covariates, binary treatment and binary outcome for `n` units.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalDataset {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<u8>,
    pub covariate_names: Vec<String>,
    /// Optional cluster id per row (province), used for group-level averaging.
    pub groups: Option<Vec<u64>>,
}

/// Covariates used when none are configured: province context plus
/// complaint-level attention and sentiment.
pub const DEFAULT_COVARIATES: [&str; 7] = [
    "gdp_output",
    "total_budget",
    "education",
    "social_security",
    "health",
    "attention",
    "sentiment",
];

impl CausalDataset {
    pub fn new(x: Matrix, t: Vec<u8>, y: Vec<u8>, covariate_names: Vec<String>) -> Res<Self> {
        let n = x.rows();
        if t.len() != n || y.len() != n {
            return Err(CausalError::InvalidData(format!(
                "{n} rows, {} treatments, {} outcomes",
                t.len(),
                y.len()
            )));
        }
        if covariate_names.len() != x.cols() {
            return Err(CausalError::InvalidData("one name per covariate required".into()));
        }
        if !x.is_finite() {
            return Err(CausalError::InvalidData("non-finite covariate".into()));
        }
        if t.iter().chain(&y).any(|&v| v > 1) {
            return Err(CausalError::InvalidData("treatment and outcome must be 0/1".into()));
        }
        let treated = t.iter().filter(|&&v| v == 1).count();
        if treated == 0 || treated == n {
            return Err(CausalError::InvalidData("both treatment arms must be non-empty".into()));
        }
        Ok(Self {
            x,
            t,
            y,
            covariate_names,
            groups: None,
        })
    }

    pub fn with_groups(mut self, groups: Vec<u64>) -> Res<Self> {
        if groups.len() != self.len() {
            return Err(CausalError::InvalidData("one group per row required".into()));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    /// Builds a dataset from a feature table. `treatment = "eco_high"` and
    /// `outcome = "target"` refer to the table's own treatment and target;
    /// anything else must be a binary feature column.
    pub fn from_features(fm: &FeatureMatrix, covariates: &[String], treatment: &str, outcome: &str) -> Res<Self> {
        let binary_col = |name: &str| -> Res<Vec<u8>> {
            let j = fm
                .column_index(name)
                .ok_or_else(|| CausalError::MissingColumn(name.to_string()))?;
            (0..fm.num_rows())
                .map(|i| match fm.rows[(i, j)] {
                    v if v == 0.0 => Ok(0),
                    v if v == 1.0 => Ok(1),
                    v => Err(CausalError::InvalidData(format!("column '{name}' row {i}: {v} is not 0/1"))),
                })
                .collect()
        };
        let t = if treatment == "eco_high" {
            fm.treatment
                .clone()
                .ok_or_else(|| CausalError::InvalidData("feature table has no eco_high values".into()))?
        } else {
            binary_col(treatment)?
        };
        let y = if outcome == "target" {
            fm.target.clone()
        } else {
            binary_col(outcome)?
        };
        let idx = covariates
            .iter()
            .map(|c| fm.column_index(c).ok_or_else(|| CausalError::MissingColumn(c.clone())))
            .collect::<Res<Vec<_>>>()?;
        let mut x = Matrix::zeros(fm.num_rows(), idx.len());
        for i in 0..fm.num_rows() {
            for (k, &j) in idx.iter().enumerate() {
                x[(i, k)] = fm.rows[(i, j)];
            }
        }
        Self::new(x, t, y, covariates.to_vec())?.with_groups(fm.province_ids.clone())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Res<Self> {
        let ds = Self::new(
            self.x.select_rows(idx),
            idx.iter().map(|&i| self.t[i]).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
            self.covariate_names.clone(),
        )?;
        match &self.groups {
            Some(g) => ds.with_groups(idx.iter().map(|&i| g[i]).collect()),
            None => Ok(ds),
        }
    }

    fn arm(&self, arm: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.t[i] == arm).collect()
    }

    /// Covariates with the treatment appended as the last column, set to `t`.
    fn with_treatment_column(&self, t: Option<u8>) -> Matrix {
        let (n, p) = self.x.shape();
        let mut m = Matrix::zeros(n, p + 1);
        for i in 0..n {
            m.row_mut(i)[..p].copy_from_slice(self.x.row(i));
            m[(i, p)] = t.unwrap_or(self.t[i]) as f64;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cevae,
    S,
    T,
    X,
    R,
    DiffMeans,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cevae => "cevae",
            Method::S => "s",
            Method::T => "t",
            Method::X => "x",
            Method::R => "r",
            Method::DiffMeans => "diff_means",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "cevae" => Method::Cevae,
            "s" => Method::S,
            "t" => Method::T,
            "x" => Method::X,
            "r" => Method::R,
            "diff_means" | "diffmeans" | "dim" => Method::DiffMeans,
            other => return Err(format!("unknown method '{other}'")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub method: Method,
    pub ate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl AteEstimate {
    /// Point estimate with an interval widened, if needed, to contain it.
    pub fn new(method: Method, ate: f64, ci: Option<(f64, f64)>) -> Self {
        let ate = ate.clamp(-1.0, 1.0);
        let (lo, hi) = ci.unwrap_or((ate, ate));
        Self {
            method,
            ate,
            ci_low: lo.min(ate),
            ci_high: hi.max(ate),
        }
    }
}

// ---------------------------------------------------------------------------
// Base learners

/// Supervised learner plugged into the meta-learners and propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseLearner {
    Boosted(TrainConfig),
    /// Ridge-penalised GLM: logistic for binary targets, linear otherwise.
    Glm { l2: f64 },
}

impl Default for BaseLearner {
    fn default() -> Self {
        BaseLearner::Boosted(TrainConfig {
            rounds: 100,
            max_depth: 3,
            eta: 0.1,
            lambda: 1.0,
            min_child_cover: 10.0,
            ..TrainConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Boosted(BoostedModel),
    Glm { coef: Vec<f64>, logistic: bool },
}

impl Predictor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Predictor::Boosted(m) => {
                let v = m.margin_unchecked(x);
                match m.objective {
                    Objective::Logistic => sigmoid(v),
                    Objective::SquaredError => v,
                }
            }
            Predictor::Glm { coef, logistic } => {
                let v = coef[0] + coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
                if *logistic {
                    sigmoid(v)
                } else {
                    v
                }
            }
        }
    }

    pub fn predict_rows(&self, x: &Matrix) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict(r)).collect()
    }
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

impl BaseLearner {
    pub fn fit_classifier(&self, x: &Matrix, y: &[u8]) -> Res<Predictor> {
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        match self {
            BaseLearner::Boosted(cfg) => {
                let cfg = TrainConfig {
                    objective: Objective::Logistic,
                    ..*cfg
                };
                let (m, _) = gbm::train(x, &yf, None, names(x.cols()), &cfg)?;
                Ok(Predictor::Boosted(m))
            }
            BaseLearner::Glm { l2 } => Ok(Predictor::Glm {
                coef: fit_glm(x, &yf, None, *l2, true)?,
                logistic: true,
            }),
        }
    }

    pub fn fit_regressor(&self, x: &Matrix, y: &[f64], w: Option<&[f64]>) -> Res<Predictor> {
        match self {
            BaseLearner::Boosted(cfg) => {
                let cfg = TrainConfig {
                    objective: Objective::SquaredError,
                    ..*cfg
                };
                let (m, _) = gbm::train(x, y, w, names(x.cols()), &cfg)?;
                Ok(Predictor::Boosted(m))
            }
            BaseLearner::Glm { l2 } => Ok(Predictor::Glm {
                coef: fit_glm(x, y, w, *l2, false)?,
                logistic: false,
            }),
        }
    }
}

/// Newton–Raphson (IRLS) for ridge-penalised logistic or least-squares
/// regression. Columns are standardised before fitting, so the penalty
/// `l2·‖β‖²` acts on standardised coefficients; the intercept is not
/// penalised. Returns `[intercept, coefficients...]` on the original scale.
pub fn fit_glm(x: &Matrix, y: &[f64], w: Option<&[f64]>, l2: f64, logistic: bool) -> Res<Vec<f64>> {
    if !(l2 >= 0.0) {
        return Err(CausalError::InvalidConfig("l2 must be >= 0".into()));
    }
    let (mean, scale) = standardize_stats(x);
    let mut z = x.clone();
    for i in 0..z.rows() {
        for (j, v) in z.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[j]) / scale[j];
        }
    }
    let std_beta = fit_glm_standardized(&z, y, w, l2, logistic)?;
    let mut beta = vec![std_beta[0]; std_beta.len()];
    for j in 0..mean.len() {
        beta[j + 1] = std_beta[j + 1] / scale[j];
        beta[0] -= beta[j + 1] * mean[j];
    }
    Ok(beta)
}

fn fit_glm_standardized(x: &Matrix, y: &[f64], w: Option<&[f64]>, l2: f64, logistic: bool) -> Res<Vec<f64>> {
    let (n, p) = x.shape();
    let ridge = l2.max(1e-8);
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let mut beta = vec![0.0; p + 1];
    let max_iter = if logistic { 100 } else { 1 };
    for _ in 0..max_iter {
        let mut hess = Matrix::zeros(p + 1, p + 1);
        let mut grad = vec![0.0; p + 1];
        for i in 0..n {
            let row = x.row(i);
            let eta = beta[0] + beta[1..].iter().zip(row).map(|(b, v)| b * v).sum::<f64>();
            let (mu, h) = if logistic {
                let m = sigmoid(eta);
                (m, m * (1.0 - m))
            } else {
                (eta, 1.0)
            };
            let wi = weight(i);
            let r = wi * (y[i] - mu);
            let hw = wi * h;
            grad[0] += r;
            hess[(0, 0)] += hw;
            for a in 0..p {
                grad[a + 1] += r * row[a];
                hess[(a + 1, 0)] += hw * row[a];
                for b in 0..=a {
                    hess[(a + 1, b + 1)] += hw * row[a] * row[b];
                }
            }
        }
        for a in 1..=p {
            grad[a] -= ridge * beta[a];
            hess[(a, a)] += ridge;
        }
        hess[(0, 0)] += 1e-10;
        for a in 0..=p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let step = cholesky_solve(&hess, &grad)?;
        let size = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
        if size < 1e-10 {
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(CausalError::Divergence { epoch: 0, loss: f64::NAN });
    }
    Ok(beta)
}

// ---------------------------------------------------------------------------
// Meta-learners

pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// How per-unit effects are averaged into an ATE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over rows.
    #[default]
    Unit,
    /// Mean over groups of each group's mean effect.
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub base: BaseLearner,
    pub propensity: BaseLearner,
    /// Fit the R-learner's τ(x) by weighted boosted regression instead of a constant.
    pub heterogeneous_r: bool,
    pub cross_fit_folds: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            base: BaseLearner::default(),
            propensity: BaseLearner::default(),
            heterogeneous_r: false,
            cross_fit_folds: 5,
            aggregation: Aggregation::Unit,
            seed: 0,
        }
    }
}

fn aggregate(ite: &[f64], data: &CausalDataset, agg: Aggregation) -> f64 {
    match (agg, &data.groups) {
        (Aggregation::Group, Some(g)) => {
            let (_, means) = gbm::group_means(ite, g);
            means.iter().sum::<f64>() / means.len() as f64
        }
        _ => ite.iter().sum::<f64>() / ite.len() as f64,
    }
}

/// `P(t = 1 | x)` from the configured classifier, clipped to `[0.01, 0.99]`.
pub fn propensity(data: &CausalDataset, learner: &BaseLearner) -> Res<Vec<f64>> {
    propensity_logged(data, learner, true)
}

fn propensity_logged(data: &CausalDataset, learner: &BaseLearner, loud: bool) -> Res<Vec<f64>> {
    let model = learner.fit_classifier(&data.x, &data.t)?;
    Ok(clip_propensity(model.predict_rows(&data.x), loud))
}

/// Clips to [`PROPENSITY_CLIP`]. Clipping is logged as a warning when `loud`
/// (full-data fits) and at debug level otherwise (bootstrap replicates).
fn clip_propensity(mut e: Vec<f64>, loud: bool) -> Vec<f64> {
    let (lo, hi) = PROPENSITY_CLIP;
    let clipped = e.iter().filter(|&&v| !(lo..=hi).contains(&v)).count();
    if clipped > 0 {
        let level = if loud { log::Level::Warn } else { log::Level::Debug };
        log::log!(level, "{clipped} of {} propensity scores clipped to [{lo}, {hi}]", e.len());
    }
    e.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    e
}

pub fn diff_in_means(data: &CausalDataset) -> f64 {
    let mean = |arm: u8| {
        let idx = data.arm(arm);
        idx.iter().map(|&i| data.y[i] as f64).sum::<f64>() / idx.len() as f64
    };
    mean(1) - mean(0)
}

/// Per-unit effect estimates `τ̂(x_i)` for a meta-learner.
pub fn meta_ite(method: Method, data: &CausalDataset, cfg: &MetaConfig) -> Res<Vec<f64>> {
    meta_ite_logged(method, data, cfg, true)
}

fn meta_ite_logged(method: Method, data: &CausalDataset, cfg: &MetaConfig, loud: bool) -> Res<Vec<f64>> {
    let n = data.len();
    match method {
        Method::S => {
            let f = cfg.base.fit_classifier(&data.with_treatment_column(None), &data.y)?;
            let p1 = f.predict_rows(&data.with_treatment_column(Some(1)));
            let p0 = f.predict_rows(&data.with_treatment_column(Some(0)));
            Ok(p1.iter().zip(&p0).map(|(a, b)| a - b).collect())
        }
        Method::T => {
            let (f1, f0) = arm_models(data, &cfg.base)?;
            Ok((0..n).map(|i| f1.predict(data.x.row(i)) - f0.predict(data.x.row(i))).collect())
        }
        Method::X => {
            let (f1, f0) = arm_models(data, &cfg.base)?;
            let e = propensity_logged(data, &cfg.propensity, loud)?;
            let treated = data.arm(1);
            let control = data.arm(0);
            let d1: Vec<f64> = treated
                .iter()
                .map(|&i| data.y[i] as f64 - f0.predict(data.x.row(i)))
                .collect();
            let d0: Vec<f64> = control
                .iter()
                .map(|&i| f1.predict(data.x.row(i)) - data.y[i] as f64)
                .collect();
            let tau1 = cfg.base.fit_regressor(&data.x.select_rows(&treated), &d1, None)?;
            let tau0 = cfg.base.fit_regressor(&data.x.select_rows(&control), &d0, None)?;
            Ok((0..n)
                .map(|i| {
                    let r = data.x.row(i);
                    e[i] * tau0.predict(r) + (1.0 - e[i]) * tau1.predict(r)
                })
                .collect())
        }
        Method::R => r_learner_ite(data, cfg, loud),
        Method::DiffMeans => Ok(vec![diff_in_means(data); n]),
        Method::Cevae => Err(CausalError::InvalidConfig("CEVAE is not a meta-learner".into())),
    }
}

fn arm_models(data: &CausalDataset, base: &BaseLearner) -> Res<(Predictor, Predictor)> {
    let fit = |arm: u8| -> Res<Predictor> {
        let idx = data.arm(arm);
        let y: Vec<u8> = idx.iter().map(|&i| data.y[i]).collect();
        let x = data.x.select_rows(&idx);
        if y.iter().all(|&v| v == y[0]) {
            // One outcome class in this arm: the arm's outcome model is that constant.
            return Ok(Predictor::Glm {
                coef: std::iter::once(y[0] as f64).chain(std::iter::repeat_n(0.0, x.cols())).collect(),
                logistic: false,
            });
        }
        base.fit_classifier(&x, &y)
    };
    Ok((fit(1)?, fit(0)?))
}

/// Robinson residual-on-residual regression with cross-fitted nuisances.
fn r_learner_ite(data: &CausalDataset, cfg: &MetaConfig, loud: bool) -> Res<Vec<f64>> {
    let n = data.len();
    let k = cfg.cross_fit_folds.max(2).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(cfg.seed, 0x52)));
    let mut fold = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    let mut m_hat = vec![0.0; n];
    let mut e_hat = vec![0.0; n];
    for f in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let x = data.x.select_rows(&train);
        let y: Vec<u8> = train.iter().map(|&i| data.y[i]).collect();
        let t: Vec<u8> = train.iter().map(|&i| data.t[i]).collect();
        let constant = |v: &[u8]| v.iter().all(|&a| a == v[0]);
        let m = if constant(&y) {
            None
        } else {
            Some(cfg.base.fit_classifier(&x, &y)?)
        };
        let e = if constant(&t) {
            None
        } else {
            Some(cfg.propensity.fit_classifier(&x, &t)?)
        };
        for &i in &test {
            let r = data.x.row(i);
            m_hat[i] = m.as_ref().map_or(y[0] as f64, |m| m.predict(r));
            e_hat[i] = e.as_ref().map_or(t[0] as f64, |e| e.predict(r));
        }
    }
    let e_hat = clip_propensity(e_hat, loud);
    let y_res: Vec<f64> = (0..n).map(|i| data.y[i] as f64 - m_hat[i]).collect();
    let t_res: Vec<f64> = (0..n).map(|i| data.t[i] as f64 - e_hat[i]).collect();
    if cfg.heterogeneous_r {
        let pseudo: Vec<f64> = y_res.iter().zip(&t_res).map(|(a, b)| a / b).collect();
        let w: Vec<f64> = t_res.iter().map(|b| b * b).collect();
        let tau = cfg.base.fit_regressor(&data.x, &pseudo, Some(&w))?;
        Ok(tau.predict_rows(&data.x))
    } else {
        let num: f64 = y_res.iter().zip(&t_res).map(|(a, b)| a * b).sum();
        let den: f64 = t_res.iter().map(|b| b * b).sum();
        if !(den > 0.0) {
            return Err(CausalError::InvalidData("treatment fully explained by covariates".into()));
        }
        Ok(vec![num / den; n])
    }
}

/// ATE point estimate from one meta-learner (or difference in means).
pub fn meta_ate(method: Method, data: &CausalDataset, cfg: &MetaConfig) -> Res<f64> {
    meta_ate_logged(method, data, cfg, true)
}

fn meta_ate_logged(method: Method, data: &CausalDataset, cfg: &MetaConfig, loud: bool) -> Res<f64> {
    if method == Method::DiffMeans {
        return Ok(diff_in_means(data));
    }
    let ite = meta_ite_logged(method, data, cfg, loud)?;
    Ok(aggregate(&ite, data, cfg.aggregation).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Bootstrap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Order-statistic bounds of the percentile interval: for `B` sorted values
/// and level `1 − α`, the `round(B·α/2)`-th and `round(B·(1 − α/2))`-th
/// (1-based), clamped to `[1, B]`.
pub fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let b = sorted.len();
    let alpha = 1.0 - level;
    let lo = ((b as f64 * alpha / 2.0).round() as usize).clamp(1, b);
    let hi = ((b as f64 * (1.0 - alpha / 2.0)).round() as usize).clamp(1, b);
    (sorted[lo - 1], sorted[hi - 1])
}

/// Percentile bootstrap of `estimator` over rows resampled with replacement.
/// Replicate `b` uses a seed derived from `(seed, b)`; failed replicates are
/// dropped and more than 10% failures is an error.
pub fn bootstrap_ci<F>(estimator: F, data: &CausalDataset, b: usize, level: f64, seed: u64) -> Res<BootstrapCi>
where
    F: Fn(&CausalDataset, u64) -> Res<f64> + Sync,
{
    if b < 50 {
        return Err(CausalError::InvalidConfig(format!("B = {b}; at least 50 replicates required")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(CausalError::InvalidConfig("level must lie in (0, 1)".into()));
    }
    let n = data.len();
    let results: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let mut rng = rng_from(s);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let est = data.subset(&idx).and_then(|d| estimator(&d, derive_seed(s, 1)));
            match est {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) => {
                    debug!("bootstrap replicate {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let mut ok: Vec<f64> = results.into_iter().flatten().collect();
    let failures = b - ok.len();
    if failures * 10 > b {
        return Err(CausalError::TooManyFailures { failed: failures, total: b });
    }
    ok.sort_by(f64::total_cmp);
    let (low, high) = percentile_interval(&ok, level);
    Ok(BootstrapCi {
        low,
        high,
        level,
        replicates: ok.len(),
        failures,
    })
}

/// Percentile interval for the mean of fixed per-unit values (no refitting).
pub fn bootstrap_mean_ci(values: &[f64], b: usize, level: f64, seed: u64) -> Res<BootstrapCi> {
    if values.is_empty() {
        return Err(CausalError::InvalidData("no values".into()));
    }
    if b < 50 {
        return Err(CausalError::InvalidConfig(format!("B = {b}; at least 50 replicates required")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..b)
        .map(|r| {
            let mut rng = rng_from(derive_seed(seed, r as u64));
            (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let (low, high) = percentile_interval(&means, level);
    Ok(BootstrapCi {
        low,
        high,
        level,
        replicates: b,
        failures: 0,
    })
}

// ---------------------------------------------------------------------------
// CEVAE

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CevaeConfig {
    pub latent_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for CevaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl CevaeConfig {
    /// 20-dimensional latent, three hidden layers of 200 units.
    pub fn paper() -> Self {
        Self {
            latent_dim: 20,
            hidden_layers: 3,
            hidden_units: 200,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            mc_samples: 100,
            seed: 0,
        }
    }

    /// Reduced network for quick runs: latent 8, two hidden layers of 64.
    pub fn desk() -> Self {
        Self {
            latent_dim: 8,
            hidden_layers: 2,
            hidden_units: 64,
            epochs: 40,
            batch_size: 100,
            learning_rate: 1e-3,
            mc_samples: 50,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    fn validate(&self) -> Res<()> {
        let fields = [
            ("latent_dim", self.latent_dim),
            ("hidden_layers", self.hidden_layers),
            ("hidden_units", self.hidden_units),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("mc_samples", self.mc_samples),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(CausalError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CausalError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

const LOGVAR_BOUND: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct CevaeModel {
    pub config: CevaeConfig,
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    store: ParamStore,
    q_t: Mlp,
    q_y: Mlp,
    encoder: Mlp,
    dec_x: Mlp,
    dec_t: Mlp,
    dec_y0: Mlp,
    dec_y1: Mlp,
    /// Epoch-mean negative ELBO per unit.
    pub loss_history: Vec<f64>,
}

struct Batch {
    x: Tensor,
    t: Tensor,
    y: Tensor,
}

fn standardize_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = x.shape();
    let mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64).collect();
    let scale = (0..p)
        .map(|j| {
            let v = (0..n).map(|i| (x[(i, j)] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl CevaeModel {
    fn batch(&self, data: &CausalDataset, idx: &[usize]) -> Batch {
        let p = data.x.cols();
        let mut x = Tensor::zeros(idx.len(), p);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..p {
                x.data[r * p + j] = (data.x[(i, j)] - self.x_mean[j]) / self.x_scale[j];
            }
        }
        Batch {
            x,
            t: Tensor::column(&idx.iter().map(|&i| data.t[i] as f64).collect::<Vec<_>>()),
            y: Tensor::column(&idx.iter().map(|&i| data.y[i] as f64).collect::<Vec<_>>()),
        }
    }

    /// Logit of a two-headed outcome: `l0 + t·(l1 − l0)`.
    fn select(tape: &mut Tape, l0: Var, l1: Var, t: Var) -> Res<Var> {
        let d = tape.sub(l1, l0)?;
        let td = tape.mul(t, d)?;
        Ok(tape.add(l0, td)?)
    }

    /// Encoder posterior parameters `(mu, logvar)` for a batch.
    fn posterior(&self, tape: &mut Tape, x: Var, t: Var, y: Var) -> Res<(Var, Var)> {
        let l = self.config.latent_dim;
        let inp = tape.concat(&[x, t, y])?;
        let h = self.encoder.forward(tape, &self.store, inp)?;
        let mu = tape.slice(h, 0, l)?;
        let lv = tape.slice(h, l, l)?;
        let lv = tape.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
        Ok((mu, lv))
    }

    /// Negative ELBO summed over the batch.
    fn neg_elbo(&self, tape: &mut Tape, b: &Batch, noise: Tensor) -> Res<Var> {
        let p = b.x.cols();
        let x = tape.constant(b.x.clone());
        let t = tape.constant(b.t.clone());
        let y = tape.constant(b.y.clone());

        let qt = self.q_t.forward(tape, &self.store, x)?;
        let aux_t = bernoulli_logpmf_logits(tape, qt, t)?;
        let qy = self.q_y.forward(tape, &self.store, x)?;
        let qy0 = tape.slice(qy, 0, 1)?;
        let qy1 = tape.slice(qy, 1, 1)?;
        let qy_logit = Self::select(tape, qy0, qy1, t)?;
        let aux_y = bernoulli_logpmf_logits(tape, qy_logit, y)?;

        let (mu, lv) = self.posterior(tape, x, t, y)?;
        let eps = tape.constant(noise);
        let z = reparameterize(tape, mu, lv, eps)?;
        let kl = kl_diag_gaussian(tape, mu, lv)?;

        let px = self.dec_x.forward(tape, &self.store, z)?;
        let px_mu = tape.slice(px, 0, p)?;
        let px_lv = tape.slice(px, p, p)?;
        let px_lv = tape.clamp(px_lv, -LOGVAR_BOUND, LOGVAR_BOUND);
        let rec_x = gaussian_logpdf(tape, x, px_mu, px_lv)?;
        let pt = self.dec_t.forward(tape, &self.store, z)?;
        let rec_t = bernoulli_logpmf_logits(tape, pt, t)?;
        let py0 = self.dec_y0.forward(tape, &self.store, z)?;
        let py1 = self.dec_y1.forward(tape, &self.store, z)?;
        let py = Self::select(tape, py0, py1, t)?;
        let rec_y = bernoulli_logpmf_logits(tape, py, y)?;

        let mut elbo = tape.add(rec_x, rec_t)?;
        elbo = tape.add(elbo, rec_y)?;
        elbo = tape.sub(elbo, kl)?;
        elbo = tape.add(elbo, aux_t)?;
        elbo = tape.add(elbo, aux_y)?;
        Ok(tape.scale(elbo, -1.0))
    }

    /// Per-unit `E_q[p(y=1|t=1,z) − p(y=1|t=0,z)]` with `mc_samples` draws.
    pub fn ite(&self, data: &CausalDataset, mc_samples: usize, seed: u64) -> Res<Vec<f64>> {
        let mut rng = rng_from(seed);
        let l = self.config.latent_dim;
        let mut out = Vec::with_capacity(data.len());
        let chunk: Vec<usize> = (0..data.len()).collect();
        for idx in chunk.chunks(256) {
            let b = self.batch(data, idx);
            let mut tape = Tape::new();
            let x = tape.constant(b.x);
            let t = tape.constant(b.t);
            let y = tape.constant(b.y);
            let (mu, lv) = self.posterior(&mut tape, x, t, y)?;
            let mut acc = vec![0.0; idx.len()];
            for _ in 0..mc_samples.max(1) {
                let eps = tape.constant(Tensor::standard_normal(idx.len(), l, &mut rng));
                let z = reparameterize(&mut tape, mu, lv, eps)?;
                let l1 = self.dec_y1.forward(&mut tape, &self.store, z)?;
                let l0 = self.dec_y0.forward(&mut tape, &self.store, z)?;
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += sigmoid(tape.value(l1).data[k]) - sigmoid(tape.value(l0).data[k]);
                }
            }
            out.extend(acc.iter().map(|a| a / mc_samples.max(1) as f64));
        }
        Ok(out)
    }
}

/// Trains a CEVAE by maximising the ELBO with Adam on shuffled mini-batches.
pub fn cevae_fit(data: &CausalDataset, cfg: &CevaeConfig) -> Res<CevaeModel> {
    cfg.validate()?;
    let p = data.x.cols();
    let mut rng = rng_from(derive_seed(cfg.seed, 0));
    let mut store = ParamStore::new();
    let hidden = vec![cfg.hidden_units; cfg.hidden_layers];
    let widths = |input: usize, output: usize| -> Vec<usize> {
        std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
    };
    let act = Activation::Relu;
    let l = cfg.latent_dim;
    let q_t = Mlp::new(&mut store, &widths(p, 1), act, &mut rng)?;
    let q_y = Mlp::new(&mut store, &widths(p, 2), act, &mut rng)?;
    let encoder = Mlp::new(&mut store, &widths(p + 2, 2 * l), act, &mut rng)?;
    let dec_x = Mlp::new(&mut store, &widths(l, 2 * p), act, &mut rng)?;
    let dec_t = Mlp::new(&mut store, &widths(l, 1), act, &mut rng)?;
    let dec_y0 = Mlp::new(&mut store, &widths(l, 1), act, &mut rng)?;
    let dec_y1 = Mlp::new(&mut store, &widths(l, 1), act, &mut rng)?;
    let (x_mean, x_scale) = standardize_stats(&data.x);
    let mut model = CevaeModel {
        config: *cfg,
        x_mean,
        x_scale,
        store,
        q_t,
        q_y,
        encoder,
        dec_x,
        dec_t,
        dec_y0,
        dec_y1,
        loss_history: Vec::with_capacity(cfg.epochs),
    };
    let mut adam = AdamState::new(&model.store, cfg.learning_rate);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let b = model.batch(data, idx);
            let noise = Tensor::standard_normal(idx.len(), l, &mut rng);
            let mut tape = Tape::new();
            let loss_sum = model.neg_elbo(&mut tape, &b, noise)?;
            let value = tape.scalar_value(loss_sum);
            if !value.is_finite() {
                return Err(CausalError::Divergence { epoch, loss: value });
            }
            total += value;
            let loss = tape.scale(loss_sum, 1.0 / idx.len() as f64);
            tape.backward(loss, &mut model.store)?;
            adam_step(&mut model.store, &mut adam);
        }
        let mean = total / n as f64;
        debug!("cevae epoch {epoch}: loss {mean:.5}");
        model.loss_history.push(mean);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CevaeResult {
    pub estimate: AteEstimate,
    pub loss_history: Vec<f64>,
}

/// Average of the per-unit CEVAE effects, with a percentile-bootstrap
/// interval over units (the fitted networks are held fixed).
pub fn cevae_ate(
    model: &CevaeModel,
    data: &CausalDataset,
    mc_samples: usize,
    bootstrap: usize,
    agg: Aggregation,
) -> Res<AteEstimate> {
    let seed = derive_seed(model.config.seed, 1);
    let ite = model.ite(data, mc_samples, seed)?;
    let ate = aggregate(&ite, data, agg);
    let ci = if bootstrap > 0 {
        let values = match (agg, &data.groups) {
            (Aggregation::Group, Some(g)) => gbm::group_means(&ite, g).1,
            _ => ite,
        };
        let c = bootstrap_mean_ci(&values, bootstrap, 0.95, derive_seed(seed, 2))?;
        Some((c.low, c.high))
    } else {
        None
    };
    Ok(AteEstimate::new(Method::Cevae, ate, ci))
}

/// Meta-learner estimate with an optional percentile-bootstrap interval.
pub fn estimate(method: Method, data: &CausalDataset, cfg: &MetaConfig, bootstrap: usize) -> Res<AteEstimate> {
    let ate = meta_ate(method, data, cfg)?;
    let ci = if bootstrap > 0 {
        let c = bootstrap_ci(
            |d, s| meta_ate_logged(method, d, &MetaConfig { seed: s, ..*cfg }, false),
            data,
            bootstrap,
            0.95,
            derive_seed(cfg.seed, 0xB007),
        )?;
        Some((c.low, c.high))
    } else {
        None
    };
    Ok(AteEstimate::new(method, ate, ci))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_causal, CausalSpec};

    fn randomized(n: usize, p1: f64, p0: f64, seed: u64) -> CausalDataset {
        let mut rng = rng_from(seed);
        let mut x = Matrix::zeros(n, 2);
        let mut t = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            x[(i, 0)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            x[(i, 1)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            let ti = rng.random_bool(0.5) as u8;
            t.push(ti);
            y.push(rng.random_bool(if ti == 1 { p1 } else { p0 }) as u8);
        }
        CausalDataset::new(x, t, y, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn dataset_validation() {
        let x = Matrix::zeros(3, 1);
        assert!(CausalDataset::new(x.clone(), vec![1, 1, 1], vec![0, 1, 0], vec!["a".into()]).is_err());
        assert!(CausalDataset::new(x.clone(), vec![1, 0, 1], vec![0, 2, 0], vec!["a".into()]).is_err());
        assert!(CausalDataset::new(x, vec![1, 0, 1], vec![0, 1, 0], vec!["a".into()]).is_ok());
    }

    #[test]
    fn deterministic_effect_t_learner() {
        let mut d = randomized(400, 0.5, 0.5, 1);
        d.y = d.t.clone();
        let ate = meta_ate(Method::T, &d, &MetaConfig::default()).unwrap();
        assert!((ate - 1.0).abs() < 0.02);
    }

    #[test]
    fn null_effect_learners() {
        let d = randomized(2000, 0.4, 0.4, 2);
        let dm = diff_in_means(&d);
        for m in [Method::S, Method::T, Method::X, Method::R] {
            let ate = meta_ate(m, &d, &MetaConfig::default()).unwrap();
            assert!(ate.abs() < 0.05, "{m:?}: {ate}");
            assert!((ate - dm).abs() < 0.05, "{m:?} vs diff in means");
        }
    }

    #[test]
    fn propensity_examples() {
        let d = randomized(2000, 0.5, 0.5, 3);
        let e = propensity(&d, &BaseLearner::default()).unwrap();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        assert!((mean - 0.5).abs() < 0.1);
        assert!(e.iter().all(|v| (0.01..=0.99).contains(v)));

        let mut d2 = randomized(1000, 0.5, 0.5, 4);
        d2.t = (0..1000).map(|i| (d2.x[(i, 0)] > 0.0) as u8).collect();
        let e2 = propensity(&d2, &BaseLearner::default()).unwrap();
        assert!(gbm::auc(&e2, &d2.t) >= 0.95);
        assert!(e2.iter().all(|v| (0.01..=0.99).contains(v)));
    }

    #[test]
    fn percentile_order_statistics() {
        let v: Vec<f64> = (1..=200).map(|i| i as f64).collect();
        assert_eq!(percentile_interval(&v, 0.95), (5.0, 195.0));
        let d = randomized(100, 0.5, 0.5, 5);
        let ci = bootstrap_ci(|_, _| Ok(0.3), &d, 60, 0.95, 1).unwrap();
        assert_eq!((ci.low, ci.high), (0.3, 0.3));
        assert!(bootstrap_ci(|_, _| Ok(0.3), &d, 10, 0.95, 1).is_err());
        // Replicates whose resample lacks a treated unit fail inside subset().
        let few = {
            let mut d = randomized(100, 0.5, 0.5, 5);
            d.t = (0..100).map(|i| (i == 0) as u8).collect();
            d
        };
        let sparse = bootstrap_ci(|d, _| Ok(diff_in_means(d)), &few, 100, 0.95, 2);
        assert!(matches!(sparse, Err(CausalError::TooManyFailures { total: 100, .. })));
        let all_fail = bootstrap_ci(|_, _| Err(CausalError::InvalidData("x".into())), &d, 60, 0.95, 1);
        assert!(matches!(all_fail, Err(CausalError::TooManyFailures { failed: 60, .. })));
    }

    #[test]
    fn bootstrap_contains_point_estimate_and_is_deterministic() {
        let d = randomized(300, 0.6, 0.4, 6);
        let est = |d: &CausalDataset, _| Ok(diff_in_means(d));
        let a = bootstrap_ci(est, &d, 100, 0.95, 9).unwrap();
        let b = bootstrap_ci(est, &d, 100, 0.95, 9).unwrap();
        assert_eq!(a, b);
        let point = diff_in_means(&d);
        assert!(a.low <= point && point <= a.high);
    }

    #[test]
    fn glm_recovers_logistic_coefficients() {
        let mut rng = rng_from(10);
        let n = 5000;
        let mut x = Matrix::zeros(n, 2);
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[(i, 0)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            x[(i, 1)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            y[i] = rng.random_bool(sigmoid(0.5 + 1.0 * x[(i, 0)] - 2.0 * x[(i, 1)])) as u8 as f64;
        }
        let b = fit_glm(&x, &y, None, 0.0, true).unwrap();
        assert!((b[0] - 0.5).abs() < 0.15 && (b[1] - 1.0).abs() < 0.15 && (b[2] + 2.0).abs() < 0.2);
        let ls = fit_glm(&x, &x.column(0).iter().map(|v| 3.0 * v + 1.0).collect::<Vec<_>>(), None, 0.0, false).unwrap();
        assert!((ls[0] - 1.0).abs() < 1e-6 && (ls[1] - 3.0).abs() < 1e-6);
    }

    fn small_cevae() -> CevaeConfig {
        CevaeConfig {
            epochs: 20,
            ..CevaeConfig::desk()
        }
    }

    #[test]
    fn cevae_elbo_improves_and_is_deterministic() {
        let g = generate_causal(&CausalSpec {
            n: 400,
            seed: 3,
            ..CausalSpec::default()
        })
        .unwrap();
        let d = CausalDataset::new(g.x, g.t, g.y, (0..7).map(|j| format!("c{j}")).collect()).unwrap();
        let m1 = cevae_fit(&d, &small_cevae()).unwrap();
        let h = &m1.loss_history;
        assert!(h.iter().all(|v| v.is_finite()));
        assert!(h.last().unwrap() < &h[0]);
        let m2 = cevae_fit(&d, &small_cevae()).unwrap();
        assert_eq!(m1.loss_history, m2.loss_history);
        let est = cevae_ate(&m1, &d, 10, 60, Aggregation::Unit).unwrap();
        assert!(est.ci_low <= est.ate && est.ate <= est.ci_high);
        assert!((-1.0..=1.0).contains(&est.ate));
    }

    #[test]
    fn cevae_survives_degenerate_covariates() {
        let mut rng = rng_from(4);
        let n = 200;
        let t: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        let d = CausalDataset::new(Matrix::zeros(n, 3), t, y, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let m = cevae_fit(&d, &CevaeConfig { epochs: 3, ..CevaeConfig::desk() }).unwrap();
        assert!(m.loss_history.iter().all(|v| v.is_finite()));
    }
}

//! Second-order gradient-boosted trees, cross-validation and exact TreeSHAP.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sigmoid, FeatureMatrix};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("target has a single class")]
    SingleClass,
    #[error("target value {value} at row {row} is not 0 or 1")]
    NonBinaryTarget { row: usize, value: f64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid sample weights: {0}")]
    InvalidWeights(String),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{rows} rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("class {class} has {count} samples, fewer than {folds} folds")]
    TooFewForFolds { class: u8, count: usize, folds: usize },
    #[error("probabilities are all identical; no two-way split exists")]
    DegenerateSplit,
    #[error("malformed model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Logistic,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub eta: f64,
    pub lambda: f64,
    pub min_child_cover: f64,
    pub folds: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 4,
            eta: 0.3,
            lambda: 1.0,
            min_child_cover: 1.0,
            folds: 5,
            seed: 0,
            objective: Objective::Logistic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GbmError> {
        let bad = |m: &str| Err(GbmError::InvalidConfig(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.min_child_cover > 0.0 && self.min_child_cover.is_finite()) {
            return bad("min_child_cover must be positive");
        }
        if self.folds < 2 {
            return bad("folds must be >= 2");
        }
        Ok(())
    }
}

/// A regression tree. `x[feature] < threshold` goes left. Cover is the total
/// sample weight that reached the node during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        cover: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { weight, .. } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if x[*feature] < *threshold { left } else { right },
            }
        }
    }

    /// Cover-weighted mean leaf value.
    pub fn expected_value(&self) -> f64 {
        match self {
            TreeNode::Leaf { weight, .. } => *weight,
            TreeNode::Split { cover, left, right, .. } => {
                (left.cover() * left.expected_value() + right.cover() * right.expected_value()) / cover
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn validate(&self, d: usize) -> Result<(), String> {
        match self {
            TreeNode::Leaf { weight, cover } => {
                if !weight.is_finite() || !(*cover > 0.0) {
                    return Err("leaf with non-finite weight or non-positive cover".into());
                }
            }
            TreeNode::Split {
                feature,
                threshold,
                cover,
                left,
                right,
            } => {
                if *feature >= d {
                    return Err(format!("split on feature {feature} but model has {d}"));
                }
                if !threshold.is_finite() {
                    return Err("non-finite threshold".into());
                }
                let sum = left.cover() + right.cover();
                if (sum - cover).abs() > 1e-9 * cover.abs().max(1.0) {
                    return Err(format!("cover {cover} differs from children sum {sum}"));
                }
                left.validate(d)?;
                right.validate(d)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub objective: Objective,
    /// Initial margin (log-odds for the logistic objective).
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<TreeNode>,
}

pub const PROB_FLOOR: f64 = 1e-15;

impl BoostedModel {
    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    fn check(&self, x: &[f64]) -> Result<(), GbmError> {
        if x.len() != self.num_features() {
            return Err(GbmError::DimensionMismatch {
                expected: self.num_features(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `base_score + η · Σ tree(x)`. Callers must pass the right width.
    pub fn margin_unchecked(&self, x: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn margin(&self, x: &[f64]) -> Result<f64, GbmError> {
        self.check(x)?;
        Ok(self.margin_unchecked(x))
    }

    /// Logistic of the margin, clamped to `[1e-15, 1 − 1e-15]`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, GbmError> {
        Ok(sigmoid(self.margin(x)?).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }

    /// Probabilities for logistic models, raw margins for squared error.
    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<f64>, GbmError> {
        if x.cols() != self.num_features() {
            return Err(GbmError::DimensionMismatch {
                expected: self.num_features(),
                got: x.cols(),
            });
        }
        Ok(x.iter_rows()
            .map(|r| {
                let m = self.margin_unchecked(r);
                match self.objective {
                    Objective::Logistic => sigmoid(m).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR),
                    Objective::SquaredError => m,
                }
            })
            .collect())
    }

    pub fn validate(&self) -> Result<(), GbmError> {
        if !(self.base_score.is_finite() && self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbmError::InvalidModel("bad base_score or learning_rate".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(self.num_features())
                .map_err(|m| GbmError::InvalidModel(format!("tree {i}: {m}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Weighted mean training loss: index 0 is the base score alone, index
    /// `r` is after `r` trees.
    pub loss_history: Vec<f64>,
}

fn loss(obj: Objective, y: f64, m: f64) -> f64 {
    match obj {
        // log(1 + e^m) − y·m, evaluated stably.
        Objective::Logistic => m.max(0.0) + (-m.abs()).exp().ln_1p() - y * m,
        Objective::SquaredError => 0.5 * (y - m) * (y - m),
    }
}

fn grad_hess(obj: Objective, y: f64, m: f64) -> (f64, f64) {
    match obj {
        Objective::Logistic => {
            let p = sigmoid(m);
            (p - y, p * (1.0 - p))
        }
        Objective::SquaredError => (m - y, 1.0),
    }
}

fn total_loss(obj: Objective, y: &[f64], w: &[f64], m: &[f64], wsum: f64) -> f64 {
    y.iter()
        .zip(w)
        .zip(m)
        .map(|((&yi, &wi), &mi)| wi * loss(obj, yi, mi))
        .sum::<f64>()
        / wsum
}

fn validate_inputs(x: &Matrix, y: &[f64], w: &[f64], obj: Objective) -> Result<f64, GbmError> {
    let n = x.rows();
    if y.len() != n || w.len() != n {
        return Err(GbmError::LengthMismatch { rows: n, targets: y.len() });
    }
    for i in 0..n {
        if let Some(col) = x.row(i).iter().position(|v| !v.is_finite()) {
            return Err(GbmError::NonFinite { row: i, col });
        }
        if !y[i].is_finite() {
            return Err(GbmError::NonFinite { row: i, col: x.cols() });
        }
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(GbmError::InvalidWeights("weights must be finite and >= 0".into()));
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(GbmError::InvalidWeights("weights sum to zero".into()));
    }
    if obj == Objective::Logistic {
        if let Some(row) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(GbmError::NonBinaryTarget { row, value: y[row] });
        }
        let pos: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
        if pos <= 0.0 || pos >= wsum {
            return Err(GbmError::SingleClass);
        }
    }
    Ok(wsum)
}

/// Fits a boosted ensemble. `weights = None` means unit weights.
pub fn train(
    x: &Matrix,
    y: &[f64],
    weights: Option<&[f64]>,
    feature_names: Vec<String>,
    cfg: &TrainConfig,
) -> Result<(BoostedModel, TrainReport), GbmError> {
    cfg.validate()?;
    let n = x.rows();
    let unit;
    let w = match weights {
        Some(w) => w,
        None => {
            unit = vec![1.0; n];
            &unit
        }
    };
    let wsum = validate_inputs(x, y, w, cfg.objective)?;
    if feature_names.len() != x.cols() {
        return Err(GbmError::DimensionMismatch {
            expected: x.cols(),
            got: feature_names.len(),
        });
    }
    let mean_y = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let base_score = match cfg.objective {
        Objective::Logistic => (mean_y / (1.0 - mean_y)).ln(),
        Objective::SquaredError => mean_y,
    };

    let sorted = presort(x);
    let mut margins = vec![base_score; n];
    let mut history = vec![total_loss(cfg.objective, y, w, &margins, wsum)];
    let mut trees = Vec::with_capacity(cfg.rounds);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..cfg.rounds {
        for i in 0..n {
            let (gi, hi) = grad_hess(cfg.objective, y[i], margins[i]);
            g[i] = w[i] * gi;
            h[i] = w[i] * hi;
        }
        let (mut arena, leaf_of) = grow_tree(x, &sorted, &g, &h, w, cfg);
        safeguard_leaves(&mut arena, &leaf_of, y, w, &margins, cfg);
        for i in 0..n {
            margins[i] += cfg.eta * arena[leaf_of[i]].weight;
        }
        let l = total_loss(cfg.objective, y, w, &margins, wsum);
        let prev = *history.last().expect("seeded with base loss");
        assert!(l <= prev + 1e-12 * prev.abs().max(1.0), "training loss rose from {prev} to {l}");
        history.push(l);
        trees.push(to_tree(&arena, 0));
    }
    Ok((
        BoostedModel {
            objective: cfg.objective,
            base_score,
            learning_rate: cfg.eta,
            feature_names,
            trees,
        },
        TrainReport { loss_history: history },
    ))
}

/// Binary classifier on a feature matrix (target 1 = co-production).
pub fn train_classifier(fm: &FeatureMatrix, cfg: &TrainConfig) -> Result<(BoostedModel, TrainReport), GbmError> {
    let y: Vec<f64> = fm.target.iter().map(|&t| t as f64).collect();
    let cfg = TrainConfig {
        objective: Objective::Logistic,
        ..*cfg
    };
    train(&fm.rows, &y, None, fm.columns.clone(), &cfg)
}

fn presort(x: &Matrix) -> Vec<Vec<usize>> {
    (0..x.cols())
        .map(|f| {
            let mut idx: Vec<usize> = (0..x.rows()).collect();
            idx.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

#[derive(Debug, Clone)]
struct BuildNode {
    g: f64,
    h: f64,
    cover: f64,
    depth: usize,
    weight: f64,
    split: Option<(usize, f64, usize, usize)>,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    let d = h + lambda;
    if d > 0.0 {
        -g / d
    } else {
        0.0
    }
}

/// Strictly between `a` and `b` when possible, never above `b`.
fn midpoint(a: f64, b: f64) -> f64 {
    let t = a + 0.5 * (b - a);
    if t > a {
        t
    } else {
        b
    }
}

/// Level-wise exact greedy growth. Returns the node arena (root at 0) and the
/// leaf reached by each training row.
fn grow_tree(
    x: &Matrix,
    sorted: &[Vec<usize>],
    g: &[f64],
    h: &[f64],
    w: &[f64],
    cfg: &TrainConfig,
) -> (Vec<BuildNode>, Vec<usize>) {
    let n = x.rows();
    let lambda = cfg.lambda;
    let mut arena = vec![BuildNode {
        g: g.iter().sum(),
        h: h.iter().sum(),
        cover: w.iter().sum(),
        depth: 0,
        weight: 0.0,
        split: None,
    }];
    let mut node_of = vec![0usize; n];
    for depth in 0..cfg.max_depth {
        let active: Vec<bool> = arena
            .iter()
            .map(|nd| nd.depth == depth && nd.split.is_none() && nd.cover >= 2.0 * cfg.min_child_cover)
            .collect();
        if !active.iter().any(|&a| a) {
            break;
        }
        let mut best: Vec<Option<Candidate>> = vec![None; arena.len()];
        // Running left sums per node: (G, H, cover, last value seen).
        let mut state: Vec<(f64, f64, f64, f64)> = vec![(0.0, 0.0, 0.0, f64::NAN); arena.len()];
        for (f, order) in sorted.iter().enumerate() {
            state.iter_mut().for_each(|s| *s = (0.0, 0.0, 0.0, f64::NAN));
            for &i in order {
                let nd = node_of[i];
                if !active[nd] {
                    continue;
                }
                let v = x[(i, f)];
                let st = &mut state[nd];
                if st.3 < v {
                    let node = &arena[nd];
                    let (gl, hl, cl) = (st.0, st.1, st.2);
                    let (gr, hr, cr) = (node.g - gl, node.h - hl, node.cover - cl);
                    if cl >= cfg.min_child_cover
                        && cr >= cfg.min_child_cover
                        && hl + lambda > 0.0
                        && hr + lambda > 0.0
                    {
                        let gain = 0.5
                            * (score(gl, hl, lambda) + score(gr, hr, lambda) - score(node.g, node.h, lambda));
                        if gain > 1e-12 && best[nd].is_none_or(|b| gain > b.gain) {
                            best[nd] = Some(Candidate {
                                gain,
                                feature: f,
                                threshold: midpoint(st.3, v),
                            });
                        }
                    }
                }
                st.0 += g[i];
                st.1 += h[i];
                st.2 += w[i];
                st.3 = v;
            }
        }
        let mut any = false;
        for nd in 0..best.len() {
            let Some(c) = best[nd] else { continue };
            any = true;
            let l = arena.len();
            arena.push(BuildNode {
                g: 0.0,
                h: 0.0,
                cover: 0.0,
                depth: depth + 1,
                weight: 0.0,
                split: None,
            });
            arena.push(arena[l].clone());
            arena[nd].split = Some((c.feature, c.threshold, l, l + 1));
        }
        if !any {
            break;
        }
        for i in 0..n {
            let nd = node_of[i];
            if let Some((f, thr, l, r)) = arena[nd].split {
                let child = if x[(i, f)] < thr { l } else { r };
                node_of[i] = child;
                let c = &mut arena[child];
                c.g += g[i];
                c.h += h[i];
                c.cover += w[i];
            }
        }
    }
    for nd in arena.iter_mut() {
        if nd.split.is_none() {
            nd.weight = leaf_weight(nd.g, nd.h, lambda);
        }
    }
    // Internal covers as exact sums of children (bottom-up; children follow parents).
    for nd in (0..arena.len()).rev() {
        if let Some((_, _, l, r)) = arena[nd].split {
            arena[nd].cover = arena[l].cover + arena[r].cover;
        }
    }
    (arena, node_of)
}

/// Halves any leaf whose Newton step would raise that leaf's loss, so the
/// training loss never increases between rounds.
fn safeguard_leaves(
    arena: &mut [BuildNode],
    leaf_of: &[usize],
    y: &[f64],
    w: &[f64],
    margins: &[f64],
    cfg: &TrainConfig,
) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); arena.len()];
    for (i, &l) in leaf_of.iter().enumerate() {
        members[l].push(i);
    }
    for (l, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let leaf_loss = |step: f64| -> f64 {
            idx.iter()
                .map(|&i| w[i] * loss(cfg.objective, y[i], margins[i] + cfg.eta * step))
                .sum()
        };
        let before = leaf_loss(0.0);
        let mut wl = arena[l].weight;
        let mut tries = 0;
        while leaf_loss(wl) > before && tries < 60 {
            wl *= 0.5;
            tries += 1;
        }
        if leaf_loss(wl) > before {
            wl = 0.0;
        }
        arena[l].weight = wl;
    }
}

fn to_tree(arena: &[BuildNode], i: usize) -> TreeNode {
    let nd = &arena[i];
    match nd.split {
        None => TreeNode::Leaf {
            weight: nd.weight,
            cover: nd.cover,
        },
        Some((feature, threshold, l, r)) => TreeNode::Split {
            feature,
            threshold,
            cover: nd.cover,
            left: Box::new(to_tree(arena, l)),
            right: Box::new(to_tree(arena, r)),
        },
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Stratified fold index per row: each class is shuffled with `seed` and dealt
/// round-robin.
pub fn stratified_folds(target: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>, GbmError> {
    let mut assignment = vec![0usize; target.len()];
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..target.len()).filter(|&i| target[i] == class).collect();
        if idx.len() < folds {
            return Err(GbmError::TooFewForFolds {
                class,
                count: idx.len(),
                folds,
            });
        }
        idx.shuffle(&mut rng_from(derive_seed(seed, class as u64)));
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_accuracy: Vec<f64>,
    pub fold_auc: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_auc: f64,
    /// Share of the most frequent class.
    pub majority_share: f64,
}

pub fn cross_validate(fm: &FeatureMatrix, cfg: &TrainConfig) -> Result<CvReport, GbmError> {
    cfg.validate()?;
    let n = fm.num_rows();
    if n < cfg.folds {
        return Err(GbmError::InvalidConfig(format!("{n} rows for {} folds", cfg.folds)));
    }
    let folds = stratified_folds(&fm.target, cfg.folds, cfg.seed)?;
    let results = (0..cfg.folds)
        .into_par_iter()
        .map(|k| {
            let train_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != k).collect();
            let test_idx: Vec<usize> = (0..n).filter(|&i| folds[i] == k).collect();
            let tr = fm.subset(&train_idx);
            let te = fm.subset(&test_idx);
            let fold_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, k as u64),
                ..*cfg
            };
            let (model, _) = train_classifier(&tr, &fold_cfg)?;
            let p = model.predict_rows(&te.rows)?;
            let hits = p
                .iter()
                .zip(&te.target)
                .filter(|(&pi, &t)| (pi >= 0.5) == (t == 1))
                .count();
            Ok((hits as f64 / te.num_rows() as f64, auc(&p, &te.target)))
        })
        .collect::<Result<Vec<_>, GbmError>>()?;
    let fold_accuracy: Vec<f64> = results.iter().map(|r| r.0).collect();
    let fold_auc: Vec<f64> = results.iter().map(|r| r.1).collect();
    let pos = fm.target.iter().filter(|&&t| t == 1).count() as f64 / n as f64;
    Ok(CvReport {
        mean_accuracy: fold_accuracy.iter().sum::<f64>() / cfg.folds as f64,
        mean_auc: fold_auc.iter().sum::<f64>() / cfg.folds as f64,
        fold_accuracy,
        fold_auc,
        majority_share: pos.max(1.0 - pos),
    })
}

/// Area under the ROC curve (Mann–Whitney, ties counted half). NaN when a
/// class is absent.
pub fn auc(scores: &[f64], target: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if target[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let n1 = target.iter().filter(|&&t| t == 1).count() as f64;
    let n0 = target.len() as f64 - n1;
    (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0)
}

// ---------------------------------------------------------------------------
// TreeSHAP

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapValues {
    /// `n × d` attributions in margin space.
    pub phi: Matrix,
    /// Expected margin under the training cover distribution.
    pub base: f64,
}

#[derive(Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend_path(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let denom = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / denom;
        path[i].weight = zero * path[i].weight * (depth - i) as f64 / denom;
    }
}

fn unwind_path(path: &mut Vec<PathElem>, idx: usize) {
    let depth = path.len() - 1;
    let (one, zero) = (path[idx].one, path[idx].zero);
    let mut next = path[depth].weight;
    let denom = (depth + 1) as f64;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * denom / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (depth - i) as f64 / denom;
        } else {
            path[i].weight = path[i].weight * denom / (zero * (depth - i) as f64);
        }
    }
    for i in idx..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_path_sum(path: &[PathElem], idx: usize) -> f64 {
    let depth = path.len() - 1;
    let (one, zero) = (path[idx].one, path[idx].zero);
    let mut next = path[depth].weight;
    let mut total = 0.0;
    if one != 0.0 {
        for i in (0..depth).rev() {
            let tmp = next / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (depth - i) as f64;
        }
    } else if zero != 0.0 {
        for i in (0..depth).rev() {
            total += path[i].weight / (zero * (depth - i) as f64);
        }
    }
    total * (depth + 1) as f64
}

fn shap_recurse(
    node: &TreeNode,
    x: &[f64],
    phi: &mut [f64],
    scale: f64,
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
) {
    extend_path(&mut path, zero, one, feature);
    match node {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let el = path[i];
                let f = el.feature.expect("only the root element lacks a feature");
                phi[f] += w * (el.one - el.zero) * weight * scale;
            }
        }
        TreeNode::Split {
            feature: f,
            threshold,
            cover,
            left,
            right,
        } => {
            let (hot, cold) = if x[*f] < *threshold { (left, right) } else { (right, left) };
            let mut in_zero = 1.0;
            let mut in_one = 1.0;
            if let Some(k) = path.iter().position(|e| e.feature == Some(*f)) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind_path(&mut path, k);
            }
            shap_recurse(
                hot,
                x,
                phi,
                scale,
                path.clone(),
                in_zero * hot.cover() / cover,
                in_one,
                Some(*f),
            );
            shap_recurse(cold, x, phi, scale, path, in_zero * cold.cover() / cover, 0.0, Some(*f));
        }
    }
}

/// Exact path-dependent TreeSHAP for one row, in margin space.
pub fn shap_row(model: &BoostedModel, x: &[f64]) -> Result<Vec<f64>, GbmError> {
    model.check(x)?;
    let mut phi = vec![0.0; model.num_features()];
    for t in &model.trees {
        shap_recurse(t, x, &mut phi, model.learning_rate, Vec::with_capacity(8), 1.0, 1.0, None);
    }
    Ok(phi)
}

pub fn expected_margin(model: &BoostedModel) -> f64 {
    model.base_score + model.learning_rate * model.trees.iter().map(TreeNode::expected_value).sum::<f64>()
}

pub fn tree_shap(model: &BoostedModel, x: &Matrix) -> Result<ShapValues, GbmError> {
    if x.cols() != model.num_features() {
        return Err(GbmError::DimensionMismatch {
            expected: model.num_features(),
            got: x.cols(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .into_par_iter()
        .map(|i| shap_row(model, x.row(i)))
        .collect::<Result<_, _>>()?;
    let phi = Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, model.num_features()));
    Ok(ShapValues {
        phi,
        base: expected_margin(model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub index: usize,
    pub name: String,
    pub mean_abs_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    /// Descending mean |φ|, ties by feature index.
    pub ranking: Vec<FeatureImportance>,
}

pub fn shap_summary(shap: &ShapValues, names: &[String]) -> ShapSummary {
    let (n, d) = shap.phi.shape();
    let mut ranking: Vec<FeatureImportance> = (0..d)
        .map(|j| {
            // Sort magnitudes so the mean does not depend on row order.
            let mut col: Vec<f64> = (0..n).map(|i| shap.phi[(i, j)].abs()).collect();
            col.sort_by(f64::total_cmp);
            FeatureImportance {
                index: j,
                name: names.get(j).cloned().unwrap_or_else(|| format!("f{j}")),
                mean_abs_phi: col.iter().sum::<f64>() / n.max(1) as f64,
            }
        })
        .collect();
    ranking.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi).then(a.index.cmp(&b.index)));
    ShapSummary { ranking }
}

/// `(feature value, φ)` pairs of one column, for beeswarm plots.
pub fn shap_pairs(x: &Matrix, shap: &ShapValues, feature: usize) -> Vec<(f64, f64)> {
    (0..x.rows()).map(|i| (x[(i, feature)], shap.phi[(i, feature)])).collect()
}

// ---------------------------------------------------------------------------
// Archetypes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetypes {
    /// 1 = co-productive archetype (higher centroid), 0 otherwise.
    pub labels: Vec<usize>,
    /// Centroids indexed by label.
    pub centroids: [f64; 2],
}

/// Optimal two-means on a 1-D vector, found by scanning every split of the
/// sorted values.
pub fn archetype_clusters(values: &[f64]) -> Result<Archetypes, GbmError> {
    if values.len() < 2 {
        return Err(GbmError::InvalidConfig("need at least two values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GbmError::NonFinite { row: 0, col: 0 });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let prefix: Vec<f64> = std::iter::once(0.0)
        .chain(sorted.iter().scan(0.0, |s, &v| {
            *s += v;
            Some(*s)
        }))
        .collect();
    let sse = |a: usize, b: usize| -> f64 {
        let m = (prefix[b] - prefix[a]) / (b - a) as f64;
        sorted[a..b].iter().map(|v| (v - m) * (v - m)).sum()
    };
    let mut best: Option<(f64, usize)> = None;
    for cut in 1..n {
        if sorted[cut] == sorted[cut - 1] {
            continue;
        }
        let cost = sse(0, cut) + sse(cut, n);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, cut));
        }
    }
    let (_, cut) = best.ok_or(GbmError::DegenerateSplit)?;
    let boundary = sorted[cut];
    let low = prefix[cut] / cut as f64;
    let high = (prefix[n] - prefix[cut]) / (n - cut) as f64;
    Ok(Archetypes {
        labels: values.iter().map(|&v| (v >= boundary) as usize).collect(),
        centroids: [low, high],
    })
}

/// Mean of `values` per group id; ids returned ascending.
pub fn group_means(values: &[f64], groups: &[u64]) -> (Vec<u64>, Vec<f64>) {
    let mut acc: std::collections::BTreeMap<u64, (f64, usize)> = Default::default();
    for (&v, &g) in values.iter().zip(groups) {
        let e = acc.entry(g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(g, (s, c))| (g, s / c as f64)).unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_shapley;
    use proptest::prelude::*;

    fn stump(feature: usize, thr: f64, l: f64, r: f64, cl: f64, cr: f64) -> TreeNode {
        TreeNode::Split {
            feature,
            threshold: thr,
            cover: cl + cr,
            left: Box::new(TreeNode::Leaf { weight: l, cover: cl }),
            right: Box::new(TreeNode::Leaf { weight: r, cover: cr }),
        }
    }

    fn model(trees: Vec<TreeNode>, d: usize, eta: f64, base: f64) -> BoostedModel {
        BoostedModel {
            objective: Objective::Logistic,
            base_score: base,
            learning_rate: eta,
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
            trees,
        }
    }

    #[test]
    fn newton_leaf_weight() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let y = [0.0, 0.0, 1.0, 1.0];
        let cfg = TrainConfig {
            rounds: 1,
            max_depth: 1,
            eta: 1.0,
            ..TrainConfig::default()
        };
        let (m, _) = train(&x, &y, None, vec!["x".into()], &cfg).unwrap();
        assert_eq!(m.base_score, 0.0);
        match &m.trees[0] {
            TreeNode::Split { threshold, left, right, .. } => {
                assert_eq!(*threshold, 1.5);
                assert!((right.predict(&[0.0]) - 2.0 / 3.0).abs() < 1e-12);
                assert!((left.predict(&[0.0]) + 2.0 / 3.0).abs() < 1e-12);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn config_and_target_errors() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let bad = TrainConfig {
            rounds: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&x, &[0.0, 1.0], None, vec!["x".into()], &bad),
            Err(GbmError::InvalidConfig(_))
        ));
        assert!(matches!(
            train(&x, &[1.0, 1.0], None, vec!["x".into()], &TrainConfig::default()),
            Err(GbmError::SingleClass)
        ));
        let nan = Matrix::from_rows(&[[0.0], [f64::NAN]]).unwrap();
        assert!(matches!(
            train(&nan, &[0.0, 1.0], None, vec!["x".into()], &TrainConfig::default()),
            Err(GbmError::NonFinite { row: 1, .. })
        ));
    }

    #[test]
    fn predict_examples() {
        let m0 = model(vec![], 2, 0.3, 0.0);
        assert_eq!(m0.predict_proba(&[1.0, 2.0]).unwrap(), 0.5);
        let m1 = model(vec![stump(0, 1.0, 2.0, -1.0, 1.0, 1.0)], 1, 1.0, 0.0);
        assert!((m1.predict_proba(&[0.0]).unwrap() - 0.8807970779778823).abs() < 1e-15);
        assert!(m1.predict_proba(&[0.0, 1.0]).is_err());
        let huge = model(vec![], 1, 1.0, 1e6);
        assert_eq!(huge.predict_proba(&[0.0]).unwrap(), 1.0 - PROB_FLOOR);
    }

    #[test]
    fn stump_shap_is_single_player() {
        let m = model(vec![stump(1, 0.5, 1.0, -3.0, 3.0, 1.0)], 3, 0.5, 0.2);
        let x = [9.0, 0.0, 9.0];
        let phi = shap_row(&m, &x).unwrap();
        let base = expected_margin(&m);
        assert!((phi[1] - (m.margin(&x).unwrap() - base)).abs() < 1e-15);
        assert_eq!(phi[0], 0.0);
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn constant_model_zero_shap() {
        let m = model(vec![TreeNode::Leaf { weight: 1.5, cover: 4.0 }], 2, 0.3, 0.1);
        assert_eq!(shap_row(&m, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn depth2_tree_matches_enumeration() {
        let t = TreeNode::Split {
            feature: 0,
            threshold: 0.0,
            cover: 10.0,
            left: Box::new(stump(1, 1.0, 0.3, -0.7, 2.0, 4.0)),
            right: Box::new(stump(2, -1.0, 1.1, 0.4, 3.0, 1.0)),
        };
        let m = model(vec![t], 3, 1.0, 0.0);
        for x in [[-1.0, 0.0, 0.0], [1.0, 2.0, -2.0], [0.5, 0.5, 0.5], [-3.0, 3.0, -3.0]] {
            let phi = shap_row(&m, &x).unwrap();
            let oracle = brute_force_shapley(&m, &x);
            for j in 0..3 {
                assert!((phi[j] - oracle[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn archetype_examples() {
        let a = archetype_clusters(&[0.1, 0.15, 0.8, 0.85]).unwrap();
        assert_eq!(a.labels, vec![0, 0, 1, 1]);
        assert!((a.centroids[1] - 0.825).abs() < 1e-12);
        assert!(matches!(archetype_clusters(&[0.5, 0.5]), Err(GbmError::DegenerateSplit)));
    }

    #[test]
    fn auc_values() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]), 0.5);
    }

    fn random_data(seed: u64, n: usize, d: usize) -> (Matrix, Vec<f64>) {
        let mut rng = rng_from(seed);
        let mut x = Matrix::zeros(n, d);
        let mut y = vec![0.0; n];
        for i in 0..n {
            for j in 0..d {
                // Coarse grid so ties exercise the split logic.
                x[(i, j)] = (rng.random_range(0..6) as f64) * 0.5;
            }
            let s = x[(i, 0)] - x[(i, d - 1)] + rng.random::<f64>();
            y[i] = (s > 0.8) as u8 as f64;
        }
        if y.iter().all(|&v| v == y[0]) {
            y[0] = 1.0 - y[0];
        }
        (x, y)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shap_exact_against_enumeration(seed in any::<u64>(), d in 1usize..=4, depth in 1usize..=4) {
            let (x, y) = random_data(seed, 60, d);
            let cfg = TrainConfig { rounds: 5, max_depth: depth, ..TrainConfig::default() };
            let names = (0..d).map(|j| format!("f{j}")).collect();
            let (m, _) = train(&x, &y, None, names, &cfg).unwrap();
            m.validate().unwrap();
            let shap = tree_shap(&m, &x).unwrap();
            for i in 0..x.rows() {
                let row = shap.phi.row(i);
                let margin = m.margin(x.row(i)).unwrap();
                prop_assert!((shap.base + row.iter().sum::<f64>() - margin).abs() < 1e-9);
                let oracle = brute_force_shapley(&m, x.row(i));
                for j in 0..d {
                    prop_assert!((row[j] - oracle[j]).abs() < 1e-9, "{} vs {}", row[j], oracle[j]);
                }
            }
        }

        #[test]
        fn loss_non_increasing_and_deterministic(seed in any::<u64>(), lambda in 0.0..2.0f64) {
            let (x, y) = random_data(seed, 80, 3);
            let cfg = TrainConfig { rounds: 15, lambda, ..TrainConfig::default() };
            let names: Vec<String> = (0..3).map(|j| format!("f{j}")).collect();
            let (m1, r) = train(&x, &y, None, names.clone(), &cfg).unwrap();
            for w in r.loss_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
            }
            let (m2, _) = train(&x, &y, None, names, &cfg).unwrap();
            prop_assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
        }

        #[test]
        fn unused_feature_gets_zero(seed in any::<u64>()) {
            let (mut x, y) = random_data(seed, 50, 3);
            for i in 0..x.rows() {
                x[(i, 1)] = 7.0;
            }
            let names = (0..3).map(|j| format!("f{j}")).collect();
            let (m, _) = train(&x, &y, None, names, &TrainConfig { rounds: 8, ..TrainConfig::default() }).unwrap();
            let shap = tree_shap(&m, &x).unwrap();
            for i in 0..x.rows() {
                prop_assert_eq!(shap.phi[(i, 1)], 0.0);
            }
        }
    }

    #[test]
    fn model_json_round_trip() {
        let (x, y) = random_data(4, 40, 2);
        let (m, _) = train(&x, &y, None, vec!["a".into(), "b".into()], &TrainConfig::default()).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: BoostedModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }

    #[test]
    fn squared_error_fits_step() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let y = [1.0, 1.0, 5.0, 5.0];
        let cfg = TrainConfig {
            rounds: 50,
            lambda: 0.0,
            objective: Objective::SquaredError,
            ..TrainConfig::default()
        };
        let (m, _) = train(&x, &y, None, vec!["x".into()], &cfg).unwrap();
        assert!((m.margin(&[0.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!((m.margin(&[3.0]).unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn folds_stratified_and_repeatable() {
        let t: Vec<u8> = (0..50).map(|i| (i % 5 == 0) as u8).collect();
        let a = stratified_folds(&t, 5, 3).unwrap();
        assert_eq!(a, stratified_folds(&t, 5, 3).unwrap());
        for k in 0..5 {
            let pos = (0..50).filter(|&i| a[i] == k && t[i] == 1).count();
            assert_eq!(pos, 2);
        }
        assert!(stratified_folds(&[1, 0, 0, 0, 0, 0], 2, 0).is_err());
    }
}

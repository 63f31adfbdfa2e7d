//! Linear classifiers over pair features and the two-plane verification
//! ensemble.

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::pairfeat::{compare_signatures, face_signature, ChannelStats, FaceSignature, FeatureLayout};
use crate::pixelhop::{Accounting, PixelHopModel};
use crate::preprocess::{FacePlanes, PreprocessConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    LinearSvm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// L2 strength; `None` means 1/n.
    pub lambda: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { lambda: None, max_iter: 500, tol: 1e-6 }
    }
}

impl Hyper {
    fn lambda_for(&self, n: usize) -> f64 {
        self.lambda.unwrap_or(1.0 / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: ModelKind,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub hyper: Hyper,
}

impl LinearModel {
    pub fn zeros(kind: ModelKind, dim: usize) -> Self {
        Self { kind, weights: vec![0.0; dim], bias: 0.0, hyper: Hyper::default() }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Weights plus bias.
    pub fn parameter_count(&self) -> usize {
        self.dim() + 1
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: x.len() });
        }
        Ok(dot(&self.weights, x) + self.bias)
    }

    /// σ(wᵀx + b).
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(x)?))
    }

    /// Hard vote: true for the positive (match) class.
    pub fn vote(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? >= 0.0)
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

/// log(1 + eᶻ) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_training_set(rows: &[&[f64]], labels: &[bool]) -> Result<usize> {
    if rows.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: rows.len(), actual: labels.len() });
    }
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Training("rows have differing lengths".into()));
    }
    if rows.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Training("features contain non-finite values".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Training("training data must contain both classes".into()));
    }
    Ok(dim)
}

/// Mean logistic loss plus (λ/2)‖w‖², with its gradient (weights, bias).
/// The bias is not regularized.
pub fn logistic_objective(
    weights: &[f64],
    bias: f64,
    rows: &[&[f64]],
    labels: &[bool],
    lambda: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let s = dot(weights, x) + bias;
        let t = if y { 1.0 } else { 0.0 };
        loss += softplus(s) - t * s;
        let r = sigmoid(s) - t;
        grad.iter_mut().zip(x.iter()).for_each(|(g, xi)| *g += r * xi);
        grad_b += r;
    }
    let reg: f64 = weights.iter().map(|w| w * w).sum();
    grad.iter_mut().zip(weights).for_each(|(g, w)| *g = *g / n + lambda * w);
    (loss / n + 0.5 * lambda * reg, grad, grad_b / n)
}

/// (λ/2)(‖w‖² + b²) plus mean hinge loss, with a subgradient. The bias is
/// regularized, matching the augmented-feature formulation of the trainer.
pub fn hinge_objective(
    weights: &[f64],
    bias: f64,
    rows: &[&[f64]],
    labels: &[bool],
    lambda: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let sign = if y { 1.0 } else { -1.0 };
        let margin = sign * (dot(weights, x) + bias);
        if margin < 1.0 {
            loss += 1.0 - margin;
            grad.iter_mut().zip(x.iter()).for_each(|(g, xi)| *g -= sign * xi);
            grad_b -= sign;
        }
    }
    let reg: f64 = weights.iter().map(|w| w * w).sum::<f64>() + bias * bias;
    grad.iter_mut().zip(weights).for_each(|(g, w)| *g = *g / n + lambda * w);
    (loss / n + 0.5 * lambda * reg, grad, grad_b / n + lambda * bias)
}

/// Loss after every accepted step of [`train_logistic_traced`].
pub type LossTrace = Vec<f64>;

/// L2-regularized logistic regression by full-batch gradient descent with a
/// backtracking (Armijo) line search, from zero initialization.
pub fn train_logistic(rows: &[&[f64]], labels: &[bool], hyper: Hyper) -> Result<LinearModel> {
    train_logistic_traced(rows, labels, hyper).map(|(m, _)| m)
}

pub fn train_logistic_traced(rows: &[&[f64]], labels: &[bool], hyper: Hyper) -> Result<(LinearModel, LossTrace)> {
    let dim = check_training_set(rows, labels)?;
    let lambda = hyper.lambda_for(rows.len());
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut step = 1.0;
    let (mut loss, mut gw, mut gb) = logistic_objective(&w, b, rows, labels, lambda);
    let mut trace = vec![loss];
    for _ in 0..hyper.max_iter {
        let gnorm2 = dot(&gw, &gw) + gb * gb;
        if gnorm2.sqrt() < hyper.tol {
            break;
        }
        step *= 2.0;
        let accepted = loop {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - step * gi).collect();
            let bt = b - step * gb;
            let (lt, gwt, gbt) = logistic_objective(&wt, bt, rows, labels, lambda);
            if lt <= loss - 0.5 * step * gnorm2 {
                break Some((wt, bt, lt, gwt, gbt));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((wt, bt, lt, gwt, gbt)) = accepted else { break };
        w = wt;
        b = bt;
        loss = lt;
        gw = gwt;
        gb = gbt;
        trace.push(loss);
    }
    if !loss.is_finite() {
        return Err(Error::Training("logistic loss diverged".into()));
    }
    Ok((LinearModel { kind: ModelKind::Logistic, weights: w, bias: b, hyper }, trace))
}

/// Linear SVM (hinge loss, L2) by dual coordinate descent. The bias is
/// learned as the weight of a constant feature.
pub fn train_linear_svm(rows: &[&[f64]], labels: &[bool], hyper: Hyper) -> Result<LinearModel> {
    let dim = check_training_set(rows, labels)?;
    let n = rows.len();
    let c = 1.0 / (hyper.lambda_for(n) * n as f64);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let q: Vec<f64> = rows.iter().map(|x| dot(x, x) + 1.0).collect();
    let sign = |y: bool| if y { 1.0 } else { -1.0 };
    for _ in 0..hyper.max_iter.max(1) * 2 {
        let mut max_violation = 0.0f64;
        for i in 0..n {
            let y = sign(labels[i]);
            let g = y * (dot(&w, rows[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, c);
                let d = (alpha[i] - old) * y;
                w.iter_mut().zip(rows[i].iter()).for_each(|(wj, xj)| *wj += d * xj);
                b += d;
            }
        }
        if max_violation < hyper.tol {
            break;
        }
    }
    Ok(LinearModel { kind: ModelKind::LinearSvm, weights: w, bias: b, hyper })
}

/// Per-dimension min-max scaling to [0, 1] on training extremes. Constant
/// dimensions map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Training("cannot scale an empty set".into()))?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for r in rows {
            if r.len() != min.len() {
                return Err(Error::DimensionMismatch { expected: min.len(), actual: r.len() });
            }
            for (j, &v) in r.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: x.len() });
        }
        Ok(x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect())
    }
}

/// A linear model behind its feature scaler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub scaler: MinMaxScaler,
    pub model: LinearModel,
}

impl Classifier {
    pub fn fit(rows: &[&[f64]], labels: &[bool], kind: ModelKind, hyper: Hyper) -> Result<Self> {
        let scaler = MinMaxScaler::fit(rows)?;
        let scaled = rows.iter().map(|r| scaler.transform(r)).collect::<Result<Vec<_>>>()?;
        let scaled_refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        let model = match kind {
            ModelKind::Logistic => train_logistic(&scaled_refs, labels, hyper)?,
            ModelKind::LinearSvm => train_linear_svm(&scaled_refs, labels, hyper)?,
        };
        Ok(Self { scaler, model })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.model.score(&self.scaler.transform(x)?)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(x)?))
    }

    pub fn vote(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? >= 0.0)
    }
}

/// One plane's half of the ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct Submodel {
    pub hop: PixelHopModel,
    pub stats: ChannelStats,
    pub layout: FeatureLayout,
    pub classifier: Classifier,
}

impl Submodel {
    /// Parameters per Table-style row: three hops, feature statistics, LR.
    pub fn parameter_rows(&self, accounting: Accounting) -> [usize; 5] {
        let hops = self.hop.count_parameters(accounting);
        [hops[0], hops[1], hops[2], self.stats.parameter_count(), self.classifier.model.parameter_count()]
    }
}

/// Comparison vectors of one face for both planes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFace {
    pub y: FaceSignature,
    pub crcb: FaceSignature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub probability: f64,
    /// Meta classifier logit; orders pairs even where the probability
    /// saturates.
    pub score: f64,
    /// Sum of the two submodel logits; a secondary ordering key.
    pub evidence: f64,
    pub p_y: f64,
    pub p_crcb: f64,
    pub is_match: bool,
}

/// Decision threshold on the meta probability.
pub const MATCH_THRESHOLD: f64 = 0.5;

/// Luma and chroma submodels plus the meta classifier on their two match
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationModel {
    pub submodel_y: Submodel,
    pub submodel_crcb: Submodel,
    pub meta: LinearModel,
    /// Geometry the training images went through; inputs must match.
    pub preprocess: PreprocessConfig,
}

impl VerificationModel {
    pub fn encode(&self, planes: &FacePlanes) -> Result<EncodedFace> {
        let sub = |m: &Submodel, img| -> Result<FaceSignature> {
            let out = m.hop.apply(img)?;
            face_signature(&out, Some(&m.stats), &m.layout)
        };
        Ok(EncodedFace { y: sub(&self.submodel_y, &planes.y)?, crcb: sub(&self.submodel_crcb, &planes.crcb)? })
    }

    /// The two submodels' pair features.
    pub fn pair_features(&self, a: &EncodedFace, b: &EncodedFace) -> Result<(Vec<f64>, Vec<f64>)> {
        let fy = compare_signatures(&a.y, &b.y, &self.submodel_y.layout)?;
        let fc = compare_signatures(&a.crcb, &b.crcb, &self.submodel_crcb.layout)?;
        Ok((fy.0, fc.0))
    }

    pub fn verify_features(&self, fy: &[f64], fc: &[f64]) -> Result<Verdict> {
        let s_y = self.submodel_y.classifier.score(fy)?;
        let s_crcb = self.submodel_crcb.classifier.score(fc)?;
        let (p_y, p_crcb) = (sigmoid(s_y), sigmoid(s_crcb));
        let score = self.meta.score(&[p_y, p_crcb])?;
        let probability = sigmoid(score);
        Ok(Verdict {
            probability,
            score,
            evidence: s_y + s_crcb,
            p_y,
            p_crcb,
            is_match: probability >= MATCH_THRESHOLD,
        })
    }

    pub fn verify_encoded(&self, a: &EncodedFace, b: &EncodedFace) -> Result<Verdict> {
        let (fy, fc) = self.pair_features(a, b)?;
        self.verify_features(&fy, &fc)
    }

    pub fn verify(&self, a: &FacePlanes, b: &FacePlanes) -> Result<Verdict> {
        self.verify_encoded(&self.encode(a)?, &self.encode(b)?)
    }

    /// Rank gallery identities for a probe by their best verification
    /// verdict, compared on the meta score and then on the submodel evidence.
    pub fn identify<'a>(
        &self,
        gallery: impl IntoIterator<Item = (&'a str, &'a EncodedFace)>,
        probe: &EncodedFace,
    ) -> Result<Vec<(String, Verdict)>> {
        let mut verdicts = Vec::new();
        for (identity, face) in gallery {
            verdicts.push((identity.to_string(), self.verify_encoded(face, probe)?));
        }
        if verdicts.is_empty() {
            return Err(Error::InvalidInput("gallery is empty".into()));
        }
        Ok(rank_by(verdicts, |a, b| a.score.total_cmp(&b.score).then(a.evidence.total_cmp(&b.evidence))))
    }
}

/// Best entry per identity under `cmp`, sorted best first; ties go to the
/// identity that sorts first.
pub fn rank_by<K>(
    entries: impl IntoIterator<Item = (String, K)>,
    cmp: impl Fn(&K, &K) -> std::cmp::Ordering,
) -> Vec<(String, K)> {
    let mut best: std::collections::BTreeMap<String, K> = Default::default();
    for (id, k) in entries {
        match best.get(&id) {
            Some(b) if cmp(&k, b).is_le() => {}
            _ => {
                best.insert(id, k);
            }
        }
    }
    let mut ranked: Vec<(String, K)> = best.into_iter().collect();
    ranked.sort_by(|a, b| cmp(&b.1, &a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// [`rank_by`] on plain scores.
pub fn rank_identities(scores: impl IntoIterator<Item = (String, f64)>) -> Vec<(String, f64)> {
    rank_by(scores, f64::total_cmp)
}

//! Pool-based active learning over precomputed pair features.
//!
//! The transform is unsupervised, so pair features for the whole pool are
//! computed once; each round only retrains the classifiers on the labeled
//! subset, scores the unlabeled rest and asks an oracle for a new batch.
//!
//! [`ActiveState`] is a step-wise state machine so that an in-process loop
//! ([`run_active_loop`]) and a remote annotator driving the same state (the
//! HTTP service) go through identical transitions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{train_logistic, Classifier, Hyper, LinearModel, MinMaxScaler, ModelKind};
use crate::pipeline::PairFeatures;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Highest predictive entropy of the ensemble.
    Entropy,
    /// Highest vote entropy of a logistic/linear-SVM committee.
    Qbc,
    /// k-center greedy on min-max scaled pair features.
    Coreset,
    /// Uniform sampling; the passive reference.
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "entropy" => Ok(Self::Entropy),
            "qbc" => Ok(Self::Qbc),
            "coreset" | "core-set" | "kcenter" => Ok(Self::Coreset),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidInput(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Entropy => "entropy",
            Self::Qbc => "qbc",
            Self::Coreset => "coreset",
            Self::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub budget: usize,
    pub seed: u64,
    /// Share of the pool labeled at random before the first query.
    pub initial_fraction: f64,
    pub hyper: Hyper,
}

impl ActiveConfig {
    pub fn new(strategy: Strategy, batch_size: usize, budget: usize, seed: u64) -> Self {
        Self { strategy, batch_size, budget, seed, initial_fraction: 0.05, hyper: Hyper::default() }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        if self.batch_size > self.budget {
            return Err(Error::InvalidInput(format!(
                "batch_size {} exceeds budget {}",
                self.batch_size, self.budget
            )));
        }
        if self.budget > pool_size {
            return Err(Error::InvalidInput(format!("budget {} exceeds pool size {pool_size}", self.budget)));
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "initial_fraction must be in (0, 1], got {}",
                self.initial_fraction
            )));
        }
        Ok(())
    }

    /// |D₀|: the initial fraction of the pool, at least one, at most the
    /// budget.
    pub fn initial_size(&self, pool_size: usize) -> usize {
        ((pool_size as f64 * self.initial_fraction).round() as usize).clamp(1, self.budget.max(1))
    }
}

/// Natural-log entropy of each class distribution; 0·ln 0 is 0.
pub fn entropy_scores(probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("row {i} is not a probability distribution: {p:?}")));
            }
            Ok(0.0 - p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        })
        .collect()
}

/// Entropy of the committee's vote fractions, per sample.
pub fn vote_entropy_scores(votes: &[Vec<usize>], committee: usize) -> Result<Vec<f64>> {
    if committee == 0 {
        return Err(Error::InvalidInput("committee must not be empty".into()));
    }
    votes
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.len() != committee {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has {} votes, expected {committee}",
                    v.len()
                )));
            }
            let mut counts = std::collections::BTreeMap::new();
            for label in v {
                *counts.entry(label).or_insert(0usize) += 1;
            }
            let c = committee as f64;
            Ok(0.0 - counts.values().map(|&n| (n as f64 / c) * (n as f64 / c).ln()).sum::<f64>())
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy k-center selection of `b` candidates.
///
/// Each step picks the candidate farthest from its nearest labeled or
/// already chosen point (lowest index on ties). With no labeled points the
/// first pick is the candidate farthest from the candidates' centroid.
pub fn k_center_greedy(candidates: &[&[f64]], labeled: &[&[f64]], b: usize) -> Result<Vec<usize>> {
    if b > candidates.len() {
        return Err(Error::InvalidInput(format!("cannot pick {b} of {} candidates", candidates.len())));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let mut nearest: Vec<f64> = candidates
        .par_iter()
        .map(|c| labeled.iter().map(|l| distance(c, l)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut chosen = vec![false; candidates.len()];
    let mut picks = Vec::with_capacity(b);
    let argmax = |scores: &[f64], chosen: &[bool]| {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if !chosen[i] && best.is_none_or(|j| s > scores[j]) {
                best = Some(i);
            }
        }
        best.expect("fewer picks than candidates")
    };
    if labeled.is_empty() {
        let dim = candidates[0].len();
        let mut centroid = vec![0.0; dim];
        for c in candidates {
            centroid.iter_mut().zip(c.iter()).for_each(|(m, v)| *m += v);
        }
        centroid.iter_mut().for_each(|m| *m /= candidates.len() as f64);
        let spread: Vec<f64> = candidates.iter().map(|c| distance(c, &centroid)).collect();
        let first = argmax(&spread, &chosen);
        picks.push(first);
        chosen[first] = true;
        nearest = candidates.par_iter().map(|c| distance(c, candidates[first])).collect();
    }
    while picks.len() < b {
        let next = argmax(&nearest, &chosen);
        picks.push(next);
        chosen[next] = true;
        let center = candidates[next];
        nearest.par_iter_mut().zip(candidates.par_iter()).for_each(|(d, c)| *d = d.min(distance(c, center)));
    }
    Ok(picks)
}

/// Largest nearest-center distance of `points` to `centers`.
pub fn cover_radius(points: &[&[f64]], centers: &[&[f64]]) -> f64 {
    points
        .iter()
        .map(|p| centers.iter().map(|c| distance(p, c)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Match-probability model trained on the labeled part of a pool: the
/// two-plane logistic ensemble with its meta classifier, or a constant prior
/// while the labels cover only one class.
#[derive(Clone, Debug, PartialEq)]
pub enum PoolModel {
    Ensemble { y: Classifier, crcb: Classifier, meta: LinearModel },
    Prior { p_match: f64 },
}

impl PoolModel {
    pub fn fit(features: &PairFeatures, labels: &[bool], hyper: Hyper) -> Result<Self> {
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 || positives == labels.len() {
            return Ok(Self::Prior { p_match: (positives as f64 + 1.0) / (labels.len() as f64 + 2.0) });
        }
        fn rows(m: &[Vec<f64>]) -> Vec<&[f64]> {
            m.iter().map(Vec::as_slice).collect()
        }
        let (y, crcb) = rayon::join(
            || Classifier::fit(&rows(&features.y), labels, ModelKind::Logistic, hyper),
            || Classifier::fit(&rows(&features.crcb), labels, ModelKind::Logistic, hyper),
        );
        let (y, crcb) = (y?, crcb?);
        let probs: Vec<Vec<f64>> = (0..features.len())
            .map(|i| Ok(vec![y.predict_proba(&features.y[i])?, crcb.predict_proba(&features.crcb[i])?]))
            .collect::<Result<_>>()?;
        let meta = train_logistic(&rows(&probs), labels, hyper)?;
        Ok(Self::Ensemble { y, crcb, meta })
    }

    pub fn predict_proba(&self, y: &[f64], crcb: &[f64]) -> Result<f64> {
        match self {
            Self::Prior { p_match } => Ok(*p_match),
            Self::Ensemble { y: cy, crcb: cc, meta } => {
                meta.predict_proba(&[cy.predict_proba(y)?, cc.predict_proba(crcb)?])
            }
        }
    }

    pub fn accuracy(&self, features: &PairFeatures, labels: &[bool]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("no test pairs".into()));
        }
        let hits: Vec<bool> = (0..features.len())
            .into_par_iter()
            .map(|i| Ok((self.predict_proba(&features.y[i], &features.crcb[i])? >= 0.5) == labels[i]))
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / labels.len() as f64)
    }
}

/// A labeled evaluation set.
#[derive(Clone, Copy, Debug)]
pub struct TestSet<'a> {
    pub features: &'a PairFeatures,
    pub labels: &'a [bool],
}

/// The unlabeled pool plus a scaled, concatenated copy of its features for
/// distance computations.
#[derive(Clone, Debug)]
pub struct ActivePool {
    pub features: PairFeatures,
    scaled: Vec<Vec<f64>>,
}

impl ActivePool {
    pub fn new(features: PairFeatures) -> Result<Self> {
        if features.is_empty() || features.y.len() != features.crcb.len() {
            return Err(Error::InvalidInput("pool must be non-empty with one row per plane".into()));
        }
        let joined: Vec<Vec<f64>> = (0..features.len()).map(|i| features.concatenated(i)).collect();
        let scaler = MinMaxScaler::fit(&joined.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let scaled = joined.iter().map(|r| scaler.transform(r)).collect::<Result<_>>()?;
        Ok(Self { features, scaled })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn scaled(&self, i: usize) -> &[f64] {
        &self.scaled[i]
    }
}

/// Full-pool training accuracy reference.
pub fn passive_accuracy(pool: &PairFeatures, labels: &[bool], test: TestSet, hyper: Hyper) -> Result<f64> {
    PoolModel::fit(pool, labels, hyper)?.accuracy(test.features, test.labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub round: usize,
    pub labeled_count: usize,
    pub test_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub index: usize,
    pub label: bool,
    /// Round in which the sample was queried (0 for the seed set).
    pub round: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingLabels,
    /// Every pending label is in; the next step retrains.
    ReadyToTrain,
    Done,
}

/// Resumable state of one active-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveState {
    pub config: ActiveConfig,
    pub pool_size: usize,
    pub round: usize,
    /// Labels in the order they were received.
    pub labeled: Vec<LabeledSample>,
    /// Pool indices queried in the current round and not yet labeled.
    pub pending: Vec<usize>,
    pub trace: Vec<TracePoint>,
    pub done: bool,
}

impl ActiveState {
    /// Draw D₀ uniformly at random; it becomes the first pending batch.
    pub fn new(config: ActiveConfig, pool_size: usize) -> Result<Self> {
        config.validate(pool_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n0 = config.initial_size(pool_size);
        let mut pending = sample(&mut rng, pool_size, n0).into_vec();
        pending.sort_unstable();
        Ok(Self { config, pool_size, round: 0, labeled: Vec::new(), pending, trace: Vec::new(), done: false })
    }

    pub fn phase(&self) -> Phase {
        if self.done {
            Phase::Done
        } else if self.pending.is_empty() {
            Phase::ReadyToTrain
        } else {
            Phase::AwaitingLabels
        }
    }

    pub fn is_labeled(&self, index: usize) -> bool {
        self.labeled.iter().any(|s| s.index == index)
    }

    /// Accept a label for a pending sample.
    pub fn submit_label(&mut self, index: usize, label: bool) -> Result<()> {
        if self.done {
            return Err(Error::InvalidInput("the run is finished".into()));
        }
        if self.is_labeled(index) {
            return Err(Error::InvalidInput(format!("sample {index} is already labeled")));
        }
        let Some(pos) = self.pending.iter().position(|&i| i == index) else {
            return Err(Error::InvalidInput(format!("sample {index} is not pending")));
        };
        self.pending.remove(pos);
        self.labeled.push(LabeledSample { index, label, round: self.round });
        Ok(())
    }

    /// Labeled indices and labels, sorted by pool index.
    pub fn training_set(&self) -> (Vec<usize>, Vec<bool>) {
        let mut v: Vec<(usize, bool)> = self.labeled.iter().map(|s| (s.index, s.label)).collect();
        v.sort_unstable();
        v.into_iter().unzip()
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        let taken: BTreeSet<usize> = self.labeled.iter().map(|s| s.index).chain(self.pending.iter().copied()).collect();
        (0..self.pool_size).filter(|i| !taken.contains(i)).collect()
    }

    /// Retrain on all labels, record test accuracy, then query the next
    /// batch or finish. Returns the new trace point.
    pub fn advance(&mut self, pool: &ActivePool, test: TestSet) -> Result<TracePoint> {
        match self.phase() {
            Phase::Done => return Err(Error::InvalidInput("the run is finished".into())),
            Phase::AwaitingLabels => {
                return Err(Error::InvalidInput(format!("{} labels still pending", self.pending.len())))
            }
            Phase::ReadyToTrain => {}
        }
        if pool.len() != self.pool_size {
            return Err(Error::DimensionMismatch { expected: self.pool_size, actual: pool.len() });
        }
        let (indices, labels) = self.training_set();
        let model = PoolModel::fit(&pool.features.select(&indices), &labels, self.config.hyper)?;
        let point = TracePoint {
            round: self.round,
            labeled_count: labels.len(),
            test_accuracy: model.accuracy(test.features, test.labels)?,
        };
        self.trace.push(point);

        let unlabeled = self.unlabeled();
        let room = self.config.budget.saturating_sub(labels.len());
        let b = self.config.batch_size.min(room).min(unlabeled.len());
        if b == 0 {
            self.done = true;
            return Ok(point);
        }
        self.round += 1;
        let mut picks = self.select(pool, &model, &indices, &unlabeled, b)?;
        picks.sort_unstable();
        self.pending = picks;
        Ok(point)
    }

    fn select(
        &self,
        pool: &ActivePool,
        model: &PoolModel,
        labeled: &[usize],
        unlabeled: &[usize],
        b: usize,
    ) -> Result<Vec<usize>> {
        let f = &pool.features;
        let scores = match self.config.strategy {
            Strategy::Entropy => {
                let probs: Vec<Vec<f64>> = unlabeled
                    .par_iter()
                    .map(|&i| model.predict_proba(&f.y[i], &f.crcb[i]).map(|p| vec![p, 1.0 - p]))
                    .collect::<Result<_>>()?;
                entropy_scores(&probs)?
            }
            Strategy::Qbc => {
                let (idx, labels) = self.training_set();
                let svm = if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                    None
                } else {
                    let joined: Vec<Vec<f64>> = idx.iter().map(|&i| f.concatenated(i)).collect();
                    let rows: Vec<&[f64]> = joined.iter().map(Vec::as_slice).collect();
                    Some(Classifier::fit(&rows, &labels, ModelKind::LinearSvm, self.config.hyper)?)
                };
                let votes: Vec<Vec<usize>> = unlabeled
                    .par_iter()
                    .map(|&i| {
                        let lr = model.predict_proba(&f.y[i], &f.crcb[i])? >= 0.5;
                        let sv = match &svm {
                            Some(s) => s.vote(&f.concatenated(i))?,
                            None => lr,
                        };
                        Ok(vec![lr as usize, sv as usize])
                    })
                    .collect::<Result<_>>()?;
                vote_entropy_scores(&votes, 2)?
            }
            Strategy::Coreset => {
                let cand: Vec<&[f64]> = unlabeled.iter().map(|&i| pool.scaled(i)).collect();
                let lab: Vec<&[f64]> = labeled.iter().map(|&i| pool.scaled(i)).collect();
                return Ok(k_center_greedy(&cand, &lab, b)?.into_iter().map(|k| unlabeled[k]).collect());
            }
            Strategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                return Ok(sample(&mut rng, unlabeled.len(), b).into_iter().map(|k| unlabeled[k]).collect());
            }
        };
        Ok(top_k(&scores, b).into_iter().map(|k| unlabeled[k]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::container::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Indices of the `k` highest scores, descending, lowest index on ties.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Supplies labels for pool samples.
pub trait Oracle {
    fn label(&mut self, index: usize) -> Result<bool>;
}

/// Answers from known labels.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub labels: &'a [bool],
}

impl Oracle for GroundTruth<'_> {
    fn label(&mut self, index: usize) -> Result<bool> {
        self.labels.get(index).copied().ok_or_else(|| Error::Oracle(format!("no label for sample {index}")))
    }
}

/// Drive `state` to completion, calling `on_round` after every trace point.
/// On an oracle failure the labels received so far stay in `state` and the
/// error is returned; calling again resumes.
pub fn drive(
    state: &mut ActiveState,
    pool: &ActivePool,
    test: TestSet,
    oracle: &mut dyn Oracle,
    mut on_round: impl FnMut(&ActiveState),
) -> Result<()> {
    while state.phase() != Phase::Done {
        while let Some(&index) = state.pending.first() {
            let label = oracle.label(index)?;
            state.submit_label(index, label)?;
        }
        state.advance(pool, test)?;
        on_round(state);
    }
    Ok(())
}

pub fn run_active_loop(
    pool: &ActivePool,
    test: TestSet,
    config: ActiveConfig,
    oracle: &mut dyn Oracle,
) -> Result<ActiveState> {
    let mut state = ActiveState::new(config, pool.len())?;
    drive(&mut state, pool, test, oracle, |_| {})?;
    Ok(state)
}

/// `round,labeled_count,test_accuracy` rows with a header.
pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("round,labeled_count,test_accuracy\n");
    for p in trace {
        s.push_str(&format!("{},{},{:.6}\n", p.round, p.labeled_count, p.test_accuracy));
    }
    s
}

/// Fewest labels at which the trace reaches `target` accuracy.
pub fn labels_to_reach(trace: &[TracePoint], target: f64) -> Option<usize> {
    trace.iter().find(|p| p.test_accuracy >= target).map(|p| p.labeled_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn entropy_unit_values() {
        let e = entropy_scores(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
        assert!((e[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(e[1], 0.0);
        assert!((e[2] - 0.325083).abs() < 1e-6);
        assert!(entropy_scores(&[vec![0.5, 0.6]]).is_err());
        assert!(entropy_scores(&[vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn entropy_peaks_at_uniform() {
        let grid: Vec<Vec<f64>> = (0..=100).map(|i| vec![i as f64 / 100.0, 1.0 - i as f64 / 100.0]).collect();
        let e = entropy_scores(&grid).unwrap();
        assert_eq!(top_k(&e, 1), vec![50]);
    }

    #[test]
    fn vote_entropy_unit_values() {
        let v = vote_entropy_scores(&[vec![1, 1], vec![0, 1]], 2).unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-15);
        let v3 = vote_entropy_scores(&[vec![1, 1, 0]], 3).unwrap();
        assert!((v3[0] - 0.636514).abs() < 1e-6);
        assert!(vote_entropy_scores(&[vec![1]], 2).is_err());
    }

    #[test]
    fn k_center_hand_example() {
        let pts = [[1.0], [2.0], [10.0]];
        let cand: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let lab: [&[f64]; 1] = [&[0.0]];
        assert_eq!(k_center_greedy(&cand, &lab, 2).unwrap(), vec![2, 1]);
        let all = k_center_greedy(&cand, &lab, 3).unwrap();
        assert_eq!(all, vec![2, 1, 0]);
        assert!(k_center_greedy(&cand, &lab, 4).is_err());
        // Centroid 13/3: 10 is farthest.
        assert_eq!(k_center_greedy(&cand, &[], 1).unwrap(), vec![2]);
    }

    #[test]
    fn k_center_within_twice_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 6 + trial % 7;
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
            let cand: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
            for k in 1..=3 {
                let greedy: Vec<&[f64]> = k_center_greedy(&cand, &[], k).unwrap().iter().map(|&i| cand[i]).collect();
                let mut best = f64::INFINITY;
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize != k {
                        continue;
                    }
                    let centers: Vec<&[f64]> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| cand[i]).collect();
                    best = best.min(cover_radius(&cand, &centers));
                }
                assert!(cover_radius(&cand, &greedy) <= 2.0 * best + 1e-12);
            }
        }
    }

    fn toy_pool(n: usize, seed: u64) -> (PairFeatures, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = PairFeatures::default();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 3 != 0;
            let s = if y { 0.4 } else { -0.4 };
            f.y.push((0..4).map(|_| s + rng.random_range(-1.0..1.0)).collect());
            f.crcb.push((0..3).map(|_| 0.5 * s + rng.random_range(-1.0..1.0)).collect());
            labels.push(y);
        }
        (f, labels)
    }

    #[test]
    fn config_validation() {
        assert!(ActiveConfig::new(Strategy::Entropy, 0, 10, 0).validate(20).is_err());
        assert!(ActiveConfig::new(Strategy::Entropy, 11, 10, 0).validate(20).is_err());
        assert!(ActiveConfig::new(Strategy::Entropy, 5, 30, 0).validate(20).is_err());
        assert!(ActiveConfig::new(Strategy::Entropy, 5, 10, 0).validate(20).is_ok());
    }

    #[test]
    fn budget_equal_to_seed_set_gives_one_point() {
        let (f, labels) = toy_pool(100, 1);
        let pool = ActivePool::new(f.clone()).unwrap();
        let test = TestSet { features: &f, labels: &labels };
        let state = run_active_loop(&pool, test, ActiveConfig::new(Strategy::Entropy, 5, 5, 3), &mut GroundTruth { labels: &labels }).unwrap();
        assert_eq!(state.trace.len(), 1);
        assert_eq!(state.trace[0].labeled_count, 5);
    }

    #[test]
    fn every_strategy_respects_the_invariants() {
        let (f, labels) = toy_pool(120, 2);
        let pool = ActivePool::new(f.clone()).unwrap();
        let test = TestSet { features: &f, labels: &labels };
        for strategy in [Strategy::Entropy, Strategy::Qbc, Strategy::Coreset, Strategy::Random] {
            let cfg = ActiveConfig::new(strategy, 16, 70, 9);
            let a = run_active_loop(&pool, test, cfg.clone(), &mut GroundTruth { labels: &labels }).unwrap();
            let b = run_active_loop(&pool, test, cfg, &mut GroundTruth { labels: &labels }).unwrap();
            assert_eq!(a, b, "{strategy} is not deterministic");
            let counts: Vec<usize> = a.trace.iter().map(|p| p.labeled_count).collect();
            assert_eq!(counts, [6, 22, 38, 54, 70], "{strategy}");
            let distinct: BTreeSet<usize> = a.labeled.iter().map(|s| s.index).collect();
            assert_eq!(distinct.len(), a.labeled.len());
        }
    }

    #[test]
    fn full_budget_matches_passive_training() {
        let (f, labels) = toy_pool(60, 4);
        let (tf, tl) = toy_pool(80, 5);
        let pool = ActivePool::new(f.clone()).unwrap();
        let test = TestSet { features: &tf, labels: &tl };
        let state = run_active_loop(&pool, test, ActiveConfig::new(Strategy::Qbc, 20, 60, 1), &mut GroundTruth { labels: &labels }).unwrap();
        let passive = passive_accuracy(&f, &labels, test, Hyper::default()).unwrap();
        assert_eq!(state.trace.last().unwrap().test_accuracy, passive);
    }

    struct Flaky<'a> {
        labels: &'a [bool],
        remaining: usize,
    }

    impl Oracle for Flaky<'_> {
        fn label(&mut self, index: usize) -> Result<bool> {
            if self.remaining == 0 {
                return Err(Error::Oracle("annotator left".into()));
            }
            self.remaining -= 1;
            Ok(self.labels[index])
        }
    }

    #[test]
    fn oracle_failure_suspends_and_resumes() {
        let (f, labels) = toy_pool(100, 6);
        let pool = ActivePool::new(f.clone()).unwrap();
        let test = TestSet { features: &f, labels: &labels };
        let cfg = ActiveConfig::new(Strategy::Entropy, 10, 45, 2);
        let reference = run_active_loop(&pool, test, cfg.clone(), &mut GroundTruth { labels: &labels }).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut state = ActiveState::new(cfg, pool.len()).unwrap();
        let err = drive(&mut state, &pool, test, &mut Flaky { labels: &labels, remaining: 12 }, |_| {});
        assert!(matches!(err, Err(Error::Oracle(_))));
        assert_eq!(state.labeled.len(), 12);
        state.save(&path).unwrap();
        let mut resumed = ActiveState::load(&path).unwrap();
        drive(&mut resumed, &pool, test, &mut GroundTruth { labels: &labels }, |_| {}).unwrap();
        assert_eq!(resumed.trace, reference.trace);
        assert_eq!(resumed.training_set(), reference.training_set());
    }

    #[test]
    fn labels_only_for_pending_samples() {
        let mut s = ActiveState::new(ActiveConfig::new(Strategy::Entropy, 2, 4, 0), 20).unwrap();
        let first = s.pending[0];
        let outsider = (0..20).find(|i| !s.pending.contains(i)).unwrap();
        assert!(s.submit_label(outsider, true).is_err());
        s.submit_label(first, true).unwrap();
        assert!(s.submit_label(first, true).is_err());
    }

    #[test]
    fn csv_format() {
        let t = [TracePoint { round: 0, labeled_count: 5, test_accuracy: 0.5 }];
        assert_eq!(trace_csv(&t), "round,labeled_count,test_accuracy\n0,5,0.500000\n");
        assert_eq!(labels_to_reach(&t, 0.4), Some(5));
        assert_eq!(labels_to_reach(&t, 0.6), None);
    }
}

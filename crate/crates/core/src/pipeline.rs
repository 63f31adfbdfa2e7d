//! End-to-end training and evaluation of the verifier.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    train_logistic, Classifier, EncodedFace, Hyper, ModelKind, Submodel, VerificationModel,
};
use crate::dataio::{augment_flip, distinct_images, kfold_split, FacePair, ImageRef, ImageStore, PairProtocol};
use crate::pairfeat::{compare_signatures, face_signature, ChannelStats, FaceSignature, FeatureLayout, StatsAccumulator};
use crate::pixelhop::{fit_pixelhop, hop_parameter_counts, Accounting, PixelHopConfig, PixelHopModel, LEVELS};
use crate::preprocess::{FacePlanes, ImageTensor};
use crate::{Error, Result};

/// Images per parallel batch when streaming over a dataset.
const BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub luma: PixelHopConfig,
    pub chroma: PixelHopConfig,
    pub hyper: Hyper,
    /// Append mirrored copies of every training pair.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            luma: PixelHopConfig::luma(0.0005),
            chroma: PixelHopConfig::chroma(0.0004),
            hyper: Hyper::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.luma.seed = seed;
        self.chroma.seed = seed;
        self
    }
}

/// The unsupervised half of one plane: transform, statistics, layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneEncoder {
    pub hop: PixelHopModel,
    pub stats: ChannelStats,
    pub layout: FeatureLayout,
}

impl PlaneEncoder {
    pub fn encode(&self, plane: &ImageTensor) -> Result<FaceSignature> {
        face_signature(&self.hop.apply(plane)?, Some(&self.stats), &self.layout)
    }
}

/// Both planes' encoders: everything needed to turn a face pair into its two
/// pair features without any labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub y: PlaneEncoder,
    pub crcb: PlaneEncoder,
}

/// Pair features of many pairs, one row per pair and plane.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairFeatures {
    pub y: Vec<Vec<f64>>,
    pub crcb: Vec<Vec<f64>>,
}

impl PairFeatures {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            y: indices.iter().map(|&i| self.y[i].clone()).collect(),
            crcb: indices.iter().map(|&i| self.crcb[i].clone()).collect(),
        }
    }

    /// Y and CrCb features side by side.
    pub fn concatenated(&self, i: usize) -> Vec<f64> {
        self.y[i].iter().chain(&self.crcb[i]).copied().collect()
    }
}

impl FeatureExtractor {
    /// Fit both transforms and their statistics on `images`.
    pub fn fit(store: &ImageStore, images: &[ImageRef], cfg: &TrainConfig) -> Result<Self> {
        let planes = load_planes(store, images)?;
        let ys: Vec<ImageTensor> = planes.iter().map(|p| p.y.clone()).collect();
        let crcbs: Vec<ImageTensor> = planes.iter().map(|p| p.crcb.clone()).collect();
        drop(planes);
        let (y, crcb) = rayon::join(|| fit_plane(&ys, &cfg.luma), || fit_plane(&crcbs, &cfg.chroma));
        Ok(Self { y: y?, crcb: crcb? })
    }

    pub fn encode(&self, planes: &FacePlanes) -> Result<EncodedFace> {
        Ok(EncodedFace { y: self.y.encode(&planes.y)?, crcb: self.crcb.encode(&planes.crcb)? })
    }

    pub fn compare(&self, a: &EncodedFace, b: &EncodedFace) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            compare_signatures(&a.y, &b.y, &self.y.layout)?.0,
            compare_signatures(&a.crcb, &b.crcb, &self.crcb.layout)?.0,
        ))
    }

    /// Pair features for every pair, in order. Each distinct image is encoded
    /// once per batch of pairs.
    pub fn pair_features(&self, store: &ImageStore, pairs: &[FacePair]) -> Result<PairFeatures> {
        let mut out = PairFeatures::default();
        for chunk in pairs.chunks(BATCH) {
            let images = distinct_images(chunk);
            let encoded: Vec<EncodedFace> = images
                .par_iter()
                .map(|r| self.encode(&*store.planes(r)?))
                .collect::<Result<_>>()?;
            let by_ref: HashMap<&ImageRef, &EncodedFace> = images.iter().zip(&encoded).collect();
            let rows: Vec<(Vec<f64>, Vec<f64>)> = chunk
                .par_iter()
                .map(|p| self.compare(by_ref[&p.a], by_ref[&p.b]))
                .collect::<Result<_>>()?;
            for (y, c) in rows {
                out.y.push(y);
                out.crcb.push(c);
            }
        }
        Ok(out)
    }
}

fn load_planes(store: &ImageStore, images: &[ImageRef]) -> Result<Vec<FacePlanes>> {
    let missing = store.missing_files(images);
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    images.par_iter().map(|r| store.planes(r).map(|p| (*p).clone())).collect()
}

fn fit_plane(images: &[ImageTensor], cfg: &PixelHopConfig) -> Result<PlaneEncoder> {
    let hop = fit_pixelhop(images, cfg)?;
    let counts = hop.level_counts();
    let mut acc = StatsAccumulator::new(counts);
    for chunk in images.chunks(BATCH) {
        for out in hop.apply_batch(chunk)? {
            acc.add(&out)?;
        }
    }
    let chain = cfg.spatial_chain()?;
    Ok(PlaneEncoder { stats: acc.finish()?, layout: FeatureLayout::new(counts, chain[0].0, chain[1].0)?, hop })
}

fn labels_of(pairs: &[FacePair]) -> Result<Vec<bool>> {
    pairs
        .iter()
        .map(|p| p.label.ok_or_else(|| Error::InvalidInput("training pairs must be labeled".into())))
        .collect()
}

fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

/// Train both plane classifiers and the meta classifier on precomputed
/// pair features.
pub fn train_classifiers(
    extractor: &FeatureExtractor,
    features: &PairFeatures,
    labels: &[bool],
    hyper: Hyper,
    preprocess: crate::preprocess::PreprocessConfig,
) -> Result<VerificationModel> {
    let cy = Classifier::fit(&refs(&features.y), labels, ModelKind::Logistic, hyper)?;
    let cc = Classifier::fit(&refs(&features.crcb), labels, ModelKind::Logistic, hyper)?;
    let probs: Vec<Vec<f64>> = features
        .y
        .iter()
        .zip(&features.crcb)
        .map(|(y, c)| Ok(vec![cy.predict_proba(y)?, cc.predict_proba(c)?]))
        .collect::<Result<_>>()?;
    let meta = train_logistic(&refs(&probs), labels, hyper)?;
    let sub = |enc: &PlaneEncoder, classifier| Submodel {
        hop: enc.hop.clone(),
        stats: enc.stats.clone(),
        layout: enc.layout.clone(),
        classifier,
    };
    Ok(VerificationModel {
        submodel_y: sub(&extractor.y, cy),
        submodel_crcb: sub(&extractor.crcb, cc),
        meta,
        preprocess,
    })
}

/// Fit transforms on the images of `pairs` (plus mirrors if configured),
/// then the classifiers on their pair features.
pub fn train_verifier(store: &ImageStore, pairs: &[FacePair], cfg: &TrainConfig) -> Result<VerificationModel> {
    let training = if cfg.augment { augment_flip(pairs) } else { pairs.to_vec() };
    let labels = labels_of(&training)?;
    let extractor = FeatureExtractor::fit(store, &distinct_images(&training), cfg)?;
    let features = extractor.pair_features(store, &training)?;
    train_classifiers(&extractor, &features, &labels, cfg.hyper, store.preprocess_config().clone())
}

impl VerificationModel {
    /// The model's unsupervised half.
    pub fn extractor(&self) -> FeatureExtractor {
        let enc = |s: &Submodel| PlaneEncoder { hop: s.hop.clone(), stats: s.stats.clone(), layout: s.layout.clone() };
        FeatureExtractor { y: enc(&self.submodel_y), crcb: enc(&self.submodel_crcb) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub accuracy: f64,
    pub accuracy_y: f64,
    pub accuracy_crcb: f64,
}

/// Accuracy of the ensemble and of each submodel on labeled pairs.
pub fn evaluate(model: &VerificationModel, store: &ImageStore, pairs: &[FacePair]) -> Result<EvalReport> {
    let labels = labels_of(pairs)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to evaluate".into()));
    }
    let feats = model.extractor().pair_features(store, pairs)?;
    evaluate_features(model, &feats, &labels)
}

pub fn evaluate_features(model: &VerificationModel, feats: &PairFeatures, labels: &[bool]) -> Result<EvalReport> {
    let (mut hit, mut hit_y, mut hit_c) = (0usize, 0usize, 0usize);
    for ((y, c), &truth) in feats.y.iter().zip(&feats.crcb).zip(labels) {
        let v = model.verify_features(y, c)?;
        hit += (v.is_match == truth) as usize;
        hit_y += ((v.p_y >= 0.5) == truth) as usize;
        hit_c += ((v.p_crcb >= 0.5) == truth) as usize;
    }
    let n = labels.len() as f64;
    Ok(EvalReport {
        pairs: labels.len(),
        accuracy: hit as f64 / n,
        accuracy_y: hit_y as f64 / n,
        accuracy_crcb: hit_c as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub report: EvalReport,
    pub counts_y: [usize; LEVELS],
    pub counts_crcb: [usize; LEVELS],
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train on all folds but one and test on it, for every fold.
pub fn cross_validate(store: &ImageStore, protocol: &PairProtocol, cfg: &TrainConfig) -> Result<Vec<FoldReport>> {
    (0..protocol.folds.len())
        .map(|k| {
            let (train, test) = kfold_split(protocol, k)?;
            let model = train_verifier(store, &train, cfg)?;
            Ok(FoldReport {
                fold: k,
                report: evaluate(&model, store, &test)?,
                counts_y: model.submodel_y.hop.level_counts(),
                counts_crcb: model.submodel_crcb.hop.level_counts(),
            })
        })
        .collect()
}

/// Cross-validate with `model`'s transforms held fixed: pair features are
/// extracted once and only the classifiers are retrained for each fold.
pub fn cross_validate_classifiers(
    model: &VerificationModel,
    store: &ImageStore,
    protocol: &PairProtocol,
    hyper: Hyper,
) -> Result<Vec<FoldReport>> {
    if protocol.folds.len() < 2 {
        return Err(Error::InvalidInput("cross-validation needs at least 2 folds".into()));
    }
    let extractor = model.extractor();
    let pairs = protocol.all_pairs();
    let labels = labels_of(&pairs)?;
    let features = extractor.pair_features(store, &pairs)?;
    let mut bounds = Vec::with_capacity(protocol.folds.len());
    let mut start = 0;
    for fold in &protocol.folds {
        bounds.push(start..start + fold.len());
        start += fold.len();
    }
    bounds
        .iter()
        .enumerate()
        .map(|(k, held)| {
            let train: Vec<usize> = (0..pairs.len()).filter(|i| !held.contains(i)).collect();
            let test: Vec<usize> = held.clone().collect();
            let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
            let fitted = train_classifiers(
                &extractor,
                &features.select(&train),
                &pick(&train),
                hyper,
                model.preprocess.clone(),
            )?;
            Ok(FoldReport {
                fold: k,
                report: evaluate_features(&fitted, &features.select(&test), &pick(&test))?,
                counts_y: fitted.submodel_y.hop.level_counts(),
                counts_crcb: fitted.submodel_crcb.hop.level_counts(),
            })
        })
        .collect()
}

/// Node counts, comparison-vector count P and feature dimension N of one
/// submodel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub k: [usize; LEVELS],
    pub p: usize,
    pub n: usize,
}

impl DimensionRow {
    pub fn from_counts(k: [usize; LEVELS]) -> Self {
        let layout = FeatureLayout::standard(k);
        Self { k, p: layout.groups(), n: layout.dim() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub component: String,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterTable {
    pub rows: Vec<ParameterRow>,
    pub total: usize,
    /// Present when the chroma first level is not counted at its true size.
    pub note: Option<String>,
}

impl ParameterTable {
    pub fn value(&self, component: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.component == component).map(|r| r.parameters)
    }
}

impl std::fmt::Display for ParameterTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|r| r.component.len()).max().unwrap_or(5).max(5);
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>8}", r.component, r.parameters)?;
        }
        writeln!(f, "{:<width$}  {:>8}", "Total", self.total)?;
        if let Some(n) = &self.note {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

/// Per-plane inputs of a parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlaneCounts {
    pub k: [usize; LEVELS],
    /// Values per level-1 kernel at its true size (25 luma, 50 joint chroma).
    pub level1_dim: usize,
    pub level1_units: usize,
}

/// Parameter table from node counts alone.
pub fn parameter_table(y: PlaneCounts, crcb: PlaneCounts, accounting: Accounting) -> ParameterTable {
    const AREA: usize = 25;
    let mut rows = Vec::new();
    let mut note = None;
    for (name, plane) in [("M_Y", y), ("M_CrCb", crcb)] {
        let dim = match accounting {
            Accounting::Text => plane.level1_dim,
            Accounting::Table4 => {
                if plane.level1_dim != AREA {
                    note = Some(format!(
                        "{name} first hop counted with {AREA}-value kernels; its joint kernels hold {} values ({} parameters)",
                        plane.level1_dim,
                        plane.level1_dim * plane.k[0] + plane.level1_units
                    ));
                }
                AREA
            }
        };
        let hops = hop_parameter_counts(plane.k, dim, plane.level1_units, AREA);
        let n = FeatureLayout::standard(plane.k).dim();
        for (label, value) in [
            ("first hop", hops[0]),
            ("second hop", hops[1]),
            ("third hop", hops[2]),
            ("pairwise feature generator", 2 * plane.k.iter().sum::<usize>()),
            ("LR classifier", n + 1),
        ] {
            rows.push(ParameterRow { component: format!("{name} {label}"), parameters: value });
        }
    }
    rows.push(ParameterRow { component: "Meta classifier".into(), parameters: 3 });
    let total = rows.iter().map(|r| r.parameters).sum();
    ParameterTable { rows, total, note }
}

/// Parameter table of a trained model.
pub fn model_parameter_table(model: &VerificationModel, accounting: Accounting) -> ParameterTable {
    let plane = |s: &Submodel| PlaneCounts {
        k: s.hop.level_counts(),
        level1_dim: s.hop.units_at(1).map(|u| u.bank.patch_dim).max().unwrap_or(0),
        level1_units: s.hop.units_at(1).count(),
    };
    let mut table = parameter_table(plane(&model.submodel_y), plane(&model.submodel_crcb), accounting);
    table.rows.last_mut().expect("meta row").parameters = model.meta.parameter_count();
    table.total = table.rows.iter().map(|r| r.parameters).sum();
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_table_totals() {
        let y = PlaneCounts { k: [18, 119, 233], level1_dim: 25, level1_units: 1 };
        let c = PlaneCounts { k: [19, 73, 124], level1_dim: 50, level1_units: 1 };
        let t = parameter_table(y, c, Accounting::Table4);
        let values: Vec<usize> = t.rows.iter().map(|r| r.parameters).collect();
        assert_eq!(values, [451, 2543, 2969, 740, 341, 476, 1369, 1348, 432, 242, 3]);
        assert_eq!(t.total, 10_914);
        assert!(t.note.is_some());
        let text = parameter_table(y, c, Accounting::Text);
        assert_eq!(text.value("M_CrCb first hop"), Some(951));
        assert!(text.note.is_none());
    }

    #[test]
    fn zero_counts_leave_bias_only() {
        let z = PlaneCounts { k: [0, 0, 0], level1_dim: 25, level1_units: 1 };
        let t = parameter_table(z, z, Accounting::Text);
        assert_eq!(t.value("M_Y first hop"), Some(1));
        assert_eq!(t.value("M_Y LR classifier"), Some(8));
        assert_eq!(t.total, 2 * (1 + 8) + 3);
    }

    #[test]
    fn dimension_rows() {
        assert_eq!(DimensionRow::from_counts([18, 119, 233]), DimensionRow { k: [18, 119, 233], p: 23, n: 340 });
        assert_eq!(DimensionRow::from_counts([19, 73, 124]).n, 241);
    }

    #[test]
    fn mean_std_by_hand() {
        let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}

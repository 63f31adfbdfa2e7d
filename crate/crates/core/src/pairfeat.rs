//! Pairwise similarity features between two faces run through the same
//! [`PixelHopModel`](crate::PixelHopModel).
//!
//! Level-1 and level-2 maps are cut into fixed facial regions; level-3
//! scalars are grouped ten at a time. For each corresponding pair of vectors
//! we take the cosine similarity, and length ratios are averaged per region.
//! The feature vector is laid out as
//!
//! ```text
//! [ 7 mean length ratios | 4·K₁ level-1 cosines | 2·K₂ level-2 cosines | P level-3 cosines ]
//! ```
//!
//! with N = 7 + 4K₁ + 2K₂ + P and P = ⌊K₃ / 10⌋.

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::pixelhop::{HopOutputs, LEVELS};
use crate::{Error, Result};

/// Guards zero-variance nodes during standardization.
pub const STD_EPSILON: f64 = 1e-8;

/// Level-3 scalars per comparison vector.
pub const LEVEL3_GROUP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RoiSpec {
    pub level: usize,
    pub name: &'static str,
    /// Inclusive row range.
    pub rows: (usize, usize),
    /// Inclusive column range.
    pub cols: (usize, usize),
}

impl RoiSpec {
    const fn new(level: usize, name: &'static str, rows: (usize, usize), cols: (usize, usize)) -> Self {
        Self { level, name, rows, cols }
    }

    pub fn len(&self) -> usize {
        (self.rows.1 - self.rows.0 + 1) * (self.cols.1 - self.cols.0 + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn fits(&self, side: usize) -> bool {
        self.rows.0 <= self.rows.1 && self.cols.0 <= self.cols.1 && self.rows.1 < side && self.cols.1 < side
    }

    /// Values of a row-major `side`×`side` map inside the region.
    pub fn slice(&self, map: &[f64], side: usize, out: &mut Vec<f64>) {
        for r in self.rows.0..=self.rows.1 {
            out.extend_from_slice(&map[r * side + self.cols.0..=r * side + self.cols.1]);
        }
    }
}

/// Regions on the 28×28 level-1 grid.
pub const LEVEL1_ROIS: [RoiSpec; 4] = [
    RoiSpec::new(1, "left_eye", (4, 11), (3, 12)),
    RoiSpec::new(1, "right_eye", (4, 11), (15, 24)),
    RoiSpec::new(1, "nose", (10, 19), (9, 18)),
    RoiSpec::new(1, "mouth", (18, 25), (6, 21)),
];

/// Regions on the 10×10 level-2 grid.
pub const LEVEL2_ROIS: [RoiSpec; 2] = [
    RoiSpec::new(2, "eye_stripe", (1, 4), (0, 9)),
    RoiSpec::new(2, "nose_mouth_stripe", (3, 9), (3, 6)),
];

/// Slot layout of a pair feature for given node counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub counts: [usize; LEVELS],
    pub level1_side: usize,
    pub level2_side: usize,
}

impl FeatureLayout {
    pub fn new(counts: [usize; LEVELS], level1_side: usize, level2_side: usize) -> Result<Self> {
        if let Some(roi) = LEVEL1_ROIS.iter().find(|r| !r.fits(level1_side)) {
            return Err(Error::InvalidInput(format!("{} does not fit a {level1_side}-grid", roi.name)));
        }
        if let Some(roi) = LEVEL2_ROIS.iter().find(|r| !r.fits(level2_side)) {
            return Err(Error::InvalidInput(format!("{} does not fit a {level2_side}-grid", roi.name)));
        }
        Ok(Self { counts, level1_side, level2_side })
    }

    /// Layout for the standard 32×32 spatial chain.
    pub fn standard(counts: [usize; LEVELS]) -> Self {
        Self { counts, level1_side: 28, level2_side: 10 }
    }

    /// Number of level-3 comparison vectors, ⌊K₃/10⌋.
    pub fn groups(&self) -> usize {
        self.counts[2] / LEVEL3_GROUP
    }

    /// Feature dimension N = 7 + 4K₁ + 2K₂ + P.
    pub fn dim(&self) -> usize {
        LEVEL1_ROIS.len() + LEVEL2_ROIS.len() + 1
            + LEVEL1_ROIS.len() * self.counts[0]
            + LEVEL2_ROIS.len() * self.counts[1]
            + self.groups()
    }

    /// Human-readable name of every slot, in order.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names: Vec<String> = LEVEL1_ROIS
            .iter()
            .chain(&LEVEL2_ROIS)
            .map(|r| format!("ratio/L{}/{}", r.level, r.name))
            .collect();
        names.push("ratio/L3".into());
        for k in 0..self.counts[0] {
            names.extend(LEVEL1_ROIS.iter().map(|r| format!("cos/L1/n{k}/{}", r.name)));
        }
        for k in 0..self.counts[1] {
            names.extend(LEVEL2_ROIS.iter().map(|r| format!("cos/L2/n{k}/{}", r.name)));
        }
        names.extend((0..self.groups()).map(|g| format!("cos/L3/g{g}")));
        names
    }

    fn check(&self, out: &HopOutputs) -> Result<()> {
        if out.counts() != self.counts || out.level1_side != self.level1_side || out.level2_side != self.level2_side {
            return Err(Error::InvalidInput(format!(
                "outputs with counts {:?} do not match layout {:?}",
                out.counts(),
                self.counts
            )));
        }
        Ok(())
    }
}

/// Mean and standard deviation of every kept node, level by level in node
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub counts: [usize; LEVELS],
}

impl ChannelStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// 2·(K₁+K₂+K₃) stored values.
    pub fn parameter_count(&self) -> usize {
        2 * self.len()
    }

    fn offsets(&self) -> [usize; LEVELS] {
        [0, self.counts[0], self.counts[0] + self.counts[1]]
    }
}

/// Streaming per-node statistics over many [`HopOutputs`].
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    counts: [usize; LEVELS],
    n: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(counts: [usize; LEVELS]) -> Self {
        let total = counts.iter().sum();
        Self { counts, n: vec![0.0; total], mean: vec![0.0; total], m2: vec![0.0; total] }
    }

    pub fn add(&mut self, out: &HopOutputs) -> Result<()> {
        if out.counts() != self.counts {
            return Err(Error::DimensionMismatch {
                expected: self.counts.iter().sum(),
                actual: out.counts().iter().sum(),
            });
        }
        let level3: Vec<&[f64]> = out.level3.iter().map(std::slice::from_ref).collect();
        let maps = out
            .level1
            .iter()
            .map(Vec::as_slice)
            .chain(out.level2.iter().map(Vec::as_slice))
            .chain(level3);
        for (i, values) in maps.enumerate() {
            let nb = values.len() as f64;
            let mb = values.iter().sum::<f64>() / nb;
            let m2b: f64 = values.iter().map(|v| (v - mb) * (v - mb)).sum();
            let na = self.n[i];
            let n = na + nb;
            let delta = mb - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += m2b + delta * delta * na * nb / n;
            self.n[i] = n;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ChannelStats> {
        if self.n.iter().any(|&n| n == 0.0) {
            return Err(Error::InvalidInput("statistics need at least one training image".into()));
        }
        let std = self.m2.iter().zip(&self.n).map(|(m2, n)| (m2 / n).max(0.0).sqrt()).collect();
        Ok(ChannelStats { mean: self.mean, std, counts: self.counts })
    }
}

/// Population mean and standard deviation of every node over all positions
/// and images.
pub fn fit_stats<'a>(outputs: impl IntoIterator<Item = &'a HopOutputs>) -> Result<ChannelStats> {
    let mut iter = outputs.into_iter().peekable();
    let first = iter
        .peek()
        .ok_or_else(|| Error::InvalidInput("statistics need at least one training image".into()))?;
    let mut acc = StatsAccumulator::new(first.counts());
    for out in iter {
        acc.add(out)?;
    }
    acc.finish()
}

/// The comparison vectors of one face: region slices of every level-1 and
/// level-2 node and the grouped level-3 scalars, after standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSignature {
    /// `counts[0] × 4` vectors, node-major.
    pub level1: Vec<Vec<f64>>,
    /// `counts[1] × 2` vectors, node-major.
    pub level2: Vec<Vec<f64>>,
    /// P vectors of ten scalars.
    pub level3: Vec<Vec<f64>>,
}

/// Cut one face's outputs into comparison vectors. With `stats`, every
/// response is standardized as `(x - mean) / (std + ε)` first; `None` skips
/// standardization.
pub fn face_signature(
    out: &HopOutputs,
    stats: Option<&ChannelStats>,
    layout: &FeatureLayout,
) -> Result<FaceSignature> {
    layout.check(out)?;
    if let Some(s) = stats {
        if s.counts != layout.counts {
            return Err(Error::InvalidInput(format!(
                "statistics for counts {:?} do not match layout {:?}",
                s.counts, layout.counts
            )));
        }
    }
    let offsets = stats.map(ChannelStats::offsets).unwrap_or_default();
    let standardize = |level: usize, node: usize, values: &mut [f64]| {
        if let Some(s) = stats {
            let i = offsets[level] + node;
            let (m, sd) = (s.mean[i], s.std[i] + STD_EPSILON);
            values.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
    };

    let mut level1 = Vec::with_capacity(LEVEL1_ROIS.len() * out.level1.len());
    for (k, map) in out.level1.iter().enumerate() {
        for roi in &LEVEL1_ROIS {
            let mut v = Vec::with_capacity(roi.len());
            roi.slice(map, layout.level1_side, &mut v);
            standardize(0, k, &mut v);
            level1.push(v);
        }
    }
    let mut level2 = Vec::with_capacity(LEVEL2_ROIS.len() * out.level2.len());
    for (k, map) in out.level2.iter().enumerate() {
        for roi in &LEVEL2_ROIS {
            let mut v = Vec::with_capacity(roi.len());
            roi.slice(map, layout.level2_side, &mut v);
            standardize(1, k, &mut v);
            level2.push(v);
        }
    }
    let mut scalars = out.level3.clone();
    for (k, v) in scalars.iter_mut().enumerate() {
        standardize(2, k, std::slice::from_mut(v));
    }
    let level3 = scalars
        .chunks_exact(LEVEL3_GROUP)
        .map(<[f64]>::to_vec)
        .collect();
    Ok(FaceSignature { level1, level2, level3 })
}

/// Cosine similarity; 1 for two zero vectors, 0 if exactly one is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (uu, vv) = (dot(u, u), dot(v, v));
    match (uu == 0.0, vv == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0),
    }
}

/// Smaller norm over larger norm; 1 for two zero vectors, 0 if exactly one
/// is zero.
pub fn length_ratio(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (dot(u, u).sqrt(), dot(v, v).sqrt());
    match (nu == 0.0, nv == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => nu.min(nv) / nu.max(nv),
    }
}

/// The N-dimensional similarity vector of one face pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFeature(pub Vec<f64>);

impl PairFeature {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Compare two signatures built with the same layout.
pub fn compare_signatures(a: &FaceSignature, b: &FaceSignature, layout: &FeatureLayout) -> Result<PairFeature> {
    let shape = |s: &FaceSignature| (s.level1.len(), s.level2.len(), s.level3.len());
    let expected = (
        LEVEL1_ROIS.len() * layout.counts[0],
        LEVEL2_ROIS.len() * layout.counts[1],
        layout.groups(),
    );
    if shape(a) != expected || shape(b) != expected {
        return Err(Error::InvalidInput("signatures do not match the feature layout".into()));
    }

    let mut ratios = Vec::with_capacity(7);
    let mut cosines = Vec::with_capacity(layout.dim() - 7);
    for (vectors_a, vectors_b, regions) in [
        (&a.level1, &b.level1, LEVEL1_ROIS.len()),
        (&a.level2, &b.level2, LEVEL2_ROIS.len()),
    ] {
        let mut sums = vec![0.0; regions];
        let nodes = vectors_a.len() / regions;
        for (i, (u, v)) in vectors_a.iter().zip(vectors_b).enumerate() {
            cosines.push(cosine(u, v));
            sums[i % regions] += length_ratio(u, v);
        }
        ratios.extend(sums.iter().map(|s| if nodes == 0 { 1.0 } else { s / nodes as f64 }));
    }
    let mut level3_ratio = 0.0;
    for (u, v) in a.level3.iter().zip(&b.level3) {
        cosines.push(cosine(u, v));
        level3_ratio += length_ratio(u, v);
    }
    ratios.push(if a.level3.is_empty() { 1.0 } else { level3_ratio / a.level3.len() as f64 });

    ratios.extend(cosines);
    debug_assert_eq!(ratios.len(), layout.dim());
    Ok(PairFeature(ratios))
}

/// Pair feature straight from two faces' outputs.
pub fn extract_pair_feature(
    a: &HopOutputs,
    b: &HopOutputs,
    stats: Option<&ChannelStats>,
    layout: &FeatureLayout,
) -> Result<PairFeature> {
    let sa = face_signature(a, stats, layout)?;
    let sb = face_signature(b, stats, layout)?;
    compare_signatures(&sa, &sb, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_outputs(counts: [usize; 3], rng: &mut ChaCha8Rng) -> HopOutputs {
        HopOutputs {
            level1: (0..counts[0]).map(|_| (0..784).map(|_| rng.random_range(-2.0..5.0)).collect()).collect(),
            level1_side: 28,
            level2: (0..counts[1]).map(|_| (0..100).map(|_| rng.random_range(-2.0..5.0)).collect()).collect(),
            level2_side: 10,
            level3: (0..counts[2]).map(|_| rng.random_range(-2.0..5.0)).collect(),
        }
    }

    #[test]
    fn dimension_law() {
        let y = FeatureLayout::standard([18, 119, 233]);
        assert_eq!((y.groups(), y.dim()), (23, 340));
        let c = FeatureLayout::standard([19, 73, 124]);
        assert_eq!((c.groups(), c.dim()), (12, 241));
        assert_eq!(y.slot_names().len(), 340);
    }

    #[test]
    fn rois_fit_grids() {
        assert!(FeatureLayout::new([1, 1, 1], 28, 10).is_ok());
        assert!(FeatureLayout::new([1, 1, 1], 20, 10).is_err());
        assert_eq!(LEVEL1_ROIS.map(|r| r.len()), [80, 80, 100, 128]);
        assert_eq!(LEVEL2_ROIS.map(|r| r.len()), [40, 28]);
    }

    #[test]
    fn constant_node_stats() {
        let out = |v: f64| HopOutputs {
            level1: vec![],
            level1_side: 28,
            level2: vec![],
            level2_side: 10,
            level3: vec![v],
        };
        let s = fit_stats(&[out(5.0), out(5.0)]).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (5.0, 0.0));
        let s = fit_stats(&[out(0.0), out(2.0)]).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        assert!(fit_stats(&[]).is_err());
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let outs: Vec<_> = (0..7).map(|_| random_outputs([3, 4, 12], &mut rng)).collect();
        let s = fit_stats(&outs).unwrap();
        assert_eq!(s.parameter_count(), 2 * 19);
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); 19];
        for o in &outs {
            for k in 0..3 {
                values[k].extend(&o.level1[k]);
            }
            for k in 0..4 {
                values[3 + k].extend(&o.level2[k]);
            }
            for k in 0..12 {
                values[7 + k].push(o.level3[k]);
            }
        }
        for (i, v) in values.iter().enumerate() {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!((s.mean[i] - mean).abs() < 1e-10);
            assert!((s.std[i] - var.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn self_pair_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let counts = [4, 6, 25];
        let outs: Vec<_> = (0..3).map(|_| random_outputs(counts, &mut rng)).collect();
        let stats = fit_stats(&outs).unwrap();
        let layout = FeatureLayout::standard(counts);
        let f = extract_pair_feature(&outs[0], &outs[0], Some(&stats), &layout).unwrap();
        assert_eq!(f.values().len(), layout.dim());
        assert!(f.values().iter().all(|&v| v == 1.0), "{:?}", f.values());
    }

    #[test]
    fn scaled_copy_without_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let counts = [2, 3, 20];
        let a = random_outputs(counts, &mut rng);
        let mut b = a.clone();
        b.level1.iter_mut().flatten().for_each(|v| *v *= 2.0);
        b.level2.iter_mut().flatten().for_each(|v| *v *= 2.0);
        b.level3.iter_mut().for_each(|v| *v *= 2.0);
        let layout = FeatureLayout::standard(counts);
        let f = extract_pair_feature(&a, &b, None, &layout).unwrap();
        assert!(f.values()[..7].iter().all(|&v| v == 0.5));
        assert!(f.values()[7..].iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_vector_conventions() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(length_ratio(&[0.0], &[0.0]), 1.0);
        assert_eq!(length_ratio(&[3.0], &[0.0]), 0.0);
        assert_eq!(length_ratio(&[3.0, 4.0], &[0.0, 10.0]), 0.5);
        assert_eq!(cosine(&[1.0, 0.0], &[-2.0, 0.0]), -1.0);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_outputs([2, 2, 10], &mut rng);
        let b = random_outputs([2, 3, 10], &mut rng);
        let layout = FeatureLayout::standard([2, 2, 10]);
        assert!(extract_pair_feature(&a, &b, None, &layout).is_err());
    }

    #[test]
    fn level3_remainder_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts = [1, 1, 23];
        let a = random_outputs(counts, &mut rng);
        let layout = FeatureLayout::standard(counts);
        let s = face_signature(&a, None, &layout).unwrap();
        assert_eq!(s.level3.len(), 2);
        assert_eq!(s.level3[1], a.level3[10..20].to_vec());
    }
}

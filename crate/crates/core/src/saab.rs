//! The Saab transform: a constant DC kernel, PCA kernels on the DC-removed
//! residual, and a scalar bias that keeps every training response
//! non-negative.

use serde::{Deserialize, Serialize};

use crate::linalg::{constant_complement_basis, normalize_sign, symmetric_eigen};
use crate::preprocess::ImageTensor;
use crate::{Error, Result};

/// Flattened sliding-window patches, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    patch_dim: usize,
    n_patches: usize,
    /// Output grid of the extraction, when it came from an image.
    grid: (usize, usize),
    data: Vec<f64>,
}

impl PatchSet {
    pub fn from_rows(patch_dim: usize, data: Vec<f64>) -> Result<Self> {
        if patch_dim == 0 || data.len() % patch_dim != 0 {
            return Err(Error::InvalidInput(format!(
                "{} values do not form rows of width {patch_dim}",
                data.len()
            )));
        }
        let n_patches = data.len() / patch_dim;
        Ok(Self { patch_dim, n_patches, grid: (n_patches, 1), data })
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn len(&self) -> usize {
        self.n_patches
    }

    pub fn is_empty(&self) -> bool {
        self.n_patches == 0
    }

    /// (rows, cols) of the spatial grid the patches were taken from.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + DoubleEndedIterator + Clone {
        self.data.chunks_exact(self.patch_dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Concatenate patch sets of equal dimension.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a PatchSet>) -> Result<PatchSet> {
        let mut iter = sets.into_iter().peekable();
        let patch_dim = iter
            .peek()
            .map(|s| s.patch_dim)
            .ok_or_else(|| Error::InvalidInput("no patch sets to concatenate".into()))?;
        let mut data = Vec::new();
        for s in iter {
            if s.patch_dim != patch_dim {
                return Err(Error::DimensionMismatch { expected: patch_dim, actual: s.patch_dim });
            }
            data.extend_from_slice(&s.data);
        }
        PatchSet::from_rows(patch_dim, data)
    }
}

/// Valid-padding sliding-window extraction. Each patch is flattened row-major
/// over space with the channel index varying fastest.
pub fn extract_patches(image: &ImageTensor, window: usize, stride: usize) -> Result<PatchSet> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidInput("window and stride must be positive".into()));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if h < window || w < window {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} image is smaller than the {window}x{window} window"
        )));
    }
    let gh = (h - window) / stride + 1;
    let gw = (w - window) / stride + 1;
    let patch_dim = window * window * c;
    let values = image.values();
    let mut data = Vec::with_capacity(gh * gw * patch_dim);
    for gr in 0..gh {
        for gc in 0..gw {
            for wr in 0..window {
                let start = ((gr * stride + wr) * w + gc * stride) * c;
                data.extend_from_slice(&values[start..start + window * c]);
            }
        }
    }
    Ok(PatchSet { patch_dim, n_patches: gh * gw, grid: (gh, gw), data })
}

/// How many AC kernels to keep when fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KeepRule {
    /// Every AC kernel the data supports.
    All,
    /// At most this many AC kernels.
    Count(usize),
    /// The fewest leading kernels (DC included) whose energy share reaches
    /// this fraction.
    Energy(f64),
}

/// A fitted Saab transform for one input unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaabKernelBank {
    pub patch_dim: usize,
    /// `kernels[0]` is the DC kernel; the rest are AC kernels by descending
    /// eigenvalue.
    pub kernels: Vec<Vec<f64>>,
    /// AC eigenvalues, descending, one per AC kernel.
    pub eigenvalues: Vec<f64>,
    /// Mean squared DC response over the training patches.
    pub dc_energy_raw: f64,
    pub bias: f64,
    /// AC slots the data could not support (rank deficiency).
    pub deficient_slots: usize,
}

impl SaabKernelBank {
    pub fn n_kept(&self) -> usize {
        self.kernels.len()
    }

    /// Energy share of each kept kernel within this unit (DC first). Sums to 1
    /// unless the unit carries no energy at all.
    pub fn energy_shares(&self) -> Vec<f64> {
        let total = self.dc_energy_raw + self.eigenvalues.iter().sum::<f64>();
        let raw = std::iter::once(self.dc_energy_raw).chain(self.eigenvalues.iter().copied());
        if total > 0.0 {
            raw.map(|e| e / total).collect()
        } else {
            raw.enumerate().map(|(k, _)| if k == 0 { 1.0 } else { 0.0 }).collect()
        }
    }

    /// Smallest unbiased response over `rows`, capped above at zero.
    pub fn min_response<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> f64 {
        let mut buf = vec![0.0; self.n_kept()];
        let mut min = 0.0f64;
        for p in rows {
            self.project(p, &mut buf);
            min = buf.iter().fold(min, |acc, &r| acc.min(r));
        }
        min
    }

    /// Set the bias so that a response equal to `min` maps to zero.
    pub fn set_bias_from_min(&mut self, min: f64) {
        self.bias = -min.min(0.0);
    }

    /// Unbiased response of kernel `k` to one patch.
    ///
    /// AC responses are taken on the mean-removed patch, which is the same
    /// projection since AC kernels are orthogonal to the DC kernel, and yields
    /// exact zeros for flat patches.
    #[inline]
    pub fn project_one(&self, patch: &[f64], k: usize) -> f64 {
        self.project_with_sum(patch, patch.iter().sum(), k)
    }

    /// [`project_one`](Self::project_one) given the patch sum.
    #[inline]
    pub fn project_with_sum(&self, patch: &[f64], sum: f64, k: usize) -> f64 {
        let d = self.patch_dim as f64;
        if k == 0 {
            return sum / d.sqrt();
        }
        let mean = sum / d;
        patch.iter().zip(&self.kernels[k]).map(|(p, w)| (p - mean) * w).sum()
    }

    /// Unbiased responses of every kept kernel into `out` (length `n_kept`).
    #[inline]
    pub fn project(&self, patch: &[f64], out: &mut [f64]) {
        let d = self.patch_dim as f64;
        let sum: f64 = patch.iter().sum();
        let mean = sum / d;
        out[0] = sum / d.sqrt();
        for (o, k) in out[1..].iter_mut().zip(&self.kernels[1..]) {
            *o = patch.iter().zip(k).map(|(p, w)| (p - mean) * w).sum();
        }
    }
}

/// Row-major responses, `n_patches` × `n_kept`.
#[derive(Clone, Debug, PartialEq)]
pub struct Responses {
    pub n_patches: usize,
    pub n_kept: usize,
    pub data: Vec<f64>,
}

impl Responses {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_kept..(i + 1) * self.n_kept]
    }

    /// All responses of kernel `k`, in patch order.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.n_kept).copied().collect()
    }
}

/// Streaming first/second moments of patches, mergeable across chunks.
///
/// Chunks are centered on their own mean and combined with the pairwise
/// update, so large training sets never need to be materialized at once.
#[derive(Clone, Debug)]
pub struct SaabAccumulator {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    /// Centered scatter, upper triangle of a full row-major d×d buffer.
    scatter: Vec<f64>,
    dc_square_sum: f64,
    finite: bool,
}

impl SaabAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            scatter: vec![0.0; dim * dim],
            dc_square_sum: 0.0,
            finite: true,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add_patches(&mut self, patches: &PatchSet) -> Result<()> {
        if patches.patch_dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: patches.patch_dim() });
        }
        self.add_rows(patches.rows());
        Ok(())
    }

    /// Add a chunk of rows, each of length `dim`.
    pub fn add_rows<'a, I>(&mut self, rows: I)
    where
        I: ExactSizeIterator<Item = &'a [f64]> + Clone,
    {
        let n = rows.len();
        if n == 0 {
            return;
        }
        let d = self.dim;
        let sqrt_d = (d as f64).sqrt();
        let mut chunk = SaabAccumulator::new(d);
        chunk.count = n;
        for p in rows.clone() {
            assert_eq!(p.len(), d, "row width");
            if p.iter().any(|v| !v.is_finite()) {
                chunk.finite = false;
            }
            chunk.mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
            let r = p.iter().sum::<f64>() / sqrt_d;
            chunk.dc_square_sum += r * r;
        }
        chunk.mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut centered = vec![0.0; d];
        for p in rows {
            centered.iter_mut().zip(p.iter().zip(&chunk.mean)).for_each(|(c, (x, m))| *c = x - m);
            for i in 0..d {
                let ci = centered[i];
                let row = &mut chunk.scatter[i * d..(i + 1) * d];
                for j in i..d {
                    row[j] += ci * centered[j];
                }
            }
        }
        self.merge(chunk);
    }

    pub fn merge(&mut self, other: SaabAccumulator) {
        assert_eq!(self.dim, other.dim, "accumulator dimensions differ");
        if other.count == 0 {
            self.finite &= other.finite;
            return;
        }
        if self.count == 0 {
            let finite = self.finite && other.finite;
            *self = other;
            self.finite = finite;
            return;
        }
        self.finite &= other.finite;
        let d = self.dim;
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = na * nb / n;
        for i in 0..d {
            for j in i..d {
                self.scatter[i * d + j] += other.scatter[i * d + j] + delta[i] * delta[j] * w;
            }
        }
        self.mean.iter_mut().zip(&delta).for_each(|(m, dl)| *m += dl * nb / n);
        self.count += other.count;
        self.dc_square_sum += other.dc_square_sum;
    }

    /// Population (1/n) covariance, row-major d×d.
    fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let nf = self.count as f64;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v = self.scatter[i * d + j] / nf;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        cov
    }

    /// Kernels and energies. The bias is left at zero: it needs a second pass
    /// over the data (see [`SaabKernelBank::min_response`]).
    pub fn finish(&self, rule: KeepRule) -> Result<SaabKernelBank> {
        let n = self.count;
        let d = self.dim;
        if n < 2 {
            return Err(Error::Fit(format!("need at least 2 patches, got {n}")));
        }
        if !self.finite {
            return Err(Error::Fit("patches contain non-finite values".into()));
        }
        let dc_energy_raw = self.dc_square_sum / n as f64;

        // The residual covariance restricted to the DC complement is Qᵀ C Q
        // because the complement basis Q is orthogonal to the constant vector.
        let cov = self.covariance();
        let basis = constant_complement_basis(d);
        let m = d - 1;
        let cq: Vec<Vec<f64>> = basis
            .iter()
            .map(|q| (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * q[j]).sum()).collect())
            .collect();
        let mut projected = vec![0.0; m * m];
        for a in 0..m {
            for b in a..m {
                let v: f64 = basis[a].iter().zip(&cq[b]).map(|(x, y)| x * y).sum();
                projected[a * m + b] = v;
                projected[b * m + a] = v;
            }
        }
        let eig = symmetric_eigen(&projected, m);

        let supported = if n < d { n - 1 } else { m };
        let eigenvalues: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
        let n_ac = match rule {
            KeepRule::All => supported,
            KeepRule::Count(c) => supported.min(c),
            KeepRule::Energy(frac) => {
                let total = dc_energy_raw + eigenvalues[..supported].iter().sum::<f64>();
                let mut acc = dc_energy_raw;
                let mut keep = 0;
                while keep < supported && total > 0.0 && acc / total < frac {
                    acc += eigenvalues[keep];
                    keep += 1;
                }
                keep
            }
        };

        let mut kernels = Vec::with_capacity(n_ac + 1);
        kernels.push(vec![1.0 / (d as f64).sqrt(); d]);
        for u in &eig.vectors[..n_ac] {
            let mut k = vec![0.0; d];
            for (q, &w) in basis.iter().zip(u) {
                k.iter_mut().zip(q).for_each(|(ki, qi)| *ki += w * qi);
            }
            normalize_sign(&mut k);
            kernels.push(k);
        }

        Ok(SaabKernelBank {
            patch_dim: d,
            kernels,
            eigenvalues: eigenvalues[..n_ac].to_vec(),
            dc_energy_raw,
            bias: 0.0,
            deficient_slots: m - supported,
        })
    }
}

/// Fit the Saab kernels for a patch set.
pub fn fit_saab(patches: &PatchSet, rule: KeepRule) -> Result<SaabKernelBank> {
    let mut acc = SaabAccumulator::new(patches.patch_dim());
    acc.add_patches(patches)?;
    let mut bank = acc.finish(rule)?;
    let min = bank.min_response(patches.rows());
    bank.set_bias_from_min(min);
    Ok(bank)
}

/// Project every patch on the bank's kernels, optionally adding the bias.
pub fn apply_saab(bank: &SaabKernelBank, patches: &PatchSet, add_bias: bool) -> Result<Responses> {
    if patches.patch_dim() != bank.patch_dim {
        return Err(Error::DimensionMismatch { expected: bank.patch_dim, actual: patches.patch_dim() });
    }
    let k = bank.n_kept();
    let mut data = vec![0.0; patches.len() * k];
    for (p, out) in patches.rows().zip(data.chunks_exact_mut(k)) {
        bank.project(p, out);
        if add_bias {
            out.iter_mut().for_each(|r| *r += bank.bias);
        }
    }
    Ok(Responses { n_patches: patches.len(), n_kept: k, data })
}

/// Non-overlapping 2×2 max-pooling of a row-major `h`×`w` grid. A trailing odd
/// row or column is dropped.
pub fn max_pool_2x2(grid: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, usize, usize)> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!("cannot pool a {h}x{w} grid")));
    }
    if grid.len() != h * w {
        return Err(Error::DimensionMismatch { expected: h * w, actual: grid.len() });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let i = 2 * r * w + 2 * c;
            out.push(grid[i].max(grid[i + 1]).max(grid[i + w]).max(grid[i + w + 1]));
        }
    }
    Ok((out, oh, ow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patches(n: usize, d: usize, seed: u64) -> PatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        PatchSet::from_rows(d, data).unwrap()
    }

    #[test]
    fn patch_grid_for_32x32() {
        let img = ImageTensor::zeros(32, 32, 1);
        let p = extract_patches(&img, 5, 1).unwrap();
        assert_eq!(p.len(), 784);
        assert_eq!(p.patch_dim(), 25);
        assert_eq!(p.grid(), (28, 28));
    }

    #[test]
    fn single_window_is_flattened_image() {
        let img = ImageTensor::from_fn(5, 5, 1, |r, c, _| (r * 5 + c) as f64);
        let p = extract_patches(&img, 5, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.row(0), img.values());
    }

    #[test]
    fn ramp_patches_by_hand() {
        let img = ImageTensor::from_fn(6, 6, 1, |r, c, _| (r * 6 + c) as f64);
        let p = extract_patches(&img, 5, 1).unwrap();
        assert_eq!(p.len(), 4);
        for (idx, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let expected: Vec<f64> = (0..5)
                .flat_map(|r| (0..5).map(move |c| ((r + dr) * 6 + c + dc) as f64))
                .collect();
            assert_eq!(p.row(idx), expected.as_slice());
        }
    }

    #[test]
    fn two_channel_patches_interleave_channels() {
        let img = ImageTensor::from_fn(5, 5, 2, |r, c, ch| (100 * ch + r * 5 + c) as f64);
        let p = extract_patches(&img, 5, 1).unwrap();
        assert_eq!(p.patch_dim(), 50);
        assert_eq!(&p.row(0)[..4], &[0.0, 100.0, 1.0, 101.0]);
    }

    #[test]
    fn small_image_rejected() {
        assert!(extract_patches(&ImageTensor::zeros(4, 8, 1), 5, 1).is_err());
    }

    #[test]
    fn constant_patches_have_zero_ac_energy() {
        let data = (0..10).flat_map(|i| vec![i as f64; 25]).collect();
        let bank = fit_saab(&PatchSet::from_rows(25, data).unwrap(), KeepRule::All).unwrap();
        assert!(bank.eigenvalues.iter().all(|&e| e.abs() < 1e-12));
        let mut out = vec![0.0; bank.n_kept()];
        bank.project(&[3.0; 25], &mut out);
        assert_eq!(out[0], 15.0);
        assert!(out[1..].iter().all(|&r| r == 0.0));
    }

    #[test]
    fn rank_one_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = v.iter().sum::<f64>() / 25.0;
        v.iter_mut().for_each(|x| *x -= mean);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        let data = (0..100)
            .flat_map(|_| {
                let alpha: f64 = rng.random_range(-3.0..3.0);
                let dc: f64 = rng.random_range(0.0..5.0);
                v.iter().map(move |x| alpha * x + dc).collect::<Vec<_>>()
            })
            .collect();
        let bank = fit_saab(&PatchSet::from_rows(25, data).unwrap(), KeepRule::All).unwrap();
        assert!(bank.eigenvalues[0] > 0.1);
        assert!(bank.eigenvalues[1..].iter().all(|&e| e < 1e-10));
        assert!((dot(&bank.kernels[1], &v).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kernels_orthonormal_and_dc_constant() {
        let bank = fit_saab(&random_patches(200, 25, 1), KeepRule::All).unwrap();
        assert_eq!(bank.n_kept(), 25);
        assert!(bank.kernels[0].iter().all(|&x| x == 0.2));
        for i in 0..25 {
            for j in 0..25 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&bank.kernels[i], &bank.kernels[j]) - expected).abs() < 1e-8);
            }
        }
        assert!(bank.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(bank.bias >= 0.0);
    }

    #[test]
    fn rank_deficient_fit_keeps_rank_many() {
        let bank = fit_saab(&random_patches(6, 25, 2), KeepRule::All).unwrap();
        assert_eq!(bank.n_kept(), 6);
        assert_eq!(bank.deficient_slots, 19);
    }

    #[test]
    fn too_few_or_bad_patches() {
        assert!(fit_saab(&random_patches(1, 25, 2), KeepRule::All).is_err());
        let mut data = vec![0.0; 50];
        data[3] = f64::NAN;
        assert!(fit_saab(&PatchSet::from_rows(25, data).unwrap(), KeepRule::All).is_err());
    }

    #[test]
    fn keep_rules() {
        let p = random_patches(300, 25, 5);
        assert_eq!(fit_saab(&p, KeepRule::Count(4)).unwrap().n_kept(), 5);
        let all = fit_saab(&p, KeepRule::All).unwrap();
        let shares = all.energy_shares();
        let bank = fit_saab(&p, KeepRule::Energy(0.9)).unwrap();
        let kept: f64 = shares[..bank.n_kept()].iter().sum();
        let one_less: f64 = shares[..bank.n_kept() - 1].iter().sum();
        assert!(kept >= 0.9 && one_less < 0.9);
    }

    #[test]
    fn biased_training_responses_non_negative() {
        let p = random_patches(200, 25, 9);
        let bank = fit_saab(&p, KeepRule::All).unwrap();
        let r = apply_saab(&bank, &p, true).unwrap();
        assert!(r.data.iter().all(|&x| x >= 0.0));
        assert!(r.data.iter().any(|&x| x == 0.0));
    }

    #[test]
    fn apply_matches_naive_product() {
        let p = random_patches(50, 25, 11);
        let bank = fit_saab(&random_patches(200, 25, 12), KeepRule::All).unwrap();
        let r = apply_saab(&bank, &p, false).unwrap();
        for i in 0..p.len() {
            for k in 0..bank.n_kept() {
                let mut naive = 0.0;
                for j in 0..25 {
                    naive += p.row(i)[j] * bank.kernels[k][j];
                }
                assert!((r.row(i)[k] - naive).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_bank_reconstructs_and_conserves_energy() {
        let p = random_patches(40, 25, 13);
        let bank = fit_saab(&random_patches(200, 25, 14), KeepRule::All).unwrap();
        let r = apply_saab(&bank, &p, false).unwrap();
        for i in 0..p.len() {
            let mut rec = vec![0.0; 25];
            for (k, kernel) in bank.kernels.iter().enumerate() {
                rec.iter_mut().zip(kernel).for_each(|(x, w)| *x += r.row(i)[k] * w);
            }
            for (a, b) in rec.iter().zip(p.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
            let e_resp: f64 = r.row(i).iter().map(|x| x * x).sum();
            let e_patch: f64 = p.row(i).iter().map(|x| x * x).sum();
            assert!((e_resp - e_patch).abs() <= 1e-8 * e_patch);
        }
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let bank = fit_saab(&random_patches(60, 25, 15), KeepRule::All).unwrap();
        assert!(apply_saab(&bank, &random_patches(3, 50, 1), false).is_err());
    }

    #[test]
    fn pooling() {
        assert_eq!(max_pool_2x2(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap().0, vec![4.0]);
        let (out, h, w) = max_pool_2x2(&[7.0; 28 * 28], 28, 28).unwrap();
        assert_eq!((h, w), (14, 14));
        assert!(out.iter().all(|&x| x == 7.0));
        let (_, h, w) = max_pool_2x2(&[0.0; 100], 10, 10).unwrap();
        assert_eq!((h, w), (5, 5));
        let (_, h, w) = max_pool_2x2(&[0.0; 35], 5, 7).unwrap();
        assert_eq!((h, w), (2, 3));
    }

    #[test]
    fn pooling_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (out, _, _) = max_pool_2x2(&grid, 4, 4).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for dr in 0..2 {
                    for dc in 0..2 {
                        best = best.max(grid[(2 * r + dr) * 4 + 2 * c + dc]);
                    }
                }
                assert_eq!(out[r * 2 + c], best);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn eigenvalues_sum_to_residual_trace(seed in 0u64..10_000) {
                let p = random_patches(120, 25, seed);
                let bank = fit_saab(&p, KeepRule::All).unwrap();
                // residual covariance trace, computed directly
                let n = p.len() as f64;
                let residuals: Vec<Vec<f64>> = p.rows().map(|row| {
                    let m = row.iter().sum::<f64>() / 25.0;
                    row.iter().map(|x| x - m).collect()
                }).collect();
                let mut trace = 0.0;
                for j in 0..25 {
                    let mean = residuals.iter().map(|r| r[j]).sum::<f64>() / n;
                    trace += residuals.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                }
                let sum: f64 = bank.eigenvalues.iter().sum();
                prop_assert!((sum - trace).abs() <= 1e-8 * trace);
            }

            #[test]
            fn fit_is_order_invariant(seed in 0u64..10_000) {
                let p = random_patches(150, 25, seed);
                let reversed: Vec<f64> = p.rows().rev().flatten().copied().collect();
                let a = fit_saab(&p, KeepRule::All).unwrap();
                let b = fit_saab(&PatchSet::from_rows(25, reversed).unwrap(), KeepRule::All).unwrap();
                for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
                    prop_assert!((x - y).abs() < 1e-8);
                }
                for (u, v) in a.kernels.iter().zip(&b.kernels) {
                    for (x, y) in u.iter().zip(v) {
                        prop_assert!((x - y).abs() < 1e-8);
                    }
                }
            }
        }
    }
}

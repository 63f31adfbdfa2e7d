//! Pair protocols, image references, augmentation, splits and the synthetic
//! blob-face generator.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::preprocess::{normalize_geometry, planes_from_rgb, FacePlanes, PreprocessConfig, RgbImage};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    File(PathBuf),
    /// Index into an in-memory image set.
    Synthetic(usize),
}

/// A lazily decoded image, optionally mirrored left to right.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub source: ImageSource,
    pub mirrored: bool,
}

impl ImageRef {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        Self { source: ImageSource::File(path.into()), mirrored: false }
    }

    pub fn synthetic(index: usize) -> Self {
        Self { source: ImageSource::Synthetic(index), mirrored: false }
    }

    pub fn flipped(&self) -> Self {
        Self { source: self.source.clone(), mirrored: !self.mirrored }
    }

    /// Stable textual key, e.g. `file:lfw/a/a_0001.png` or `synthetic:12#flip`.
    pub fn key(&self) -> String {
        let mut s = match &self.source {
            ImageSource::File(p) => format!("file:{}", p.display()),
            ImageSource::Synthetic(i) => format!("synthetic:{i}"),
        };
        if self.mirrored {
            s.push_str("#flip");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FacePair {
    pub a: ImageRef,
    pub b: ImageRef,
    /// `Some(true)` for a match; `None` in unlabeled pools.
    pub label: Option<bool>,
}

impl FacePair {
    pub fn new(a: ImageRef, b: ImageRef, label: Option<bool>) -> Self {
        Self { a, b, label }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub matched: Vec<FacePair>,
    pub mismatched: Vec<FacePair>,
}

impl Fold {
    /// Matched pairs, then mismatched.
    pub fn pairs(&self) -> impl Iterator<Item = &FacePair> {
        self.matched.iter().chain(&self.mismatched)
    }

    pub fn len(&self) -> usize {
        self.matched.len() + self.mismatched.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairProtocol {
    pub folds: Vec<Fold>,
}

impl PairProtocol {
    pub fn all_pairs(&self) -> Vec<FacePair> {
        self.folds.iter().flat_map(Fold::pairs).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.folds.iter().map(Fold::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `root/<name>/<name>_<NNNN>.png`, with the 1-based image number.
pub fn image_path(root: &Path, name: &str, number: usize, extension: &str) -> PathBuf {
    root.join(name).join(format!("{name}_{number:04}.{extension}"))
}

/// Parse a pairs-protocol text. Paths default to `.png` and are not checked;
/// see [`resolve_images`].
///
/// The header is either `<folds> <pairs per fold>` or a single `<pairs>` for
/// one fold. Each fold lists its matched lines (`name i j`) followed by the
/// same number of mismatched lines (`name1 i name2 j`).
pub fn parse_pairs(text: &str, root: &Path) -> Result<PairProtocol> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (hline, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or(Error::Parse { line: 1, message: "empty pairs file".into() })?;
    let numbers: Vec<&str> = header.split_whitespace().collect();
    let parse_count = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse { line: hline, message: format!("expected a count, found {s:?}") })
    };
    let (n_folds, per_fold) = match numbers.as_slice() {
        [n] => (1, parse_count(n)?),
        [f, n] => (parse_count(f)?, parse_count(n)?),
        _ => {
            return Err(Error::Parse {
                line: hline,
                message: "header must be `<folds> <pairs>` or `<pairs>`".into(),
            })
        }
    };
    if n_folds == 0 {
        return Err(Error::Parse { line: hline, message: "fold count must be positive".into() });
    }

    let index = |line: usize, s: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(i) if i >= 1 => Ok(i),
            _ => Err(Error::Parse { line, message: format!("image number must be a positive integer, found {s:?}") }),
        }
    };
    let mut next = |expected: &str| -> Result<(usize, Vec<String>)> {
        match lines.next() {
            Some((n, l)) => Ok((n, l.split_whitespace().map(str::to_string).collect())),
            None => Err(Error::Parse {
                line: text.lines().count() + 1,
                message: format!("unexpected end of file, expected a {expected} line"),
            }),
        }
    };

    let mut protocol = PairProtocol::default();
    for _ in 0..n_folds {
        let mut fold = Fold::default();
        for _ in 0..per_fold {
            let (n, t) = next("matched")?;
            let [name, i, j] = t.as_slice() else {
                return Err(Error::Parse { line: n, message: format!("matched line needs 3 fields, found {}", t.len()) });
            };
            fold.matched.push(FacePair::new(
                ImageRef::file(image_path(root, name, index(n, i)?, "png")),
                ImageRef::file(image_path(root, name, index(n, j)?, "png")),
                Some(true),
            ));
        }
        for _ in 0..per_fold {
            let (n, t) = next("mismatched")?;
            let [a, i, b, j] = t.as_slice() else {
                return Err(Error::Parse {
                    line: n,
                    message: format!("mismatched line needs 4 fields, found {}", t.len()),
                });
            };
            fold.mismatched.push(FacePair::new(
                ImageRef::file(image_path(root, a, index(n, i)?, "png")),
                ImageRef::file(image_path(root, b, index(n, j)?, "png")),
                Some(false),
            ));
        }
        protocol.folds.push(fold);
    }
    if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse { line: n, message: format!("unexpected trailing line {l:?}") });
    }
    Ok(protocol)
}

/// Point every file reference at an existing `.png` or `.ppm`; lists all
/// missing images in the error.
pub fn resolve_images(protocol: &mut PairProtocol) -> Result<()> {
    let mut missing = Vec::new();
    let mut seen = HashSet::new();
    for fold in &mut protocol.folds {
        for pair in fold.matched.iter_mut().chain(fold.mismatched.iter_mut()) {
            for r in [&mut pair.a, &mut pair.b] {
                let ImageSource::File(path) = &mut r.source else { continue };
                if path.exists() {
                    continue;
                }
                let ppm = path.with_extension("ppm");
                if ppm.exists() {
                    *path = ppm;
                } else if seen.insert(path.clone()) {
                    missing.push(path.clone());
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingImages(missing))
    }
}

/// Read, parse and resolve a pairs file against an identity-folder root.
pub fn parse_pairs_file(path: &Path, root: &Path) -> Result<PairProtocol> {
    let text = std::fs::read_to_string(path)?;
    let mut protocol = parse_pairs(&text, root)?;
    resolve_images(&mut protocol)?;
    Ok(protocol)
}

/// Originals followed by their left-right mirrored copies.
pub fn augment_flip(pairs: &[FacePair]) -> Vec<FacePair> {
    let flipped = pairs.iter().map(|p| FacePair::new(p.a.flipped(), p.b.flipped(), p.label));
    pairs.iter().cloned().chain(flipped).collect()
}

/// Train on every fold but `held_out`, test on `held_out`.
pub fn kfold_split(protocol: &PairProtocol, held_out: usize) -> Result<(Vec<FacePair>, Vec<FacePair>)> {
    let n = protocol.folds.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("cannot hold out a fold of a {n}-fold protocol")));
    }
    if held_out >= n {
        return Err(Error::InvalidInput(format!("fold {held_out} out of range for {n} folds")));
    }
    let mut train = Vec::new();
    for (i, fold) in protocol.folds.iter().enumerate() {
        if i != held_out {
            train.extend(fold.pairs().cloned());
        }
    }
    Ok((train, protocol.folds[held_out].pairs().cloned().collect()))
}

/// Pair each probe with every gallery image of its identity (matches), then
/// add `n_random` probe/gallery pairs of distinct identities (mismatches).
pub fn make_gallery_pairs(
    gallery: &[(String, ImageRef)],
    probes: &[(String, ImageRef)],
    n_random: usize,
    seed: u64,
) -> Result<Vec<FacePair>> {
    let mut pairs = Vec::new();
    for (pid, probe) in probes {
        for (gid, g) in gallery {
            if gid == pid {
                pairs.push(FacePair::new(g.clone(), probe.clone(), Some(true)));
            }
        }
    }
    if n_random > 0 {
        let feasible = probes.iter().any(|(p, _)| gallery.iter().any(|(g, _)| g != p));
        if !feasible {
            return Err(Error::InvalidInput("no probe/gallery combination of distinct identities".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut added = 0;
        while added < n_random {
            let (pid, probe) = &probes[rng.random_range(0..probes.len())];
            let (gid, g) = &gallery[rng.random_range(0..gallery.len())];
            if gid != pid {
                pairs.push(FacePair::new(g.clone(), probe.clone(), Some(false)));
                added += 1;
            }
        }
    }
    Ok(pairs)
}

/// `(identity, path)` for every `.png`/`.ppm` under `root/<identity>/`,
/// sorted by identity then file name.
pub fn identity_folder(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
            .collect();
        files.sort();
        out.extend(files.into_iter().map(|f| (name.clone(), f)));
    }
    Ok(out)
}

/// Decodes and preprocesses images on demand, keeping recent results in an
/// LRU cache shared across threads.
pub struct ImageStore {
    preprocess: PreprocessConfig,
    synthetic: Option<Arc<Vec<RgbImage>>>,
    cache: Option<Mutex<LruCache<ImageRef, Arc<FacePlanes>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for ImageStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageStore")
            .field("preprocess", &self.preprocess)
            .field("synthetic", &self.synthetic.as_ref().map(|s| s.len()))
            .finish_non_exhaustive()
    }
}

pub const DEFAULT_CACHE_CAPACITY: usize = 4096;

impl ImageStore {
    /// A store for file-backed images. `capacity` 0 disables caching.
    pub fn new(preprocess: PreprocessConfig, capacity: usize) -> Self {
        Self {
            preprocess,
            synthetic: None,
            cache: NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c))),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Also serve [`ImageSource::Synthetic`] references from `images`.
    pub fn with_synthetic(mut self, images: Arc<Vec<RgbImage>>) -> Self {
        self.synthetic = Some(images);
        self
    }

    pub fn preprocess_config(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    fn decode(&self, source: &ImageSource) -> Result<RgbImage> {
        match source {
            ImageSource::File(p) => RgbImage::load(p),
            ImageSource::Synthetic(i) => self
                .synthetic
                .as_ref()
                .and_then(|s| s.get(*i))
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("no synthetic image {i}"))),
        }
    }

    /// The geometry-normalized RGB image the model sees.
    pub fn rgb(&self, r: &ImageRef) -> Result<RgbImage> {
        let img = normalize_geometry(&self.decode(&r.source)?, &self.preprocess)?;
        Ok(if r.mirrored { img.mirror_horizontal() } else { img })
    }

    pub fn planes(&self, r: &ImageRef) -> Result<Arc<FacePlanes>> {
        if let Some(cache) = &self.cache {
            if let Some(p) = cache.lock().expect("cache lock").get(r) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(p.clone());
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let planes = Arc::new(planes_from_rgb(&self.rgb(r)?));
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache lock").put(r.clone(), planes.clone());
        }
        Ok(planes)
    }

    /// (hits, misses) since creation.
    pub fn cache_stats(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    /// File references that do not exist on disk.
    pub fn missing_files<'a>(&self, refs: impl IntoIterator<Item = &'a ImageRef>) -> Vec<PathBuf> {
        let mut seen = HashSet::new();
        refs.into_iter()
            .filter_map(|r| match &r.source {
                ImageSource::File(p) if !p.exists() && seen.insert(p.clone()) => Some(p.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Distinct images referenced by `pairs`, in order of first appearance.
pub fn distinct_images(pairs: &[FacePair]) -> Vec<ImageRef> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .flat_map(|p| [&p.a, &p.b])
        .filter(|r| seen.insert((*r).clone()))
        .cloned()
        .collect()
}

/// Parameters of the synthetic blob-face dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    /// Per-pixel Gaussian noise σ on the 0..255 scale.
    pub intra_class_noise: f64,
    pub seed: u64,
    pub image_size: usize,
    /// Matched (and mismatched) pairs to draw; `None` takes every matched
    /// combination, up to 1000.
    pub pairs_per_class: Option<usize>,
    pub folds: usize,
}

impl SyntheticSpec {
    pub fn new(n_identities: usize, images_per_identity: usize, intra_class_noise: f64, seed: u64) -> Self {
        Self {
            n_identities,
            images_per_identity,
            intra_class_noise,
            seed,
            image_size: 32,
            pairs_per_class: None,
            folds: 10,
        }
    }

    pub fn with_pairs(mut self, per_class: usize) -> Self {
        self.pairs_per_class = Some(per_class);
        self
    }

    pub fn with_folds(mut self, folds: usize) -> Self {
        self.folds = folds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 || self.folds == 0 {
            return Err(Error::InvalidInput("identity, image and fold counts must be at least 1".into()));
        }
        if !(self.intra_class_noise >= 0.0 && self.intra_class_noise.is_finite()) {
            return Err(Error::InvalidInput(format!("noise must be finite and >= 0, got {}", self.intra_class_noise)));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidInput(format!("image size {} is below 16", self.image_size)));
        }
        Ok(())
    }

    fn matched_capacity(&self) -> usize {
        let k = self.images_per_identity;
        self.n_identities * k * k.saturating_sub(1) / 2
    }

    fn mismatched_capacity(&self) -> usize {
        let k = self.images_per_identity;
        let n = self.n_identities;
        n * n.saturating_sub(1) / 2 * k * k
    }

    /// Pairs per class actually drawn: the request capped by what the data
    /// supports, rounded down to a multiple of the fold count.
    pub fn effective_pairs_per_class(&self) -> usize {
        let cap = self.matched_capacity().min(self.mismatched_capacity());
        let want = self.pairs_per_class.unwrap_or(1000).min(cap);
        want - want % self.folds
    }
}

/// Identity-specific face template.
#[derive(Clone, Debug)]
struct BlobFace {
    background: [f64; 3],
    skin: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    eye_row: f64,
    eye_dx: f64,
    eye_radius: f64,
    eye_depth: f64,
    brow_gap: f64,
    nose_len: f64,
    nose_width: f64,
    nose_gain: f64,
    mouth_row: f64,
    mouth_half_width: f64,
    mouth_depth: f64,
}

impl BlobFace {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(110.0..220.0);
        Self {
            background: [rng.random_range(20.0..90.0), rng.random_range(20.0..90.0), rng.random_range(20.0..90.0)],
            skin: [
                tone + rng.random_range(0.0..35.0),
                tone * rng.random_range(0.72..0.9),
                tone * rng.random_range(0.55..0.8),
            ],
            face_rx: rng.random_range(10.0..13.5),
            face_ry: rng.random_range(12.5..15.5),
            eye_row: rng.random_range(9.5..14.0),
            eye_dx: rng.random_range(4.0..7.5),
            eye_radius: rng.random_range(1.2..2.6),
            eye_depth: rng.random_range(60.0..140.0),
            brow_gap: rng.random_range(2.5..4.5),
            nose_len: rng.random_range(4.0..8.0),
            nose_width: rng.random_range(0.8..2.0),
            nose_gain: rng.random_range(-50.0..50.0),
            mouth_row: rng.random_range(21.0..25.5),
            mouth_half_width: rng.random_range(3.0..7.5),
            mouth_depth: rng.random_range(50.0..120.0),
        }
    }

    /// Noise-free RGB value at `(row, col)` on the 32×32 template grid.
    fn render(&self, r: f64, c: f64) -> [f64; 3] {
        let (cr, cc) = (15.5, 15.5);
        let ellipse = ((r - cr) / self.face_ry).powi(2) + ((c - cc) / self.face_rx).powi(2);
        let inside = 1.0 / (1.0 + ((ellipse - 1.0) * 12.0).exp());
        let mut px = [0.0; 3];
        for ch in 0..3 {
            px[ch] = self.background[ch] + inside * (self.skin[ch] - self.background[ch]);
        }
        let gauss = |dr: f64, dc: f64, sr: f64, sc: f64| (-0.5 * ((dr / sr).powi(2) + (dc / sc).powi(2))).exp();
        let eyes = gauss(r - self.eye_row, c - (cc - self.eye_dx), self.eye_radius, self.eye_radius)
            + gauss(r - self.eye_row, c - (cc + self.eye_dx), self.eye_radius, self.eye_radius);
        let brows = gauss(r - (self.eye_row - self.brow_gap), c - (cc - self.eye_dx), 0.7, 2.2)
            + gauss(r - (self.eye_row - self.brow_gap), c - (cc + self.eye_dx), 0.7, 2.2);
        let nose_mid = self.eye_row + 2.0 + self.nose_len / 2.0;
        let nose = gauss(0.0, c - cc, 1.0, self.nose_width)
            * smooth_box(r, nose_mid - self.nose_len / 2.0, nose_mid + self.nose_len / 2.0);
        let mouth = gauss(r - self.mouth_row, 0.0, 0.9, 1.0)
            * smooth_box(c, cc - self.mouth_half_width, cc + self.mouth_half_width);
        for (ch, v) in px.iter_mut().enumerate() {
            *v -= self.eye_depth * eyes + 0.6 * self.eye_depth * brows;
            *v += self.nose_gain * nose;
            *v -= self.mouth_depth * mouth * [0.45, 1.0, 0.9][ch];
        }
        px
    }
}

/// ≈1 on [lo, hi] with soft edges.
fn smooth_box(x: f64, lo: f64, hi: f64) -> f64 {
    let s = |t: f64| 1.0 / (1.0 + (-t * 3.0).exp());
    s(x - lo) * s(hi - x)
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub identities: Vec<String>,
    /// Identity `i` owns images `i * images_per_identity ..`.
    pub images: Arc<Vec<RgbImage>>,
    pub protocol: PairProtocol,
    /// Every fold's pairs, fold by fold.
    pub pairs: Vec<FacePair>,
}

/// Written-out synthetic dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub generator: String,
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub identities: Vec<ManifestIdentity>,
    pub pairs_file: String,
    pub pairs_per_fold: usize,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub name: String,
    pub images: Vec<String>,
}

impl SyntheticData {
    pub fn identity_of(&self, image: usize) -> usize {
        image / self.spec.images_per_identity
    }

    /// An image store serving this dataset's images.
    pub fn store(&self) -> ImageStore {
        ImageStore::new(
            PreprocessConfig { size: 32, ..PreprocessConfig::default() },
            DEFAULT_CACHE_CAPACITY,
        )
        .with_synthetic(self.images.clone())
    }

    fn location(&self, r: &ImageRef) -> (String, usize) {
        let ImageSource::Synthetic(i) = r.source else { unreachable!("synthetic pairs reference memory images") };
        (self.identities[self.identity_of(i)].clone(), i % self.spec.images_per_identity + 1)
    }

    /// The protocol as a pairs-file text.
    pub fn pairs_text(&self) -> String {
        let per_fold = self.protocol.folds.first().map_or(0, |f| f.matched.len());
        let mut s = format!("{}\t{}\n", self.protocol.folds.len(), per_fold);
        for fold in &self.protocol.folds {
            for p in &fold.matched {
                let (name, i) = self.location(&p.a);
                let (_, j) = self.location(&p.b);
                let _ = writeln!(s, "{name}\t{i}\t{j}");
            }
            for p in &fold.mismatched {
                let (a, i) = self.location(&p.a);
                let (b, j) = self.location(&p.b);
                let _ = writeln!(s, "{a}\t{i}\t{b}\t{j}");
            }
        }
        s
    }

    /// Write images as `dir/<name>/<name>_NNNN.ppm`, plus `pairs.txt` and
    /// `manifest.json`.
    pub fn write_to(&self, dir: &Path) -> Result<SyntheticManifest> {
        let k = self.spec.images_per_identity;
        let mut identities = Vec::new();
        for (id, name) in self.identities.iter().enumerate() {
            std::fs::create_dir_all(dir.join(name))?;
            let mut images = Vec::new();
            for j in 0..k {
                let path = image_path(dir, name, j + 1, "ppm");
                self.images[id * k + j].save_ppm(&path)?;
                images.push(path.strip_prefix(dir).unwrap_or(&path).display().to_string());
            }
            identities.push(ManifestIdentity { name: name.clone(), images });
        }
        std::fs::write(dir.join("pairs.txt"), self.pairs_text())?;
        let manifest = SyntheticManifest {
            generator: "blob-face".into(),
            seed: self.spec.seed,
            spec: self.spec.clone(),
            identities,
            pairs_file: "pairs.txt".into(),
            pairs_per_fold: self.protocol.folds.first().map_or(0, |f| f.matched.len()),
            note: "mismatched pairs join images of two distinct identities chosen uniformly at random".into(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Render identities as parameterized blob faces (eyes, brows, nose and
/// mouth at identity-specific positions and intensities) with per-image
/// Gaussian pixel noise, and draw a balanced pair protocol.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<BlobFace> = (0..spec.n_identities).map(|_| BlobFace::random(&mut rng)).collect();
    let noise = Normal::new(0.0, spec.intra_class_noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let size = spec.image_size;
    let scale = 32.0 / size as f64;
    let mut images = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for t in &templates {
        let clean: Vec<[f64; 3]> = (0..size * size)
            .map(|i| t.render(((i / size) as f64 + 0.5) * scale - 0.5, ((i % size) as f64 + 0.5) * scale - 0.5))
            .collect();
        for _ in 0..spec.images_per_identity {
            let mut data = Vec::with_capacity(size * size * 3);
            for px in &clean {
                for v in px {
                    let n = if spec.intra_class_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push((v + n).round().clamp(0.0, 255.0) as u8);
                }
            }
            images.push(RgbImage::new(size, size, data)?);
        }
    }

    let per_class = spec.effective_pairs_per_class();
    let k = spec.images_per_identity;
    let mut matched: Vec<(usize, usize)> = (0..spec.n_identities)
        .flat_map(|id| (0..k).flat_map(move |i| (i + 1..k).map(move |j| (id * k + i, id * k + j))))
        .collect();
    matched.shuffle(&mut rng);
    matched.truncate(per_class);

    let mut seen = HashSet::new();
    let mut mismatched = Vec::with_capacity(per_class);
    while mismatched.len() < per_class {
        let a = rng.random_range(0..images.len());
        let b = rng.random_range(0..images.len());
        if a / k == b / k || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        mismatched.push((a, b));
    }

    let per_fold = per_class / spec.folds;
    let to_pair = |&(a, b): &(usize, usize), label| FacePair::new(ImageRef::synthetic(a), ImageRef::synthetic(b), Some(label));
    let protocol = PairProtocol {
        folds: (0..spec.folds)
            .map(|f| Fold {
                matched: matched[f * per_fold..(f + 1) * per_fold].iter().map(|p| to_pair(p, true)).collect(),
                mismatched: mismatched[f * per_fold..(f + 1) * per_fold].iter().map(|p| to_pair(p, false)).collect(),
            })
            .collect(),
    };
    Ok(SyntheticData {
        spec: spec.clone(),
        identities: (0..spec.n_identities).map(|i| format!("person{i:03}")).collect(),
        images: Arc::new(images),
        pairs: protocol.all_pairs(),
        protocol,
    })
}

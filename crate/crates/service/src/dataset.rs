//! Pair pools served to annotation sessions.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};

use facehop_core::active::{ActivePool, TestSet};
use facehop_core::dataio::{self, FacePair, ImageRef, ImageSource, ImageStore};
use facehop_core::pipeline::{FeatureExtractor, PairFeatures, TrainConfig};
use facehop_core::VerificationModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};

/// Which pairs file under the data root a session draws from, and how it is
/// split: the last `test_folds` folds score each round, the rest form the
/// pool.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetRef {
    #[serde(default = "default_pairs")]
    pub pairs: String,
    #[serde(default = "default_test_folds")]
    pub test_folds: usize,
}

fn default_pairs() -> String {
    "pairs.txt".into()
}

fn default_test_folds() -> usize {
    1
}

impl Default for DatasetRef {
    fn default() -> Self {
        Self { pairs: default_pairs(), test_folds: default_test_folds() }
    }
}

impl DatasetRef {
    pub(crate) fn cache_key(&self) -> String {
        format!("{}#{}", self.pairs, self.test_folds)
    }

    /// The pairs file, refusing paths that leave the data root.
    fn resolve(&self, root: &Path) -> ApiResult<PathBuf> {
        let rel = Path::new(&self.pairs);
        if rel.is_absolute() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(ApiError::unprocessable("invalid_dataset", "pairs must be a relative path inside the data root"));
        }
        Ok(root.join(rel))
    }
}

/// Stable id of a pair: a hash of both image paths relative to the data
/// root.
pub fn pair_id(root: &Path, pair: &FacePair) -> String {
    let name = |r: &ImageRef| match &r.source {
        ImageSource::File(p) => {
            let rel = p.strip_prefix(root).unwrap_or(p);
            let mut s = rel.to_string_lossy().replace('\\', "/");
            if r.mirrored {
                s.push_str("#flip");
            }
            s
        }
        ImageSource::Synthetic(_) => r.key(),
    };
    let digest = Sha256::digest(format!("{}\n{}", name(&pair.a), name(&pair.b)).as_bytes());
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

/// Pool and test features of one pairs file, with the pool's ground truth.
pub struct Dataset {
    pub reference: DatasetRef,
    pub pool_pairs: Vec<FacePair>,
    pub pool_ids: Vec<String>,
    pub pool_truth: Vec<bool>,
    pub pool: ActivePool,
    pub test_features: PairFeatures,
    pub test_labels: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Split `pairs` and extract features; with no model the transforms are
    /// fitted on the pool images.
    pub fn build(
        root: &Path,
        reference: DatasetRef,
        store: &ImageStore,
        model: Option<&VerificationModel>,
    ) -> ApiResult<Self> {
        let path = reference.resolve(root)?;
        if !path.is_file() {
            return Err(ApiError::unprocessable("dataset_unavailable", format!("no pairs file {}", reference.pairs)));
        }
        let mut protocol = dataio::parse_pairs_file(&path, root)?;
        dataio::resolve_images(&mut protocol)?;
        let n = protocol.folds.len();
        if reference.test_folds == 0 || reference.test_folds >= n {
            return Err(ApiError::unprocessable(
                "invalid_dataset",
                format!("test_folds must be between 1 and {} for a {n}-fold protocol", n.saturating_sub(1)),
            ));
        }
        let split = n - reference.test_folds;
        let gather = |folds: &[dataio::Fold]| -> Vec<FacePair> { folds.iter().flat_map(|f| f.pairs().cloned()).collect() };
        let pool_pairs = gather(&protocol.folds[..split]);
        let test_pairs = gather(&protocol.folds[split..]);
        let labels = |pairs: &[FacePair]| -> ApiResult<Vec<bool>> {
            pairs
                .iter()
                .map(|p| p.label.ok_or_else(|| ApiError::unprocessable("invalid_dataset", "every pair needs a label")))
                .collect()
        };
        let (pool_truth, test_labels) = (labels(&pool_pairs)?, labels(&test_pairs)?);

        let extractor = match model {
            Some(m) => m.extractor(),
            None => FeatureExtractor::fit(store, &dataio::distinct_images(&pool_pairs), &TrainConfig::default())?,
        };
        let pool = ActivePool::new(extractor.pair_features(store, &pool_pairs)?)?;
        let test_features = extractor.pair_features(store, &test_pairs)?;

        let pool_ids: Vec<String> = pool_pairs.iter().map(|p| pair_id(root, p)).collect();
        let index = pool_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self { reference, pool_pairs, pool_ids, pool_truth, pool, test_features, test_labels, index })
    }

    pub fn key(&self) -> String {
        self.reference.cache_key()
    }

    pub fn test(&self) -> TestSet<'_> {
        TestSet { features: &self.test_features, labels: &self.test_labels }
    }

    pub fn index_of(&self, pair_id: &str) -> Option<usize> {
        self.index.get(pair_id).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_ids_ignore_the_root_and_respect_order() {
        let pair = |root: &str| {
            FacePair::new(
                ImageRef::file(format!("{root}/a/a_0001.png")),
                ImageRef::file(format!("{root}/b/b_0002.png")),
                Some(false),
            )
        };
        let x = pair_id(Path::new("/data/one"), &pair("/data/one"));
        let y = pair_id(Path::new("/srv/two"), &pair("/srv/two"));
        assert_eq!(x, y);
        assert_eq!(x.len(), 24);
        let p = pair("/d");
        let swapped = FacePair::new(p.b.clone(), p.a.clone(), p.label);
        assert_ne!(pair_id(Path::new("/d"), &p), pair_id(Path::new("/d"), &swapped));
    }

    #[test]
    fn dataset_paths_stay_inside_the_root() {
        for bad in ["../pairs.txt", "/etc/passwd", "a/../../b"] {
            let r = DatasetRef { pairs: bad.into(), test_folds: 1 };
            assert!(r.resolve(Path::new("/data")).is_err(), "{bad}");
        }
        let ok = DatasetRef { pairs: "sub/pairs.txt".into(), test_folds: 1 };
        assert_eq!(ok.resolve(Path::new("/data")).unwrap(), Path::new("/data/sub/pairs.txt"));
    }
}

//! # facehop-core
//!
//! Low-resolution face verification built on successive subspace learning.
//!
//! A face is normalized to 32×32 pixels and split into a luma plane and a
//! two-channel chroma plane. Each plane goes through its own three-level
//! tree of channel-wise Saab transforms ([`pixelhop`]), learned in a single
//! feedforward pass with no back-propagation. Two faces are compared by
//! cosine similarities and length ratios between corresponding regions,
//! channels and levels ([`pairfeat`]); a logistic regression per plane and a
//! three-parameter meta classifier turn those into a match probability
//! ([`classify`]).
//!
//! Because the transform is unsupervised, labels are only needed for the
//! classifiers, which makes the model a good fit for pool-based active
//! learning ([`active`]).
//!
//! ```no_run
//! use facehop_core::{dataio, pipeline};
//!
//! let spec = dataio::SyntheticSpec::new(20, 10, 4.0, 7);
//! let data = dataio::make_synthetic(&spec).unwrap();
//! let store = data.store();
//! let model = pipeline::train_verifier(&store, &data.pairs, &pipeline::TrainConfig::default()).unwrap();
//! println!("Y feature dim = {}", model.submodel_y.layout.dim());
//! ```

pub mod active;
pub mod classify;
pub mod container;
pub mod dataio;
mod error;
pub mod linalg;
pub mod pairfeat;
pub mod pipeline;
pub mod pixelhop;
pub mod preprocess;
pub mod saab;

pub use error::{Error, Result};
pub use pairfeat::{ChannelStats, FeatureLayout, PairFeature};
pub use pixelhop::{HopOutputs, PixelHopConfig, PixelHopModel};
pub use preprocess::{FacePlanes, ImageTensor, RgbImage};
pub use classify::{LinearModel, VerificationModel};
pub use active::{ActiveConfig, ActiveState, Strategy};

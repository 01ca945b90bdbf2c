//! Semantic-guided scene recognition on CPU: adaptive confidence filtering
//! of segmentation scores, object-wise aggregation of backbone features,
//! global-local attention over the resulting node sequences, and the
//! two-stage training procedure around them.

pub mod aggregation;
pub mod dataset;
pub mod error;
pub mod features;
pub mod filtering;
pub mod gldm;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod recognition;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use aggregation::{aggregate, SemanticSequence};
pub use dataset::{Dataset, Sample};
pub use error::{Error, Result};
pub use features::{Backbone, BackboneConfig, FeatureGrid, PooledClassifier};
pub use filtering::{acf, argmax_labels, BinaryMask, LabelMap, ScoreTensor};
pub use gldm::{ExtendedSequence, Gldm, GldmConfig};
pub use io::{Checkpoint, Manifest, RunConfig, TensorFile};
pub use recognition::ClassifierHead;
pub use rng::RngState;
pub use synth::SceneSpec;
pub use tensor::{Parameter, Parameterized, Tensor};
pub use training::{SpacoNet, Variant};

//! Generation and evaluation of groups of correlated load profiles.
//!
//! The crate covers a small reverse-mode differentiation engine, the
//! profile-to-image codec, data ingestion and a synthetic corpus, the
//! adversarial generators, negative-sample construction, the realisticness
//! classifier, the statistical evaluation suite and the augmentation loop.

pub mod ada;
pub mod autodiff;
pub mod codec;
pub mod dataio;
pub mod dlc;
pub mod ganmodels;
pub mod nn;
pub mod nsg;
pub mod seed;
pub mod stats;

pub use codec::{EncodedImage, EncodingLevels};
pub use dataio::{Label, LoadGroup, MeterSeries, ProfilePool, Provenance, SampleSet, TemperatureSeries, WindowSpec};
pub use ganmodels::{GanModel, Mode, Preset};
pub use stats::{EvalReport, IndexKind, Level};

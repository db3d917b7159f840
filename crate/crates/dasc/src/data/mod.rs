//! Feature storage, the synthetic microphone-mismatch corpus generator, and
//! the per-configuration batch composer.

pub mod batch;
pub mod feature_io;
pub mod store;
pub mod synth;

pub use batch::{compose_batch, Batch, BatchSpec};
pub use feature_io::{feature_bytes, feature_from_bytes, load_feature_file, write_feature_file};
pub use store::{
    AdaptationEcho, ClipRecord, FeatureStore, GeneratorEcho, Split, StoreDims, StoreMeta,
};
pub use synth::{generate_synthetic, generator_curves, GeneratorCurves, GeneratorParams};

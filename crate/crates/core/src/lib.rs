pub mod ann;
mod codec;
pub mod eval;
pub mod features;
pub mod metadata;
pub mod ontology;
pub mod pca;
pub mod persistence;
pub mod recognition;
pub mod vector;

pub use codec::DecodeError;
pub use ann::{AnnForest, ForestParams, PrototypeId, RankedHit, SearchBudget};
pub use features::{RasterImage, RegionOfInterest};
pub use metadata::{MetaValue, MetadataRecord};
pub use ontology::{Closeness, Synset, Taxonomy};
pub use pca::PcaModel;
pub use recognition::{
    ConfidenceThresholds, Decision, EngineConfig, Outcome, Prototype, Query, RecognitionError, RecognitionResponse,
    Recognizer, Scope,
};
pub use vector::{Descriptor, Metric};

//! Multi-grained samples, filtering, the synthetic shapes-world corpus and
//! mixed batch assembly.

mod filter;
mod mix;
mod schema;
mod shapes;

pub use filter::{jaccard, validate_and_filter, FilterConfig, FilterRule, Rejection, RejectionReport};
pub use mix::{resolve_sources, Batch, BatchItem, BatchSampler, MixSpec, SamplerState, Source, View};
pub use schema::{
    count_kinds, decode_ppm, encode_ppm, read_records, Annotation, AnnotationKind, Dataset, DatasetManifest, Media,
    MultiGrainedSample, DATASET_FORMAT_VERSION, MANIFEST_FILE, RECORDS_FILE, VOCAB_FILE,
};
pub use shapes::{generate_shapes_video, generate_shapes_world, Lexicon, Shape, ShapesConfig, COLORS};

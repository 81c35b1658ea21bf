//! Dataset bundles: schema, class table, samples, on-disk format, the
//! synthetic generator and few-shot episode sampling.

mod bundle;
mod episodes;
mod schema;
mod synth;
mod tensorfile;

pub use bundle::{
    load_bundle, save_bundle, DatasetBundle, InputKind, PartAnnotation, Partition, SampleRecord,
    SEEN_TEST_STRIDE,
};
pub use episodes::{make_episodes, Episode};
pub use schema::{AttributeSchema, ClassInfo, ClassTable, Split};
pub use synth::{generate_synthetic, signature_of, validate_signatures, SlotLayout, SynthConfig};
pub use tensorfile::{
    read_records, write_records, AnyTensor, TensorRef, TENSOR_FORMAT_VERSION, TENSOR_MAGIC,
};

pub(crate) use tensorfile::check_magic;

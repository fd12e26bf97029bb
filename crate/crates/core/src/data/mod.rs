//! On-disk formats, labels, synthetic recordings and checkpoints.
//!
//! Every format is a JSON manifest next to little-endian binary payloads
//! protected by CRC-64 checksums; see `docs/formats.md`.

mod bundle;
mod checkpoint;
mod segments;
mod synth;

pub use bundle::{
    binarize_deap_labels, binarize_rating, load_bundle, load_bundles, write_bundle, write_bundles, EegBundle, Label,
    RatingDimension, Trial, BUNDLE_MANIFEST, FORMAT_VERSION,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};
pub use segments::{load_segments, save_segments, Segment, SegmentSet, SEGMENTS_BLOB, SEGMENTS_MANIFEST};
pub use synth::{synth_generate, ClassBand, SynthProfile};

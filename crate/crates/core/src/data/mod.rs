//! Silhouette data: alignment, layouts, segment sampling, batches, and the
//! synthetic generator.

pub mod align;
pub mod layout;
pub mod sampler;
pub mod segment;
pub mod sequence;
pub mod synth;

pub use align::{align_frame, ALIGNED_HEIGHT, ALIGNED_WIDTH};
pub use layout::{
    load_casia_layout, load_casia_layout_with, load_oumvlp_layout, Condition, DatasetIndex,
    Protocol, Record, Split,
};
pub use sampler::{Batch, BatchSampler, BatchSpec};
pub use segment::sample_segment;
pub use sequence::{
    load_frame_dir, load_records, read_gray, write_gray, AlignedSequence, LabeledSequence,
};
pub use synth::{synth_generate, SynthSpec};

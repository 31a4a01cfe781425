//! Skeleton ingestion: NTU `.skeleton` files, joint trees and derived
//! modalities, and synthetic datasets.

pub mod skeleton;
pub mod synth;
pub mod topology;

pub use skeleton::{
    parse_ntu_skeleton, parse_sample_metadata, write_ntu_skeleton, Body, Frame, Joint, ParseError, SampleMetadata,
    SkeletonSequence,
};
pub use synth::{split_every, synth_dataset, synth_long_range, LongRangeConfig, SynthConfig};
pub use topology::{derive_modalities, JointTopology, Modalities, Modality, TopologyError};

//! Feature-pack format, split validation, and synthetic data.
//!
//! A pack directory holds `manifest.json` plus two headerless little-endian
//! `f32` blobs, `visual.f32` (`n × visual_dim`) and `embeddings.f32`
//! (`(attributes + objects) × embed_dim`, attributes first).

mod pack;
mod stats;
mod synth;

pub use pack::{
    load_pack, save_pack, FeaturePack, ImageRecord, Split, EMBEDDINGS_FILE, MANIFEST_FILE, PACK_VERSION, VISUAL_FILE,
};
pub use stats::{pack_stats, PackStats};
pub use synth::{generate_synthetic, partition_compositions, SynthSpec};

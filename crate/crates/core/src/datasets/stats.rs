use std::collections::BTreeMap;

use serde::Serialize;

use super::pack::{FeaturePack, Split};

/// Dataset-level counts in the shape of a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PackStats {
    pub attributes: usize,
    pub objects: usize,
    pub compositions: usize,
    pub train_compositions: usize,
    pub val_compositions: usize,
    pub test_compositions: usize,
    pub images: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub visual_dim: usize,
    pub embed_dim: usize,
    /// attributes-per-image → image count
    pub attrs_per_image: BTreeMap<usize, usize>,
}

pub fn pack_stats(pack: &FeaturePack) -> PackStats {
    let mut hist = BTreeMap::new();
    for r in &pack.images {
        *hist.entry(r.attrs.len()).or_insert(0) += 1;
    }
    PackStats {
        attributes: pack.attribute_count(),
        objects: pack.object_count(),
        compositions: pack.all_compositions().len(),
        train_compositions: pack.compositions(Split::Train).len(),
        val_compositions: pack.compositions(Split::Val).len(),
        test_compositions: pack.compositions(Split::Test).len(),
        images: pack.images.len(),
        train_images: pack.indices(Split::Train).len(),
        val_images: pack.indices(Split::Val).len(),
        test_images: pack.indices(Split::Test).len(),
        visual_dim: pack.visual_dim(),
        embed_dim: pack.embed_dim(),
        attrs_per_image: hist,
    }
}

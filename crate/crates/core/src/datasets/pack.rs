use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::composition::Composition;
use crate::error::{Error, Result};
use crate::linguistic::NodeEmbeddings;
use crate::numerics::Tensor;

pub const PACK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VISUAL_FILE: &str = "visual.f32";
pub const EMBEDDINGS_FILE: &str = "embeddings.f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub attrs: Vec<usize>,
    pub obj: usize,
    pub split: Split,
}

impl ImageRecord {
    pub fn composition(&self) -> Composition {
        Composition::new(self.attrs.clone(), self.obj)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    visual_dim: usize,
    embed_dim: usize,
    attributes: Vec<String>,
    objects: Vec<String>,
    images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

/// Precomputed visual features, node embeddings, labels and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub images: Vec<ImageRecord>,
    /// `n × m`, one row per image record.
    pub visual: Tensor,
    /// `(attributes + objects) × d`, attributes first.
    pub embeddings: Tensor,
    pub provenance: Option<String>,
}

impl FeaturePack {
    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn node_embeddings(&self) -> Result<NodeEmbeddings> {
        NodeEmbeddings::new(self.embeddings.clone(), self.attribute_count(), self.object_count())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct compositions of a split, sorted.
    pub fn compositions(&self, split: Split) -> Vec<Composition> {
        let set: BTreeSet<Composition> = self
            .images
            .iter()
            .filter(|r| r.split == split)
            .map(ImageRecord::composition)
            .collect();
        set.into_iter().collect()
    }

    /// Distinct compositions over every split, sorted.
    pub fn all_compositions(&self) -> Vec<Composition> {
        let set: BTreeSet<Composition> = self.images.iter().map(ImageRecord::composition).collect();
        set.into_iter().collect()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        lookup(&self.attributes, name, "attribute")
    }

    pub fn object_index(&self, name: &str) -> Result<usize> {
        lookup(&self.objects, name, "object")
    }

    pub fn validate(&self) -> Result<()> {
        let (na, no) = (self.attribute_count(), self.object_count());
        if self.visual.rows() != self.images.len() {
            return Err(Error::Data(format!(
                "{} visual rows for {} image records",
                self.visual.rows(),
                self.images.len()
            )));
        }
        if self.embeddings.rows() != na + no {
            return Err(Error::Data(format!(
                "{} embedding rows for {na} attributes + {no} objects",
                self.embeddings.rows()
            )));
        }
        if self.visual_dim() == 0 || self.embed_dim() == 0 {
            return Err(Error::Data("visual_dim and embed_dim must be >= 1".into()));
        }
        let mut ids = HashSet::new();
        for r in &self.images {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate image id `{}`", r.id)));
            }
            if r.attrs.is_empty() {
                return Err(Error::Data(format!("image `{}` has no attribute", r.id)));
            }
            if let Some(a) = r.attrs.iter().find(|&&a| a >= na) {
                return Err(Error::Data(format!(
                    "image `{}`: attribute index {a} out of range ({na} attributes)",
                    r.id
                )));
            }
            if r.attrs.iter().collect::<HashSet<_>>().len() != r.attrs.len() {
                return Err(Error::Data(format!("image `{}` repeats an attribute", r.id)));
            }
            if r.obj >= no {
                return Err(Error::Data(format!(
                    "image `{}`: object index {} out of range ({no} objects)",
                    r.id, r.obj
                )));
            }
        }
        if !self.images.iter().any(|r| r.split == Split::Train) {
            return Err(Error::Data("train split is empty".into()));
        }
        if !self.visual.is_finite() || !self.embeddings.is_finite() {
            return Err(Error::Data("non-finite feature values".into()));
        }
        let train: BTreeSet<Composition> = self.compositions(Split::Train).into_iter().collect();
        let overlap: Vec<String> = self
            .compositions(Split::Test)
            .into_iter()
            .filter(|c| train.contains(c))
            .map(|c| c.label(&self.attributes, &self.objects))
            .collect();
        if !overlap.is_empty() {
            return Err(Error::SplitOverlap(overlap.join("; ")));
        }
        Ok(())
    }
}

fn lookup(names: &[String], name: &str, kind: &'static str) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == name) {
        return Ok(i);
    }
    let lower = name.to_lowercase();
    let mut near: Vec<(usize, &String)> = names
        .iter()
        .map(|n| (edit_distance(&n.to_lowercase(), &lower), n))
        .filter(|(d, n)| *d <= 2.max(name.len() / 3) || n.to_lowercase().contains(&lower))
        .collect();
    near.sort();
    Err(Error::UnknownName {
        kind,
        name: name.to_string(),
        near: near.into_iter().take(5).map(|(_, n)| n.clone()).collect(),
    })
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes ({rows}x{cols} f32), found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn save_pack(pack: &FeaturePack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    pack.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: PACK_VERSION,
        visual_dim: pack.visual_dim(),
        embed_dim: pack.embed_dim(),
        attributes: pack.attributes.clone(),
        objects: pack.objects.clone(),
        images: pack.images.clone(),
        provenance: pack.provenance.clone(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    write_f32(&dir.join(VISUAL_FILE), &pack.visual)?;
    write_f32(&dir.join(EMBEDDINGS_FILE), &pack.embeddings)
}

/// Reads and fully validates a pack directory.
pub fn load_pack(dir: impl AsRef<Path>) -> Result<FeaturePack> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    if manifest.version != PACK_VERSION {
        return Err(Error::Data(format!(
            "unsupported pack version {} (expected {PACK_VERSION})",
            manifest.version
        )));
    }
    let n_nodes = manifest.attributes.len() + manifest.objects.len();
    let visual = read_f32(&dir.join(VISUAL_FILE), manifest.images.len(), manifest.visual_dim)?;
    let embeddings = read_f32(&dir.join(EMBEDDINGS_FILE), n_nodes, manifest.embed_dim)?;
    let pack = FeaturePack {
        attributes: manifest.attributes,
        objects: manifest.objects,
        images: manifest.images,
        visual,
        embeddings,
        provenance: manifest.provenance,
    };
    pack.validate()?;
    Ok(pack)
}

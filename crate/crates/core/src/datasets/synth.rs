//! Seeded synthetic packs with additive attribute/object structure.
//!
//! Each attribute and object gets a unit-norm concept vector. An image of
//! `(a, o)` is `(c_a + c_o + noise) · L` for a fixed random map `L` into the
//! visual space, and node embeddings are the concept vectors plus a little
//! noise, so unseen compositions are reachable from the seen ones.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pack::{FeaturePack, ImageRecord, Split};
use crate::composition::Composition;
use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub attribute_count: usize,
    pub object_count: usize,
    pub seen: usize,
    pub unseen: usize,
    pub images_per_composition: usize,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub noise_std: f64,
    #[serde(default = "default_embed_noise")]
    pub embed_noise_std: f64,
    pub seed: u64,
}

fn default_embed_noise() -> f64 {
    0.01
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            attribute_count: 6,
            object_count: 6,
            seen: 20,
            unseen: 8,
            images_per_composition: 50,
            visual_dim: 32,
            embed_dim: 16,
            noise_std: 0.1,
            embed_noise_std: default_embed_noise(),
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let grid = self.attribute_count * self.object_count;
        if self.attribute_count == 0 || self.object_count == 0 {
            return Err(Error::Config("need at least one attribute and one object".into()));
        }
        if self.seen + self.unseen > grid {
            return Err(Error::Config(format!(
                "{} seen + {} unseen compositions exceed the {}x{} grid ({grid})",
                self.seen, self.unseen, self.attribute_count, self.object_count
            )));
        }
        if self.seen < self.attribute_count.max(self.object_count) {
            return Err(Error::Config(format!(
                "{} seen compositions cannot cover {} attributes and {} objects",
                self.seen, self.attribute_count, self.object_count
            )));
        }
        if self.images_per_composition == 0 || self.visual_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("image count and dims must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.embed_noise_std >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        (self.seen + self.unseen) * self.images_per_composition
    }
}

/// Splits the attribute×object grid into seen and unseen sets such that every
/// attribute and every object occurs in some seen composition.
pub fn partition_compositions(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Composition>, Vec<Composition>)> {
    spec.validate()?;
    let (na, no) = (spec.attribute_count, spec.object_count);
    let mut attrs: Vec<usize> = (0..na).collect();
    let mut objs: Vec<usize> = (0..no).collect();
    attrs.shuffle(rng);
    objs.shuffle(rng);
    let mut seen: Vec<Composition> = (0..na.max(no))
        .map(|i| Composition::single(attrs[i % na], objs[i % no]))
        .collect();
    seen.sort();
    seen.dedup();
    let mut rest: Vec<Composition> = (0..na)
        .flat_map(|a| (0..no).map(move |o| Composition::single(a, o)))
        .filter(|c| seen.binary_search(c).is_err())
        .collect();
    rest.shuffle(rng);
    let extra = spec.seen - seen.len();
    seen.extend(rest.drain(..extra));
    let unseen: Vec<Composition> = rest.into_iter().take(spec.unseen).collect();
    seen.sort();
    let mut unseen = unseen;
    unseen.sort();
    Ok((seen, unseen))
}

fn to_f32_precision(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<FeaturePack> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_nodes = spec.attribute_count + spec.object_count;

    let mut concepts = Tensor::randn(n_nodes, spec.embed_dim, 1.0, &mut rng);
    for r in 0..n_nodes {
        let row = concepts.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let lift = Tensor::randn(spec.embed_dim, spec.visual_dim, 1.0, &mut rng);
    let (seen, unseen) = partition_compositions(spec, &mut rng)?;

    let per = spec.images_per_composition;
    let mut latent = Tensor::zeros(spec.image_count(), spec.embed_dim);
    let mut images = Vec::with_capacity(spec.image_count());
    let labelled = seen
        .iter()
        .map(|c| (c, Split::Train))
        .chain(unseen.iter().map(|c| (c, Split::Test)));
    for (ci, (comp, split)) in labelled.enumerate() {
        let obj_row = spec.attribute_count + comp.obj;
        let noise = Tensor::randn(per, spec.embed_dim, spec.noise_std, &mut rng);
        for k in 0..per {
            let idx = ci * per + k;
            let row = latent.row_mut(idx);
            for (j, v) in row.iter_mut().enumerate() {
                *v = concepts.get(comp.attrs[0], j) + concepts.get(obj_row, j) + noise.get(k, j);
            }
            images.push(ImageRecord {
                id: format!("img{idx:06}"),
                attrs: comp.attrs.clone(),
                obj: comp.obj,
                split,
            });
        }
    }
    let visual = to_f32_precision(matmul(&latent, &lift)?);
    let embed_noise = Tensor::randn(n_nodes, spec.embed_dim, spec.embed_noise_std, &mut rng);
    let embeddings = to_f32_precision(concepts.add(&embed_noise)?);

    let pack = FeaturePack {
        attributes: (0..spec.attribute_count).map(|i| format!("attr{i}")).collect(),
        objects: (0..spec.object_count).map(|i| format!("obj{i}")).collect(),
        images,
        visual,
        embeddings,
        provenance: Some(format!("synthetic: {}", serde_json::to_string(spec)?)),
    };
    pack.validate()?;
    Ok(pack)
}

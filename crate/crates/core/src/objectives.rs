//! Mask matrices and the fusion, triplet and decoding losses.
//!
//! A mask row selects the attribute and object nodes of one composition, so
//! `Y·Z` turns the node matrix `Z (N×k)` into one latent vector per image.
//! All distances are per-row Euclidean norms averaged over the batch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::composition::Composition;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Positive,
    Negative,
    Candidate,
}

/// How multi-attribute rows combine node embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Plain mask product: attribute embeddings are summed.
    #[default]
    Sum,
    /// Attribute embeddings are averaged before adding the object.
    Mean,
}

/// 0-1 selector over the `attribute_count + object_count` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    pub matrix: Tensor,
    pub kind: MaskKind,
    pub attribute_count: usize,
}

impl MaskMatrix {
    pub fn from_compositions(
        comps: &[Composition],
        attribute_count: usize,
        object_count: usize,
        kind: MaskKind,
    ) -> Result<Self> {
        let n = attribute_count + object_count;
        let mut matrix = Tensor::zeros(comps.len(), n);
        for (r, c) in comps.iter().enumerate() {
            if c.attrs.is_empty() {
                return Err(Error::Data(format!("composition {c} has no attribute")));
            }
            if let Some(&bad) = c.attrs.iter().find(|&&a| a >= attribute_count) {
                return Err(Error::Data(format!(
                    "attribute index {bad} out of range ({attribute_count} attributes)"
                )));
            }
            if c.obj >= object_count {
                return Err(Error::Data(format!(
                    "object index {} out of range ({object_count} objects)",
                    c.obj
                )));
            }
            for &a in &c.attrs {
                matrix.set(r, a, 1.0);
            }
            matrix.set(r, attribute_count + c.obj, 1.0);
        }
        Ok(Self {
            matrix,
            kind,
            attribute_count,
        })
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn node_count(&self) -> usize {
        self.matrix.cols()
    }

    /// Recovers the composition encoded in row `r`.
    pub fn composition(&self, r: usize) -> Result<Composition> {
        let row = self.matrix.row(r);
        let attrs: Vec<usize> = (0..self.attribute_count).filter(|&i| row[i] != 0.0).collect();
        let objs: Vec<usize> = (self.attribute_count..row.len())
            .filter(|&i| row[i] != 0.0)
            .map(|i| i - self.attribute_count)
            .collect();
        if objs.len() != 1 || attrs.is_empty() {
            return Err(Error::Contract(format!(
                "mask row {r} selects {} attributes and {} objects",
                attrs.len(),
                objs.len()
            )));
        }
        Ok(Composition::new(attrs, objs[0]))
    }

    /// Mixing weights applied to `Z`: the mask itself for sum pooling, or
    /// attribute entries scaled by 1/|attrs| for mean pooling.
    pub fn weights(&self, pooling: Pooling) -> Tensor {
        match pooling {
            Pooling::Sum => self.matrix.clone(),
            Pooling::Mean => {
                let mut w = self.matrix.clone();
                for r in 0..w.rows() {
                    let row = w.row_mut(r);
                    let count = row[..self.attribute_count].iter().filter(|&&v| v != 0.0).count();
                    if count > 1 {
                        for v in &mut row[..self.attribute_count] {
                            *v /= count as f64;
                        }
                    }
                }
                w
            }
        }
    }
}

/// Training mask `Y`: ones at each image's attribute nodes and object node.
pub fn build_positive_mask(labels: &[Composition], attribute_count: usize, object_count: usize) -> Result<MaskMatrix> {
    MaskMatrix::from_compositions(labels, attribute_count, object_count, MaskKind::Positive)
}

/// Negative mask `Ỹ`: for each row, a composition drawn uniformly from
/// `pool` excluding the row's own composition.
pub fn sample_negative_mask<R: Rng + ?Sized>(
    positive: &MaskMatrix,
    pool: &[Composition],
    rng: &mut R,
) -> Result<MaskMatrix> {
    let mut distinct = pool.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Contract(format!(
            "negative sampling needs at least 2 distinct compositions, pool has {}",
            distinct.len()
        )));
    }
    let object_count = positive.node_count() - positive.attribute_count;
    let mut negatives = Vec::with_capacity(positive.rows());
    for r in 0..positive.rows() {
        let truth = positive.composition(r)?;
        let choice = match distinct.binary_search(&truth) {
            Ok(pos) => {
                let k = rng.random_range(0..distinct.len() - 1);
                if k >= pos {
                    k + 1
                } else {
                    k
                }
            }
            Err(_) => rng.random_range(0..distinct.len()),
        };
        negatives.push(distinct[choice].clone());
    }
    MaskMatrix::from_compositions(&negatives, positive.attribute_count, object_count, MaskKind::Negative)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.beta, self.gamma];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {ws:?}")));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one of alpha, beta, gamma must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("triplet margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }

    /// Zeroes the weights of terms not in `set`.
    pub fn restricted(self, set: LossSet) -> Self {
        let (tri, de) = match set {
            LossSet::Fus => (false, false),
            LossSet::FusTri => (true, false),
            LossSet::FusDe => (false, true),
            LossSet::All => (true, true),
        };
        Self {
            beta: if tri { self.beta } else { 0.0 },
            gamma: if de { self.gamma } else { 0.0 },
            ..self
        }
    }
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSet {
    #[serde(rename = "fus")]
    Fus,
    #[serde(rename = "fus+tri")]
    FusTri,
    #[serde(rename = "fus+de")]
    FusDe,
    #[serde(rename = "all")]
    #[default]
    All,
}

impl FromStr for LossSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fus" => LossSet::Fus,
            "fus+tri" => LossSet::FusTri,
            "fus+de" => LossSet::FusDe,
            "all" | "fus+tri+de" => LossSet::All,
            other => return Err(Error::Config(format!("unknown loss set `{other}`"))),
        })
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSet::Fus => "fus",
            LossSet::FusTri => "fus+tri",
            LossSet::FusDe => "fus+de",
            LossSet::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub fusion: f64,
    pub triplet: f64,
    pub decoding: f64,
    /// `λ‖A‖₁`, already weighted; 0 unless a sparse random graph is active.
    pub sparsity: f64,
}

/// `αL_fus + βL_tri + γL_de + λ‖A‖₁`
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [
        ("fusion loss", c.fusion),
        ("triplet loss", c.triplet),
        ("decoding loss", c.decoding),
        ("sparsity penalty", c.sparsity),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(w.alpha * c.fusion + w.beta * c.triplet + w.gamma * c.decoding + c.sparsity)
}

/// Per-row Euclidean distances `‖aᵢ − bᵢ‖` as a column.
pub fn row_distances(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    Ok(tape.row_norms(diff))
}

/// Batch mean of `‖Xᶜᵢ − (YZ)ᵢ‖`; `yz` is the already-masked target.
pub fn fusion_var(tape: &mut Tape, xc: Var, yz: Var) -> Result<Var> {
    let d = row_distances(tape, xc, yz)?;
    Ok(tape.mean(d))
}

/// Batch mean of `max(0, d(Xᶜ, YZ) − d(Xᶜ, ỸZ) + m)`.
pub fn triplet_var(tape: &mut Tape, xc: Var, yz_pos: Var, yz_neg: Var, margin: f64) -> Result<Var> {
    let dp = row_distances(tape, xc, yz_pos)?;
    let dn = row_distances(tape, xc, yz_neg)?;
    let gap = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Batch mean of `‖X⁰ᵢ − X̂ᵢ‖`.
pub fn decoding_var(tape: &mut Tape, x0: Var, xhat: Var) -> Result<Var> {
    let d = row_distances(tape, x0, xhat)?;
    Ok(tape.mean(d))
}

fn masked(tape: &mut Tape, y: &MaskMatrix, z: &Tensor, pooling: Pooling) -> Result<Var> {
    let yv = tape.constant(y.weights(pooling));
    let zv = tape.constant(z.clone());
    tape.matmul(yv, zv)
}

pub fn fusion_loss(xc: &Tensor, y: &MaskMatrix, z: &Tensor, pooling: Pooling) -> Result<f64> {
    let mut tape = Tape::new();
    let yz = masked(&mut tape, y, z, pooling)?;
    let x = tape.constant(xc.clone());
    let l = fusion_var(&mut tape, x, yz)?;
    Ok(tape.scalar(l))
}

pub fn triplet_loss(
    xc: &Tensor,
    y_pos: &MaskMatrix,
    y_neg: &MaskMatrix,
    z: &Tensor,
    margin: f64,
    pooling: Pooling,
) -> Result<f64> {
    if y_pos.matrix.shape() != y_neg.matrix.shape() {
        return Err(Error::dim("triplet_loss", y_pos.matrix.shape(), y_neg.matrix.shape()));
    }
    let mut tape = Tape::new();
    let pos = masked(&mut tape, y_pos, z, pooling)?;
    let neg = masked(&mut tape, y_neg, z, pooling)?;
    let x = tape.constant(xc.clone());
    let l = triplet_var(&mut tape, x, pos, neg, margin)?;
    Ok(tape.scalar(l))
}

pub fn decoding_loss(x0: &Tensor, xhat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(x0.clone());
    let b = tape.constant(xhat.clone());
    let l = decoding_var(&mut tape, a, b)?;
    Ok(tape.scalar(l))
}

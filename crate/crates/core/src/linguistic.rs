//! Linguistic pathway: attribute/object association graph and GCN encoder.
//!
//! Nodes are ordered attributes first, then objects. Four graph
//! constructions are supported: a learnable random adjacency (optionally
//! with an L1 penalty), a co-occurrence link graph over training
//! compositions, and a thresholded Gaussian-kernel graph over the input word
//! embeddings. [`GraphKind::None`] swaps the GCN for plain dense layers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::Composition;
use crate::error::{Error, Result};
use crate::numerics::{
    dense_stack, glorot, matmul, normalize_with_degrees, Activation, Bound, Dense, NormKind, ParamId, ParamStore,
    Parameter, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    #[serde(alias = "vanilla")]
    VanillaRandom,
    #[serde(alias = "sparse")]
    SparseRandom,
    Link,
    Embedding,
    /// Non-graph baseline: dense layers of the same widths.
    None,
}

impl GraphKind {
    pub fn is_learnable(self) -> bool {
        matches!(self, GraphKind::VanillaRandom | GraphKind::SparseRandom)
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::VanillaRandom => "vanilla_random",
            GraphKind::SparseRandom => "sparse_random",
            GraphKind::Link => "link",
            GraphKind::Embedding => "embedding",
            GraphKind::None => "none",
        })
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vanilla" | "vanilla_random" => GraphKind::VanillaRandom,
            "sparse" | "sparse_random" => GraphKind::SparseRandom,
            "link" => GraphKind::Link,
            "embedding" => GraphKind::Embedding,
            "none" => GraphKind::None,
            other => return Err(Error::Config(format!("unknown graph kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Symmetric,
    RowStochastic,
}

impl From<Normalization> for NormKind {
    fn from(n: Normalization) -> Self {
        match n {
            Normalization::Symmetric => NormKind::Symmetric,
            Normalization::RowStochastic => NormKind::RowStochastic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub kind: GraphKind,
    /// Kernel width of the embedding graph.
    pub sigma: f64,
    /// Binarization threshold of the embedding graph.
    pub threshold: f64,
    /// L1 weight on the raw adjacency of the sparse random graph.
    pub l1_weight: f64,
    /// Random adjacencies start as `U[0, init_scale)`.
    pub init_scale: f64,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            kind: GraphKind::SparseRandom,
            sigma: 1.0,
            threshold: 0.5,
            l1_weight: 1e-4,
            init_scale: 0.01,
            seed: 0,
            normalization: Normalization::Symmetric,
        }
    }
}

impl GraphSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("graph sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("graph threshold must lie in [0,1], got {}", self.threshold)));
        }
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return Err(Error::Config(format!("l1 weight must be >= 0, got {}", self.l1_weight)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("graph init_scale must be > 0, got {}", self.init_scale)));
        }
        Ok(())
    }

    /// λ actually applied: only the sparse random graph carries a penalty.
    pub fn effective_l1(&self) -> f64 {
        if self.kind == GraphKind::SparseRandom {
            self.l1_weight
        } else {
            0.0
        }
    }
}

/// Node feature matrix with its attribute/object partition.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings {
    pub tensor: Tensor,
    pub attribute_count: usize,
    pub object_count: usize,
}

impl NodeEmbeddings {
    pub fn new(tensor: Tensor, attribute_count: usize, object_count: usize) -> Result<Self> {
        if tensor.rows() != attribute_count + object_count {
            return Err(Error::Data(format!(
                "{} node rows for {attribute_count} attributes + {object_count} objects",
                tensor.rows()
            )));
        }
        Ok(Self {
            tensor,
            attribute_count,
            object_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.attribute_count + self.object_count
    }

    pub fn object_node(&self, obj: usize) -> usize {
        self.attribute_count + obj
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub matrix: Tensor,
    pub learnable: bool,
    pub normalized: Option<Tensor>,
}

/// `exp(−‖zᵢ − zⱼ‖² / σ²)`
pub fn gaussian_kernel(zi: &[f64], zj: &[f64], sigma: f64) -> f64 {
    let d2: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (sigma * sigma)).exp()
}

pub fn build_graph(spec: &GraphSpec, z0: &NodeEmbeddings, train_compositions: &[Composition]) -> Result<Adjacency> {
    spec.validate()?;
    let n = z0.node_count();
    match spec.kind {
        GraphKind::VanillaRandom | GraphKind::SparseRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Ok(Adjacency {
                matrix: Tensor::uniform(n, n, 0.0, spec.init_scale, &mut rng),
                learnable: true,
                normalized: None,
            })
        }
        GraphKind::Link => {
            if train_compositions.is_empty() {
                return Err(Error::Contract("link graph needs at least one training composition".into()));
            }
            let mut a = Tensor::identity(n);
            for c in train_compositions {
                let o = z0.object_node(c.obj);
                if o >= n || c.attrs.iter().any(|&x| x >= z0.attribute_count) {
                    return Err(Error::Data(format!("composition {c} out of range for {n} nodes")));
                }
                for &attr in &c.attrs {
                    a.set(attr, o, 1.0);
                    a.set(o, attr, 1.0);
                }
            }
            Ok(Adjacency {
                matrix: a,
                learnable: false,
                normalized: None,
            })
        }
        GraphKind::Embedding => {
            let z = &z0.tensor;
            let mut a = Tensor::identity(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && gaussian_kernel(z.row(i), z.row(j), spec.sigma) > spec.threshold {
                        a.set(i, j, 1.0);
                    }
                }
            }
            Ok(Adjacency {
                matrix: a,
                learnable: false,
                normalized: None,
            })
        }
        GraphKind::None => Ok(Adjacency {
            matrix: Tensor::identity(n),
            learnable: false,
            normalized: Some(Tensor::identity(n)),
        }),
    }
}

/// Matrix with self-loops that gets degree-normalized: `|A| + I` for a
/// learnable adjacency, and `A` with its diagonal set to 1 for a fixed one.
pub fn with_self_loops(a: &Adjacency) -> Tensor {
    let n = a.matrix.rows();
    if a.learnable {
        let mut m = a.matrix.map(f64::abs);
        for i in 0..n {
            m.set(i, i, m.get(i, i) + 1.0);
        }
        m
    } else {
        let mut m = a.matrix.clone();
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }
}

/// `Â = D^{-1/2} (A + I) D^{-1/2}` (or `D^{-1}(A + I)`), stored in `normalized`.
pub fn normalize_adjacency(a: &Adjacency, kind: Normalization) -> Result<Adjacency> {
    if a.matrix.rows() != a.matrix.cols() {
        return Err(Error::dim("normalize_adjacency", a.matrix.shape(), a.matrix.shape()));
    }
    if !a.matrix.is_finite() {
        return Err(Error::NonFinite("adjacency".into()));
    }
    let normalized = normalize_with_degrees(&with_self_loops(a), kind.into())?;
    Ok(Adjacency {
        matrix: a.matrix.clone(),
        learnable: a.learnable,
        normalized: Some(normalized),
    })
}

/// `λ · Σ|A(i,j)|` on a learnable adjacency.
pub fn sparsity_penalty(a: &Adjacency, l1_weight: f64) -> Result<f64> {
    if !a.learnable {
        return Err(Error::Contract("sparsity penalty applies only to a learnable adjacency".into()));
    }
    Ok(l1_weight * a.matrix.data().iter().map(|v| v.abs()).sum::<f64>())
}

/// GCN propagation with a fixed `Â`: `Zˡ⁺¹ = f(Â Zˡ Wˡ)`, LeakyReLU between
/// layers and a linear last layer.
pub fn gcn_forward(z0: &NodeEmbeddings, a_hat: &Tensor, weights: &[Parameter], slope: f64) -> Result<NodeEmbeddings> {
    if weights.is_empty() {
        return Err(Error::Contract("gcn needs at least one layer".into()));
    }
    let n = z0.node_count();
    if a_hat.shape() != (n, n) {
        return Err(Error::dim("gcn_forward adjacency", a_hat.shape(), (n, n)));
    }
    let mut z = z0.tensor.clone();
    for (l, w) in weights.iter().enumerate() {
        let h = matmul(a_hat, &matmul(&z, &w.value)?)?;
        z = if l + 1 < weights.len() {
            h.map(|v| Activation::LeakyRelu(slope).apply(v))
        } else {
            h
        };
    }
    NodeEmbeddings::new(z, z0.attribute_count, z0.object_count)
}

#[derive(Clone, Debug, PartialEq)]
enum Encoder {
    Gcn(Vec<ParamId>),
    Dense(Vec<Dense>),
}

/// GCN (or dense baseline) over the node embeddings, with its adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct LinguisticPathway {
    pub spec: GraphSpec,
    pub dims: Vec<usize>,
    pub slope: f64,
    encoder: Encoder,
    /// Raw learnable adjacency for the random graph kinds.
    pub adjacency: Option<ParamId>,
    /// Precomputed `Â` for fixed graph kinds.
    pub fixed_normalized: Option<Tensor>,
}

impl LinguisticPathway {
    /// Registers weights (and the learnable adjacency, if any) in `store`.
    /// `dims` are the output widths; the last one is the latent `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        spec: GraphSpec,
        z0: &NodeEmbeddings,
        train_compositions: &[Composition],
        dims: &[usize],
        slope: f64,
        dense_bias: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Config(format!("gcn widths must be non-empty and >= 1, got {dims:?}")));
        }
        let adj = build_graph(&spec, z0, train_compositions)?;
        let d = z0.tensor.cols();
        let encoder = if spec.kind == GraphKind::None {
            Encoder::Dense(dense_stack(
                store,
                "linguistic",
                d,
                dims,
                dense_bias,
                Activation::LeakyRelu(slope),
                Activation::Linear,
                rng,
            ))
        } else {
            let mut prev = d;
            Encoder::Gcn(
                dims.iter()
                    .enumerate()
                    .map(|(l, &w)| {
                        let id = store.add(format!("gcn.{l}.weight"), glorot(prev, w, rng));
                        prev = w;
                        id
                    })
                    .collect(),
            )
        };
        let (adjacency, fixed_normalized) = if adj.learnable {
            (Some(store.add("gcn.adjacency", adj.matrix)), None)
        } else if spec.kind == GraphKind::None {
            (None, None)
        } else {
            let normed = normalize_adjacency(&adj, spec.normalization)?;
            (None, normed.normalized)
        };
        Ok(Self {
            spec,
            dims: dims.to_vec(),
            slope,
            encoder,
            adjacency,
            fixed_normalized,
        })
    }

    /// Rebuilds a pathway around an existing parameter layout, e.g. after loading.
    pub(crate) fn from_parts(
        spec: GraphSpec,
        dims: Vec<usize>,
        slope: f64,
        store: &ParamStore,
        dense_bias: bool,
        fixed_normalized: Option<Tensor>,
    ) -> Result<Self> {
        let find = |name: &str| {
            store
                .iter()
                .position(|p| p.name == name)
                .map(ParamId)
                .ok_or_else(|| Error::ModelFormat(format!("missing parameter `{name}`")))
        };
        let encoder = if spec.kind == GraphKind::None {
            let mut prev = store
                .by_name("linguistic.0.weight")
                .map(|p| p.value.rows())
                .ok_or_else(|| Error::ModelFormat("missing parameter `linguistic.0.weight`".into()))?;
            let mut layers = Vec::new();
            for (i, &w) in dims.iter().enumerate() {
                layers.push(Dense {
                    weight: find(&format!("linguistic.{i}.weight"))?,
                    bias: if dense_bias {
                        Some(find(&format!("linguistic.{i}.bias"))?)
                    } else {
                        None
                    },
                    activation: if i + 1 == dims.len() {
                        Activation::Linear
                    } else {
                        Activation::LeakyRelu(slope)
                    },
                    in_dim: prev,
                    out_dim: w,
                });
                prev = w;
            }
            Encoder::Dense(layers)
        } else {
            Encoder::Gcn(
                (0..dims.len())
                    .map(|l| find(&format!("gcn.{l}.weight")))
                    .collect::<Result<_>>()?,
            )
        };
        let adjacency = if spec.kind.is_learnable() {
            Some(find("gcn.adjacency")?)
        } else {
            None
        };
        if matches!(spec.kind, GraphKind::Link | GraphKind::Embedding) && fixed_normalized.is_none() {
            return Err(Error::ModelFormat("fixed graph without a stored adjacency".into()));
        }
        Ok(Self {
            spec,
            dims,
            slope,
            encoder,
            adjacency,
            fixed_normalized,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(0)
    }

    /// Forward pass on the tape. Returns `Z` and, for a learnable graph, the
    /// raw adjacency node (for the sparsity term).
    pub fn forward_var(&self, tape: &mut Tape, bound: &Bound, z0: Var) -> Result<(Var, Option<Var>)> {
        match &self.encoder {
            Encoder::Dense(layers) => {
                let z = layers.iter().try_fold(z0, |h, layer| layer.forward(tape, bound, h))?;
                Ok((z, None))
            }
            Encoder::Gcn(weights) => {
                let (a_hat, raw) = match (self.adjacency, &self.fixed_normalized) {
                    (Some(id), _) => {
                        let raw = bound.var(id);
                        let n = tape.value(raw).rows();
                        let abs = tape.abs(raw);
                        let eye = tape.constant(Tensor::identity(n));
                        let loops = tape.add(abs, eye)?;
                        (tape.normalize(loops, self.spec.normalization.into())?, Some(raw))
                    }
                    (None, Some(fixed)) => (tape.constant(fixed.clone()), None),
                    (None, None) => return Err(Error::Contract("gcn without adjacency".into())),
                };
                let mut z = z0;
                for (l, &w) in weights.iter().enumerate() {
                    let zw = tape.matmul(z, bound.var(w))?;
                    let h = tape.matmul(a_hat, zw)?;
                    z = if l + 1 < weights.len() {
                        tape.leaky_relu(h, self.slope)
                    } else {
                        h
                    };
                }
                Ok((z, raw))
            }
        }
    }

    /// `Z` for the given node embeddings under the current parameters.
    pub fn encode(&self, store: &ParamStore, z0: &NodeEmbeddings) -> Result<NodeEmbeddings> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let z = tape.constant(z0.tensor.clone());
        let (out, _) = self.forward_var(&mut tape, &bound, z)?;
        NodeEmbeddings::new(tape.value(out).clone(), z0.attribute_count, z0.object_count)
    }

    /// Current adjacency (raw values for learnable graphs).
    pub fn adjacency(&self, store: &ParamStore) -> Option<Adjacency> {
        if let Some(id) = self.adjacency {
            Some(Adjacency {
                matrix: store.get(id).value.clone(),
                learnable: true,
                normalized: None,
            })
        } else {
            self.fixed_normalized.as_ref().map(|n| Adjacency {
                matrix: n.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                learnable: false,
                normalized: Some(n.clone()),
            })
        }
    }
}

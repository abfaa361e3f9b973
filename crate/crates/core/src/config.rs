//! Run configuration: one TOML file per experiment, flags layered on top.
//!
//! Every section is optional and falls back to the defaults below. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linguistic::{GraphKind, GraphSpec, Normalization};
use crate::numerics::{AdamConfig, DEFAULT_LEAKY_SLOPE};
use crate::objectives::{LossSet, LossWeights, Pooling};
use crate::visual::VisualPathwayConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Visual encoder widths; the decoder mirrors them back to the input width.
    pub encoder_dims: Vec<usize>,
    /// GCN (or dense baseline) widths; the last must equal the last encoder width.
    pub gcn_dims: Vec<usize>,
    pub clustering: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Bias terms on the visual encoder/decoder layers.
    pub visual_bias: bool,
    /// Bias terms on the dense baseline used when `graph.kind = "none"`.
    pub dense_bias: bool,
    pub leaky_slope: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder_dims: vec![1024, 2048, 1024],
            gcn_dims: vec![1024, 2048, 1024],
            clustering: true,
            temperature: None,
            visual_bias: false,
            dense_bias: true,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub kind: GraphKind,
    pub sigma: f64,
    pub threshold: f64,
    pub l1_weight: f64,
    pub init_scale: f64,
    pub normalization: Normalization,
}

impl Default for GraphSection {
    fn default() -> Self {
        let g = GraphSpec::default();
        Self {
            kind: g.kind,
            sigma: g.sigma,
            threshold: g.threshold,
            l1_weight: g.l1_weight,
            init_scale: g.init_scale,
            normalization: g.normalization,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
    pub set: LossSet,
    pub pooling: Pooling,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            margin: w.margin,
            set: LossSet::All,
            pooling: Pooling::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluate the validation split after every epoch and keep the best parameters.
    pub checkpoint_best: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            epochs: 50,
            batch_size: 128,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            checkpoint_best: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Test images are clustered in consecutive batches of this size, in
    /// dataset order. Defaults to the training batch size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Apply composition clustering to test batches (when the model clusters).
    pub cluster: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: None,
            cluster: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub graph: GraphSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Command-line overrides applied after the file is read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_cluster: bool,
    pub no_cluster_eval: bool,
    pub graph: Option<GraphKind>,
    pub loss: Option<LossSet>,
    pub gcn_layers: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

/// GCN widths for `layers` layers with latent width `k`: hidden widths follow
/// `k, 2k, k` and the last layer always outputs `k`.
pub fn gcn_dims_for_layers(k: usize, layers: usize) -> Result<Vec<usize>> {
    if !(1..=4).contains(&layers) {
        return Err(Error::Config(format!("gcn layers must lie in 1..=4, got {layers}")));
    }
    let mut dims: Vec<usize> = [k, 2 * k, k][..layers - 1].to_vec();
    dims.push(k);
    Ok(dims)
}

impl RunConfig {
    /// Small widths suited to synthetic packs on a single core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.encoder_dims = vec![64, 128, 64];
        c.model.gcn_dims = vec![64, 128, 64];
        c.train.lr = 1e-3;
        c.loss.margin = 2.0;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.no_cluster {
            self.model.clustering = false;
        }
        if o.no_cluster_eval {
            self.eval.cluster = false;
        }
        if let Some(kind) = o.graph {
            self.graph.kind = kind;
        }
        if let Some(set) = o.loss {
            self.loss.set = set;
        }
        if let Some(layers) = o.gcn_layers {
            self.model.gcn_dims = gcn_dims_for_layers(self.latent_dim(), layers)?;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        self.validate()
    }

    pub fn latent_dim(&self) -> usize {
        self.model.encoder_dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.encoder_dims.is_empty() || m.encoder_dims.contains(&0) {
            return Err(Error::Config(format!("encoder_dims must be non-empty and >= 1, got {:?}", m.encoder_dims)));
        }
        if m.gcn_dims.is_empty() || m.gcn_dims.contains(&0) {
            return Err(Error::Config(format!("gcn_dims must be non-empty and >= 1, got {:?}", m.gcn_dims)));
        }
        if m.gcn_dims.last() != m.encoder_dims.last() {
            return Err(Error::Config(format!(
                "latent widths differ: encoder ends at {}, gcn ends at {}",
                self.latent_dim(),
                m.gcn_dims.last().copied().unwrap_or(0)
            )));
        }
        if !(m.leaky_slope >= 0.0 && m.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope must lie in [0,1), got {}", m.leaky_slope)));
        }
        if let Some(t) = m.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature must be > 0, got {t}")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.eval.batch_size == Some(0) {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        self.graph_spec().validate()?;
        self.loss_weights().validate()?;
        self.adam().validate()
    }

    pub fn graph_spec(&self) -> GraphSpec {
        GraphSpec {
            kind: self.graph.kind,
            sigma: self.graph.sigma,
            threshold: self.graph.threshold,
            l1_weight: self.graph.l1_weight,
            init_scale: self.graph.init_scale,
            seed: self.seed,
            normalization: self.graph.normalization,
        }
    }

    /// Weights with inactive terms (per `loss.set`) zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            gamma: self.loss.gamma,
            margin: self.loss.margin,
        }
        .restricted(self.loss.set)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
        }
    }

    pub fn visual_config(&self, input_dim: usize) -> VisualPathwayConfig {
        let mut v = VisualPathwayConfig::mirrored(input_dim, &self.model.encoder_dims);
        v.clustering = self.model.clustering;
        v.temperature = self.model.temperature;
        v.bias = self.model.visual_bias;
        v
    }

    pub fn eval_batch_size(&self) -> usize {
        self.eval.batch_size.unwrap_or(self.train.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.lr, 1e-4);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nepoch = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_sections_and_aliases() {
        let c = RunConfig::from_toml_str("seed = 3\n[graph]\nkind = \"link\"\n[loss]\nset = \"fus+de\"").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.graph.kind, GraphKind::Link);
        assert_eq!(c.loss_weights().beta, 0.0);
        assert_eq!(c.loss_weights().gamma, 1.0);
        let s = RunConfig::from_toml_str("[graph]\nkind = \"sparse\"").unwrap();
        assert_eq!(s.graph.kind, GraphKind::SparseRandom);
    }

    #[test]
    fn mismatched_latent_rejected() {
        let err = RunConfig::from_toml_str("[model]\nencoder_dims = [8]\ngcn_dims = [4]").unwrap_err();
        assert!(err.to_string().contains("latent"));
    }

    #[test]
    fn layer_widths() {
        assert_eq!(gcn_dims_for_layers(16, 1).unwrap(), vec![16]);
        assert_eq!(gcn_dims_for_layers(16, 2).unwrap(), vec![16, 16]);
        assert_eq!(gcn_dims_for_layers(16, 3).unwrap(), vec![16, 32, 16]);
        assert_eq!(gcn_dims_for_layers(16, 4).unwrap(), vec![16, 32, 16, 16]);
        assert!(gcn_dims_for_layers(16, 5).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::desk();
        c.apply(&Overrides {
            seed: Some(9),
            no_cluster: true,
            graph: Some(GraphKind::None),
            gcn_layers: Some(2),
            batch_size: Some(32),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(c.seed, 9);
        assert!(!c.model.clustering);
        assert_eq!(c.graph.kind, GraphKind::None);
        assert_eq!(c.model.gcn_dims, vec![64, 64]);
        assert_eq!(c.eval_batch_size(), 32);
        assert!(c.apply(&Overrides { batch_size: Some(0), ..Overrides::default() }).is_err());
    }
}

//! Visual pathway: encoder, composition clustering, decoder.
//!
//! `X⁰ (b×m) → X (b×k) → Xᶜ (b×k) → X̂ (b×m)`. Composition clustering
//! re-expresses each encoded feature as a convex combination of the batch,
//! `Xᶜ = softmax_rows(X Xᵀ) X`, which pulls same-composition features
//! together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dense_stack, matmul, matmul_nt, softmax_rows, Activation, Bound, Dense, ParamStore, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualPathwayConfig {
    /// `m`
    pub input_dim: usize,
    /// Output widths of the encoder layers; the last one is the latent `k`.
    pub encoder_dims: Vec<usize>,
    /// Output widths of the decoder layers; the last one must equal `m`.
    pub decoder_dims: Vec<usize>,
    pub clustering: bool,
    /// Divides `X Xᵀ` before the softmax. `None` uses raw inner products.
    pub temperature: Option<f64>,
    pub bias: bool,
}

impl VisualPathwayConfig {
    /// Encoder `m → 1024 → 2048 → 1024` with the decoder mirrored back to `m`.
    pub fn standard(input_dim: usize) -> Self {
        Self::mirrored(input_dim, &[1024, 2048, 1024])
    }

    /// Decoder is the encoder reversed: hidden widths in reverse order, then `m`.
    pub fn mirrored(input_dim: usize, encoder_dims: &[usize]) -> Self {
        let mut decoder_dims: Vec<usize> = encoder_dims.iter().rev().skip(1).copied().collect();
        decoder_dims.push(input_dim);
        Self {
            input_dim,
            encoder_dims: encoder_dims.to_vec(),
            decoder_dims,
            clustering: true,
            temperature: None,
            bias: true,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder_dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_dims.is_empty() || self.decoder_dims.is_empty() {
            return Err(Error::Config("visual pathway needs m >= 1 and non-empty layer lists".into()));
        }
        if self.encoder_dims.iter().chain(&self.decoder_dims).any(|&d| d == 0) {
            return Err(Error::Config("visual layer widths must be >= 1".into()));
        }
        if self.decoder_dims.last() != Some(&self.input_dim) {
            return Err(Error::Config(format!(
                "last decoder width {:?} must equal input dim {}",
                self.decoder_dims.last(),
                self.input_dim
            )));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("clustering temperature must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualStage {
    Initial,
    Encoded,
    Clustered,
    Reconstructed,
}

/// A batch of visual features tagged with the pipeline stage it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub stage: VisualStage,
    pub tensor: Tensor,
}

impl VisualFeatures {
    pub fn initial(tensor: Tensor) -> Self {
        Self {
            stage: VisualStage::Initial,
            tensor,
        }
    }

    pub fn encoded(tensor: Tensor) -> Self {
        Self {
            stage: VisualStage::Encoded,
            tensor,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.tensor.rows()
    }

    fn expect(&self, stage: VisualStage, op: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Contract(format!("{op} expects {stage:?} features, got {:?}", self.stage)));
        }
        Ok(())
    }
}

/// Self-representation weights `softmax_rows(X Xᵀ / τ)`.
pub fn cluster_weights(x: &Tensor, temperature: Option<f64>) -> Result<Tensor> {
    let mut sim = matmul_nt(x, x)?;
    if let Some(t) = temperature {
        sim = sim.scale(1.0 / t);
    }
    Ok(softmax_rows(&sim))
}

/// `Xᶜ = softmax_rows(X Xᵀ) X` on encoded features.
pub fn composition_cluster(x: &VisualFeatures) -> Result<VisualFeatures> {
    x.expect(VisualStage::Encoded, "composition_cluster")?;
    if x.batch_size() == 0 {
        return Err(Error::Contract("composition clustering needs at least one row".into()));
    }
    let w = cluster_weights(&x.tensor, None)?;
    Ok(VisualFeatures {
        stage: VisualStage::Clustered,
        tensor: matmul(&w, &x.tensor)?,
    })
}

/// Differentiable clustering of the node `x`.
pub fn cluster_on_tape(tape: &mut Tape, x: Var, temperature: Option<f64>) -> Result<Var> {
    let mut sim = tape.matmul_nt(x, x)?;
    if let Some(t) = temperature {
        sim = tape.scale(sim, 1.0 / t);
    }
    let w = tape.softmax_rows(sim);
    tape.matmul(w, x)
}

/// Encoder and decoder stacks registered in a shared parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPathway {
    pub config: VisualPathwayConfig,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

impl VisualPathway {
    pub fn new<R: Rng + ?Sized>(config: VisualPathwayConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = dense_stack(
            store,
            "encoder",
            config.input_dim,
            &config.encoder_dims,
            config.bias,
            Activation::Linear,
            Activation::Linear,
            rng,
        );
        let decoder = dense_stack(
            store,
            "decoder",
            config.latent_dim(),
            &config.decoder_dims,
            config.bias,
            Activation::Linear,
            Activation::Linear,
            rng,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, x0: Var) -> Result<Var> {
        let cols = tape.value(x0).cols();
        if cols != self.config.input_dim {
            return Err(Error::dim(
                "encode",
                tape.value(x0).shape(),
                (self.config.input_dim, self.config.latent_dim()),
            ));
        }
        self.encoder.iter().try_fold(x0, |h, layer| layer.forward(tape, bound, h))
    }

    /// Clusters when enabled, otherwise passes `X` through unchanged.
    pub fn cluster_var(&self, tape: &mut Tape, x: Var, enabled: bool) -> Result<Var> {
        if enabled && tape.value(x).rows() > 0 {
            cluster_on_tape(tape, x, self.config.temperature)
        } else {
            Ok(x)
        }
    }

    pub fn decode_var(&self, tape: &mut Tape, bound: &Bound, xc: Var) -> Result<Var> {
        let cols = tape.value(xc).cols();
        if cols != self.config.latent_dim() {
            return Err(Error::dim(
                "decode",
                tape.value(xc).shape(),
                (self.config.latent_dim(), self.config.input_dim),
            ));
        }
        self.decoder.iter().try_fold(xc, |h, layer| layer.forward(tape, bound, h))
    }

    pub fn encode(&self, store: &ParamStore, x0: &VisualFeatures) -> Result<VisualFeatures> {
        x0.expect(VisualStage::Initial, "encode")?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(x0.tensor.clone());
        let out = self.encode_var(&mut tape, &bound, x)?;
        Ok(VisualFeatures {
            stage: VisualStage::Encoded,
            tensor: tape.value(out).clone(),
        })
    }

    /// Clustering as configured; with clustering off `Xᶜ := X`.
    pub fn cluster(&self, x: &VisualFeatures) -> Result<VisualFeatures> {
        x.expect(VisualStage::Encoded, "cluster")?;
        let tensor = if self.config.clustering && x.batch_size() > 0 {
            let w = cluster_weights(&x.tensor, self.config.temperature)?;
            matmul(&w, &x.tensor)?
        } else {
            x.tensor.clone()
        };
        Ok(VisualFeatures {
            stage: VisualStage::Clustered,
            tensor,
        })
    }

    pub fn decode(&self, store: &ParamStore, xc: &VisualFeatures) -> Result<VisualFeatures> {
        xc.expect(VisualStage::Clustered, "decode")?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(xc.tensor.clone());
        let out = self.decode_var(&mut tape, &bound, x)?;
        Ok(VisualFeatures {
            stage: VisualStage::Reconstructed,
            tensor: tape.value(out).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(m: usize, k: usize) -> (VisualPathway, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = VisualPathwayConfig {
            input_dim: m,
            encoder_dims: vec![k],
            decoder_dims: vec![m],
            clustering: true,
            temperature: None,
            bias: true,
        };
        let vp = VisualPathway::new(cfg, &mut store, &mut rng).unwrap();
        (vp, store)
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.get_mut(id).value = t;
    }

    #[test]
    fn identity_encoder_and_decoder() {
        let (vp, mut store) = single_layer(3, 3);
        set(&mut store, vp.encoder[0].weight, Tensor::identity(3));
        set(&mut store, vp.decoder[0].weight, Tensor::identity(3));
        let x0 = Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]]);
        let x = vp.encode(&store, &VisualFeatures::initial(x0.clone())).unwrap();
        assert_eq!(x.tensor, x0);
        let xc = VisualFeatures {
            stage: VisualStage::Clustered,
            tensor: x0.clone(),
        };
        assert_eq!(vp.decode(&store, &xc).unwrap().tensor, x0);
    }

    #[test]
    fn empty_batch_encodes_to_empty() {
        let (vp, store) = single_layer(4, 3);
        let x = vp.encode(&store, &VisualFeatures::initial(Tensor::zeros(0, 4))).unwrap();
        assert_eq!(x.tensor.shape(), (0, 3));
    }

    #[test]
    fn seeded_layer_matches_hand_matmul() {
        let (vp, store) = single_layer(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x0 = Tensor::randn(2, 4, 1.0, &mut rng);
        let x = vp.encode(&store, &VisualFeatures::initial(x0.clone())).unwrap();
        let w = &store.get(vp.encoder[0].weight).value;
        let b = &store.get(vp.encoder[0].bias.unwrap()).value;
        for i in 0..2 {
            for j in 0..3 {
                let mut acc = b.get(0, j);
                for p in 0..4 {
                    acc += x0.get(i, p) * w.get(p, j);
                }
                assert!((x.tensor.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_width_rejected() {
        let (vp, store) = single_layer(4, 3);
        let err = vp.encode(&store, &VisualFeatures::initial(Tensor::zeros(2, 5))).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn decoder_output_width_is_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = VisualPathwayConfig::mirrored(7, &[5, 9, 4]);
        assert_eq!(cfg.decoder_dims, vec![9, 5, 7]);
        let vp = VisualPathway::new(cfg, &mut store, &mut rng).unwrap();
        let xc = VisualFeatures {
            stage: VisualStage::Clustered,
            tensor: Tensor::randn(3, 4, 1.0, &mut rng),
        };
        assert_eq!(vp.decode(&store, &xc).unwrap().tensor.shape(), (3, 7));
    }

    #[test]
    fn two_layer_decoder_matches_composed_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = VisualPathwayConfig::mirrored(3, &[4, 2]);
        let vp = VisualPathway::new(cfg, &mut store, &mut rng).unwrap();
        let xc = Tensor::randn(3, 2, 1.0, &mut rng);
        let out = vp
            .decode(
                &store,
                &VisualFeatures {
                    stage: VisualStage::Clustered,
                    tensor: xc.clone(),
                },
            )
            .unwrap();
        let mut h = xc;
        for layer in &vp.decoder {
            h = matmul(&h, &store.get(layer.weight).value).unwrap();
            let b = &store.get(layer.bias.unwrap()).value;
            for r in 0..h.rows() {
                for c in 0..h.cols() {
                    h.set(r, c, h.get(r, c) + b.get(0, c));
                }
            }
        }
        assert!(out.tensor.sub(&h).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn cluster_single_row_is_identity() {
        let x = VisualFeatures::encoded(Tensor::from_rows(&[[0.3, -1.2, 4.0]]));
        assert_eq!(composition_cluster(&x).unwrap().tensor, x.tensor);
    }

    #[test]
    fn cluster_two_basis_rows() {
        let x = VisualFeatures::encoded(Tensor::identity(2));
        let xc = composition_cluster(&x).unwrap().tensor;
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        assert!((xc.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((xc.get(0, 1) - 0.26894).abs() < 1e-5);
        assert!((xc.get(1, 0) - 0.26894).abs() < 1e-5);
        assert!((xc.get(1, 1) - hi).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_are_fixed() {
        let row = [0.5, -0.25, 2.0];
        let x = VisualFeatures::encoded(Tensor::from_rows(&[row, row, row, row]));
        let xc = composition_cluster(&x).unwrap().tensor;
        assert!(xc.sub(&x.tensor).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn disabled_clustering_passes_through() {
        let (mut vp, _) = single_layer(2, 2);
        vp.config.clustering = false;
        let x = VisualFeatures::encoded(Tensor::identity(2));
        assert_eq!(vp.cluster(&x).unwrap().tensor, x.tensor);
    }

    #[test]
    fn stage_is_checked() {
        let x = VisualFeatures::initial(Tensor::identity(2));
        assert!(matches!(composition_cluster(&x), Err(Error::Contract(_))));
    }
}

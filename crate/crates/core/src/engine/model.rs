use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalSection, RunConfig};
use crate::datasets::{FeaturePack, Split};
use crate::error::{Error, Result};
use crate::linguistic::{LinguisticPathway, NodeEmbeddings};
use crate::numerics::{
    grad_check, AdamState, Bound, GradCheckConfig, GradCheckReport, ParamStore, Tape, Tensor, Var,
};
use crate::objectives::{
    build_positive_mask, decoding_var, fusion_var, sample_negative_mask, triplet_var, LossComponents, MaskMatrix,
};
use crate::visual::{VisualFeatures, VisualPathway};

/// Shape facts a model is bound to; a pack must agree before it is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub attribute_count: usize,
    pub object_count: usize,
}

impl ModelDims {
    pub fn of(pack: &FeaturePack) -> Self {
        Self {
            visual_dim: pack.visual_dim(),
            embed_dim: pack.embed_dim(),
            attribute_count: pack.attribute_count(),
            object_count: pack.object_count(),
        }
    }
}

/// Every learnable parameter plus optimizer moments and the run config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: RunConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub adam: Vec<AdamState>,
    pub visual: VisualPathway,
    pub linguistic: LinguisticPathway,
}

/// Inputs of one training step: features, `Y` and `Ỹ`.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub x0: Tensor,
    pub positive: MaskMatrix,
    pub negative: MaskMatrix,
}

impl BatchInputs {
    /// Gathers the rows `indices` of the pack and draws fresh negatives from `pool`.
    pub fn sample<R: rand::Rng + ?Sized>(
        pack: &FeaturePack,
        indices: &[usize],
        pool: &[crate::composition::Composition],
        rng: &mut R,
    ) -> Result<Self> {
        let labels: Vec<_> = indices.iter().map(|&i| pack.images[i].composition()).collect();
        let positive = build_positive_mask(&labels, pack.attribute_count(), pack.object_count())?;
        let negative = sample_negative_mask(&positive, pool, rng)?;
        Ok(Self {
            x0: pack.visual.select_rows(indices),
            positive,
            negative,
        })
    }
}

/// One forward pass of the full objective, ready for `backward`.
pub struct Objective {
    pub tape: Tape,
    pub bound: Bound,
    pub total: Var,
    pub components: LossComponents,
}

impl Objective {
    pub fn total_value(&self) -> f64 {
        self.tape.scalar(self.total)
    }
}

impl ModelState {
    /// Fresh parameters for `pack`, seeded from `config.seed`.
    pub fn new(config: &RunConfig, pack: &FeaturePack) -> Result<Self> {
        config.validate()?;
        let dims = ModelDims::of(pack);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let visual = VisualPathway::new(config.visual_config(dims.visual_dim), &mut store, &mut rng)?;
        let z0 = pack.node_embeddings()?;
        let linguistic = LinguisticPathway::new(
            config.graph_spec(),
            &z0,
            &pack.compositions(Split::Train),
            &config.model.gcn_dims,
            config.model.leaky_slope,
            config.model.dense_bias,
            &mut store,
            &mut rng,
        )?;
        let adam = store.iter().map(AdamState::for_param).collect();
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            adam,
            visual,
            linguistic,
        })
    }

    pub(crate) fn from_parts(
        config: RunConfig,
        dims: ModelDims,
        store: ParamStore,
        adam: Vec<AdamState>,
        visual: VisualPathway,
        linguistic: LinguisticPathway,
    ) -> Self {
        Self {
            config,
            dims,
            store,
            adam,
            visual,
            linguistic,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Same parameters with different inference options (eval batch size,
    /// test-time clustering). Training settings are untouched.
    pub fn with_eval(mut self, eval: EvalSection) -> Result<Self> {
        self.config.eval = eval;
        self.config.validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.visual.config.latent_dim()
    }

    pub fn check_pack(&self, pack: &FeaturePack) -> Result<()> {
        let found = ModelDims::of(pack);
        if found != self.dims {
            return Err(Error::Data(format!(
                "pack does not match the model: model {:?}, pack {:?}",
                self.dims, found
            )));
        }
        Ok(())
    }

    /// `Z`: latent embedding of every attribute and object node.
    pub fn node_latents(&self, pack: &FeaturePack) -> Result<Tensor> {
        self.check_pack(pack)?;
        let z0: NodeEmbeddings = pack.node_embeddings()?;
        Ok(self.linguistic.encode(&self.store, &z0)?.tensor)
    }

    /// `Xᶜ` of one batch, clustering only when both the model and `cluster` allow it.
    pub fn latent_features(&self, x0: &Tensor, cluster: bool) -> Result<Tensor> {
        let x = self.visual.encode(&self.store, &VisualFeatures::initial(x0.clone()))?;
        if cluster && self.visual.config.clustering {
            Ok(self.visual.cluster(&x)?.tensor)
        } else {
            Ok(x.tensor)
        }
    }

    /// Builds `αL_fus + βL_tri + γL_de + λ‖A‖₁` for `batch` with parameters
    /// taken from `store`, which must share this model's layout.
    pub fn objective(&self, store: &ParamStore, batch: &BatchInputs, z0: &Tensor) -> Result<Objective> {
        let w = self.config.loss_weights();
        let pooling = self.config.loss.pooling;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);

        let x0 = tape.constant(batch.x0.clone());
        let x = self.visual.encode_var(&mut tape, &bound, x0)?;
        let xc = self.visual.cluster_var(&mut tape, x, self.visual.config.clustering)?;
        let z0v = tape.constant(z0.clone());
        let (z, raw_adj) = self.linguistic.forward_var(&mut tape, &bound, z0v)?;
        let yp = tape.constant(batch.positive.weights(pooling));
        let yz = tape.matmul(yp, z)?;

        let fus = fusion_var(&mut tape, xc, yz)?;
        let mut components = LossComponents {
            fusion: tape.scalar(fus),
            ..LossComponents::default()
        };
        let mut total = tape.scale(fus, w.alpha);

        if w.beta > 0.0 {
            let yn = tape.constant(batch.negative.weights(pooling));
            let yzn = tape.matmul(yn, z)?;
            let tri = triplet_var(&mut tape, xc, yz, yzn, w.margin)?;
            components.triplet = tape.scalar(tri);
            let term = tape.scale(tri, w.beta);
            total = tape.add(total, term)?;
        }
        if w.gamma > 0.0 {
            let xhat = self.visual.decode_var(&mut tape, &bound, xc)?;
            let de = decoding_var(&mut tape, x0, xhat)?;
            components.decoding = tape.scalar(de);
            let term = tape.scale(de, w.gamma);
            total = tape.add(total, term)?;
        }
        let lambda = self.linguistic.spec.effective_l1();
        if let (Some(raw), true) = (raw_adj, lambda > 0.0) {
            let abs = tape.abs(raw);
            let l1 = tape.sum(abs);
            let term = tape.scale(l1, lambda);
            components.sparsity = tape.scalar(term);
            total = tape.add(total, term)?;
        }
        Ok(Objective {
            tape,
            bound,
            total,
            components,
        })
    }

    /// Runs backward on the objective and writes gradients into `self.store`.
    pub fn accumulate_gradients(&mut self, batch: &BatchInputs, z0: &Tensor) -> Result<LossComponents> {
        let obj = self.objective(&self.store, batch, z0)?;
        let mut grads = obj.tape.backward(obj.total)?;
        self.store.collect_grads(&obj.bound, &mut grads)?;
        Ok(obj.components)
    }

    /// Finite-difference check of the full objective on the training images `indices`.
    pub fn grad_check(&self, pack: &FeaturePack, indices: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        self.check_pack(pack)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = BatchInputs::sample(pack, indices, &pack.compositions(Split::Train), &mut rng)?;
        let z0 = pack.embeddings.clone();
        let mut probe = self.clone();
        probe.accumulate_gradients(&batch, &z0)?;
        let analytic: Vec<Tensor> = probe.store.iter().map(|p| p.grad.clone()).collect();
        grad_check(
            &self.store,
            &analytic,
            |s| Ok(self.objective(s, &batch, &z0)?.total_value()),
            cfg,
        )
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::infer::evaluate_split;
use super::model::{BatchInputs, ModelState};
use crate::config::RunConfig;
use crate::datasets::{FeaturePack, Split};
use crate::error::{Error, Result};
use crate::numerics::adam_step;
use crate::objectives::{total_loss, LossComponents};

/// Mean loss terms over the mini-batches of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub fusion: f64,
    pub triplet: f64,
    pub decoding: f64,
    pub sparsity: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_closed: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept when checkpointing on validation.
    pub best_epoch: Option<usize>,
}

/// Stream of the training generator, kept apart from parameter initialization.
const TRAIN_STREAM: u64 = 1;

pub fn train(pack: &FeaturePack, config: &RunConfig) -> Result<TrainOutcome> {
    train_with(pack, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(pack: &FeaturePack, config: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    pack.validate()?;
    config.validate()?;
    let mut model = ModelState::new(config, pack)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);

    let adam = config.adam();
    let weights = config.loss_weights();
    let mut order = pack.indices(Split::Train);
    let pool = pack.compositions(Split::Train);
    let z0 = pack.embeddings.clone();
    let checkpoint = config.train.checkpoint_best && !pack.indices(Split::Val).is_empty();
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut log = Vec::with_capacity(config.train.epochs);

    for epoch in 1..=config.train.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut sum_total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.train.batch_size).enumerate() {
            let batch = BatchInputs::sample(pack, chunk, &pool, &mut rng)?;
            let c = model.accumulate_gradients(&batch, &z0)?;
            let total = total_loss(&c, &weights).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {}", bi + 1)),
                other => other,
            })?;
            for (p, s) in model.store.iter_mut().zip(model.adam.iter_mut()) {
                adam_step(p, s, &adam)?;
            }
            sum.fusion += c.fusion;
            sum.triplet += c.triplet;
            sum.decoding += c.decoding;
            sum.sparsity += c.sparsity;
            sum_total += total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let mut entry = EpochLog {
            epoch,
            fusion: sum.fusion / n,
            triplet: sum.triplet / n,
            decoding: sum.decoding / n,
            sparsity: sum.sparsity / n,
            total: sum_total / n,
            val_closed: None,
        };
        if checkpoint {
            let acc = evaluate_split(&model, pack, Split::Val)?.closed_top1;
            entry.val_closed = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    model.store.zero_grads();

    let (model, best_epoch) = match best {
        Some((_, epoch, mut m)) => {
            m.store.zero_grads();
            (m, Some(epoch))
        }
        None => (model, None),
    };
    Ok(TrainOutcome { model, log, best_epoch })
}

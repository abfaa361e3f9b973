//! Training, inference, evaluation, retrieval and model files.

mod infer;
mod io;
mod model;
mod train;

pub use infer::{
    batched_latents, candidate_embeddings, candidate_set, evaluate, evaluate_split, h_mean, nearest_candidates,
    parse_query, predict, retrieve, CompositionScore, EvalReport, Hit, Match, Metric, Prediction,
};
pub use io::{
    checksum, decode_model, encode_model, load_model, save_model, ModelDescriptor, TensorEntry, TensorRole, BIN_FILE,
    DESC_FILE, MODEL_VERSION,
};
pub use model::{BatchInputs, ModelDims, ModelState, Objective};
pub use train::{train, train_with, EpochLog, TrainOutcome};

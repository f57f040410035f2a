//! CSI/vision fusion regressor and its unimodal baselines.
//!
//! Each branch encodes its modality into a 64-d feature; the fused variants
//! project both features to unit-norm 16-d embeddings, align them with a
//! temperature-scaled contrastive loss, and regress position from the
//! concatenation. Loss terms are balanced by learned log-variances.

mod arch;
mod model;
mod train;

pub use arch::{Layer, Sequential};
pub use model::{
    contrastive_loss, localization_loss, similarity_matrix, total_loss, EmbeddingBatch, ForwardVars, FusionModel, LossVars,
    ModelConfig, ModelInputs, ModelVariant, Network, S_CONTRASTIVE, S_LOCALIZATION,
};
pub use train::{evaluate, history_csv, train, train_model, train_records, LossBundle, Prediction, TrainConfig, TrainOutcome, HISTORY_HEADER};

#[cfg(test)]
mod tests;

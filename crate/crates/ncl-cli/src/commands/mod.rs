pub mod compare;
pub mod evaluate;
pub mod generate;
pub mod select;
pub mod train;
pub mod verify;

use ncl_core::config::ExperimentConfig;
use ncl_core::encoders::AnyEncoder;
use ncl_core::latent_model::LatentClassModel;
use ncl_core::NclError;

/// Build the configured encoder for the model.
pub fn build_encoder(
    config: &ExperimentConfig,
    model: &LatentClassModel,
    seed: u64,
) -> Result<AnyEncoder, NclError> {
    config
        .encoder
        .build(model.n_samples(), model.n_classes(), seed)
}

//! Learning-informed physics: a small residual network trained on
//! dictionary fingerprints replaces the Bloch map inside the reconstruction.

pub mod net;
pub mod recon;
pub mod train;

pub use net::{Activation, Architecture, InputMap, SurrogateNet};
pub use recon::{nn_reconstruct, NnConfig, NnResult};
pub use train::{make_training_set, train_from, train_on_dictionary, train_surrogate, training_mse, TrainConfig, TrainResult, TrainingPair};

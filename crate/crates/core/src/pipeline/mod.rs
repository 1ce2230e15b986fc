//! Model assembly, training, checkpoints and run configuration.

pub mod checkpoint;
mod config;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, load_into, read_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_entries, ConfigEntry, ModelConfig, Precision, RunSettings, TrainConfig};
pub use model::{ForwardOutput, ForwardVars, SeedFormer};
pub use optim::Adam;
pub use train::{loss_csv_header, loss_csv_row, prepare_input, Trainer};

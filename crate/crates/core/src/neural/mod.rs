//! Dense/LSTM building blocks with exact reverse-mode gradients, the Adam
//! optimizer, the pinball loss and the parallel-stream forecasting network.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod lstm;
pub mod slstm;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use loss::{quantile_loss, total_loss};
pub use lstm::{lstm_cell_step, Activation, DenseParams, Gate, LstmLayerParams, StackParams};
pub use slstm::{Sample, SlstmConfig, SlstmParams, LONG_WINDOW, SHORT_WINDOW};
pub use tensor::Tensor2;
pub use train::{train_member, TrainConfig, TrainOutcome};

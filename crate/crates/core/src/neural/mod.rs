//! BiLSTM association policy: parameters, inputs, forward/backward passes and
//! the Adam optimizer.

mod adam;
mod inputs;
mod lstm;
mod model;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use inputs::{
    build_inputs, encode_gain, input_width, order_chain, order_chain_by, ChainOrder, Segment, GAIN_SCALE_DB,
    GAIN_SHIFT_DB, MASKED_INPUT,
};
pub use lstm::{lstm_step, lstm_step_backward, Direction, StepCache};
pub use model::{model_backward, model_forward, ForwardTrace};
pub use params::{FcBlock, Layout, LstmBlock, ModelParams, ModelShape, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

//! A small decoder-only transformer with exact reverse-mode gradients.

mod forward;
mod loss;
pub(crate) mod params;

pub use forward::{embed, positional_encoding, ForwardTrace, GradRequest, Gradients};
pub use loss::{kl_div, kl_div_grad, loss_rec, loss_rec_grad, prediction_rows, softmax};
pub use params::{LayerParams, ModelConfig, Parameters, TensorMut, TensorRef};

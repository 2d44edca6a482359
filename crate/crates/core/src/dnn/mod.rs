//! Feed-forward acoustic network.

pub mod model_file;
pub mod network;

pub use model_file::{load_model, save_model};
pub use network::{
    ce_output_grad, init_network, log_softmax_rows, sgd_step, ForwardCache, Gradients, Layer,
    Network, Sgd,
};

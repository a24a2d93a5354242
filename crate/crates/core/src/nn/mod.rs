//! Minimal tensor engine: layers with exact reverse-mode gradients, a
//! declarative architecture format, initialization policies and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod network;
pub mod presets;
pub mod spec;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use init::{init_weights, init_with_source, InitMode, InitPolicy};
pub use layers::{Layer, Param};
pub use loss::{loss_softmax_xent, softmax};
pub use network::Network;
pub use spec::{InputSpec, LayerKind, LayerSpec, NetworkSpec};
pub use tensor::Tensor;

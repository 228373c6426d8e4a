//! Small CPU forward/backward engine for child networks.
//!
//! Everything is NCHW, stride 1, "same" zero padding; spatial reduction happens
//! only in the global average pool ahead of the linear head. There is no batch
//! normalization, so each row of a batch is processed independently.

mod conv;
mod gradcheck;
mod network;
mod tensor;

pub use conv::ConvSpec;
pub use gradcheck::{central_difference, check_network, max_relative_error, NetworkGradCheck};
pub use network::{param_count_closed_form, ChildNetwork, Gradients};
pub use tensor::{Real, Tensor};

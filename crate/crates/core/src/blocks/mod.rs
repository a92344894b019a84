//! Neural building blocks shared by the fusion, alignment and captioning networks.
//!
//! Blocks hold [`ParamId`](crate::numerics::ParamId)s only; the tensors live in a
//! [`ParameterSet`](crate::numerics::ParameterSet) and reach a forward pass
//! through a [`Binding`](crate::numerics::Binding). The same block can therefore
//! run against several congruent parameter sets, which the twin structure relies on.

mod attention;
mod conv;
mod ffn;
mod linear;
mod norm;

pub use attention::{AttentionConfig, KeyValue, MultiHeadAttention};
pub use conv::{Conv1d, Conv2d};
pub use ffn::Ffn;
pub use linear::Linear;
pub use norm::{BatchNorm, LayerNorm};

//! Neural-network layers on top of the autodiff tape.

pub mod attention;
pub mod conv;
pub mod encoder;
pub mod init;
pub mod linear;
pub mod norm;
pub mod param;

pub use attention::MultiHeadAttention;
pub use conv::Conv2d;
pub use encoder::EncoderBlock;
pub use linear::Linear;
pub use norm::LayerNorm;
pub use param::{Forward, ParamId, ParamSet};

use crate::error::Result;
use crate::tensor::ValueId;

/// Adaptive average pooling along the sequence axis of a [B, L, E] value:
/// output token i averages input tokens [floor(i*L/N), floor((i+1)*L/N)).
/// The feature axis is untouched.
pub fn sequence_pool(fwd: &mut Forward, x: ValueId, target_len: usize) -> Result<ValueId> {
    fwd.tape.seq_pool(x, target_len)
}

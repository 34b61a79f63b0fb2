use crate::error::Result;
use crate::nn::attention::MultiHeadAttention;
use crate::nn::linear::Linear;
use crate::nn::norm::LayerNorm;
use crate::nn::param::{Forward, ParamSet};
use crate::rng::Rng;
use crate::tensor::ValueId;

/// Pre-norm transformer encoder block: LayerNorm -> MSA -> residual, then
/// LayerNorm -> two-layer GELU MLP -> residual. Token shape is unchanged.
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl EncoderBlock {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(params, rng, &format!("{name}.attn"), dim, num_heads)?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            mlp_in: Linear::new(params, rng, &format!("{name}.mlp.fc1"), dim, mlp_hidden),
            mlp_out: Linear::new(params, rng, &format!("{name}.mlp.fc2"), mlp_hidden, dim),
        })
    }

    pub fn forward(&self, fwd: &mut Forward, params: &ParamSet, x: ValueId) -> Result<ValueId> {
        let normed = self.norm1.forward(fwd, params, x)?;
        let attended = self.attention.forward(fwd, params, normed)?;
        let x = fwd.tape.add(x, attended)?;

        let normed = self.norm2.forward(fwd, params, x)?;
        let hidden = self.mlp_in.forward(fwd, params, normed)?;
        let hidden = fwd.tape.gelu(hidden);
        let mlp = self.mlp_out.forward(fwd, params, hidden)?;
        fwd.tape.add(x, mlp)
    }
}

use crate::error::{Error, Result};
use crate::nn::linear::Linear;
use crate::nn::param::{Forward, ParamSet};
use crate::rng::Rng;
use crate::tensor::ValueId;

/// Multi-head self-attention: per head softmax(QK^T / sqrt(head_dim)) V,
/// heads concatenated and output-projected.
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ParamSet, rng: &mut Rng, name: &str, dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {dim} is not divisible by {num_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(params, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(params, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(params, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(params, rng, &format!("{name}.o"), dim, dim),
            num_heads,
            head_dim: dim / num_heads,
        })
    }

    pub fn forward(&self, fwd: &mut Forward, params: &ParamSet, x: ValueId) -> Result<ValueId> {
        Ok(self.forward_with_weights(fwd, params, x)?.0)
    }

    /// Forward pass that also exposes the attention probabilities with
    /// shape [batch * heads, T, T] for inspection.
    pub fn forward_with_weights(
        &self,
        fwd: &mut Forward,
        params: &ParamSet,
        x: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        let shape = fwd.tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::contract(format!("attention expects [B,T,D], got {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if d != self.num_heads * self.head_dim {
            return Err(Error::config(format!(
                "input feature dim {d} does not match heads {} x head_dim {}",
                self.num_heads, self.head_dim
            )));
        }
        let (h, hd) = (self.num_heads, self.head_dim);

        let split = |fwd: &mut Forward, v: ValueId| -> Result<ValueId> {
            let v = fwd.tape.reshape(v, vec![b, t, h, hd])?;
            let v = fwd.tape.permute(v, &[0, 2, 1, 3])?;
            fwd.tape.reshape(v, vec![b * h, t, hd])
        };

        let q = self.query.forward(fwd, params, x)?;
        let k = self.key.forward(fwd, params, x)?;
        let v = self.value.forward(fwd, params, x)?;
        let q = split(fwd, q)?;
        let v = split(fwd, v)?;
        let k = fwd.tape.reshape(k, vec![b, t, h, hd])?;
        let k = fwd.tape.permute(k, &[0, 2, 3, 1])?;
        let k = fwd.tape.reshape(k, vec![b * h, hd, t])?;

        let scores = fwd.tape.bmm(q, k)?;
        let scores = fwd.tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let probs = fwd.tape.softmax(scores, 2)?;
        let ctx = fwd.tape.bmm(probs, v)?;

        let ctx = fwd.tape.reshape(ctx, vec![b, h, t, hd])?;
        let ctx = fwd.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = fwd.tape.reshape(ctx, vec![b, t, d])?;
        let out = self.output.forward(fwd, params, ctx)?;
        Ok((out, probs))
    }
}

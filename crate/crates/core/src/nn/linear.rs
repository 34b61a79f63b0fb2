use crate::error::Result;
use crate::nn::param::{Forward, ParamId, ParamSet};
use crate::nn::init;
use crate::rng::Rng;
use crate::tensor::ValueId;

/// Fully-connected layer: y = x W + b, applied per token.
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = params.register(
            format!("{name}.weight"),
            init::kaiming(rng, vec![in_dim, out_dim], in_dim),
        );
        let bias = params.register(format!("{name}.bias"), init::zeros(vec![out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// Accepts any shape [..., in_dim]; leading axes are preserved.
    pub fn forward(&self, fwd: &mut Forward, params: &ParamSet, x: ValueId) -> Result<ValueId> {
        let shape = fwd.tape.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = fwd.tape.reshape(x, vec![rows, *shape.last().unwrap()])?;
        let w = fwd.param(params, self.weight);
        let b = fwd.param(params, self.bias);
        let y = fwd.tape.matmul(flat, w)?;
        let y = fwd.tape.add_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        fwd.tape.reshape(y, out_shape)
    }
}

use crate::error::Result;
use crate::nn::init;
use crate::nn::param::{Forward, ParamId, ParamSet};
use crate::tensor::ValueId;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the feature axis with learnable gain and shift.
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = params.register(format!("{name}.gain"), init::ones(vec![dim]));
        let shift = params.register(format!("{name}.shift"), init::zeros(vec![dim]));
        LayerNorm { gain, shift, dim }
    }

    pub fn forward(&self, fwd: &mut Forward, params: &ParamSet, x: ValueId) -> Result<ValueId> {
        let g = fwd.param(params, self.gain);
        let s = fwd.param(params, self.shift);
        fwd.tape.layer_norm(x, g, s, LAYER_NORM_EPS)
    }
}

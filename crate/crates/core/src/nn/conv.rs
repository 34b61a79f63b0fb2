use crate::error::Result;
use crate::nn::init;
use crate::nn::param::{Forward, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::ValueId;

/// 2-D convolution (cross-correlation) layer.
pub struct Conv2d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let kernels = params.register(
            format!("{name}.kernels"),
            init::kaiming(rng, vec![out_ch, in_ch, kernel, kernel], fan_in),
        );
        let bias = params.register(format!("{name}.bias"), init::zeros(vec![out_ch]));
        Conv2d { kernels, bias, stride, padding, in_ch, out_ch }
    }

    pub fn forward(&self, fwd: &mut Forward, params: &ParamSet, x: ValueId) -> Result<ValueId> {
        let k = fwd.param(params, self.kernels);
        let b = fwd.param(params, self.bias);
        fwd.tape.conv2d(x, k, b, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let mut ps = ParamSet::new();
        let kernels = ps.register("k", Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let bias = ps.register("b", Tensor::zeros(vec![1]).unwrap());
        let layer = Conv2d { kernels, bias, stride: 1, padding: 0, in_ch: 1, out_ch: 1 };
        let img: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut fwd = Forward::inference();
        let x = fwd.input(img.clone(), vec![1, 1, 3, 3]).unwrap();
        let y = layer.forward(&mut fwd, &ps, x).unwrap();
        assert_eq!(fwd.tape.data(y), &img[..]);
    }

    #[test]
    fn all_ones_kernel_on_constant_image_gives_9c_interior() {
        let c = 0.4;
        let mut ps = ParamSet::new();
        let kernels = ps.register("k", Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let bias = ps.register("b", Tensor::zeros(vec![1]).unwrap());
        let layer = Conv2d { kernels, bias, stride: 1, padding: 0, in_ch: 1, out_ch: 1 };
        let mut fwd = Forward::inference();
        let x = fwd.input(vec![c; 25], vec![1, 1, 5, 5]).unwrap();
        let y = layer.forward(&mut fwd, &ps, x).unwrap();
        assert_eq!(fwd.tape.shape(y), &[1, 1, 3, 3]);
        for v in fwd.tape.data(y) {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn random_case_matches_quadruple_loop_oracle() {
        let mut rng = Rng::from_seed(31);
        let mut ps = ParamSet::new();
        let layer = Conv2d::new(&mut ps, &mut rng, "c", 2, 3, 3, 1, 0);
        let xdata: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let mut fwd = Forward::inference();
        let x = fwd.input(xdata.clone(), vec![1, 2, 5, 5]).unwrap();
        let y = layer.forward(&mut fwd, &ps, x).unwrap();

        let kern = &ps.tensor(layer.kernels).data;
        let bias = &ps.tensor(layer.bias).data;
        for co in 0..3 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut s = bias[co];
                    for ci in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                s += xdata[(ci * 5 + oh + dy) * 5 + ow + dx]
                                    * kern[((co * 2 + ci) * 3 + dy) * 3 + dx];
                            }
                        }
                    }
                    let got = fwd.tape.data(y)[(co * 3 + oh) * 3 + ow];
                    assert!((got - s).abs() < 1e-12, "co {co} oh {oh} ow {ow}");
                }
            }
        }
    }

    #[test]
    fn non_integral_output_extent_is_config_error() {
        let mut rng = Rng::from_seed(1);
        let mut ps = ParamSet::new();
        let layer = Conv2d::new(&mut ps, &mut rng, "c", 1, 1, 3, 2, 1);
        let mut fwd = Forward::inference();
        let x = fwd.input(vec![0.0; 16], vec![1, 1, 4, 4]).unwrap();
        let err = layer.forward(&mut fwd, &ps, x).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)), "{err}");
    }
}

//! Convolution layers whose weights live in a [`ParamSet`].

use crate::params::{Init, ParamSet};
use crate::tape::Bound;
use crate::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: usize,
    bias: Option<usize>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), init.sample(&[cout, cin, kernel, kernel]));
        let bias = Some(params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d { weight, bias, stride, pad }
    }

    /// A layer whose weights and bias start at exactly zero.
    pub fn zeroed(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), Tensor::zeros(&[cout, cin, kernel, kernel]));
        let bias = Some(params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        let bias = self.bias.map(|b| p.get(b));
        x.conv2d(p.get(self.weight), bias, self.stride, self.pad)
    }
}

/// Transposed convolution; with `stride = 2` this is the fractional-stride
/// (½) upsampling layer.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: usize,
    bias: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), init.sample(&[cin, cout, kernel, kernel]));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvTranspose2d { weight, bias, stride, pad, output_pad }
    }

    pub fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.conv_transpose2d(p.get(self.weight), Some(p.get(self.bias)), self.stride, self.pad, self.output_pad)
    }
}

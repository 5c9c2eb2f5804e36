use crate::{Tensor, Var};

impl<'t> Var<'t> {
    /// Instance normalization without affine parameters: every `(n, c)`
    /// plane is shifted to zero mean and scaled to unit (biased) variance.
    pub fn instance_norm(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("instance_norm input");
        let p = h * w;
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * c];
        for plane in 0..n * c {
            let src = &x.data()[plane * p..(plane + 1) * p];
            let mean = src.iter().sum::<f64>() / p as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = is;
            for (d, s) in y[plane * p..(plane + 1) * p].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let y = Tensor::from_vec(x.shape(), y).expect("same shape");
        let saved = y.clone();
        self.tape().custom(&[self], y, move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for plane in 0..n * c {
                let gy = &g.data()[plane * p..(plane + 1) * p];
                let yy = &saved.data()[plane * p..(plane + 1) * p];
                let mean_g = gy.iter().sum::<f64>() / p as f64;
                let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / p as f64;
                let is = inv_std[plane];
                for ((d, &gv), &yv) in dx[plane * p..(plane + 1) * p].iter_mut().zip(gy).zip(yy) {
                    *d = is * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(Tensor::from_vec(saved.shape(), dx).expect("same shape"))]
        })
    }
}

//! Elementwise arithmetic, activations and reductions.

use crate::{Tape, Tensor, Var};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

// Explicit tape methods rather than operator traits, so every node stays visible.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape().custom(&[self, other], out, |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape().custom(&[self, other], out, |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape().custom(&[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |d, y| d * y)),
                needs[1].then(|| g.zip_map(&a, |d, x| d * x)),
            ]
        })
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().map(|x| x + k);
        self.tape().custom(&[self], out, |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().map(|x| x * k);
        self.tape().custom(&[self], out, move |g, _| vec![Some(g.scale(k))])
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.tape().custom(&[self], out, move |g, _| {
            vec![Some(g.zip_map(&x, |d, v| if v > 0.0 { d } else { slope * d }))]
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let y = self.value().map(f64::tanh);
        let saved = y.clone();
        self.tape().custom(&[self], y, move |g, _| {
            vec![Some(g.zip_map(&saved, |d, t| d * (1.0 - t * t)))]
        })
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.tape().custom(&[self], out, move |g, _| {
            vec![Some(g.zip_map(&x, |d, v| d * sign(v)))]
        })
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape().custom(&[self], out, move |g, _| vec![Some(g.zip_map(&x, |d, v| 2.0 * d * v))])
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().custom(&[self], Tensor::scalar(x.sum()), move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let n = x.len() as f64;
        let shape = x.shape().to_vec();
        self.tape().custom(&[self], Tensor::scalar(x.sum() / n), move |g, _| {
            vec![Some(Tensor::full(&shape, g.item() / n))]
        })
    }

    /// Mean over every axis except the leading one: `[N, ...] -> [N]`.
    pub fn mean_per_item(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape[0];
        let per = x.len() / n;
        let out: Vec<f64> = x.data().chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
        let out = Tensor::from_vec(&[n], out).expect("batch shape");
        self.tape().custom(&[self], out, move |g, _| {
            let mut data = Vec::with_capacity(n * per);
            for &gi in g.data() {
                data.extend(std::iter::repeat_n(gi / per as f64, per));
            }
            vec![Some(Tensor::from_vec(&shape, data).expect("input shape"))]
        })
    }

    /// Mean absolute difference, the ℓ1 loss used throughout.
    pub fn l1_to(self, target: Var<'t>) -> Var<'t> {
        self.sub(target).abs().mean()
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    /// Concatenates rank-4 values along the channel axis.
    pub fn cat_channels<'t>(&'t self, items: &[Var<'t>]) -> Var<'t> {
        let values: Vec<_> = items.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat_channels(&refs).expect("channel concat");
        let channels: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        self.custom(items, out, move |g, needs| {
            let mut start = 0;
            channels
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let piece = need.then(|| g.narrow_channels(start, c).expect("slice"));
                    start += c;
                    piece
                })
                .collect()
        })
    }
}

//! Convolutions lowered to matrix products (im2col / col2im), plus padding.

use std::rc::Rc;

use crate::gemm::{gemm, Element, MatRef};
use crate::Precision;
use crate::{Tensor, Var};

/// Sliding-window geometry: a `c × h × w` image visited by a `k × k` window
/// at `oh × ow` positions.
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source index for output position `o` and kernel offset `kk`, if inside.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    /// Output positions `lo..hi` along a row whose source column for kernel
    /// offset `kk` lies inside the image.
    #[inline]
    fn valid_cols(&self, kk: usize) -> (usize, usize) {
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(self.stride) } else { 0 };
        let reach = self.w + self.pad;
        let hi = if reach > kk { ((reach - kk - 1) / self.stride + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// `[N, C, H, W]` → `[C·k·k, N·oh·ow]`.
fn im2col<T: Element>(x: &[f64], n: usize, g: Window) -> Vec<T> {
    let p = g.positions();
    let cols_n = n * p;
    let mut out = T::take(g.rows() * cols_n);
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut out[row * cols_n..(row + 1) * cols_n];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for b in 0..n {
                    let src = &x[(b * g.c + c) * plane..(b * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut dst_row[b * p + oy * g.ow + lo..b * p + oy * g.ow + hi];
                        if g.stride == 1 {
                            for (d, s) in dst.iter_mut().zip(&src_row[first..]) {
                                *d = T::of(*s);
                            }
                        } else {
                            for (d, s) in dst.iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                                *d = T::of(*s);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back and sums overlaps.
fn col2im<T: Element>(cols: &[T], n: usize, g: Window) -> Vec<f64> {
    let p = g.positions();
    let cols_n = n * p;
    let plane = g.h * g.w;
    let mut out = vec![0.0; n * g.c * plane];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for b in 0..n {
                    let dst = &mut out[(b * g.c + c) * plane..(b * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let src = &src_row[b * p + oy * g.ow + lo..b * p + oy * g.ow + hi];
                        let dst_row = &mut dst[iy * g.w + first..(iy + 1) * g.w];
                        for (d, v) in dst_row.iter_mut().step_by(g.stride).zip(src) {
                            *d += v.get();
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, P]` → `[C, N·P]`.
fn channel_major<T: Element>(x: &[f64], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = T::take(x.len());
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            let dst = &mut out[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::of(*s);
            }
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`, adding a per-channel bias.
fn batch_major<T: Element>(x: &[T], n: usize, c: usize, p: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            let dst = &mut out[(b * c + ch) * p..(b * c + ch + 1) * p];
            let bv = bias.map_or(0.0, |bias| bias[ch]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s.get() + bv;
            }
        }
    }
    out
}

fn convert<T: Element>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::of(v)).collect()
}

fn channel_sums(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4().expect("rank 4");
    let p = h * w;
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += g.data()[(b * c + ch) * p..(b * c + ch + 1) * p].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(&[c], out).expect("bias shape")
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation. `weight` is `[C_out, C_in, k, k]`; zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        match self.tape().precision() {
            Precision::Single => conv2d_in::<f32>(self, weight, bias, stride, pad),
            Precision::Double => conv2d_in::<f64>(self, weight, bias, stride, pad),
        }
    }

    /// Transposed convolution (fractional stride). `weight` is
    /// `[C_in, C_out, k, k]`; output size is `(H-1)·stride - 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var<'t> {
        match self.tape().precision() {
            Precision::Single => conv_transpose2d_in::<f32>(self, weight, bias, stride, pad, output_pad),
            Precision::Double => conv_transpose2d_in::<f64>(self, weight, bias, stride, pad, output_pad),
        }
    }

    /// Mirror padding without repeating the edge pixel.
    pub fn reflect_pad(self, pad: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("reflect_pad input");
        assert!(pad < h && pad < w, "reflect padding {pad} needs inputs larger than {pad}");
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let reflect = move |i: usize, size: usize| -> usize {
            let j = i as isize - pad as isize;
            let j = if j < 0 { -j } else { j };
            let j = j as usize;
            if j >= size {
                2 * (size - 1) - j
            } else {
                j
            }
        };
        let mut out = vec![0.0; n * c * ph * pw];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
            for i in 0..ph {
                let si = reflect(i, h);
                for j in 0..pw {
                    dst[i * pw + j] = src[si * w + reflect(j, w)];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ph, pw], out).expect("padded shape");
        self.tape().custom(&[self], out, move |g, _| {
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let src = &g.data()[plane * ph * pw..(plane + 1) * ph * pw];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for i in 0..ph {
                    let si = reflect(i, h);
                    for j in 0..pw {
                        dst[si * w + reflect(j, w)] += src[i * pw + j];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], dx).expect("dx shape"))]
        })
    }
}


fn conv2d_in<'t, T: Element>(
    x_var: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    pad: usize,
) -> Var<'t> {
    let tape = x_var.tape();
    let x = x_var.value();
    let w = weight.value();
    let (n, c, h, wd) = x.dims4().expect("conv2d input");
    let (cout, cin, k, k2) = w.dims4().expect("conv2d weight");
    assert_eq!(cin, c, "conv2d: weight expects {cin} channels, input has {c}");
    assert_eq!(k, k2, "square kernels only");
    let g = Window {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh: conv_out(h, k, stride, pad),
        ow: conv_out(wd, k, stride, pad),
    };
    let p = g.positions();
    let wt: Vec<T> = convert(w.data());
    let cols = im2col::<T>(x.data(), n, g);
    let mut out = T::take(cout * n * p);
    gemm(MatRef::new(&wt, cout, g.rows()), MatRef::new(&cols, g.rows(), n * p), &mut out);
    T::give(cols);
    let b = bias.map(|b| b.value());
    let y = batch_major(&out, n, cout, p, b.as_deref().map(Tensor::data));
    T::give(out);
    let y = Tensor::from_vec(&[n, cout, g.oh, g.ow], y).expect("conv2d output");

    let mut inputs = vec![x_var, weight];
    inputs.extend(bias);
    let has_bias = bias.is_some();
    let x_saved: Rc<Tensor> = x;
    tape.custom(&inputs, y, move |grad, needs| {
        let gm = channel_major::<T>(grad.data(), n, cout, p);
        let gm_ref = MatRef::new(&gm, cout, n * p);
        let mut result = Vec::with_capacity(3);
        if needs[0] {
            let mut dcols = T::take(g.rows() * n * p);
            gemm(MatRef::new(&wt, cout, g.rows()).t(), gm_ref, &mut dcols);
            let dx = col2im(&dcols, n, g);
            T::give(dcols);
            result.push(Some(Tensor::from_vec(x_saved.shape(), dx).expect("dx")));
        } else {
            result.push(None);
        }
        if needs[1] {
            let cols = im2col::<T>(x_saved.data(), n, g);
            let mut dw = vec![T::default(); cout * g.rows()];
            gemm(gm_ref, MatRef::new(&cols, g.rows(), n * p).t(), &mut dw);
            T::give(cols);
            let dw = dw.into_iter().map(T::get).collect();
            result.push(Some(Tensor::from_vec(w.shape(), dw).expect("dw")));
        } else {
            result.push(None);
        }
        T::give(gm);
        if has_bias {
            result.push(needs[2].then(|| channel_sums(grad)));
        }
        result
    })
}

fn conv_transpose2d_in<'t, T: Element>(
    x_var: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Var<'t> {
    let tape = x_var.tape();
    let x = x_var.value();
    let w = weight.value();
    let (n, cin, hin, win) = x.dims4().expect("conv_transpose2d input");
    let (wcin, cout, k, _) = w.dims4().expect("conv_transpose2d weight");
    assert_eq!(wcin, cin, "conv_transpose2d: weight expects {wcin} channels, input has {cin}");
    assert!(output_pad < stride, "output padding must be smaller than the stride");
    let hout = (hin - 1) * stride + k + output_pad - 2 * pad;
    let wout = (win - 1) * stride + k + output_pad - 2 * pad;
    let g = Window { c: cout, h: hout, w: wout, k, stride, pad, oh: hin, ow: win };
    let p = hin * win;
    let wt: Vec<T> = convert(w.data());
    let xm = channel_major::<T>(x.data(), n, cin, p);
    let mut cols = T::take(g.rows() * n * p);
    gemm(MatRef::new(&wt, cin, g.rows()).t(), MatRef::new(&xm, cin, n * p), &mut cols);
    let mut y = col2im(&cols, n, g);
    T::give(cols);
    if let Some(b) = bias {
        let b = b.value();
        let plane = hout * wout;
        for bi in 0..n {
            for ch in 0..cout {
                let bv = b.data()[ch];
                y[(bi * cout + ch) * plane..(bi * cout + ch + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let y = Tensor::from_vec(&[n, cout, hout, wout], y).expect("conv_transpose2d output");

    let mut inputs = vec![x_var, weight];
    inputs.extend(bias);
    let has_bias = bias.is_some();
    let x_shape = x.shape().to_vec();
    tape.custom(&inputs, y, move |grad, needs| {
        let dcols = im2col::<T>(grad.data(), n, g);
        let dcols_ref = MatRef::new(&dcols, g.rows(), n * p);
        let mut result = Vec::with_capacity(3);
        if needs[0] {
            let mut dxm = T::take(cin * n * p);
            gemm(MatRef::new(&wt, cin, g.rows()), dcols_ref, &mut dxm);
            let dx = batch_major(&dxm, n, cin, p, None);
            T::give(dxm);
            result.push(Some(Tensor::from_vec(&x_shape, dx).expect("dx")));
        } else {
            result.push(None);
        }
        if needs[1] {
            let mut dw = vec![T::default(); cin * g.rows()];
            gemm(MatRef::new(&xm, cin, n * p), dcols_ref.t(), &mut dw);
            let dw = dw.into_iter().map(T::get).collect();
            result.push(Some(Tensor::from_vec(w.shape(), dw).expect("dw")));
        } else {
            result.push(None);
        }
        T::give(dcols);
        if has_bias {
            result.push(needs[2].then(|| channel_sums(grad)));
        }
        result
    })
}

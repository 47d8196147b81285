use super::basic::row_sums;
use crate::tape::{Backward, BackwardCtx};
use crate::{gemm, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Shape bookkeeping for a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[c_in, batch, h, w], &[c_out, wc_in, kh, kw]) = (input, weight) else {
            return Err(TensorError::Rank { expected: 4, got: input.to_vec() });
        };
        if wc_in != c_in || kh != kw {
            return Err(TensorError::Shape { expected: vec![c_out, c_in, kh, kh], got: weight.to_vec() });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Conv(format!(
                "input {h}x{w} too small for kernel {kh} with padding {pad}"
            )));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { c_in, c_out, kernel: kh, stride, pad, batch, h, w, out_h, out_w })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    let plane = g.h * g.w;
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(ci * g.batch + n) * plane..(ci * g.batch + n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = (n * g.out_h + oy) * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    let plane = g.h * g.w;
    let mut x = vec![T::zero(); g.c_in * g.batch * plane];
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(ci * g.batch + n) * plane..(ci * g.batch + n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.out_h + oy) * g.out_w;
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.out_w {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Plain (tape-free) convolution on channel-major input.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let (out, _) = conv_impl(x, w, bias, &g)?;
    Ok(out)
}

fn conv_impl<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let cols = (!g.is_pointwise()).then(|| im2col(x.data(), g));
    let col_data = cols.as_deref().unwrap_or(x.data());
    let p = g.col_cols();
    let mut out = Tensor::zeros(&[g.c_out, g.batch, g.out_h, g.out_w]);
    gemm(g.c_out, g.col_rows(), p, w.data(), false, col_data, false, out.data_mut(), false);
    if let Some(b) = bias {
        b.expect_shape(&[g.c_out])?;
        for (row, &bv) in out.data_mut().chunks_mut(p).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok((out, cols))
}

struct ConvRule<T> {
    geom: ConvGeometry,
    cols: Option<Vec<T>>,
}

impl<T: Scalar> Backward<T> for ConvRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (x, w, dy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
        let rows = g.col_rows();
        let p = g.col_cols();
        let dx = ctx.needs[0].then(|| {
            if g.is_pointwise() {
                let mut dx = Tensor::zeros(x.shape());
                gemm(rows, g.c_out, p, w.data(), true, dy, false, dx.data_mut(), false);
                dx
            } else {
                let mut dcols = vec![T::zero(); rows * p];
                gemm(rows, g.c_out, p, w.data(), true, dy, false, &mut dcols, false);
                Tensor::from_vec(x.shape(), col2im(&dcols, g)).expect("col2im shape")
            }
        });
        let dw = ctx.needs[1].then(|| {
            let cols = self.cols.as_deref().unwrap_or(x.data());
            let mut dw = Tensor::zeros(w.shape());
            gemm(g.c_out, p, rows, dy, false, cols, true, dw.data_mut(), false);
            dw
        });
        let mut out = vec![dx, dw];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| row_sums(dy, g.c_out, p)));
        }
        out
    }
}

impl<T: Scalar> Tape<T> {
    /// Convolution of `[C_in, N, H, W]` input with `[C_out, C_in, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let (out, cols) = conv_impl(self.value(x), self.value(w), bias.map(|b| self.value(b)), &geom)?;
        let keep_cols = self.requires_grad(w);
        let rule = ConvRule { geom, cols: if keep_cols { cols } else { None } };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.apply(&inputs, out, rule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(&[g.c_out, g.batch, g.out_h, g.out_w]);
        for co in 0..g.c_out {
            for n in 0..g.batch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((ci * g.batch + n) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = w.data()[((co * g.c_in + ci) * g.kernel + ky) * g.kernel + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((co * g.batch + n) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (k, s, p, h) in [(3, 1, 1, 5), (3, 2, 1, 7), (1, 1, 0, 4), (1, 2, 0, 6), (3, 2, 0, 6)] {
            let x = Tensor::from_fn(&[2, 3, h, h + 1], |i| ((i * 7 % 13) as f64) * 0.1 - 0.6);
            let w = Tensor::from_fn(&[4, 2, k, k], |i| ((i * 5 % 11) as f64) * 0.05 - 0.2);
            let got = conv2d_forward(&x, &w, None, s, p).unwrap();
            let want = reference(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let g = ConvGeometry::new(&[3, 1, 96, 96], &[16, 3, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (48, 48));
    }

    #[test]
    fn undersized_input_is_rejected() {
        assert!(ConvGeometry::new(&[3, 1, 1, 1], &[8, 3, 5, 5], 1, 1).is_err());
    }
}

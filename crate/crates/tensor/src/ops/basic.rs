use crate::tape::{Backward, BackwardCtx};
use crate::{gemm, Result, Scalar, Tape, Tensor, TensorError, Var};

struct AddRule;

impl<T: Scalar> Backward<T> for AddRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad;
        vec![ctx.needs[0].then(|| g.clone()), ctx.needs[1].then(|| g.clone())]
    }
}

struct ScaleRule<T>(T);

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.scale(self.0))]
    }
}

struct ReluRule;

impl<T: Scalar> Backward<T> for ReluRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let out = ctx.output;
        let g = ctx.grad.zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() });
        vec![g.ok()]
    }
}

struct MeanRule;

impl<T: Scalar> Backward<T> for MeanRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let g = ctx.grad.item() / T::of(x.numel() as f64);
        vec![Some(Tensor::full(x.shape(), g))]
    }
}

struct MaskedMseRule<T> {
    target: Tensor<T>,
    mask: Tensor<T>,
    count: T,
}

impl<T: Scalar> Backward<T> for MaskedMseRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let scale = ctx.grad.item() * T::of(2.0) / self.count;
        let data = x
            .data()
            .iter()
            .zip(self.target.data())
            .zip(self.mask.data())
            .map(|((&p, &t), &m)| scale * m * (p - t))
            .collect();
        vec![Tensor::from_vec(x.shape(), data).ok()]
    }
}

struct LinearRule;

impl<T: Scalar> Backward<T> for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (din, n) = (x.dim(0), x.dim(1));
        let dout = w.dim(0);
        let g = ctx.grad;
        let dx = ctx.needs[0].then(|| {
            let mut dx = Tensor::zeros(&[din, n]);
            gemm(din, dout, n, w.data(), true, g.data(), false, dx.data_mut(), false);
            dx
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = Tensor::zeros(&[dout, din]);
            gemm(dout, n, din, g.data(), false, x.data(), true, dw.data_mut(), false);
            dw
        });
        let mut out = vec![dx, dw];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| row_sums(g.data(), dout, n)));
        }
        out
    }
}

pub(crate) fn row_sums<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_fn(&[rows], |r| data[r * cols..(r + 1) * cols].iter().copied().sum())
}

struct AvgPoolRule;

impl<T: Scalar> Backward<T> for AvgPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let (c, n, h, w) = x.dims4().expect("rank 4");
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let g = ctx.grad.data();
        let mut dx = Tensor::zeros(x.shape());
        for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
            let v = g[i] * inv;
            chunk.iter_mut().for_each(|d| *d = v);
        }
        debug_assert_eq!(g.len(), c * n);
        vec![Some(dx)]
    }
}

struct ConcatRule {
    sizes: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.data();
        let mut offset = 0;
        ctx.inputs
            .iter()
            .zip(&self.sizes)
            .zip(&ctx.needs)
            .map(|((x, &len), &need)| {
                let part = need.then(|| {
                    Tensor::from_vec(x.shape(), g[offset..offset + len].to_vec()).expect("concat slice")
                });
                offset += len;
                part
            })
            .collect()
    }
}

struct NormalizeRule<T> {
    inv_norms: Vec<T>,
    channels: usize,
}

impl<T: Scalar> Backward<T> for NormalizeRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let y = ctx.output.data();
        let g = ctx.grad.data();
        let positions = self.inv_norms.len();
        let mut dx = Tensor::zeros(ctx.output.shape());
        let d = dx.data_mut();
        for p in 0..positions {
            let mut dot = T::zero();
            for c in 0..self.channels {
                let i = c * positions + p;
                dot += y[i] * g[i];
            }
            for c in 0..self.channels {
                let i = c * positions + p;
                d[i] = (g[i] - dot * y[i]) * self.inv_norms[p];
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.apply(&[a, b], value, AddRule))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.apply(&[a], value, ScaleRule(s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.apply(&[a], value, ReluRule)
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / T::of(x.numel() as f64));
        self.apply(&[a], value, MeanRule)
    }

    /// `sum(mask * (x - target)^2) / sum(mask)`; `target` and `mask` are constants.
    pub fn masked_mse(&mut self, x: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_shape(target.shape())?;
        xv.expect_shape(mask.shape())?;
        let count = mask.sum();
        if count <= T::zero() {
            return Err(TensorError::Empty);
        }
        let total: T = xv
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((&p, &t), &m)| m * (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(total / count);
        let rule = MaskedMseRule { target: target.clone(), mask: mask.clone(), count };
        Ok(self.apply(&[x], value, rule))
    }

    /// Dense layer on `[D_in, N]` activations: `W x + b` with `W: [D_out, D_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (din, n) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if win != din {
            return Err(TensorError::Shape { expected: vec![dout, din], got: vec![dout, win] });
        }
        let mut out = Tensor::zeros(&[dout, n]);
        gemm(dout, din, n, self.value(w).data(), false, self.value(x).data(), false, out.data_mut(), false);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bias = self.value(b);
            bias.expect_shape(&[dout])?;
            for (row, &bv) in out.data_mut().chunks_mut(n).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
            inputs.push(b);
        }
        Ok(self.apply(&inputs, out, LinearRule))
    }

    /// `[C, N, H, W] -> [C, N]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, n, h, w) = xv.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = xv.data().chunks(hw).map(|s| s.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[c, n], data)?;
        Ok(self.apply(&[x], value, AvgPoolRule))
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::Empty)?);
        let tail = first.shape()[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(TensorError::Shape { expected: tail.clone(), got: v.shape()[1..].to_vec() });
            }
            channels += v.dim(0);
            sizes.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![channels];
        shape.extend(tail);
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.apply(parts, value, ConcatRule { sizes }))
    }

    /// Unit-normalize every position along the channel axis. Zero vectors
    /// stay zero.
    pub fn l2_normalize_channels(&mut self, x: Var) -> Var {
        let (value, inv_norms) = l2_normalize_channels(self.value(x));
        let channels = value.dim(0);
        self.apply(&[x], value, NormalizeRule { inv_norms, channels })
    }
}

/// Channel-axis unit normalization of a `[C, ...]` tensor; also returns the
/// reciprocal norms (zero for all-zero positions).
pub fn l2_normalize_channels<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let c = x.dim(0);
    let positions = x.numel() / c.max(1);
    let d = x.data();
    let mut inv = vec![T::zero(); positions];
    for (p, slot) in inv.iter_mut().enumerate() {
        let sq: T = (0..c).map(|ci| d[ci * positions + p] * d[ci * positions + p]).sum();
        if sq > T::zero() {
            *slot = T::one() / sq.sqrt();
        }
    }
    let data = d.iter().enumerate().map(|(i, &v)| v * inv[i % positions]).collect();
    (Tensor::from_vec(x.shape(), data).expect("same shape"), inv)
}

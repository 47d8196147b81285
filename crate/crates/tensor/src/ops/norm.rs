use crate::tape::{Backward, BackwardCtx};
use crate::{Result, Scalar, Tape, Tensor, Var};

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

struct BatchNormRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Training mode backpropagates through the batch statistics.
    batch_stats: bool,
}

impl<T: Scalar> Backward<T> for BatchNormRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let c = x.dim(0);
        let m = x.numel() / c;
        let dy = ctx.grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = ctx.needs[0].then(|| Tensor::zeros(x.shape()));
        let mf = T::of(m as f64);
        for ch in 0..c {
            let range = ch * m..(ch + 1) * m;
            let xh = &self.xhat[range.clone()];
            let g = &dy[range.clone()];
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            if let Some(dx) = dx.as_mut() {
                let out = &mut dx.data_mut()[range];
                let k = gamma[ch] * self.inv_std[ch];
                if self.batch_stats {
                    let kk = k / mf;
                    for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
                        *o = kk * (mf * gi - sum_g - xi * sum_gx);
                    }
                } else {
                    for (o, &gi) in out.iter_mut().zip(g) {
                        *o = k * gi;
                    }
                }
            }
        }
        vec![
            dx,
            ctx.needs[1].then(|| Tensor::from_vec(&[c], dgamma).expect("shape")),
            ctx.needs[2].then(|| Tensor::from_vec(&[c], dbeta).expect("shape")),
        ]
    }
}

fn apply_affine<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> (Tensor<T>, Vec<T>) {
    let c = x.dim(0);
    let m = x.numel() / c;
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for ch in 0..c {
        for i in ch * m..(ch + 1) * m {
            let h = (x.data()[i] - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            y[i] = gamma[ch] * h + beta[ch];
        }
    }
    (Tensor::from_vec(x.shape(), y).expect("shape"), xhat)
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over every axis but the leading channel axis,
    /// using statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let c = xv.dim(0);
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        let m = xv.numel() / c;
        let mf = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let s = &xv.data()[ch * m..(ch + 1) * m];
            let mu = s.iter().copied().sum::<T>() / mf;
            mean[ch] = mu;
            var[ch] = s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = apply_affine(xv, &mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        let unbiased = if m > 1 { mf / T::of((m - 1) as f64) } else { T::one() };
        let stats = BatchStats { mean, var: var.iter().map(|&v| v * unbiased).collect() };
        let var = self.apply(&[x, gamma, beta], y, BatchNormRule { xhat, inv_std, batch_stats: true });
        Ok((var, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.dim(0);
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = apply_affine(xv, mean, &inv_std, self.value(gamma).data(), self.value(beta).data());
        Ok(self.apply(&[x, gamma, beta], y, BatchNormRule { xhat, inv_std, batch_stats: false }))
    }
}

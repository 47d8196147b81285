use crate::tape::{Backward, BackwardCtx};
use crate::{Result, Scalar, Tape, Tensor, Var};

/// Separable bilinear interpolation weights (half-pixel centers, edge clamp).
#[derive(Clone, Debug)]
pub struct ResizePlan<T> {
    rows: Vec<(usize, usize, T)>,
    cols: Vec<(usize, usize, T)>,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis_plan<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if src == dst {
                return (o, o, T::zero());
            }
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, T::of(frac))
        })
        .collect()
}

impl<T: Scalar> ResizePlan<T> {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self { rows: axis_plan(in_h, out_h), cols: axis_plan(in_w, out_w), in_h, in_w, out_h, out_w }
    }

    /// Resize every `in_h x in_w` plane of `src` into `dst`.
    pub fn forward_planes(&self, src: &[T], dst: &mut [T]) {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        for (s, d) in src.chunks(ip).zip(dst.chunks_mut(op)) {
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                let r0 = &s[y0 * self.in_w..(y0 + 1) * self.in_w];
                let r1 = &s[y1 * self.in_w..(y1 + 1) * self.in_w];
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    d[oy * self.out_w + ox] = top + (bottom - top) * fy;
                }
            }
        }
    }

    /// Transpose of [`forward_planes`](Self::forward_planes), accumulating.
    pub fn backward_planes(&self, grad: &[T], dsrc: &mut [T]) {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let one = T::one();
        for (g, d) in grad.chunks(op).zip(dsrc.chunks_mut(ip)) {
            for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                    let v = g[oy * self.out_w + ox];
                    d[y0 * self.in_w + x0] += v * (one - fy) * (one - fx);
                    d[y0 * self.in_w + x1] += v * (one - fy) * fx;
                    d[y1 * self.in_w + x0] += v * fy * (one - fx);
                    d[y1 * self.in_w + x1] += v * fy * fx;
                }
            }
        }
    }
}

/// Bilinear resize of the two trailing axes. Same-size resizes are exact copies.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    let (h, w) = (x.dim(rank - 2), x.dim(rank - 1));
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let plan = ResizePlan::<T>::new(h, w, out_h, out_w);
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    let mut out = Tensor::zeros(&shape);
    plan.forward_planes(x.data(), out.data_mut());
    Ok(out)
}

struct ResizeRule<T> {
    plan: ResizePlan<T>,
}

impl<T: Scalar> Backward<T> for ResizeRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let mut dx = Tensor::zeros(x.shape());
        self.plan.backward_planes(ctx.grad.data(), dx.data_mut());
        vec![Some(dx)]
    }
}

struct IdentityRule;

impl<T: Scalar> Backward<T> for IdentityRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone())]
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable bilinear resize of the two trailing axes.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let (h, w) = (xv.dim(rank - 2), xv.dim(rank - 1));
        let value = bilinear_resize(xv, out_h, out_w)?;
        if (h, w) == (out_h, out_w) {
            return Ok(self.apply(&[x], value, IdentityRule));
        }
        let plan = ResizePlan::new(h, w, out_h, out_w);
        Ok(self.apply(&[x], value, ResizeRule { plan }))
    }
}

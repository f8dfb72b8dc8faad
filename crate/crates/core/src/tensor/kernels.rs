//! Raw numeric kernels shared by forward and backward passes.

use super::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub time: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn view<'a, S: Scalar>(&self, data: &'a [S], b: usize, h: usize) -> MatRef<'a, S> {
        MatRef {
            data,
            offset: b * self.time * self.dim + h * self.head_dim(),
            rows: self.time,
            cols: self.head_dim(),
            rs: self.dim,
            cs: 1,
        }
    }

    fn out_offset(&self, b: usize, h: usize) -> usize {
        b * self.time * self.dim + h * self.head_dim()
    }
}

/// Multi-head scaled dot-product attention with key-padding mask.
/// Returns the output `[B,T,d]` and the attention weights `[B,H,T,T]`.
pub(crate) fn attention_forward<S: Scalar>(
    geom: AttnGeom,
    q: &[S],
    k: &[S],
    v: &[S],
    lens: &[usize],
) -> (Vec<S>, Vec<S>) {
    let AttnGeom { batch, time, dim, heads } = geom;
    let tt = time * time;
    let scale = S::from_f64(1.0 / (geom.head_dim() as f64).sqrt());
    let mut out = vec![S::zero(); batch * time * dim];
    let mut probs = vec![S::zero(); batch * heads * tt];
    for b in 0..batch {
        let len = lens[b];
        for h in 0..heads {
            let p_off = (b * heads + h) * tt;
            if len == 0 {
                continue;
            }
            let qv = geom.view(q, b, h);
            let kv = geom.view(k, b, h);
            gemm(qv, kv.t(), scale, S::zero(), &mut probs, p_off, time, 1);
            let block = &mut probs[p_off..p_off + tt];
            for row in block.chunks_mut(time) {
                let valid = &mut row[..len];
                let max = valid.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let mut sum = S::zero();
                for x in valid.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in valid.iter_mut() {
                    *x /= sum;
                }
                for x in row[len..].iter_mut() {
                    *x = S::zero();
                }
            }
            let pm = MatRef::dense(&probs, p_off, time, time);
            let vv = geom.view(v, b, h);
            gemm(pm, vv, S::one(), S::zero(), &mut out, geom.out_offset(b, h), dim, 1);
        }
    }
    (out, probs)
}

/// Accumulates gradients of the attention inputs given the output gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    geom: AttnGeom,
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    grad_out: &[S],
    mut dq: Option<&mut [S]>,
    mut dk: Option<&mut [S]>,
    mut dv: Option<&mut [S]>,
) {
    let AttnGeom { batch, time, dim, heads } = geom;
    let tt = time * time;
    let scale = S::from_f64(1.0 / (geom.head_dim() as f64).sqrt());
    let mut dp = vec![S::zero(); tt];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * tt;
            let pm = MatRef::dense(probs, p_off, time, time);
            let go = geom.view(grad_out, b, h);
            if let Some(dv) = dv.as_deref_mut() {
                gemm(pm.t(), go, S::one(), S::one(), dv, geom.out_offset(b, h), dim, 1);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            let vv = geom.view(v, b, h);
            gemm(go, vv.t(), S::one(), S::zero(), &mut dp, 0, time, 1);
            // dS = P ⊙ (dP - rowsum(dP ⊙ P))
            let p = &probs[p_off..p_off + tt];
            for (drow, prow) in dp.chunks_mut(time).zip(p.chunks(time)) {
                let dot: S = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
                for (d, &p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
            let ds = MatRef::dense(&dp, 0, time, time);
            if let Some(dq) = dq.as_deref_mut() {
                let kv = geom.view(k, b, h);
                gemm(ds, kv, scale, S::one(), dq, geom.out_offset(b, h), dim, 1);
            }
            if let Some(dk) = dk.as_deref_mut() {
                let qv = geom.view(q, b, h);
                gemm(ds.t(), qv, scale, S::one(), dk, geom.out_offset(b, h), dim, 1);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub time: usize,
    pub freq: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k_t: usize,
    pub k_f: usize,
    pub s_t: usize,
    pub s_f: usize,
    pub out_t: usize,
    pub out_f: usize,
}

impl Conv2dGeom {
    pub fn patch(&self) -> usize {
        self.k_t * self.k_f * self.c_in
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_t * self.out_f
    }

    fn pad_t(&self) -> isize {
        ((self.k_t - 1) / 2) as isize
    }

    fn pad_f(&self) -> isize {
        ((self.k_f - 1) / 2) as isize
    }

    /// Visits every (column-matrix index, input index) pair that falls inside
    /// the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for b in 0..self.batch {
            for ot in 0..self.out_t {
                for of in 0..self.out_f {
                    let row = (b * self.out_t + ot) * self.out_f + of;
                    for kt in 0..self.k_t {
                        let it = (ot * self.s_t) as isize - self.pad_t() + kt as isize;
                        if it < 0 || it >= self.time as isize {
                            continue;
                        }
                        for kf in 0..self.k_f {
                            let iff = (of * self.s_f) as isize - self.pad_f() + kf as isize;
                            if iff < 0 || iff >= self.freq as isize {
                                continue;
                            }
                            let src = ((b * self.time + it as usize) * self.freq + iff as usize)
                                * self.c_in;
                            let dst = row * patch + (kt * self.k_f + kf) * self.c_in;
                            for c in 0..self.c_in {
                                f(dst + c, src + c);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col<S: Scalar>(geom: &Conv2dGeom, x: &[S]) -> Vec<S> {
    let mut cols = vec![S::zero(); geom.out_rows() * geom.patch()];
    geom.for_each_tap(|dst, src| cols[dst] = x[src]);
    cols
}

pub(crate) fn col2im_add<S: Scalar>(geom: &Conv2dGeom, dcols: &[S], dx: &mut [S]) {
    geom.for_each_tap(|dst, src| dx[src] += dcols[dst]);
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + S::from_f64(GELU_C) * x * x * x);
    S::from_f64(0.5) * x * (S::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64(GELU_C);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let half = S::from_f64(0.5);
    half * (S::one() + t)
        + half * x * (S::one() - t * t) * c * (S::one() + S::from_f64(3.0) * k * x * x)
}

use super::kernels::{self, AttnGeom, Conv2dGeom};
use super::{gemm, MatRef, NdArray, Scalar};
use crate::error::{Result, SlamError};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<S> {
    Owned(NdArray<S>),
    Param(ParamId),
}

enum Op<S> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var },
    Transpose01 { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { x: Var, v: Var },
    Affine { x: Var, mul: S },
    Swish { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Glu { x: Var },
    Norm { x: Var, gamma: Var, beta: Var, group: usize, xhat: Vec<S>, rstd: Vec<S> },
    DepthwiseConv1d { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom, cols: Vec<S> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    CosineRows { a: Var, b: Var, eps: S },
    Concat { xs: Vec<Var>, outer: usize },
    GatherRows { x: Var, idx: Vec<Option<usize>> },
    MaskedFill { x: Var, mask: Vec<bool> },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumRows { x: Var },
    SumLast { x: Var },
    StraightThrough { soft: Var },
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Parameter gradients indexed by [`ParamId`]; parameters the loss does not
/// reach hold zeros.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<NdArray<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Gradients { grads: store.iter().map(|(_, p)| NdArray::zeros(p.value.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &NdArray<S> {
        &self.grads[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray<S> {
        &mut self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NdArray<S>> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NdArray<S>> {
        self.grads.iter_mut()
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients<S>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

/// Records a computation so it can be differentiated once.
pub struct Graph<'p, S: Scalar> {
    store: Option<&'p ParamStore<S>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
    fault: bool,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(SlamError::Shape(msg))
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = if last == 0 { 0 } else { shape.iter().product::<usize>() / last };
    (rows, last)
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Graph {
            store: Some(store),
            param_vars: vec![None; store.len()],
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            backward_done: false,
            fault: false,
        }
    }

    /// A graph with no parameter store, for exercising ops on leaves.
    pub fn detached() -> Self {
        Graph {
            store: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            backward_done: false,
            fault: false,
        }
    }

    /// Test fixture: deliberately halves the gradient produced by every swish
    /// node so finite-difference checks have something to catch.
    pub fn inject_backward_fault(&mut self) {
        self.fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<S> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.store.expect("param node without store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    /// Gradient of a leaf created with [`Graph::leaf_grad`], after backward.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: NdArray<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: NdArray<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf_grad(&mut self, value: NdArray<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Parameters referenced by this graph so far, in store order.
    pub fn used_params(&self) -> Vec<ParamId> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| ParamId(i)))
            .collect()
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul expects matrices, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![S::zero(); m * n];
        let am = MatRef::dense(self.value(a).data(), 0, m, k);
        let bm = if trans_b {
            MatRef::dense(self.value(b).data(), 0, n, k).t()
        } else {
            MatRef::dense(self.value(b).data(), 0, k, n)
        };
        gemm(am, bm, S::one(), S::zero(), &mut out, 0, n, 1);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(NdArray::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, ng))
    }

    /// `x · w + b` over the trailing axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (rows, k) = split_last(&sx);
        if sw.len() != 2 || sw[0] != k || sx.is_empty() {
            return shape_err(format!("linear: input {sx:?} incompatible with weight {sw:?}"));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return shape_err(format!("linear: bias {:?} for output {n}", self.shape(b)));
            }
        }
        let mut out = vec![S::zero(); rows * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::dense(self.value(x).data(), 0, rows, k),
            MatRef::dense(self.value(w).data(), 0, k, n),
            S::one(),
            S::one(),
            &mut out,
            0,
            n,
            1,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(NdArray::new(&shape, out)?, Op::Linear { x, w, b }, ng))
    }

    /// Batched matmul `[t,m,k] x [t,k,n] -> [t,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err(format!("bmm: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (t, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); t * m * n];
        for i in 0..t {
            gemm(
                MatRef::dense(self.value(a).data(), i * m * k, m, k),
                MatRef::dense(self.value(b).data(), i * k * n, k, n),
                S::one(),
                S::zero(),
                &mut out,
                i * m * n,
                n,
                1,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(NdArray::new(&[t, m, n], out)?, Op::Bmm { a, b }, ng))
    }

    /// Swaps the first two axes of a rank-3 array.
    pub fn transpose01(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("transpose01 expects rank 3, got {s:?}"));
        }
        let out = transpose01_data(self.value(x).data(), s[0], s[1], s[2]);
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&[s[1], s[0], s[2]], out)?, Op::Transpose01 { x }, ng))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data: Vec<S> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(NdArray::new(&shape, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a vector along the trailing axis.
    pub fn add_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(v) != [n] || self.shape(x).is_empty() {
            return shape_err(format!(
                "add_broadcast: vector {:?} against {:?}",
                self.shape(v),
                self.shape(x)
            ));
        }
        let vd = self.value(v).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (a, &b) in row.iter_mut().zip(&vd) {
                *a += b;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(NdArray::new(&shape, data)?, Op::AddBroadcast { x, v }, ng))
    }

    /// `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let (m, a) = (S::from_f64(mul), S::from_f64(add));
        self.unary(x, |v| m * v + a, Op::Affine { x, mul: m })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let data: Vec<S> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&shape, data)?, op, ng))
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * kernels::sigmoid(v), Op::Swish { x })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.ln(), Op::Log { x })
    }

    /// Gated linear unit over the trailing axis: `a ⊙ σ(b)` for `[a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, two_n) = split_last(&s);
        if s.is_empty() || two_n % 2 != 0 {
            return shape_err(format!("glu needs an even trailing axis, got {s:?}"));
        }
        let n = two_n / 2;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * n);
        for row in xd.chunks(two_n) {
            for j in 0..n {
                out.push(row[j] * kernels::sigmoid(row[n + j]));
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&shape, out)?, Op::Glu { x }, ng))
    }

    // ------------------------------------------------------------------
    // Normalisation
    // ------------------------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        self.norm(x, gamma, beta, n, eps)
    }

    /// Per-position group normalisation over the trailing (channel) axis.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let n = self.value(x).last_dim();
        if groups == 0 || n % groups != 0 {
            return shape_err(format!("group_norm: {n} channels not divisible by {groups} groups"));
        }
        self.norm(x, gamma, beta, n / groups, eps)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, group: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = self.value(x).last_dim();
        if s.is_empty() || self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return shape_err(format!(
                "norm: input {s:?} with gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = S::from_f64(eps);
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(xd.len() / group.max(1));
        let mut out = vec![S::zero(); xd.len()];
        let inv = S::one() / S::from_f64(group as f64);
        for (ci, chunk) in xd.chunks(group).enumerate() {
            let mean = chunk.iter().copied().sum::<S>() * inv;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            let base = ci * group;
            for (j, &v) in chunk.iter().enumerate() {
                let h = (v - mean) * r;
                xhat[base + j] = h;
                let c = (base + j) % n;
                out[base + j] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(NdArray::new(&s, out)?, Op::Norm { x, gamma, beta, group, xhat, rstd }, ng))
    }

    // ------------------------------------------------------------------
    // Convolutions and attention
    // ------------------------------------------------------------------

    /// Same-padded depthwise convolution along axis 1 of `[B,T,C]`; the
    /// kernel `w` is `[K,C]` with odd `K`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if s.len() != 3 || sw.len() != 2 || sw[1] != s[2] || sw[0] % 2 == 0 {
            return shape_err(format!("depthwise_conv1d: input {s:?} kernel {sw:?}"));
        }
        if self.shape(b) != [s[2]] {
            return shape_err(format!("depthwise_conv1d: bias {:?}", self.shape(b)));
        }
        let (bsz, t, c) = (s[0], s[1], s[2]);
        let k = sw[0];
        let pad = (k - 1) / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![S::zero(); xd.len()];
        for bi in 0..bsz {
            for ti in 0..t {
                let o = (bi * t + ti) * c;
                out[o..o + c].copy_from_slice(bd);
                for j in 0..k {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xo = (bi * t + src as usize) * c;
                    let wrow = &wd[j * c..(j + 1) * c];
                    for ch in 0..c {
                        out[o + ch] += xd[xo + ch] * wrow[ch];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(NdArray::new(&s, out)?, Op::DepthwiseConv1d { x, w, b }, ng))
    }

    /// Same-padded strided 2-D convolution over `[B,T,F,C_in]` with kernel
    /// `[k_t,k_f,C_in,C_out]`. Output extents are `ceil(T/s_t)` and `ceil(F/s_f)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if s.len() != 4 || sw.len() != 4 || sw[2] != s[3] {
            return shape_err(format!("conv2d: input {s:?} kernel {sw:?}"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(SlamError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if self.shape(b) != [sw[3]] {
            return shape_err(format!("conv2d: bias {:?}", self.shape(b)));
        }
        let (k_t, k_f) = (sw[0], sw[1]);
        let (pad_t, pad_f) = ((k_t.max(1) - 1) / 2, (k_f.max(1) - 1) / 2);
        if k_t == 0 || k_f == 0 || k_t > s[1] + 2 * pad_t || k_f > s[2] + 2 * pad_f {
            return shape_err(format!(
                "conv2d: kernel {k_t}x{k_f} larger than padded input {}x{}",
                s[1] + 2 * pad_t,
                s[2] + 2 * pad_f
            ));
        }
        let geom = Conv2dGeom {
            batch: s[0],
            time: s[1],
            freq: s[2],
            c_in: s[3],
            c_out: sw[3],
            k_t,
            k_f,
            s_t: stride.0,
            s_f: stride.1,
            out_t: s[1].div_ceil(stride.0),
            out_f: s[2].div_ceil(stride.1),
        };
        let cols = kernels::im2col(&geom, self.value(x).data());
        let rows = geom.out_rows();
        let mut out = vec![S::zero(); rows * geom.c_out];
        let bias = self.value(b).data();
        for row in out.chunks_mut(geom.c_out) {
            row.copy_from_slice(bias);
        }
        gemm(
            MatRef::dense(&cols, 0, rows, geom.patch()),
            MatRef::dense(self.value(w).data(), 0, geom.patch(), geom.c_out),
            S::one(),
            S::one(),
            &mut out,
            0,
            geom.c_out,
            1,
        );
        let shape = [geom.batch, geom.out_t, geom.out_f, geom.c_out];
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(NdArray::new(&shape, out)?, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// Multi-head scaled dot-product attention over `[B,T,d]` inputs. Keys at
    /// positions `>= lens[b]` receive zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        lens: &[usize],
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return shape_err(format!(
                "attention: q {s:?} k {:?} v {:?}",
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || s[2] % heads != 0 {
            return shape_err(format!("attention: dim {} not divisible by {heads} heads", s[2]));
        }
        if lens.len() != s[0] || lens.iter().any(|&l| l > s[1]) {
            return shape_err(format!("attention: lengths {lens:?} for shape {s:?}"));
        }
        let geom = AttnGeom { batch: s[0], time: s[1], dim: s[2], heads };
        let (out, probs) = kernels::attention_forward(
            geom,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            lens,
        );
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(NdArray::new(&s, out)?, Op::Attention { q, k, v, geom, probs }, ng))
    }

    /// Attention weights `[B,H,T,T]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ------------------------------------------------------------------
    // Lookup, selection, reshaping
    // ------------------------------------------------------------------

    /// Rows of `table` (`[V,d]`) for each id; output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return shape_err(format!("embedding: table {st:?}, {} ids, prefix {prefix:?}", ids.len()));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(SlamError::IndexOutOfRange { index: bad, size: vocab });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        Ok(self.push(NdArray::new(&shape, out)?, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Picks rows (trailing-axis vectors) of `x`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (rows, d) = split_last(self.shape(x));
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= rows) {
            return Err(SlamError::IndexOutOfRange { index: *bad, size: rows });
        }
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); idx.len() * d];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out[r * d..(r + 1) * d].copy_from_slice(&xd[i * d..(i + 1) * d]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&[idx.len(), d], out)?, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&f) => self.shape(f).to_vec(),
            None => return shape_err("concat of zero arrays".into()),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err(format!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(NdArray::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), outer }, ng))
    }

    /// Replaces elements where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return shape_err(format!(
                "masked_fill: mask of {} for shape {:?}",
                mask.len(),
                self.shape(x)
            ));
        }
        let v = S::from_f64(value);
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .map(|(&a, &m)| if m { v } else { a })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&shape, data)?, Op::MaskedFill { x, mask: mask.to_vec() }, ng))
    }

    /// Zeroes every time step `t >= lens[b]` of a `[B,T,...]` array.
    pub fn mask_time(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || lens.len() != s[0] {
            return shape_err(format!("mask_time: lengths {lens:?} for shape {s:?}"));
        }
        let per_step: usize = s[2..].iter().product();
        let mut mask = Vec::with_capacity(s.iter().product());
        for &len in lens {
            for t in 0..s[1] {
                mask.extend(std::iter::repeat_n(t >= len, per_step));
            }
        }
        self.masked_fill(x, &mask, 0.0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape { x }, ng))
    }

    /// Forward value of `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: NdArray<S>) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return shape_err(format!(
                "straight_through: hard {:?} vs soft {:?}",
                hard.shape(),
                self.shape(soft)
            ));
        }
        let ng = self.ng(soft);
        Ok(self.push(hard, Op::StraightThrough { soft }, ng))
    }

    // ------------------------------------------------------------------
    // Reductions, softmax, losses
    // ------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        Ok(self.push(NdArray::scalar(s), Op::Sum { x }, ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(SlamError::Empty("mean of empty array".into()));
        }
        let s: S = self.value(x).data().iter().copied().sum::<S>() / S::from_f64(n as f64);
        let ng = self.ng(x);
        Ok(self.push(NdArray::scalar(s), Op::Mean { x }, ng))
    }

    /// Sums a `[n, c]` matrix over its rows.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("sum_rows expects a matrix, got {s:?}"));
        }
        let mut out = vec![S::zero(); s[1]];
        for row in self.value(x).data().chunks(s[1].max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&[s[1]], out)?, Op::SumRows { x }, ng))
    }

    /// Sums over the trailing axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return shape_err("sum_last of a scalar".into());
        }
        let n = s[s.len() - 1];
        let out: Vec<S> = if n == 0 {
            vec![S::zero(); s[..s.len() - 1].iter().product()]
        } else {
            self.value(x).data().chunks(n).map(|r| r.iter().copied().sum()).collect()
        };
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&s[..s.len() - 1], out)?, Op::SumLast { x }, ng))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&s, data)?, Op::Softmax { x }, ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                let lse = log_sum_exp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(NdArray::new(&s, data)?, Op::LogSoftmax { x }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return shape_err(format!("cross_entropy: logits {s:?} with {} targets", targets.len()));
        }
        let (n, v) = (s[0], s[1]);
        if v < 2 {
            return Err(SlamError::InvalidArgument(format!("cross_entropy needs V >= 2, got {v}")));
        }
        if n == 0 {
            return Err(SlamError::Empty("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(SlamError::IndexOutOfRange { index: bad, size: v });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = S::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        loss /= S::from_f64(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            NdArray::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Row-wise cosine similarity of two `[n,d]` matrices.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let (n, d) = split_last(self.shape(a));
        let eps = S::from_f64(1e-8);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (ra, rb) = (&ad[i * d..(i + 1) * d], &bd[i * d..(i + 1) * d]);
            let na = norm(ra).max(eps);
            let nb = norm(rb).max(eps);
            let dot: S = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(NdArray::new(&[n], out)?, Op::CosineRows { a, b, eps }, ng))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter in the store (zeros where unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.backward_done {
            return Err(SlamError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(SlamError::NonScalarLoss(ls.to_vec()));
        }
        if !self.value(loss).is_finite() {
            return Err(SlamError::NonFinite("loss".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let mut out = match self.store {
            Some(store) => Gradients::zeros_like(store),
            None => Gradients { grads: Vec::new() },
        };
        self.leaf_grads.resize_with(self.nodes.len(), || None);
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &self.nodes[i].value {
                Value::Param(id) => {
                    let dst = out.get_mut(*id).data_mut();
                    for (d, v) in dst.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                Value::Owned(_) => self.leaf_grads[i] = Some(g),
            }
        }
        if !out.is_finite() {
            return Err(SlamError::NonFinite("parameter gradients".into()));
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Accumulation target for an input, allocated lazily.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let n = self.value(v).numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        let out = self.value(Var(i));
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let gm = MatRef::dense(g, 0, m, n);
                if let Some(da) = slot!(*a) {
                    let bm = if *trans_b {
                        MatRef::dense(self.value(*b).data(), 0, n, k)
                    } else {
                        MatRef::dense(self.value(*b).data(), 0, k, n).t()
                    };
                    gemm(gm, bm, S::one(), S::one(), da, 0, k, 1);
                }
                if let Some(db) = slot!(*b) {
                    let am = MatRef::dense(self.value(*a).data(), 0, m, k);
                    if *trans_b {
                        gemm(gm.t(), am, S::one(), S::one(), db, 0, k, 1);
                    } else {
                        gemm(am.t(), gm, S::one(), S::one(), db, 0, n, 1);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, k) = split_last(self.shape(*x));
                let n = self.shape(*w)[1];
                let gm = MatRef::dense(g, 0, rows, n);
                if let Some(dx) = slot!(*x) {
                    let wm = MatRef::dense(self.value(*w).data(), 0, k, n);
                    gemm(gm, wm.t(), S::one(), S::one(), dx, 0, k, 1);
                }
                if let Some(dw) = slot!(*w) {
                    let xm = MatRef::dense(self.value(*x).data(), 0, rows, k);
                    gemm(xm.t(), gm, S::one(), S::one(), dw, 0, n, 1);
                }
                if let Some(b) = b {
                    if let Some(db) = slot!(*b) {
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (t, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if let Some(da) = slot!(*a) {
                    for j in 0..t {
                        gemm(
                            MatRef::dense(g, j * m * n, m, n),
                            MatRef::dense(self.value(*b).data(), j * k * n, k, n).t(),
                            S::one(),
                            S::one(),
                            da,
                            j * m * k,
                            k,
                            1,
                        );
                    }
                }
                if let Some(db) = slot!(*b) {
                    for j in 0..t {
                        gemm(
                            MatRef::dense(self.value(*a).data(), j * m * k, m, k).t(),
                            MatRef::dense(g, j * m * n, m, n),
                            S::one(),
                            S::one(),
                            db,
                            j * k * n,
                            n,
                            1,
                        );
                    }
                }
            }
            Op::Transpose01 { x } => {
                if let Some(dx) = slot!(*x) {
                    let s = self.shape(*x);
                    let back = transpose01_data(g, s[1], s[0], s[2]);
                    add_into(dx, &back);
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = slot!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = slot!(*b) {
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = slot!(*a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot!(*b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddBroadcast { x, v } => {
                if let Some(dx) = slot!(*x) {
                    add_into(dx, g);
                }
                if let Some(dv) = slot!(*v) {
                    let n = dv.len();
                    for row in g.chunks(n) {
                        add_into(dv, row);
                    }
                }
            }
            Op::Affine { x, mul } => {
                if let Some(dx) = slot!(*x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += *mul * gv;
                    }
                }
            }
            Op::Swish { x } => {
                if let Some(dx) = slot!(*x) {
                    let f = if self.fault { S::from_f64(0.5) } else { S::one() };
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        let s = kernels::sigmoid(xv);
                        *d += f * gv * s * (S::one() + xv * (S::one() - s));
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        *d += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y * (S::one() - y);
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y;
                    }
                }
            }
            Op::Log { x } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Glu { x } => {
                if let Some(dx) = slot!(*x) {
                    let xd = self.value(*x).data();
                    let n = out.last_dim();
                    for (r, grow) in g.chunks(n).enumerate() {
                        let base = r * 2 * n;
                        for j in 0..n {
                            let (a, bv) = (xd[base + j], xd[base + n + j]);
                            let s = kernels::sigmoid(bv);
                            dx[base + j] += grow[j] * s;
                            dx[base + n + j] += grow[j] * a * s * (S::one() - s);
                        }
                    }
                }
            }
            Op::Norm { x, gamma, beta, group, xhat, rstd } => {
                let n = out.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(dg) = slot!(*gamma) {
                    for (idx, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[idx % n] += gv * h;
                    }
                }
                if let Some(db) = slot!(*beta) {
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                }
                if let Some(dx) = slot!(*x) {
                    let group = *group;
                    let inv = S::one() / S::from_f64(group as f64);
                    for (ci, &r) in rstd.iter().enumerate() {
                        let base = ci * group;
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for j in 0..group {
                            let dh = g[base + j] * gam[(base + j) % n];
                            mean_d += dh;
                            mean_dh += dh * xhat[base + j];
                        }
                        mean_d *= inv;
                        mean_dh *= inv;
                        for j in 0..group {
                            let dh = g[base + j] * gam[(base + j) % n];
                            dx[base + j] += r * (dh - mean_d - xhat[base + j] * mean_dh);
                        }
                    }
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let s = self.shape(*x).to_vec();
                let (bsz, t, c) = (s[0], s[1], s[2]);
                let k = self.shape(*w)[0];
                let pad = (k - 1) / 2;
                if let Some(db) = slot!(*b) {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for bi in 0..bsz {
                        for ti in 0..t {
                            for j in 0..k {
                                let src = ti as isize + j as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                f((bi * t + ti) * c, (bi * t + src as usize) * c, j * c);
                            }
                        }
                    }
                };
                if let Some(dw) = slot!(*w) {
                    let xd = self.value(*x).data();
                    visit(&mut |o, xo, wo| {
                        for ch in 0..c {
                            dw[wo + ch] += g[o + ch] * xd[xo + ch];
                        }
                    });
                }
                if let Some(dx) = slot!(*x) {
                    let wd = self.value(*w).data();
                    visit(&mut |o, xo, wo| {
                        for ch in 0..c {
                            dx[xo + ch] += g[o + ch] * wd[wo + ch];
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.out_rows();
                let gm = MatRef::dense(g, 0, rows, geom.c_out);
                if let Some(db) = slot!(*b) {
                    for row in g.chunks(geom.c_out) {
                        add_into(db, row);
                    }
                }
                if let Some(dw) = slot!(*w) {
                    let cm = MatRef::dense(cols, 0, rows, geom.patch());
                    gemm(cm.t(), gm, S::one(), S::one(), dw, 0, geom.c_out, 1);
                }
                if let Some(dx) = slot!(*x) {
                    let mut dcols = vec![S::zero(); rows * geom.patch()];
                    let wm = MatRef::dense(self.value(*w).data(), 0, geom.patch(), geom.c_out);
                    gemm(gm, wm.t(), S::one(), S::zero(), &mut dcols, 0, geom.patch(), 1);
                    kernels::col2im_add(geom, &dcols, dx);
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                // Inputs may alias (self-attention on one projection), so
                // compute into scratch buffers and accumulate afterwards.
                let numel = out.numel();
                let mut bufs: [Option<Vec<S>>; 3] = [None, None, None];
                for (slot_i, var) in [*q, *k, *v].into_iter().enumerate() {
                    if nodes[var.0].needs_grad {
                        bufs[slot_i] = Some(vec![S::zero(); numel]);
                    }
                }
                let [bq, bk, bv] = &mut bufs;
                kernels::attention_backward(
                    *geom,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    bq.as_deref_mut(),
                    bk.as_deref_mut(),
                    bv.as_deref_mut(),
                );
                for (var, buf) in [*q, *k, *v].into_iter().zip(bufs) {
                    if let (Some(buf), Some(d)) = (buf, slot!(var)) {
                        add_into(d, &buf);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = slot!(*table) {
                    let d = out.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(dx) = slot!(*x) {
                    let d = out.last_dim();
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            add_into(&mut dx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::Concat { xs, outer, .. } => {
                let outer = (*outer).max(1);
                let total = g.len() / outer;
                let mut offset = 0;
                for &x in xs {
                    let chunk = self.value(x).numel() / outer;
                    if let Some(dx) = slot!(x) {
                        for o in 0..outer {
                            let src = o * total + offset;
                            add_into(&mut dx[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(dx) = slot!(*x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = slot!(*x) {
                    add_into(dx, g);
                }
            }
            Op::StraightThrough { soft } => {
                if let Some(ds) = slot!(*soft) {
                    add_into(ds, g);
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = slot!(*x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = slot!(*x) {
                    let s = g[0] / S::from_f64(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumRows { x } => {
                if let Some(dx) = slot!(*x) {
                    let c = g.len();
                    for row in dx.chunks_mut(c.max(1)) {
                        add_into(row, g);
                    }
                }
            }
            Op::SumLast { x } => {
                if let Some(dx) = slot!(*x) {
                    let n = self.value(*x).last_dim();
                    for (row, &gv) in dx.chunks_mut(n.max(1)).zip(g) {
                        for d in row.iter_mut() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if let Some(dx) = slot!(*x) {
                    let n = out.last_dim();
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                    {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if let Some(dx) = slot!(*x) {
                    let n = out.last_dim();
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                    {
                        let gsum: S = grow.iter().copied().sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - y.exp() * gsum;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(dl) = slot!(*logits) {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / S::from_f64(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &probs[r * v..(r + 1) * v];
                        let drow = &mut dl[r * v..(r + 1) * v];
                        for (d, &p) in drow.iter_mut().zip(row) {
                            *d += scale * p;
                        }
                        drow[t] -= scale;
                    }
                }
            }
            Op::CosineRows { a, b, eps } => {
                let (n, d) = split_last(self.shape(*a));
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![S::zero(); n * d];
                let mut gb = vec![S::zero(); n * d];
                for i in 0..n {
                    let (ra, rb) = (&ad[i * d..(i + 1) * d], &bd[i * d..(i + 1) * d]);
                    let (na, nb) = (norm(ra).max(*eps), norm(rb).max(*eps));
                    let c = out.data()[i];
                    let gi = g[i];
                    for j in 0..d {
                        ga[i * d + j] = gi * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        gb[i * d + j] = gi * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                if let Some(da) = slot!(*a) {
                    add_into(da, &ga);
                }
                if let Some(db) = slot!(*b) {
                    add_into(db, &gb);
                }
            }
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn transpose01_data<S: Scalar>(x: &[S], p: usize, q: usize, r: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..p {
        for j in 0..q {
            let src = (i * q + j) * r;
            let dst = (j * p + i) * r;
            out[dst..dst + r].copy_from_slice(&x[src..src + r]);
        }
    }
    out
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    if max == S::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

/// Numerically stable softmax; an all `-inf` row becomes all zeros.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|x| *x = S::zero());
        return;
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

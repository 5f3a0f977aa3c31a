//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a forward computation as a flat node list; calling
//! [`Tape::backward`] on a scalar node propagates vector-Jacobian
//! products in reverse creation order. Leaves ([`Tape::leaf`]) receive
//! gradients, constants ([`Tape::constant`]) do not — frozen parameters
//! (the generator, a frozen baseline encoder, embedder weights) enter as
//! constants, which is what enforces the freezing contract during
//! training.
//!
//! Tapes are single-sample and single-threaded by design; batch
//! parallelism happens one tape per sample (see [`crate::exec`]).

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type Vjp = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    /// (parent index, vector-Jacobian product) for parents that require grad.
    parents: Vec<(usize, Vjp)>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (0-d) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let arr = self.value(v);
        debug_assert_eq!(arr.ndim(), 0);
        *arr.first().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<(usize, Vjp)>) -> Var {
        let requires_grad = !parents.is_empty();
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input: gradients never flow into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Vec::new())
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(scalar(v))
    }

    /// Tracked input: [`Tape::backward`] reports its gradient.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(
        &mut self,
        a: Var,
        value: ArrayD<f64>,
        vjp: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var {
        let parents: Vec<(usize, Vjp)> = if self.tracked(a) {
            vec![(a.0, Box::new(vjp))]
        } else {
            Vec::new()
        };
        self.push(value, parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(a) {
            parents.push((a.0, Box::new(|up: &ArrayD<f64>| up.clone())));
        }
        if self.tracked(b) {
            parents.push((b.0, Box::new(|up: &ArrayD<f64>| up.clone())));
        }
        self.push(value, parents)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(a) {
            parents.push((a.0, Box::new(|up: &ArrayD<f64>| up.clone())));
        }
        if self.tracked(b) {
            parents.push((b.0, Box::new(|up: &ArrayD<f64>| up.mapv(|v| -v))));
        }
        self.push(value, parents)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &*self.nodes[a.0].value * &*self.nodes[b.0].value;
        let av = self.rc(a);
        let bv = self.rc(b);
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(a) {
            let bv = Rc::clone(&bv);
            parents.push((a.0, Box::new(move |up: &ArrayD<f64>| up * &*bv)));
        }
        if self.tracked(b) {
            parents.push((b.0, Box::new(move |up: &ArrayD<f64>| up * &*av)));
        }
        self.push(value, parents)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        self.unary(a, value, move |up| up.mapv(|v| v * k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + k);
        self.unary(a, value, |up| up.clone())
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.nodes[a.0].value.sum());
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        self.unary(a, value, move |up| {
            ArrayD::from_elem(IxDyn(&shape), *up.first().unwrap())
        })
    }

    /// Dot product of two 1-d nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        debug_assert_eq!(self.value(a).ndim(), 1);
        let value = scalar(
            self.nodes[a.0]
                .value
                .iter()
                .zip(self.nodes[b.0].value.iter())
                .map(|(x, y)| x * y)
                .sum(),
        );
        let av = self.rc(a);
        let bv = self.rc(b);
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(a) {
            let bv = Rc::clone(&bv);
            parents.push((
                a.0,
                Box::new(move |up: &ArrayD<f64>| bv.mapv(|v| v * *up.first().unwrap())),
            ));
        }
        if self.tracked(b) {
            parents.push((
                b.0,
                Box::new(move |up: &ArrayD<f64>| av.mapv(|v| v * *up.first().unwrap())),
            ));
        }
        self.push(value, parents)
    }

    /// `sqrt` of a 0-d node with a zero-safe subgradient at 0.
    pub fn sqrt_guarded(&mut self, a: Var) -> Var {
        let s = self.scalar_value(a);
        let root = s.max(0.0).sqrt();
        self.unary(a, scalar(root), move |up| {
            let g = if root > 0.0 {
                0.5 / root * *up.first().unwrap()
            } else {
                0.0
            };
            scalar(g)
        })
    }

    /// `1 / (s + eps)` for a 0-d node.
    pub fn recip_eps(&mut self, a: Var, eps: f64) -> Var {
        let s = self.scalar_value(a) + eps;
        let value = scalar(1.0 / s);
        self.unary(a, value, move |up| scalar(-*up.first().unwrap() / (s * s)))
    }

    /// Multiply a tensor by a 0-d scalar node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        debug_assert_eq!(self.value(s).ndim(), 0);
        let sv = self.scalar_value(s);
        let value = self.nodes[x.0].value.mapv(|v| v * sv);
        let xv = self.rc(x);
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(x) {
            parents.push((x.0, Box::new(move |up: &ArrayD<f64>| up.mapv(|v| v * sv))));
        }
        if self.tracked(s) {
            parents.push((
                s.0,
                Box::new(move |up: &ArrayD<f64>| {
                    scalar(up.iter().zip(xv.iter()).map(|(u, v)| u * v).sum())
                }),
            ));
        }
        self.push(value, parents)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        let out = Rc::new(value);
        let out_for_vjp = Rc::clone(&out);
        let parents: Vec<(usize, Vjp)> = if self.tracked(a) {
            vec![(
                a.0,
                Box::new(move |up: &ArrayD<f64>| {
                    let mut g = up.clone();
                    g.zip_mut_with(&out_for_vjp, |u, y| *u *= 1.0 - y * y);
                    g
                }),
            )]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            value: out,
            requires_grad: !parents.is_empty(),
            parents,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| if v >= 0.0 { v } else { v * slope });
        let xv = self.rc(a);
        self.unary(a, value, move |up| {
            let mut g = up.clone();
            g.zip_mut_with(&xv, |u, x| {
                if *x < 0.0 {
                    *u *= slope;
                }
            });
            g
        })
    }

    /// Matrix-vector product: `w` is `[out, in]`, `v` is `[in]`.
    pub fn matvec(&mut self, w: Var, v: Var) -> Var {
        let wv = self.rc(w);
        let vv = self.rc(v);
        let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
        debug_assert_eq!(vv.shape(), [cols]);
        let ws = wv.as_slice().expect("contiguous");
        let vs = vv.as_slice().expect("contiguous");
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &ws[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for c in 0..cols {
                acc += row[c] * vs[c];
            }
            out[r] = acc;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[rows]), out).unwrap();
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(w) {
            let vv = Rc::clone(&vv);
            parents.push((
                w.0,
                Box::new(move |up: &ArrayD<f64>| {
                    let us = up.as_slice().unwrap();
                    let vs = vv.as_slice().unwrap();
                    let mut g = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let u = us[r];
                        let grow = &mut g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] = u * vs[c];
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), g).unwrap()
                }),
            ));
        }
        if self.tracked(v) {
            let wv = Rc::clone(&wv);
            parents.push((
                v.0,
                Box::new(move |up: &ArrayD<f64>| {
                    let us = up.as_slice().unwrap();
                    let ws = wv.as_slice().unwrap();
                    let mut g = vec![0.0; cols];
                    for r in 0..rows {
                        let u = us[r];
                        let row = &ws[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            g[c] += u * row[c];
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[cols]), g).unwrap()
                }),
            ));
        }
        self.push(value, parents)
    }

    /// Same-padding 2-d convolution. `x` is `[H, W, Cin]`, `w` is
    /// `[K, K, Cin, Cout]` with odd `K`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let xv = self.rc(x);
        let wv = self.rc(w);
        let value = kernels::conv2d_forward(&xv, &wv);
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(x) {
            let wv = Rc::clone(&wv);
            let xshape: Vec<usize> = xv.shape().to_vec();
            parents.push((
                x.0,
                Box::new(move |up: &ArrayD<f64>| kernels::conv2d_backward_input(up, &wv, &xshape)),
            ));
        }
        if self.tracked(w) {
            let xv = Rc::clone(&xv);
            let wshape: Vec<usize> = wv.shape().to_vec();
            parents.push((
                w.0,
                Box::new(move |up: &ArrayD<f64>| kernels::conv2d_backward_weight(up, &xv, &wshape)),
            ));
        }
        self.push(value, parents)
    }

    /// Per-channel scale: `x[h,w,c] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let xv = self.rc(x);
        let sv = self.rc(s);
        let channels = xv.shape()[2];
        debug_assert_eq!(sv.shape(), [channels]);
        let value = kernels::mul_channel_forward(&xv, &sv);
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(x) {
            let sv = Rc::clone(&sv);
            parents.push((
                x.0,
                Box::new(move |up: &ArrayD<f64>| kernels::mul_channel_forward(up, &sv)),
            ));
        }
        if self.tracked(s) {
            let xv = Rc::clone(&xv);
            parents.push((
                s.0,
                Box::new(move |up: &ArrayD<f64>| {
                    let mut g = vec![0.0; channels];
                    for (u, (x, idx)) in up.iter().zip(xv.iter().zip(0..)) {
                        g[idx % channels] += u * x;
                    }
                    ArrayD::from_shape_vec(IxDyn(&[channels]), g).unwrap()
                }),
            ));
        }
        self.push(value, parents)
    }

    /// Per-channel bias: `x[h,w,c] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = self.rc(x);
        let bv = self.rc(b);
        let channels = xv.shape()[2];
        debug_assert_eq!(bv.shape(), [channels]);
        let mut value = (*xv).clone();
        let bs = bv.as_slice().unwrap();
        for (idx, v) in value.iter_mut().enumerate() {
            *v += bs[idx % channels];
        }
        let mut parents: Vec<(usize, Vjp)> = Vec::new();
        if self.tracked(x) {
            parents.push((x.0, Box::new(|up: &ArrayD<f64>| up.clone())));
        }
        if self.tracked(b) {
            parents.push((
                b.0,
                Box::new(move |up: &ArrayD<f64>| {
                    let mut g = vec![0.0; channels];
                    for (idx, u) in up.iter().enumerate() {
                        g[idx % channels] += u;
                    }
                    ArrayD::from_shape_vec(IxDyn(&[channels]), g).unwrap()
                }),
            ));
        }
        self.push(value, parents)
    }

    /// Nearest-neighbor 2x upsampling of an `[H, W, C]` node.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let value = kernels::upsample2_forward(&xv);
        self.unary(x, value, move |up| kernels::upsample2_backward(up))
    }

    /// 2x2 average pooling (stride 2) of an `[H, W, C]` node.
    pub fn avgpool2(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let value = kernels::avgpool2_forward(&xv);
        self.unary(x, value, move |up| kernels::avgpool2_backward(up))
    }

    /// Spatial mean of an `[H, W, C]` node, producing `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; c];
        for (idx, v) in xv.iter().enumerate() {
            out[idx % c] += v;
        }
        let denom = (h * w) as f64;
        for v in &mut out {
            *v /= denom;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap();
        self.unary(x, value, move |up| {
            let us = up.as_slice().unwrap();
            let mut g = ArrayD::zeros(IxDyn(&[h, w, c]));
            for (idx, v) in g.iter_mut().enumerate() {
                *v = us[idx % c] / denom;
            }
            g
        })
    }

    /// Flatten to 1-d.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let shape: Vec<usize> = xv.shape().to_vec();
        let n: usize = shape.iter().product();
        let value = xv
            .to_shape(IxDyn(&[n]))
            .expect("contiguous flatten")
            .to_owned();
        self.unary(x, value, move |up| {
            up.to_shape(IxDyn(&shape)).unwrap().to_owned()
        })
    }

    /// Flattened squared L2 norm: `sum(x * x)` as a 0-d node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    /// Flattened L2 norm with zero-safe gradient.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let ss = self.sum_squares(x);
        self.sqrt_guarded(ss)
    }

    /// Unit-normalize a 1-d node (epsilon-guarded at zero norm).
    pub fn normalize(&mut self, v: Var) -> Var {
        let n = self.l2_norm(v);
        let inv = self.recip_eps(n, 1e-12);
        self.mul_scalar_var(v, inv)
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).ndim(), 0, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (parent, vjp) in &node.parents {
                let contrib = vjp(&up);
                match &mut grads[*parent] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            // Leaves keep their accumulated gradient.
            if node.parents.is_empty() && node.requires_grad {
                grads[idx] = Some(up);
            }
        }
        Gradients { grads }
    }
}

/// Dense kernels shared by the tape ops. All tensors are standard-layout
/// `[H, W, C]` (images) or `[K, K, Cin, Cout]` (conv weights).
pub(crate) mod kernels {
    use ndarray::{ArrayD, IxDyn};

    pub fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>) -> ArrayD<f64> {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cin_w, cout) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        assert_eq!(w.shape()[1], k, "square kernels only");
        assert_eq!(cin, cin_w, "channel mismatch");
        assert_eq!(k % 2, 1, "odd kernels only");
        let p = (k / 2) as isize;
        let xs = x.as_slice().expect("contiguous");
        let ws = w.as_slice().expect("contiguous");
        let mut out = vec![0.0; h * wd * cout];
        let mut acc = vec![0.0; cout];
        for oy in 0..h {
            for ox in 0..wd {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - p;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = ((iy as usize) * wd + ix as usize) * cin;
                        let wbase = (ky * k + kx) * cin * cout;
                        for i in 0..cin {
                            let xv = xs[xbase + i];
                            let wrow = &ws[wbase + i * cout..wbase + (i + 1) * cout];
                            for (a, wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
                out[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout].copy_from_slice(&acc);
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[h, wd, cout]), out).unwrap()
    }

    pub fn conv2d_backward_input(
        up: &ArrayD<f64>,
        w: &ArrayD<f64>,
        xshape: &[usize],
    ) -> ArrayD<f64> {
        let (h, wd, cin) = (xshape[0], xshape[1], xshape[2]);
        let (k, cout) = (w.shape()[0], w.shape()[3]);
        let p = (k / 2) as isize;
        let us = up.as_slice().expect("contiguous");
        let ws = w.as_slice().expect("contiguous");
        let mut dx = vec![0.0; h * wd * cin];
        for oy in 0..h {
            for ox in 0..wd {
                let ubase = (oy * wd + ox) * cout;
                let urow = &us[ubase..ubase + cout];
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - p;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = ((iy as usize) * wd + ix as usize) * cin;
                        let wbase = (ky * k + kx) * cin * cout;
                        for i in 0..cin {
                            let wrow = &ws[wbase + i * cout..wbase + (i + 1) * cout];
                            let mut acc = 0.0;
                            for (u, wv) in urow.iter().zip(wrow) {
                                acc += u * wv;
                            }
                            dx[xbase + i] += acc;
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[h, wd, cin]), dx).unwrap()
    }

    pub fn conv2d_backward_weight(
        up: &ArrayD<f64>,
        x: &ArrayD<f64>,
        wshape: &[usize],
    ) -> ArrayD<f64> {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout) = (wshape[0], wshape[3]);
        let p = (k / 2) as isize;
        let us = up.as_slice().expect("contiguous");
        let xs = x.as_slice().expect("contiguous");
        let mut dw = vec![0.0; k * k * cin * cout];
        for oy in 0..h {
            for ox in 0..wd {
                let ubase = (oy * wd + ox) * cout;
                let urow = &us[ubase..ubase + cout];
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - p;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = ((iy as usize) * wd + ix as usize) * cin;
                        let wbase = (ky * k + kx) * cin * cout;
                        for i in 0..cin {
                            let xv = xs[xbase + i];
                            let dwrow = &mut dw[wbase + i * cout..wbase + (i + 1) * cout];
                            for (d, u) in dwrow.iter_mut().zip(urow) {
                                *d += xv * u;
                            }
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[k, k, cin, cout]), dw).unwrap()
    }

    pub fn mul_channel_forward(x: &ArrayD<f64>, s: &ArrayD<f64>) -> ArrayD<f64> {
        let channels = x.shape()[2];
        let ss = s.as_slice().unwrap();
        let mut out = x.clone();
        for (idx, v) in out.iter_mut().enumerate() {
            *v *= ss[idx % channels];
        }
        out
    }

    pub fn upsample2_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; 4 * h * w * c];
        let ow = 2 * w;
        for y in 0..h {
            for xx in 0..w {
                let src = &xs[(y * w + xx) * c..(y * w + xx + 1) * c];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let base = ((2 * y + dy) * ow + 2 * xx + dx) * c;
                        out[base..base + c].copy_from_slice(src);
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[2 * h, 2 * w, c]), out).unwrap()
    }

    pub fn upsample2_backward(up: &ArrayD<f64>) -> ArrayD<f64> {
        let (oh, ow, c) = (up.shape()[0], up.shape()[1], up.shape()[2]);
        let (h, w) = (oh / 2, ow / 2);
        let us = up.as_slice().unwrap();
        let mut dx = vec![0.0; h * w * c];
        for y in 0..oh {
            for xx in 0..ow {
                let src = &us[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                let dst = &mut dx[((y / 2) * w + xx / 2) * c..((y / 2) * w + xx / 2 + 1) * c];
                for (d, u) in dst.iter_mut().zip(src) {
                    *d += u;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[h, w, c]), dx).unwrap()
    }

    pub fn avgpool2_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims");
        let xs = x.as_slice().unwrap();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..h {
            for xx in 0..w {
                let src = &xs[(y * w + xx) * c..(y * w + xx + 1) * c];
                let dst = &mut out[((y / 2) * ow + xx / 2) * c..((y / 2) * ow + xx / 2 + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * 0.25;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[oh, ow, c]), out).unwrap()
    }

    pub fn avgpool2_backward(up: &ArrayD<f64>) -> ArrayD<f64> {
        let (oh, ow, c) = (up.shape()[0], up.shape()[1], up.shape()[2]);
        let (h, w) = (oh * 2, ow * 2);
        let us = up.as_slice().unwrap();
        let mut dx = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let src = &us[((y / 2) * ow + xx / 2) * c..((y / 2) * ow + xx / 2 + 1) * c];
                let dst = &mut dx[(y * w + xx) * c..(y * w + xx + 1) * c];
                for (d, u) in dst.iter_mut().zip(src) {
                    *d = u * 0.25;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[h, w, c]), dx).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on one input of a scalar-valued closure.
    fn fd_grad(
        f: &dyn Fn(&ArrayD<f64>) -> f64,
        at: &ArrayD<f64>,
        h: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(at.raw_dim());
        let flat = at.len();
        for i in 0..flat {
            let mut plus = at.clone();
            let mut minus = at.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "mismatch: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, &[5, 4, 2]);
        let w0 = randn(&mut rng, &[3, 3, 2, 3]);
        let r = randn(&mut rng, &[5, 4, 3]);

        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>| -> f64 {
            let y = kernels::conv2d_forward(x, w);
            y.iter().zip(r.iter()).map(|(a, b)| a * b).sum()
        };

        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let w = t.leaf(w0.clone());
        let y = t.conv2d(x, w);
        let rv = t.constant(r.clone());
        let prod = t.mul(y, rv);
        let loss = t.sum(prod);
        let grads = t.backward(loss);

        let fd_x = fd_grad(&|x| run(x, &w0), &x0, 1e-6);
        let fd_w = fd_grad(&|w| run(&x0, w), &w0, 1e-6);
        assert_close(grads.get(x).unwrap(), &fd_x, 1e-6);
        assert_close(grads.get(w).unwrap(), &fd_w, 1e-6);
    }

    #[test]
    fn pool_upsample_matvec_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = randn(&mut rng, &[4, 4, 3]);
        let w0 = randn(&mut rng, &[5, 4 * 4 * 3]);

        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let up = t.upsample2(xv);
            let down = t.avgpool2(up);
            let down2 = t.avgpool2(down);
            let back = t.upsample2(down2);
            let flat = t.flatten(back);
            let out = t.matvec(wv, flat);
            let n = t.normalize(out);
            let loss = t.sum_squares(n);
            t.scalar_value(loss)
        };

        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let wv = t.leaf(w0.clone());
        let up = t.upsample2(xv);
        let down = t.avgpool2(up);
        let down2 = t.avgpool2(down);
        let back = t.upsample2(down2);
        let flat = t.flatten(back);
        let out = t.matvec(wv, flat);
        let n = t.normalize(out);
        let loss = t.sum_squares(n);
        let grads = t.backward(loss);

        let fd_x = fd_grad(&|x| run(x, &w0), &x0, 1e-6);
        let fd_w = fd_grad(&|w| run(&x0, w), &w0, 1e-6);
        assert_close(grads.get(xv).unwrap(), &fd_x, 1e-5);
        assert_close(grads.get(wv).unwrap(), &fd_w, 1e-5);
    }

    #[test]
    fn elementwise_chain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, &[6, 6, 2]);
        let s0 = randn(&mut rng, &[2]);
        let b0 = randn(&mut rng, &[2]);

        let run = |x: &ArrayD<f64>, s: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let sv = t.leaf(s.clone());
            let bv = t.leaf(b.clone());
            let scaled = t.mul_channel(xv, sv);
            let biased = t.add_channel(scaled, bv);
            let act = t.leaky_relu(biased, 0.2);
            let th = t.tanh(act);
            let gap = t.global_avg_pool(th);
            let loss = t.l2_norm(gap);
            t.scalar_value(loss)
        };

        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let sv = t.leaf(s0.clone());
        let bv = t.leaf(b0.clone());
        let scaled = t.mul_channel(xv, sv);
        let biased = t.add_channel(scaled, bv);
        let act = t.leaky_relu(biased, 0.2);
        let th = t.tanh(act);
        let gap = t.global_avg_pool(th);
        let loss = t.l2_norm(gap);
        let grads = t.backward(loss);

        let fd_x = fd_grad(&|x| run(x, &s0, &b0), &x0, 1e-6);
        let fd_s = fd_grad(&|s| run(&x0, s, &b0), &s0, 1e-6);
        let fd_b = fd_grad(&|b| run(&x0, &s0, b), &b0, 1e-6);
        assert_close(grads.get(xv).unwrap(), &fd_x, 1e-5);
        assert_close(grads.get(sv).unwrap(), &fd_s, 1e-5);
        assert_close(grads.get(bv).unwrap(), &fd_b, 1e-5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(scalar(2.0));
        let c = t.constant(scalar(3.0));
        let y = t.mul(a, c);
        let grads = t.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().first().unwrap(), &3.0);
    }

    #[test]
    fn norm_gradient_is_zero_safe_at_origin() {
        let mut t = Tape::new();
        let a = t.leaf(ArrayD::zeros(IxDyn(&[4])));
        let n = t.l2_norm(a);
        let grads = t.backward(n);
        assert!(grads.get(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fan_out_accumulates_gradient() {
        // y = x*x + 3x computed via shared subexpressions.
        let mut t = Tape::new();
        let x = t.leaf(scalar(2.0));
        let sq = t.mul(x, x);
        let three_x = t.scale(x, 3.0);
        let y = t.add(sq, three_x);
        let grads = t.backward(y);
        assert_eq!(grads.get(x).unwrap().first().unwrap(), &7.0);
    }
}

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every differentiable computation in this crate (marker generation, shading,
//! warping, the detector heads, the losses) is expressed as operations on a
//! [`Tape`]. A forward pass builds the graph; [`Tape::backward`] replays it in
//! reverse and accumulates gradients for every node. Gradients are checked
//! against central differences throughout the test suite, so the backward
//! implementations here are the single source of truth for "differentiable"
//! claims made elsewhere.

use std::sync::Arc;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-node gradient storage produced by a backward pass.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn new(n: usize) -> Self {
        Grads { slots: (0..n).map(|_| None).collect() }
    }

    fn slot_mut(&mut self, idx: usize, numel: usize) -> &mut [f64] {
        self.slots[idx].get_or_insert_with(|| vec![0.0; numel])
    }

    /// Gradient of the seeded output w.r.t. `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros of `numel` if untouched.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }

    /// Add `other`'s gradient for `v` into this store.
    pub fn merge_var(&mut self, other: &Grads, v: Var) {
        if let Some(g) = other.get(v) {
            let slot = self.slot_mut(v.0, g.len());
            for (a, b) in slot.iter_mut().zip(g) {
                *a += *b;
            }
        }
    }
}

type BackFn = Box<dyn Fn(&[f64], &[Tensor], &mut Grads)>;

/// Padding behaviour for convolution-style ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Zero padding of the given width.
    Zero(usize),
    /// Border replication of the given width.
    Replicate(usize),
    /// No padding (valid convolution).
    Valid,
}

/// Computation tape: values plus backward closures, appended in forward order.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Value of a node.
    pub fn val(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    fn push(&mut self, val: Tensor, back: Option<BackFn>) -> Var {
        self.vals.push(val);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// New leaf node (parameter, input or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.vals[x.0].clone();
        self.push(t, None)
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        let (an, bn) = (av.numel(), bv.numel());
        let out = if an == bn {
            Tensor::new(
                av.shape.clone(),
                av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if bn == 1 {
            let y = bv.data[0];
            Tensor::new(av.shape.clone(), av.data.iter().map(|&x| f(x, y)).collect())
        } else if an == 1 {
            let x = av.data[0];
            Tensor::new(bv.shape.clone(), bv.data.iter().map(|&y| f(x, y)).collect())
        } else {
            panic!("binary op shape mismatch: {:?} vs {:?}", av.shape, bv.shape);
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let (av, bv) = (&vals[ai], &vals[bi]);
                let (an, bn) = (av.numel(), bv.numel());
                if an == bn {
                    {
                        let ga = grads.slot_mut(ai, an);
                        for i in 0..an {
                            ga[i] += g[i] * dfa(av.data[i], bv.data[i]);
                        }
                    }
                    let gb = grads.slot_mut(bi, bn);
                    for i in 0..bn {
                        gb[i] += g[i] * dfb(av.data[i], bv.data[i]);
                    }
                } else if bn == 1 {
                    let y = bv.data[0];
                    {
                        let ga = grads.slot_mut(ai, an);
                        for i in 0..an {
                            ga[i] += g[i] * dfa(av.data[i], y);
                        }
                    }
                    let gb = grads.slot_mut(bi, 1);
                    for i in 0..an {
                        gb[0] += g[i] * dfb(av.data[i], y);
                    }
                } else {
                    let x = av.data[0];
                    {
                        let gb = grads.slot_mut(bi, bn);
                        for i in 0..bn {
                            gb[i] += g[i] * dfb(x, bv.data[i]);
                        }
                    }
                    let ga = grads.slot_mut(ai, 1);
                    for i in 0..bn {
                        ga[0] += g[i] * dfa(x, bv.data[i]);
                    }
                }
            })),
        )
    }

    /// Elementwise sum; either operand may be a 1-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    // ----------------------------------------------------------------- unary

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        // df receives (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = &self.vals[x.0];
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| f(v)).collect());
        let xi = x.0;
        let oi = self.vals.len();
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let n = g.len();
                let gx = grads.slot_mut(xi, n);
                for i in 0..n {
                    gx[i] += g[i] * df(vals[xi].data[i], vals[oi].data[i]);
                }
            })),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -1.0)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, |x, _| -x.sin())
    }

    /// `x^p` for constant `p`; inputs are clamped to a tiny positive floor so
    /// gamma-style exponents stay finite at zero.
    pub fn powf_const(&mut self, x: Var, p: f64) -> Var {
        self.unary(
            x,
            move |v| v.max(1e-12).powf(p),
            move |x, _| p * x.max(1e-12).powf(p - 1.0),
        )
    }

    /// `x^p` with the backward evaluated at `max(x, floor)`. For p < 1 the
    /// true derivative diverges at 0; flooring bounds the local gain without
    /// touching the forward value (used by the display transfer curve, where
    /// near-black pixels otherwise dominate the gradient norm).
    pub fn powf_const_floored(&mut self, x: Var, p: f64, floor: f64) -> Var {
        self.unary(
            x,
            move |v| v.max(1e-12).powf(p),
            move |x, _| p * x.max(floor).powf(p - 1.0),
        )
    }

    /// `x^g` with a scalar exponent node (gamma jitter).
    pub fn pow_svar(&mut self, x: Var, gamma: Var) -> Var {
        self.binary(
            x,
            gamma,
            |x, g| x.max(1e-12).powf(g),
            |x, g| {
                let xc = x.max(1e-12);
                g * xc.powf(g - 1.0)
            },
            |x, g| {
                let xc = x.max(1e-12);
                xc.powf(g) * xc.ln()
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamp to `[0,1]` with zero gradient outside the open interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.clamp(0.0, 1.0),
            |x, _| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Differentiable rounding surrogate: `round(x) + (x - round(x))^3`.
    pub fn smooth_round(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                let r = v.round();
                r + (v - r).powi(3)
            },
            |x, _| {
                let d = x - x.round();
                3.0 * d * d
            },
        )
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.vals[x.0].data.iter().sum();
        let (xi, n) = (x.0, self.vals[x.0].numel());
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            })),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].numel();
        let s = self.sum(x);
        self.mul_const(s, 1.0 / n as f64)
    }

    // --------------------------------------------------------- restructuring

    /// Reinterpret shape; data order is unchanged.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.numel(), shape.iter().product::<usize>());
        let out = Tensor::new(shape, xv.data.clone());
        let (xi, n) = (x.0, xv.numel());
        self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, n);
                for i in 0..n {
                    gx[i] += g[i];
                }
            })),
        )
    }

    /// Contiguous slice of the flattened tensor.
    pub fn slice_flat(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.vals[x.0];
        assert!(start + len <= xv.numel());
        let out = Tensor::from_vec(xv.data[start..start + len].to_vec());
        let (xi, n) = (x.0, xv.numel());
        self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, n);
                for i in 0..len {
                    gx[start + i] += g[i];
                }
            })),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn concat0(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let inner = self.vals[xs[0].0].shape.clone();
        let numel = self.vals[xs[0].0].numel();
        let mut data = Vec::with_capacity(numel * xs.len());
        for &x in xs {
            assert_eq!(self.vals[x.0].shape, inner);
            data.extend_from_slice(&self.vals[x.0].data);
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&inner);
        let idxs: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(
            Tensor::new(shape, data),
            Some(Box::new(move |g, _vals, grads| {
                for (j, &xi) in idxs.iter().enumerate() {
                    let gx = grads.slot_mut(xi, numel);
                    for i in 0..numel {
                        gx[i] += g[j * numel + i];
                    }
                }
            })),
        )
    }

    /// Gather flat elements by index; duplicates allowed.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.vals[x.0];
        let out: Vec<f64> = idx.iter().map(|&i| xv.data[i]).collect();
        let (xi, n) = (x.0, xv.numel());
        let idx = idx.to_vec();
        self.push(
            Tensor::from_vec(out),
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, n);
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
            })),
        )
    }

    // ------------------------------------------------------- linear algebra

    /// `y = W^T x + b` with `x: [I]`, `w: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.vals[x.0];
        let wv = &self.vals[w.0];
        let bv = &self.vals[b.0];
        assert_eq!(wv.shape.len(), 2);
        let (ni, no) = (wv.shape[0], wv.shape[1]);
        assert_eq!(xv.numel(), ni, "linear input size mismatch");
        assert_eq!(bv.numel(), no, "linear bias size mismatch");
        let mut out = bv.data.clone();
        for i in 0..ni {
            let xi_v = xv.data[i];
            if xi_v == 0.0 {
                continue;
            }
            let row = &wv.data[i * no..(i + 1) * no];
            for o in 0..no {
                out[o] += xi_v * row[o];
            }
        }
        let (xi, wi, bi) = (x.0, w.0, b.0);
        self.push(
            Tensor::from_vec(out),
            Some(Box::new(move |g, vals, grads| {
                let xv = &vals[xi];
                let wv = &vals[wi];
                {
                    let gx = grads.slot_mut(xi, ni);
                    for i in 0..ni {
                        let row = &wv.data[i * no..(i + 1) * no];
                        let mut s = 0.0;
                        for o in 0..no {
                            s += row[o] * g[o];
                        }
                        gx[i] += s;
                    }
                }
                {
                    let gw = grads.slot_mut(wi, ni * no);
                    for i in 0..ni {
                        let xi_v = xv.data[i];
                        if xi_v == 0.0 {
                            continue;
                        }
                        let row = &mut gw[i * no..(i + 1) * no];
                        for o in 0..no {
                            row[o] += xi_v * g[o];
                        }
                    }
                }
                let gb = grads.slot_mut(bi, no);
                for o in 0..no {
                    gb[o] += g[o];
                }
            })),
        )
    }

    /// `y = A v` for a constant matrix `a` of shape `[m, n]`.
    pub fn matvec_const(&mut self, a: Arc<Vec<f64>>, m: usize, n: usize, v: Var) -> Var {
        let vv = &self.vals[v.0];
        assert_eq!(vv.numel(), n);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * vv.data[j];
            }
            out[i] = s;
        }
        let vi = v.0;
        self.push(
            Tensor::from_vec(out),
            Some(Box::new(move |g, _vals, grads| {
                let gv = grads.slot_mut(vi, n);
                for i in 0..m {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &a[i * n..(i + 1) * n];
                    for j in 0..n {
                        gv[j] += row[j] * gi;
                    }
                }
            })),
        )
    }

    // ---------------------------------------------------------- channel ops

    /// Extract channel `c` of a `[C,H,W]` tensor as `[H,W]`.
    pub fn channel(&mut self, x: Var, c: usize) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.shape.len(), 3);
        let (ch, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert!(c < ch);
        let hw = h * w;
        let out = Tensor::new(vec![h, w], xv.data[c * hw..(c + 1) * hw].to_vec());
        let (xi, n) = (x.0, xv.numel());
        self.push(
            out,
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, n);
                for i in 0..hw {
                    gx[c * hw + i] += g[i];
                }
            })),
        )
    }

    /// Per-channel mean of a `[C,H,W]` tensor.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.shape.len(), 3);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let hw = h * w;
        let out: Vec<f64> = (0..c)
            .map(|k| xv.data[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let xi = x.0;
        self.push(
            Tensor::from_vec(out),
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, c * hw);
                for k in 0..c {
                    let gk = g[k] / hw as f64;
                    for i in 0..hw {
                        gx[k * hw + i] += gk;
                    }
                }
            })),
        )
    }

    /// `out[c,h,w] = x[c,h,w] * mul[c] + add[c]`.
    pub fn channel_affine(&mut self, x: Var, mul: Var, add: Var) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.shape.len(), 3);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert_eq!(self.vals[mul.0].numel(), c);
        assert_eq!(self.vals[add.0].numel(), c);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for k in 0..c {
            let (m, a) = (self.vals[mul.0].data[k], self.vals[add.0].data[k]);
            for i in 0..hw {
                out[k * hw + i] = xv.data[k * hw + i] * m + a;
            }
        }
        let (xi, mi, ai) = (x.0, mul.0, add.0);
        self.push(
            Tensor::new(xv.shape.clone(), out),
            Some(Box::new(move |g, vals, grads| {
                {
                    let gx = grads.slot_mut(xi, c * hw);
                    for k in 0..c {
                        let m = vals[mi].data[k];
                        for i in 0..hw {
                            gx[k * hw + i] += g[k * hw + i] * m;
                        }
                    }
                }
                {
                    let gm = grads.slot_mut(mi, c);
                    for k in 0..c {
                        let mut s = 0.0;
                        for i in 0..hw {
                            s += g[k * hw + i] * vals[xi].data[k * hw + i];
                        }
                        gm[k] += s;
                    }
                }
                let ga = grads.slot_mut(ai, c);
                for k in 0..c {
                    ga[k] += g[k * hw..(k + 1) * hw].iter().sum::<f64>();
                }
            })),
        )
    }

    // ----------------------------------------------------------- conv / pool

    /// 2-D convolution, NCHW single sample: `x: [C,H,W]`, `w: [O,C,kh,kw]`,
    /// `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Pad) -> Var {
        let xv = &self.vals[x.0];
        let wv = &self.vals[w.0];
        assert_eq!(xv.shape.len(), 3);
        assert_eq!(wv.shape.len(), 4);
        let (c, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let (o, wc, kh, kw) = (wv.shape[0], wv.shape[1], wv.shape[2], wv.shape[3]);
        assert_eq!(c, wc, "conv channel mismatch");
        assert_eq!(self.vals[b.0].numel(), o);
        let (p, replicate) = match pad {
            Pad::Zero(p) => (p as isize, false),
            Pad::Replicate(p) => (p as isize, true),
            Pad::Valid => (0, false),
        };
        let ho = (h as isize + 2 * p - kh as isize) as usize / stride + 1;
        let wo = (wd as isize + 2 * p - kw as isize) as usize / stride + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            let bias = self.vals[b.0].data[oc];
            for v in out[oc * ho * wo..(oc + 1) * ho * wo].iter_mut() {
                *v = bias;
            }
            for ic in 0..c {
                let xplane = &xv.data[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv_k = wv.data[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv_k == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride) as isize + ky as isize - p;
                            let iyc = if replicate { iy.clamp(0, h as isize - 1) } else { iy };
                            if iyc < 0 || iyc >= h as isize {
                                continue;
                            }
                            let row = &xplane[iyc as usize * wd..(iyc as usize + 1) * wd];
                            let orow = &mut out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride) as isize + kx as isize - p;
                                let ixc = if replicate { ix.clamp(0, wd as isize - 1) } else { ix };
                                if ixc < 0 || ixc >= wd as isize {
                                    continue;
                                }
                                *ov += wv_k * row[ixc as usize];
                            }
                        }
                    }
                }
            }
        }
        let (xi, wi, bi) = (x.0, w.0, b.0);
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Some(Box::new(move |g, vals, grads| {
                let xv = &vals[xi];
                let wv = &vals[wi];
                {
                    let gb = grads.slot_mut(bi, o);
                    for oc in 0..o {
                        gb[oc] += g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
                    }
                }
                // weight and input grads share the forward index walk
                {
                    let gw = grads.slot_mut(wi, o * c * kh * kw);
                    for oc in 0..o {
                        for ic in 0..c {
                            let xplane = &xv.data[ic * h * wd..(ic + 1) * h * wd];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut s = 0.0;
                                    for oy in 0..ho {
                                        let iy = (oy * stride) as isize + ky as isize - p;
                                        let iyc =
                                            if replicate { iy.clamp(0, h as isize - 1) } else { iy };
                                        if iyc < 0 || iyc >= h as isize {
                                            continue;
                                        }
                                        let row =
                                            &xplane[iyc as usize * wd..(iyc as usize + 1) * wd];
                                        let grow = &g[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                                        for ox in 0..wo {
                                            let ix = (ox * stride) as isize + kx as isize - p;
                                            let ixc = if replicate {
                                                ix.clamp(0, wd as isize - 1)
                                            } else {
                                                ix
                                            };
                                            if ixc < 0 || ixc >= wd as isize {
                                                continue;
                                            }
                                            s += grow[ox] * row[ixc as usize];
                                        }
                                    }
                                    gw[((oc * c + ic) * kh + ky) * kw + kx] += s;
                                }
                            }
                        }
                    }
                }
                let gx = grads.slot_mut(xi, c * h * wd);
                for oc in 0..o {
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv_k = wv.data[((oc * c + ic) * kh + ky) * kw + kx];
                                if wv_k == 0.0 {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy = (oy * stride) as isize + ky as isize - p;
                                    let iyc =
                                        if replicate { iy.clamp(0, h as isize - 1) } else { iy };
                                    if iyc < 0 || iyc >= h as isize {
                                        continue;
                                    }
                                    let grow = &g[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                                    for ox in 0..wo {
                                        let ix = (ox * stride) as isize + kx as isize - p;
                                        let ixc =
                                            if replicate { ix.clamp(0, wd as isize - 1) } else { ix };
                                        if ixc < 0 || ixc >= wd as isize {
                                            continue;
                                        }
                                        gx[(ic * h + iyc as usize) * wd + ixc as usize] +=
                                            wv_k * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            })),
        )
    }

    /// Depthwise convolution with a shared constant kernel and replicate
    /// padding; used for blur stages where the kernel carries no gradient.
    pub fn depthwise_conv_const(&mut self, x: Var, kernel: Arc<Vec<f64>>, k: usize) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.shape.len(), 3);
        assert_eq!(kernel.len(), k * k);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; c * h * w];
        for ic in 0..c {
            let plane = &xv.data[ic * h * w..(ic + 1) * h * w];
            for y in 0..h {
                for x0 in 0..w {
                    let mut s = 0.0;
                    for ky in 0..k {
                        let iy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                        for kx in 0..k {
                            let ix =
                                (x0 as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                            s += kernel[ky * k + kx] * plane[iy * w + ix];
                        }
                    }
                    out[(ic * h + y) * w + x0] = s;
                }
            }
        }
        let xi = x.0;
        self.push(
            Tensor::new(xv.shape.clone(), out),
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, c * h * w);
                for ic in 0..c {
                    for y in 0..h {
                        for x0 in 0..w {
                            let gv = g[(ic * h + y) * w + x0];
                            if gv == 0.0 {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (y as isize + ky as isize - r).clamp(0, h as isize - 1)
                                    as usize;
                                for kx in 0..k {
                                    let ix = (x0 as isize + kx as isize - r)
                                        .clamp(0, w as isize - 1)
                                        as usize;
                                    gx[(ic * h + iy) * w + ix] += kernel[ky * k + kx] * gv;
                                }
                            }
                        }
                    }
                }
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.shape.len(), 3);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let (h2, w2) = (h * 2, w * 2);
        let mut out = vec![0.0; c * h2 * w2];
        for ic in 0..c {
            for y in 0..h2 {
                for x0 in 0..w2 {
                    out[(ic * h2 + y) * w2 + x0] = xv.data[(ic * h + y / 2) * w + x0 / 2];
                }
            }
        }
        let xi = x.0;
        self.push(
            Tensor::new(vec![c, h2, w2], out),
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, c * h * w);
                for ic in 0..c {
                    for y in 0..h2 {
                        for x0 in 0..w2 {
                            gx[(ic * h + y / 2) * w + x0 / 2] += g[(ic * h2 + y) * w2 + x0];
                        }
                    }
                }
            })),
        )
    }

    /// 2x2 average pooling of `[C,H,W]` (H, W even).
    pub fn avg_pool2x2(&mut self, x: Var) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.shape.len(), 3);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert!(h % 2 == 0 && w % 2 == 0);
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; c * h2 * w2];
        for ic in 0..c {
            for y in 0..h2 {
                for x0 in 0..w2 {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += xv.data[(ic * h + 2 * y + dy) * w + 2 * x0 + dx];
                        }
                    }
                    out[(ic * h2 + y) * w2 + x0] = s * 0.25;
                }
            }
        }
        let xi = x.0;
        self.push(
            Tensor::new(vec![c, h2, w2], out),
            Some(Box::new(move |g, _vals, grads| {
                let gx = grads.slot_mut(xi, c * h * w);
                for ic in 0..c {
                    for y in 0..h2 {
                        for x0 in 0..w2 {
                            let gv = g[(ic * h2 + y) * w2 + x0] * 0.25;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    gx[(ic * h + 2 * y + dy) * w + 2 * x0 + dx] += gv;
                                }
                            }
                        }
                    }
                }
            })),
        )
    }

    // -------------------------------------------------------------- sampling

    /// Bilinear sampling of `img: [C,H,W]` at pixel coordinates `(xs, ys)`,
    /// both `[K]`. Coordinates are clamped to the image (border replication);
    /// the coordinate gradient is zero in the clamped region.
    pub fn grid_sample(&mut self, img: Var, xs: Var, ys: Var) -> Var {
        let iv = &self.vals[img.0];
        assert_eq!(iv.shape.len(), 3);
        let (c, h, w) = (iv.shape[0], iv.shape[1], iv.shape[2]);
        let xv = &self.vals[xs.0];
        let yv = &self.vals[ys.0];
        let k = xv.numel();
        assert_eq!(yv.numel(), k);
        let mut out = vec![0.0; c * k];
        for i in 0..k {
            let x = xv.data[i].clamp(0.0, (w - 1) as f64);
            let y = yv.data[i].clamp(0.0, (h - 1) as f64);
            let x0 = (x.floor() as usize).min(w.saturating_sub(2));
            let y0 = (y.floor() as usize).min(h.saturating_sub(2));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for ic in 0..c {
                let p = &iv.data[ic * h * w..(ic + 1) * h * w];
                let v00 = p[y0 * w + x0];
                let v01 = p[y0 * w + x1];
                let v10 = p[y1 * w + x0];
                let v11 = p[y1 * w + x1];
                out[ic * k + i] = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
            }
        }
        let (ii, xsi, ysi) = (img.0, xs.0, ys.0);
        self.push(
            Tensor::new(vec![c, k], out),
            Some(Box::new(move |g, vals, grads| {
                let iv = &vals[ii];
                let xv = &vals[xsi];
                let yv = &vals[ysi];
                for i in 0..k {
                    let xr = xv.data[i];
                    let yr = yv.data[i];
                    let x = xr.clamp(0.0, (w - 1) as f64);
                    let y = yr.clamp(0.0, (h - 1) as f64);
                    let x_clamped = xr != x;
                    let y_clamped = yr != y;
                    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
                    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                    let mut gx_coord = 0.0;
                    let mut gy_coord = 0.0;
                    {
                        let gi = grads.slot_mut(ii, c * h * w);
                        for ic in 0..c {
                            let gv = g[ic * k + i];
                            if gv == 0.0 {
                                continue;
                            }
                            let base = ic * h * w;
                            gi[base + y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                            gi[base + y0 * w + x1] += gv * fx * (1.0 - fy);
                            gi[base + y1 * w + x0] += gv * (1.0 - fx) * fy;
                            gi[base + y1 * w + x1] += gv * fx * fy;
                        }
                    }
                    for ic in 0..c {
                        let gv = g[ic * k + i];
                        if gv == 0.0 {
                            continue;
                        }
                        let p = &iv.data[ic * h * w..(ic + 1) * h * w];
                        let v00 = p[y0 * w + x0];
                        let v01 = p[y0 * w + x1];
                        let v10 = p[y1 * w + x0];
                        let v11 = p[y1 * w + x1];
                        gx_coord += gv * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                        gy_coord += gv * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                    }
                    if !x_clamped {
                        grads.slot_mut(xsi, k)[i] += gx_coord;
                    }
                    if !y_clamped {
                        grads.slot_mut(ysi, k)[i] += gy_coord;
                    }
                }
            })),
        )
    }

    /// Overwrite pixels of `base: [C,H,W]` at flat spatial indices `idx` with
    /// `vals_: [C,K]`. Overwritten base pixels receive zero gradient.
    pub fn paste(&mut self, base: Var, idx: Arc<Vec<usize>>, vals_: Var) -> Var {
        let bv = &self.vals[base.0];
        assert_eq!(bv.shape.len(), 3);
        let (c, h, w) = (bv.shape[0], bv.shape[1], bv.shape[2]);
        let hw = h * w;
        let vv = &self.vals[vals_.0];
        let k = idx.len();
        assert_eq!(vv.numel(), c * k);
        let mut out = bv.data.clone();
        for ic in 0..c {
            for (j, &p) in idx.iter().enumerate() {
                out[ic * hw + p] = vv.data[ic * k + j];
            }
        }
        let (bi, vi) = (base.0, vals_.0);
        let mut mask = vec![false; hw];
        for &p in idx.iter() {
            mask[p] = true;
        }
        self.push(
            Tensor::new(bv.shape.clone(), out),
            Some(Box::new(move |g, _vals, grads| {
                {
                    let gb = grads.slot_mut(bi, c * hw);
                    for ic in 0..c {
                        for p in 0..hw {
                            if !mask[p] {
                                gb[ic * hw + p] += g[ic * hw + p];
                            }
                        }
                    }
                }
                let gv = grads.slot_mut(vi, c * k);
                for ic in 0..c {
                    for (j, &p) in idx.iter().enumerate() {
                        gv[ic * k + j] += g[ic * hw + p];
                    }
                }
            })),
        )
    }

    /// Add `vals_: [C,K]` into `base: [C,H,W]` at flat spatial indices.
    pub fn paste_add(&mut self, base: Var, idx: Arc<Vec<usize>>, vals_: Var) -> Var {
        let bv = &self.vals[base.0];
        assert_eq!(bv.shape.len(), 3);
        let (c, h, w) = (bv.shape[0], bv.shape[1], bv.shape[2]);
        let hw = h * w;
        let vv = &self.vals[vals_.0];
        let k = idx.len();
        assert_eq!(vv.numel(), c * k);
        let mut out = bv.data.clone();
        for ic in 0..c {
            for (j, &p) in idx.iter().enumerate() {
                out[ic * hw + p] += vv.data[ic * k + j];
            }
        }
        let (bi, vi) = (base.0, vals_.0);
        self.push(
            Tensor::new(bv.shape.clone(), out),
            Some(Box::new(move |g, _vals, grads| {
                {
                    let gb = grads.slot_mut(bi, c * hw);
                    for i in 0..c * hw {
                        gb[i] += g[i];
                    }
                }
                let gv = grads.slot_mut(vi, c * k);
                for ic in 0..c {
                    for (j, &p) in idx.iter().enumerate() {
                        gv[ic * k + j] += g[ic * hw + p];
                    }
                }
            })),
        )
    }

    // --------------------------------------------------------- block DCT 8x8

    /// Orthonormal 8x8 block DCT-II of `[C,H,W]` (H, W multiples of 8).
    pub fn block_dct8(&mut self, x: Var) -> Var {
        self.block_dct8_impl(x, false)
    }

    /// Inverse of [`Tape::block_dct8`].
    pub fn block_idct8(&mut self, x: Var) -> Var {
        self.block_dct8_impl(x, true)
    }

    fn block_dct8_impl(&mut self, x: Var, inverse: bool) -> Var {
        let xv = &self.vals[x.0];
        assert_eq!(xv.shape.len(), 3);
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert!(h % 8 == 0 && w % 8 == 0, "block_dct8 needs multiples of 8");
        let out = dct8_apply(&xv.data, c, h, w, inverse);
        let xi = x.0;
        self.push(
            Tensor::new(xv.shape.clone(), out),
            Some(Box::new(move |g, _vals, grads| {
                // orthonormal transform: adjoint is the inverse
                let gback = dct8_apply(g, c, h, w, !inverse);
                let gx = grads.slot_mut(xi, c * h * w);
                for i in 0..c * h * w {
                    gx[i] += gback[i];
                }
            })),
        )
    }

    // --------------------------------------------------------------- losses

    /// Mean binary cross-entropy over logits against constant targets.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Arc<Vec<f64>>) -> Var {
        let lv = &self.vals[logits.0];
        let n = lv.numel();
        assert_eq!(targets.len(), n);
        let mut s = 0.0;
        for i in 0..n {
            let x = lv.data[i];
            let t = targets[i];
            // max(x,0) - x*t + ln(1 + e^{-|x|})
            s += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        }
        let li = logits.0;
        self.push(
            Tensor::scalar(s / n as f64),
            Some(Box::new(move |g, vals, grads| {
                let gl = grads.slot_mut(li, n);
                let scale = g[0] / n as f64;
                for i in 0..n {
                    let x = vals[li].data[i];
                    let sig = 1.0 / (1.0 + (-x).exp());
                    gl[i] += scale * (sig - targets[i]);
                }
            })),
        )
    }

    /// Sum of smooth-L1 (Huber, beta = 1) of `x - t` for constant targets.
    pub fn smooth_l1_sum(&mut self, x: Var, targets: Arc<Vec<f64>>) -> Var {
        let xv = &self.vals[x.0];
        let n = xv.numel();
        assert_eq!(targets.len(), n);
        let mut s = 0.0;
        for i in 0..n {
            let d = xv.data[i] - targets[i];
            s += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let xi = x.0;
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, vals, grads| {
                let gx = grads.slot_mut(xi, n);
                for i in 0..n {
                    let d = vals[xi].data[i] - targets[i];
                    let dd = if d.abs() < 1.0 { d } else { d.signum() };
                    gx[i] += g[0] * dd;
                }
            })),
        )
    }

    // -------------------------------------------------------------- backward

    /// Backward pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.vals[loss.0].numel(), 1, "backward needs a scalar");
        self.backward_seeded(&[(loss, vec![1.0])], &[])
    }

    /// Backward pass from explicit seeds; gradient flow is cut at every node
    /// in `stop` (their upstream inputs receive nothing through them).
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)], stop: &[Var]) -> Grads {
        let mut grads = Grads::new(self.vals.len());
        for (v, seed) in seeds {
            let n = self.vals[v.0].numel();
            assert_eq!(seed.len(), n);
            let slot = grads.slot_mut(v.0, n);
            for (a, b) in slot.iter_mut().zip(seed) {
                *a += *b;
            }
        }
        let mut stopped = vec![false; self.vals.len()];
        for v in stop {
            stopped[v.0] = true;
        }
        for i in (0..self.vals.len()).rev() {
            if grads.slots[i].is_none() || stopped[i] {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let g = grads.slots[i].take().unwrap();
                back(&g, &self.vals, &mut grads);
                grads.slots[i] = Some(g);
            }
        }
        grads
    }
}

fn dct8_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for k in 0..8 {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for n in 0..8 {
            m[k][n] = a * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
        }
    }
    m
}

fn dct8_apply(data: &[f64], c: usize, h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let m = dct8_matrix();
    let mut out = vec![0.0; c * h * w];
    let mut blk = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for ic in 0..c {
        let plane = &data[ic * h * w..(ic + 1) * h * w];
        let oplane = &mut out[ic * h * w..(ic + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        blk[y][x] = plane[(by + y) * w + bx + x];
                    }
                }
                // rows: tmp = blk * M^T (forward) or blk * M (inverse)
                for y in 0..8 {
                    for k in 0..8 {
                        let mut s = 0.0;
                        for n in 0..8 {
                            s += blk[y][n] * if inverse { m[n][k] } else { m[k][n] };
                        }
                        tmp[y][k] = s;
                    }
                }
                // cols
                for k in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for n in 0..8 {
                            s += tmp[n][x] * if inverse { m[n][k] } else { m[k][n] };
                        }
                        oplane[(by + k) * w + bx + x] = s;
                    }
                }
            }
        }
    }
    out
}

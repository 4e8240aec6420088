//! Eager reverse-mode differentiation over `(batch, channels, voxels)` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated. Values live in
//! `f64` regardless of the `f32` storage of [`DenseField`](super::DenseField),
//! which keeps finite-difference checks tight. Node ids only ever increase, so
//! the recorded graph is acyclic and a single reverse sweep visits parents
//! after children. A graph is built for one forward pass and may be
//! differentiated once.

use super::ops::{gemm_acc, linear_kernel, sigmoid, softmax_strided, softplus, MatRef};
use crate::error::{Error, Result};

/// Extents of a graph value. Broadcasting works per axis over
/// `(batch, channels, voxels)`; the spatial extents are carried along for
/// resampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub spatial: Vec<usize>,
}

impl Dims {
    pub fn new(batch: usize, channels: usize, spatial: Vec<usize>) -> Self {
        Self {
            batch,
            channels,
            spatial,
        }
    }

    pub fn scalar() -> Self {
        Self::new(1, 1, Vec::new())
    }

    /// A `(1, n, [])` vector; broadcasts along the channel axis.
    pub fn vector(n: usize) -> Self {
        Self::new(1, n, Vec::new())
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self::new(self.batch, channels, self.spatial.clone())
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Receives gradient contributions for parent nodes during the reverse sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Vec<f64>],
    dims: &'a [Dims],
    requires: &'a [bool],
}

impl GradSink<'_> {
    /// Mutable gradient buffer for `v`, or `None` if `v` needs no gradient.
    fn get(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let g = &mut self.grads[v.0];
        if g.is_empty() {
            g.resize(self.dims[v.0].len(), 0.0);
        }
        Some(g.as_mut_slice())
    }
}

type BackwardFn = Box<dyn Fn(&[Vec<f64>], &[f64], &mut GradSink)>;

/// Gradients of a scalar loss with respect to the learnable leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    learnable: Vec<bool>,
}

impl Gradients {
    /// Gradient of a learnable leaf; `None` for anything else.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.learnable
            .get(v.0)
            .copied()
            .unwrap_or(false)
            .then(|| self.grads[v.0].as_slice())
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Per-axis broadcast bookkeeping for a binary op.
struct Broadcast {
    out: Dims,
    a: (usize, usize, usize),
    b: (usize, usize, usize),
}

impl Broadcast {
    fn new(a: &Dims, b: &Dims) -> Result<Self> {
        fn axis(x: usize, y: usize) -> Option<usize> {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        }
        let (av, bv) = (a.voxels(), b.voxels());
        let batch = axis(a.batch, b.batch);
        let channels = axis(a.channels, b.channels);
        let voxels = axis(av, bv);
        let (Some(batch), Some(channels), Some(_)) = (batch, channels, voxels) else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
        if av > 1 && bv > 1 && a.spatial != b.spatial {
            return Err(Error::Shape(format!(
                "spatial extents differ: {:?} vs {:?}",
                a.spatial, b.spatial
            )));
        }
        let spatial = if (av, a.spatial.len()) >= (bv, b.spatial.len()) {
            a.spatial.clone()
        } else {
            b.spatial.clone()
        };
        Ok(Self {
            out: Dims::new(batch, channels, spatial),
            a: (a.batch, a.channels, av),
            b: (b.batch, b.channels, bv),
        })
    }

    /// Calls `f(out_start, a_start, b_start)` once per output row of voxels.
    ///
    /// Within a row an operand advances with the output when its `*_full`
    /// flag is set and stays on one element otherwise.
    #[inline(always)]
    fn for_rows(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nv = self.out.voxels();
        let (ab, ac, av) = self.a;
        let (bb, bc, bv) = self.b;
        let mut o = 0;
        for bi in 0..self.out.batch {
            for ci in 0..self.out.channels {
                f(o, ((bi % ab) * ac + ci % ac) * av, ((bi % bb) * bc + ci % bc) * bv);
                o += nv;
            }
        }
    }

    fn a_full(&self) -> bool {
        self.a.2 > 1
    }

    fn b_full(&self) -> bool {
        self.b.2 > 1
    }
}

/// Applies `f(k, x, y)` over one row, with `x` and `y` either advancing or fixed.
#[inline(always)]
fn zip_row(n: usize, x: &[f64], x_full: bool, y: &[f64], y_full: bool, mut f: impl FnMut(usize, f64, f64)) {
    match (x_full, y_full) {
        (true, true) => x[..n].iter().zip(&y[..n]).enumerate().for_each(|(k, (&p, &q))| f(k, p, q)),
        (true, false) => x[..n].iter().enumerate().for_each(|(k, &p)| f(k, p, y[0])),
        (false, true) => y[..n].iter().enumerate().for_each(|(k, &q)| f(k, x[0], q)),
        (false, false) => (0..n).for_each(|k| f(k, x[0], y[0])),
    }
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    values: Vec<Vec<f64>>,
    dims: Vec<Dims>,
    requires: Vec<bool>,
    learnable: Vec<bool>,
    backward: Vec<Option<BackwardFn>>,
    spent: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, dims: Dims, requires: bool, bw: Option<BackwardFn>) -> Var {
        debug_assert_eq!(value.len(), dims.len());
        self.values.push(value);
        self.dims.push(dims);
        self.requires.push(requires);
        self.learnable.push(false);
        self.backward.push(if requires { bw } else { None });
        Var(self.values.len() - 1)
    }

    fn check_len(dims: &Dims, values: &[f64]) -> Result<()> {
        if dims.len() != values.len() {
            return Err(Error::Shape(format!(
                "{dims:?} holds {} elements but {} values were given",
                dims.len(),
                values.len()
            )));
        }
        Ok(())
    }

    /// Learnable leaf.
    pub fn param(&mut self, dims: Dims, values: Vec<f64>) -> Result<Var> {
        Self::check_len(&dims, &values)?;
        let v = self.push(values, dims, true, None);
        self.learnable[v.0] = true;
        Ok(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, dims: Dims, values: Vec<f64>) -> Result<Var> {
        Self::check_len(&dims, &values)?;
        Ok(self.push(values, dims, false, None))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Dims::scalar(), false, None)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn dims(&self, v: Var) -> &Dims {
        &self.dims[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Same value, cut off from differentiation.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        let dims = self.dims[v.0].clone();
        self.push(value, dims, false, None)
    }

    // -----------------------------------------------------------------------
    // Elementwise
    // -----------------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        match op {
            Binary::Add => self.binary_with(a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g),
            Binary::Sub => self.binary_with(a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g),
            Binary::Mul => self.binary_with(a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x),
            Binary::Div => self.binary_with(
                a,
                b,
                |x, y| x / y,
                |g, _, y| g / y,
                |g, x, y| -g * x / (y * y),
            ),
        }
    }

    /// Broadcasting `f(x, y)` with partials `da(g, x, y)` and `db(g, x, y)`.
    fn binary_with(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let bc = Broadcast::new(&self.dims[a.0], &self.dims[b.0])?;
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let nv = bc.out.voxels();
        let (af, bf) = (bc.a_full(), bc.b_full());
        let mut out = vec![0.0; bc.out.len()];
        bc.for_rows(|o, i, j| {
            let dst = &mut out[o..o + nv];
            zip_row(nv, &x[i..], af, &y[j..], bf, |k, p, q| dst[k] = f(p, q));
        });
        let requires = self.requires[a.0] || self.requires[b.0];
        let dims = bc.out.clone();
        let bw: BackwardFn = Box::new(move |vals, g, sink| {
            let (x, y) = (&vals[a.0], &vals[b.0]);
            if let Some(ga) = sink.get(a) {
                bc.for_rows(|o, i, j| {
                    let go = &g[o..o + nv];
                    if af {
                        let dst = &mut ga[i..i + nv];
                        zip_row(nv, &x[i..], af, &y[j..], bf, |k, p, q| dst[k] += da(go[k], p, q));
                    } else {
                        let mut acc = 0.0;
                        zip_row(nv, &x[i..], af, &y[j..], bf, |k, p, q| acc += da(go[k], p, q));
                        ga[i] += acc;
                    }
                });
            }
            if let Some(gb) = sink.get(b) {
                bc.for_rows(|o, i, j| {
                    let go = &g[o..o + nv];
                    if bf {
                        let dst = &mut gb[j..j + nv];
                        zip_row(nv, &x[i..], af, &y[j..], bf, |k, p, q| dst[k] += db(go[k], p, q));
                    } else {
                        let mut acc = 0.0;
                        zip_row(nv, &x[i..], af, &y[j..], bf, |k, p, q| acc += db(go[k], p, q));
                        gb[j] += acc;
                    }
                });
            }
        });
        Ok(self.push(out, dims, requires, Some(bw)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// `y = f(x)` elementwise with `dy/dx = df(x, y)`.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out: Vec<f64> = self.values[a.0].iter().map(|&x| f(x)).collect();
        let id = self.values.len();
        let bw: BackwardFn = Box::new(move |vals, g, sink| {
            let (x, y) = (&vals[a.0], &vals[id]);
            if let Some(ga) = sink.get(a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * df(x[i], y[i]);
                }
            }
        });
        let dims = self.dims[a.0].clone();
        let requires = self.requires[a.0];
        self.push(out, dims, requires, Some(bw))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| k * x, move |_, _| k)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| x + k, |_, _| 1.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    /// `log(1 + x)`.
    pub fn ln_1p(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln_1p, |x, _| 1.0 / (1.0 + x))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        // Zero subgradient at the origin.
        self.unary(a, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// `max(x, floor)`; no gradient below the floor.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, move |x| x.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    /// Huber-style smooth L1 with threshold 1.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 },
            |x, _| if x.abs() < 1.0 { x } else { x.signum() },
        )
    }

    // -----------------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().sum::<f64>();
        let bw: BackwardFn = Box::new(move |_, g, sink| {
            if let Some(ga) = sink.get(a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        });
        let requires = self.requires[a.0];
        self.push(vec![s], Dims::scalar(), requires, Some(bw))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the channel axis, giving one channel.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let d = self.dims[a.0].clone();
        let (nb, nc, nv) = (d.batch, d.channels, d.voxels());
        let x = &self.values[a.0];
        let mut out = vec![0.0; nb * nv];
        for b in 0..nb {
            for c in 0..nc {
                let src = &x[(b * nc + c) * nv..(b * nc + c + 1) * nv];
                for (o, s) in out[b * nv..(b + 1) * nv].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let bw: BackwardFn = Box::new(move |_, g, sink| {
            if let Some(ga) = sink.get(a) {
                for b in 0..nb {
                    for c in 0..nc {
                        let dst = &mut ga[(b * nc + c) * nv..(b * nc + c + 1) * nv];
                        for (d, s) in dst.iter_mut().zip(&g[b * nv..(b + 1) * nv]) {
                            *d += s;
                        }
                    }
                }
            }
        });
        let requires = self.requires[a.0];
        self.push(out, d.with_channels(1), requires, Some(bw))
    }

    pub fn mean_channels(&mut self, a: Var) -> Var {
        let nc = self.dims[a.0].channels as f64;
        let s = self.sum_channels(a);
        self.scale(s, 1.0 / nc)
    }

    // -----------------------------------------------------------------------
    // Structured ops
    // -----------------------------------------------------------------------

    /// Per-voxel linear map: `out[b,o,i] = sum_k w[o,k] x[b,k,i] + bias[o]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var, out_dim: usize) -> Result<Var> {
        let d = self.dims[x.0].clone();
        let in_dim = d.channels;
        if self.values[weight.0].len() != out_dim * in_dim {
            return Err(Error::Channels {
                expected: self.values[weight.0].len() / out_dim.max(1),
                actual: in_dim,
            });
        }
        if self.values[bias.0].len() != out_dim {
            return Err(Error::Shape(format!(
                "bias has {} entries for {out_dim} outputs",
                self.values[bias.0].len()
            )));
        }
        let (nb, nv) = (d.batch, d.voxels());
        let out = linear_kernel(
            &self.values[weight.0],
            &self.values[bias.0],
            &self.values[x.0],
            nb,
            in_dim,
            out_dim,
            nv,
        );
        let bw: BackwardFn = Box::new(move |vals, g, sink| {
            let w = &vals[weight.0];
            let xv = &vals[x.0];
            if let Some(gx) = sink.get(x) {
                for b in 0..nb {
                    gemm_acc(
                        in_dim,
                        out_dim,
                        nv,
                        MatRef::transposed(w, in_dim),
                        MatRef::rows(&g[b * out_dim * nv..(b + 1) * out_dim * nv], nv),
                        &mut gx[b * in_dim * nv..(b + 1) * in_dim * nv],
                    );
                }
            }
            if let Some(gw) = sink.get(weight) {
                for b in 0..nb {
                    gemm_acc(
                        out_dim,
                        nv,
                        in_dim,
                        MatRef::rows(&g[b * out_dim * nv..(b + 1) * out_dim * nv], nv),
                        MatRef::transposed(&xv[b * in_dim * nv..(b + 1) * in_dim * nv], nv),
                        gw,
                    );
                }
            }
            if let Some(gb) = sink.get(bias) {
                for b in 0..nb {
                    for o in 0..out_dim {
                        gb[o] += g[(b * out_dim + o) * nv..(b * out_dim + o + 1) * nv]
                            .iter()
                            .sum::<f64>();
                    }
                }
            }
        });
        let requires = self.requires[x.0] || self.requires[weight.0] || self.requires[bias.0];
        Ok(self.push(out, d.with_channels(out_dim), requires, Some(bw)))
    }

    /// Channel-wise softmax at every voxel.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.dims[a.0].clone();
        let (nb, nc, nv) = (d.batch, d.channels, d.voxels());
        let x = &self.values[a.0];
        let mut out = vec![0.0; x.len()];
        for b in 0..nb {
            for i in 0..nv {
                softmax_strided(x, &mut out, b * nc * nv + i, nc, nv);
            }
        }
        let id = self.values.len();
        let bw: BackwardFn = Box::new(move |vals, g, sink| {
            let p = &vals[id];
            if let Some(ga) = sink.get(a) {
                for b in 0..nb {
                    for i in 0..nv {
                        let base = b * nc * nv + i;
                        let dot: f64 = (0..nc).map(|c| g[base + c * nv] * p[base + c * nv]).sum();
                        for c in 0..nc {
                            let k = base + c * nv;
                            ga[k] += p[k] * (g[k] - dot);
                        }
                    }
                }
            }
        });
        let requires = self.requires[a.0];
        self.push(out, d, requires, Some(bw))
    }

    /// Channel-wise log-softmax at every voxel.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let d = self.dims[a.0].clone();
        let (nb, nc, nv) = (d.batch, d.channels, d.voxels());
        let x = &self.values[a.0];
        let mut out = vec![0.0; x.len()];
        for b in 0..nb {
            for i in 0..nv {
                let base = b * nc * nv + i;
                let max = (0..nc).map(|c| x[base + c * nv]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..nc).map(|c| (x[base + c * nv] - max).exp()).sum::<f64>().ln();
                for c in 0..nc {
                    out[base + c * nv] = x[base + c * nv] - lse;
                }
            }
        }
        let id = self.values.len();
        let bw: BackwardFn = Box::new(move |vals, g, sink| {
            let y = &vals[id];
            if let Some(ga) = sink.get(a) {
                for b in 0..nb {
                    for i in 0..nv {
                        let base = b * nc * nv + i;
                        let gsum: f64 = (0..nc).map(|c| g[base + c * nv]).sum();
                        for c in 0..nc {
                            let k = base + c * nv;
                            ga[k] += g[k] - y[k].exp() * gsum;
                        }
                    }
                }
            }
        });
        let requires = self.requires[a.0];
        self.push(out, d, requires, Some(bw))
    }

    /// Concatenates values along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero inputs".into()));
        };
        let d0 = self.dims[first.0].clone();
        for p in parts {
            let d = &self.dims[p.0];
            if d.batch != d0.batch || d.spatial != d0.spatial {
                return Err(Error::Shape(format!("cannot concat {d:?} with {d0:?}")));
            }
        }
        let (nb, nv) = (d0.batch, d0.voxels());
        let chans: Vec<usize> = parts.iter().map(|p| self.dims[p.0].channels).collect();
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(nb * total * nv);
        for b in 0..nb {
            for (p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.values[p.0][b * c * nv..(b + 1) * c * nv]);
            }
        }
        let parts_owned = parts.to_vec();
        let chans_bw = chans.clone();
        let bw: BackwardFn = Box::new(move |_, g, sink| {
            let mut offset = 0;
            for (p, &c) in parts_owned.iter().zip(&chans_bw) {
                if let Some(gp) = sink.get(*p) {
                    for b in 0..nb {
                        let src = &g[(b * total + offset) * nv..(b * total + offset + c) * nv];
                        for (d, s) in gp[b * c * nv..(b + 1) * c * nv].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += c;
            }
        });
        let requires = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(out, d0.with_channels(total), requires, Some(bw)))
    }

    /// Nearest-neighbour resampling onto `target` spatial extents.
    pub fn resize_nearest(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let d = self.dims[a.0].clone();
        if d.spatial.len() != target.len() || target.iter().any(|&t| t == 0) {
            return Err(Error::Shape(format!(
                "cannot resize {:?} to {target:?}",
                d.spatial
            )));
        }
        if d.spatial == target {
            return Ok(a);
        }
        let map = nearest_index_map(&d.spatial, target);
        let (nb, nc, nv_src, nv_dst) = (d.batch, d.channels, d.voxels(), map.len());
        let x = &self.values[a.0];
        let mut out = vec![0.0; nb * nc * nv_dst];
        for row in 0..nb * nc {
            for (t, &s) in map.iter().enumerate() {
                out[row * nv_dst + t] = x[row * nv_src + s];
            }
        }
        let bw: BackwardFn = Box::new(move |_, g, sink| {
            if let Some(ga) = sink.get(a) {
                for row in 0..nb * nc {
                    for (t, &s) in map.iter().enumerate() {
                        ga[row * nv_src + s] += g[row * nv_dst + t];
                    }
                }
            }
        });
        let requires = self.requires[a.0];
        Ok(self.push(out, Dims::new(nb, nc, target.to_vec()), requires, Some(bw)))
    }

    /// Picks `a[b, labels[b, i], i]`, giving one channel.
    pub fn gather_channel(&mut self, a: Var, labels: &[u32]) -> Result<Var> {
        let d = self.dims[a.0].clone();
        let (nb, nc, nv) = (d.batch, d.channels, d.voxels());
        if labels.len() != nb * nv {
            return Err(Error::Shape(format!(
                "{} labels for {nb}x{nv} voxels",
                labels.len()
            )));
        }
        let mut idx = Vec::with_capacity(labels.len());
        for b in 0..nb {
            for i in 0..nv {
                let c = labels[b * nv + i] as usize;
                if c >= nc {
                    return Err(Error::LabelOutOfRange {
                        label: c as i64,
                        num_classes: nc,
                    });
                }
                idx.push((b * nc + c) * nv + i);
            }
        }
        let x = &self.values[a.0];
        let out = idx.iter().map(|&k| x[k]).collect();
        let bw: BackwardFn = Box::new(move |_, g, sink| {
            if let Some(ga) = sink.get(a) {
                for (o, &k) in idx.iter().enumerate() {
                    ga[k] += g[o];
                }
            }
        });
        let requires = self.requires[a.0];
        Ok(self.push(out, d.with_channels(1), requires, Some(bw)))
    }

    /// Picks flat elements of `a` into a `(1, 1, [n])` value.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let len = self.values[a.0].len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {len} elements"
            )));
        }
        let x = &self.values[a.0];
        let out: Vec<f64> = indices.iter().map(|&k| x[k]).collect();
        let n = out.len();
        let bw: BackwardFn = Box::new(move |_, g, sink| {
            if let Some(ga) = sink.get(a) {
                for (o, &k) in indices.iter().enumerate() {
                    ga[k] += g[o];
                }
            }
        });
        let requires = self.requires[a.0];
        Ok(self.push(out, Dims::new(1, 1, vec![n]), requires, Some(bw)))
    }

    // -----------------------------------------------------------------------
    // Reverse sweep
    // -----------------------------------------------------------------------

    /// Differentiates the scalar `loss` with respect to every learnable leaf.
    ///
    /// Fails if `loss` is not a scalar or if the graph was already
    /// differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Graph("backward already ran on this graph"));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::Graph("backward needs a scalar loss"));
        }
        self.spent = true;
        let n = self.values.len();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        if self.requires[loss.0] {
            grads[loss.0] = vec![1.0];
        }
        for id in (0..=loss.0).rev() {
            if grads[id].is_empty() {
                continue;
            }
            let Some(bw) = self.backward[id].as_ref() else {
                continue;
            };
            let g = if self.learnable[id] {
                grads[id].clone()
            } else {
                std::mem::take(&mut grads[id])
            };
            let mut sink = GradSink {
                grads: &mut grads,
                dims: &self.dims,
                requires: &self.requires,
            };
            bw(&self.values, &g, &mut sink);
        }
        for id in 0..n {
            if self.learnable[id] {
                if grads[id].is_empty() {
                    grads[id] = vec![0.0; self.dims[id].len()];
                }
            } else {
                grads[id] = Vec::new();
            }
        }
        Ok(Gradients {
            grads,
            learnable: self.learnable.clone(),
        })
    }
}

/// For each target voxel, the flat index of its nearest source voxel
/// (`src = floor(t * src_extent / target_extent)` per axis).
pub fn nearest_index_map(src: &[usize], target: &[usize]) -> Vec<usize> {
    let total: usize = target.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut coord = vec![0usize; target.len()];
    for _ in 0..total {
        let mut flat = 0;
        for ax in 0..target.len() {
            let s = coord[ax] * src[ax] / target[ax];
            flat = flat * src[ax] + s;
        }
        map.push(flat);
        for ax in (0..target.len()).rev() {
            coord[ax] += 1;
            if coord[ax] < target[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    map
}

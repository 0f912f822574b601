//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a topologically ordered list of nodes; every op pushes
//! one node whose closure maps the upstream gradient to gradients for its
//! parents. Everything is `f64`, single-threaded, and deterministic, which is
//! what the finite-difference gradient suites rely on.
//!
//! The op set is exactly what the reconstructors need: dense/batched matmul,
//! 3x3 convolution, nearest upsampling, softmax attention pieces, and the
//! selected-entry log-softmax used by the contrastive losses.

use ndarray::{ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.0].as_ref()
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        *self.nodes[v.0].value.first().expect("scalar node")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut g: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.dim(), 1.0));
        for id in (0..=loss.0).rev() {
            let (lo, hi) = g.split_at_mut(id);
            let Some(upstream) = hi[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[id];
            let Some(back) = node.back.as_ref() else {
                continue;
            };
            let parent_grads = back(upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(
                    self.nodes[*p].value.shape(),
                    pg.shape(),
                    "gradient shape mismatch into node {p}"
                );
                match &mut lo[*p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { g }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), -g])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = &av * &bv;
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g * &bv, g * &av])),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, vec![a.0], Some(Box::new(|g| vec![-g])))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) + s;
        self.push(v, vec![a.0], Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, vec![a.0], Some(Box::new(move |g| vec![g * s])))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let v = av.mapv(f64::abs);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g * &av.mapv(|x| if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                })]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        let yc = y.clone();
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| vec![g * &yc.mapv(|t| 1.0 - t * t)])),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let yc = y.clone();
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| vec![g * &yc.mapv(|s| s * (1.0 - s))])),
        )
    }

    /// Clamp to [0, 1]. Gradient passes only strictly inside the interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let y = av.mapv(|x| x.clamp(0.0, 1.0));
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g * &av.mapv(|x| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 })]
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape = self.value(a).shape().to_vec();
        assert_eq!(
            self.value(a).len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let v = self
            .value(a)
            .to_shape(IxDyn(shape))
            .expect("values are standard layout")
            .to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.to_shape(IxDyn(&old_shape)).unwrap().to_owned()]
            })),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_v = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let v = self
            .value(a)
            .clone()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let na = av.shape()[1];
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat shapes agree")
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let ga = g.index_axis_range(Axis(1), 0, na);
                let gb = g.index_axis_range(Axis(1), na, g.shape()[1]);
                vec![ga, gb]
            })),
        )
    }

    // ---- linear algebra ----

    /// `a [m,k] x b [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self
            .value(a)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self
            .value(b)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    g2.dot(&bv.t()).into_dyn(),
                    av.t().dot(&g2).into_dyn(),
                ]
            })),
        )
    }

    /// Contract the last axis of `a [..., k]` with `w [k, n]`.
    pub fn matmul_last(&mut self, a: Var, w: Var) -> Var {
        let a_shape = self.value(a).shape().to_vec();
        let k = *a_shape.last().expect("lhs needs at least one axis");
        let rows: usize = a_shape[..a_shape.len() - 1].iter().product();
        let wv = self
            .value(w)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("weights must be 2-d");
        assert_eq!(wv.shape()[0], k, "inner dimension mismatch");
        let n = wv.shape()[1];
        let a2 = self
            .value(a)
            .to_shape((rows, k))
            .unwrap()
            .to_owned();
        let out2 = a2.dot(&wv);
        let mut out_shape = a_shape[..a_shape.len() - 1].to_vec();
        out_shape.push(n);
        let v = out2.into_dyn().to_shape(IxDyn(&out_shape)).unwrap().to_owned();
        self.push(
            v,
            vec![a.0, w.0],
            Some(Box::new(move |g| {
                let g2 = g.to_shape((rows, n)).unwrap().to_owned();
                let da = g2.dot(&wv.t());
                let dw = a2.t().dot(&g2);
                vec![
                    da.into_dyn().to_shape(IxDyn(&a_shape)).unwrap().to_owned(),
                    dw.into_dyn(),
                ]
            })),
        )
    }

    /// Broadcast-add a row vector `b [n]` over the last axis of `a [..., n]`.
    pub fn add_rowvec(&mut self, a: Var, b: Var) -> Var {
        let n = *self.value(a).shape().last().unwrap();
        assert_eq!(self.value(b).shape(), [n]);
        let rows = self.value(a).len() / n;
        let bv = self.value(b).clone();
        let mut v = self.value(a).clone();
        {
            let mut v2 = v.view_mut().into_shape_with_order((rows, n)).unwrap();
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for mut row in v2.rows_mut() {
                row += &b1;
            }
        }
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let g2 = g.to_shape((rows, n)).unwrap();
                let db = g2.sum_axis(Axis(0));
                vec![g.clone(), db.into_dyn()]
            })),
        )
    }

    /// Batched matmul: `a [G,m,k] x b [G,k,n] -> [G,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self
            .value(a)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs must be 3-d");
        let bv = self
            .value(b)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs must be 3-d");
        let (gn, m, k) = av.dim();
        let (gn2, k2, n) = bv.dim();
        assert_eq!(gn, gn2);
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut v = ndarray::Array3::<f64>::zeros((gn, m, n));
        for gi in 0..gn {
            let prod = av.index_axis(Axis(0), gi).dot(&bv.index_axis(Axis(0), gi));
            v.index_axis_mut(Axis(0), gi).assign(&prod);
        }
        self.push(
            v.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<f64>::zeros((gn, m, k));
                let mut db = ndarray::Array3::<f64>::zeros((gn, k, n));
                for gi in 0..gn {
                    let gg = g3.index_axis(Axis(0), gi);
                    da.index_axis_mut(Axis(0), gi)
                        .assign(&gg.dot(&bv.index_axis(Axis(0), gi).t()));
                    db.index_axis_mut(Axis(0), gi)
                        .assign(&av.index_axis(Axis(0), gi).t().dot(&gg));
                }
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Swap the last two axes of a 3-d tensor.
    pub fn transpose12(&mut self, a: Var) -> Var {
        self.permute(a, &[0, 2, 1])
    }

    // ---- reductions / normalization ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let v = scalar(self.value(a).sum());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g| {
                let gv = *g.first().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().unwrap();
        let rows = self.value(a).len() / d;
        let a2 = self.value(a).to_shape((rows, d)).unwrap().to_owned();
        let mut y = a2.clone();
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let yc = y.clone();
        let v = y.into_dyn().to_shape(IxDyn(&shape)).unwrap().to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g| {
                let g2 = g.to_shape((rows, d)).unwrap().to_owned();
                let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let yr = yc.row(r);
                    let gr = g2.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                    for c in 0..d {
                        dx[[r, c]] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![dx.into_dyn().to_shape(IxDyn(&shape)).unwrap().to_owned()]
            })),
        )
    }

    /// L2-normalize over the last axis. Rows with tiny norm are left unscaled.
    pub fn normalize_last(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-30;
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().unwrap();
        let rows = self.value(a).len() / d;
        let a2 = self.value(a).to_shape((rows, d)).unwrap().to_owned();
        let mut y = a2.clone();
        let mut norms = Vec::with_capacity(rows);
        for mut row in y.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
            norms.push(n);
            row.mapv_inplace(|x| x / n);
        }
        let yc = y.clone();
        let v = y.into_dyn().to_shape(IxDyn(&shape)).unwrap().to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |g| {
                let g2 = g.to_shape((rows, d)).unwrap().to_owned();
                let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let yr = yc.row(r);
                    let gr = g2.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                    for c in 0..d {
                        dx[[r, c]] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                vec![dx.into_dyn().to_shape(IxDyn(&shape)).unwrap().to_owned()]
            })),
        )
    }

    /// Negative log-softmax, summed over selected entries of a batch of
    /// score matrices.
    ///
    /// `p` has shape `[G, n, m]`; the softmax runs over the last axis. Each
    /// pick `(g, r, c, w)` contributes `-w * log softmax(p[g, r, :])[c]`.
    /// This is the shared kernel for every InfoNCE-style loss in the crate.
    pub fn picked_nll_last(&mut self, p: Var, picks: &[(usize, usize, usize, f64)]) -> Var {
        let pv = self
            .value(p)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("picked_nll_last expects [G, n, m]");
        let (gn, n, m) = pv.dim();
        // log-sum-exp per row, max-shifted.
        let mut lse = ndarray::Array2::<f64>::zeros((gn, n));
        for gi in 0..gn {
            for r in 0..n {
                let row = pv.slice(ndarray::s![gi, r, ..]);
                let mx = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
                let s: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                lse[[gi, r]] = mx + s.ln();
            }
        }
        let mut total = 0.0;
        for &(gi, r, c, w) in picks {
            total += w * (lse[[gi, r]] - pv[[gi, r, c]]);
        }
        let picks_v = picks.to_vec();
        self.push(
            scalar(total),
            vec![p.0],
            Some(Box::new(move |g| {
                let gv = *g.first().unwrap();
                let mut dp = ndarray::Array3::<f64>::zeros((gn, n, m));
                for &(gi, r, c, w) in &picks_v {
                    let denom = lse[[gi, r]];
                    for k in 0..m {
                        dp[[gi, r, k]] += gv * w * (pv[[gi, r, k]] - denom).exp();
                    }
                    dp[[gi, r, c]] -= gv * w;
                }
                vec![dp.into_dyn()]
            })),
        )
    }

    // ---- broadcast helpers ----

    /// Multiply a tensor by a scalar-shaped variable.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale must be a scalar node");
        let xv = self.value(x).clone();
        let sv = *self.value(s).first().unwrap();
        let s_shape = self.value(s).dim();
        let v = &xv * sv;
        self.push(
            v,
            vec![x.0, s.0],
            Some(Box::new(move |g| {
                let ds = (g * &xv).sum();
                vec![g * sv, ArrayD::from_elem(s_shape.clone(), ds)]
            })),
        )
    }

    /// Per-(sample, channel) scale of a [N,C,H,W] map by `s [N,C]`.
    pub fn mul_nc(&mut self, x: Var, s: Var) -> Var {
        let xv = self
            .value(x)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("mul_nc input must be [N,C,H,W]");
        let sv = self
            .value(s)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("mul_nc scale must be [N,C]");
        let (nn, cc, hh, ww) = xv.dim();
        assert_eq!(sv.dim(), (nn, cc));
        let mut v = xv.clone();
        for ni in 0..nn {
            for ci in 0..cc {
                let sc = sv[[ni, ci]];
                v.slice_mut(ndarray::s![ni, ci, .., ..]).mapv_inplace(|t| t * sc);
            }
        }
        self.push(
            v.into_dyn(),
            vec![x.0, s.0],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array4::<f64>::zeros((nn, cc, hh, ww));
                let mut ds = ndarray::Array2::<f64>::zeros((nn, cc));
                for ni in 0..nn {
                    for ci in 0..cc {
                        let sc = sv[[ni, ci]];
                        let gs = g4.slice(ndarray::s![ni, ci, .., ..]);
                        let xs = xv.slice(ndarray::s![ni, ci, .., ..]);
                        dx.slice_mut(ndarray::s![ni, ci, .., ..])
                            .assign(&(&gs * sc));
                        ds[[ni, ci]] = (&gs * &xs).sum();
                    }
                }
                vec![dx.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// Per-(sample, channel) shift of a [N,C,H,W] map by `s [N,C]`.
    pub fn add_nc(&mut self, x: Var, s: Var) -> Var {
        let xv = self
            .value(x)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("add_nc input must be [N,C,H,W]");
        let sv = self
            .value(s)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("add_nc shift must be [N,C]");
        let (nn, cc, _hh, _ww) = xv.dim();
        assert_eq!(sv.dim(), (nn, cc));
        let mut v = xv.clone();
        for ni in 0..nn {
            for ci in 0..cc {
                let sc = sv[[ni, ci]];
                v.slice_mut(ndarray::s![ni, ci, .., ..]).mapv_inplace(|t| t + sc);
            }
        }
        self.push(
            v.into_dyn(),
            vec![x.0, s.0],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut ds = ndarray::Array2::<f64>::zeros((nn, cc));
                for ni in 0..nn {
                    for ci in 0..cc {
                        ds[[ni, ci]] = g4.slice(ndarray::s![ni, ci, .., ..]).sum();
                    }
                }
                vec![g.clone(), ds.into_dyn()]
            })),
        )
    }

    // ---- conv / resampling ----

    /// 2-d convolution with square kernels, arbitrary stride, zero padding.
    /// `x [N,Ci,H,W]`, `k [Co,Ci,kh,kw]`, `bias [Co]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xv = self
            .value(x)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("conv input must be [N,C,H,W]");
        let kv = self
            .value(k)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("conv kernel must be [Co,Ci,kh,kw]");
        let bv = self.value(bias).clone();
        let (nn, ci, h, w) = xv.dim();
        let (co, ci2, kh, kw) = kv.dim();
        assert_eq!(ci, ci2, "conv channel mismatch");
        assert_eq!(bv.len(), co);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = ndarray::Array4::<f64>::zeros((nn, co, ho, wo));
        for ni in 0..nn {
            for o in 0..co {
                let b = bv[[o]];
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b;
                        for i in 0..ci {
                            for dy in 0..kh {
                                let sy = y * stride + dy;
                                if sy < pad || sy - pad >= h {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let sx = xx * stride + dx;
                                    if sx < pad || sx - pad >= w {
                                        continue;
                                    }
                                    acc += xv[[ni, i, sy - pad, sx - pad]] * kv[[o, i, dy, dx]];
                                }
                            }
                        }
                        out[[ni, o, y, xx]] = acc;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0, k.0, bias.0],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut d_in = ndarray::Array4::<f64>::zeros((nn, ci, h, w));
                let mut d_k = ndarray::Array4::<f64>::zeros((co, ci, kh, kw));
                let mut d_b = ndarray::Array1::<f64>::zeros(co);
                for ni in 0..nn {
                    for o in 0..co {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = g4[[ni, o, y, xx]];
                                if gv == 0.0 {
                                    continue;
                                }
                                d_b[o] += gv;
                                for i in 0..ci {
                                    for dy in 0..kh {
                                        let sy = y * stride + dy;
                                        if sy < pad || sy - pad >= h {
                                            continue;
                                        }
                                        for dx in 0..kw {
                                            let sx = xx * stride + dx;
                                            if sx < pad || sx - pad >= w {
                                                continue;
                                            }
                                            d_in[[ni, i, sy - pad, sx - pad]] +=
                                                gv * kv[[o, i, dy, dx]];
                                            d_k[[o, i, dy, dx]] +=
                                                gv * xv[[ni, i, sy - pad, sx - pad]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![d_in.into_dyn(), d_k.into_dyn(), d_b.into_dyn()]
            })),
        )
    }

    /// Nearest-neighbour upsampling of `x [N,C,H,W]` by an integer factor.
    /// Factor 1 is the identity.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        if factor == 1 {
            return x;
        }
        let xv = self
            .value(x)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("upsample input must be [N,C,H,W]");
        let (nn, cc, h, w) = xv.dim();
        let mut out = ndarray::Array4::<f64>::zeros((nn, cc, h * factor, w * factor));
        for ni in 0..nn {
            for ci in 0..cc {
                for y in 0..h * factor {
                    for xx in 0..w * factor {
                        out[[ni, ci, y, xx]] = xv[[ni, ci, y / factor, xx / factor]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array4::<f64>::zeros((nn, cc, h, w));
                for ni in 0..nn {
                    for ci in 0..cc {
                        for y in 0..h * factor {
                            for xx in 0..w * factor {
                                dx[[ni, ci, y / factor, xx / factor]] += g4[[ni, ci, y, xx]];
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }
}

trait IndexAxisRange {
    fn index_axis_range(&self, axis: Axis, from: usize, to: usize) -> ArrayD<f64>;
}

impl IndexAxisRange for ArrayD<f64> {
    fn index_axis_range(&self, axis: Axis, from: usize, to: usize) -> ArrayD<f64> {
        self.slice_axis(axis, ndarray::Slice::from(from..to))
            .as_standard_layout()
            .to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use ndarray::IxDyn;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = seeding::stream(seed, "ad-test", 0);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || seeding::normal(&mut rng) * 0.5)
    }

    /// Central-difference check of d(scalar f)/d(inputs).
    fn fd_check(
        inputs: &[ArrayD<f64>],
        f: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&mut tape, &vars);
        assert_eq!(tape.value(out).len(), 1, "fd_check needs scalar outputs");
        let grads = tape.backward(out);

        let h = 1e-5;
        for (ii, base) in inputs.iter().enumerate() {
            let analytic = grads
                .of(vars[ii])
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(base.dim()));
            for flat in 0..base.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<ArrayD<f64>> = inputs.to_vec();
                    perturbed[ii].as_slice_mut().unwrap()[flat] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().map(|a| t.leaf(a.clone())).collect();
                    let o = f(&mut t, &vs);
                    t.scalar_value(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {ii} flat {flat}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let a = rand_arr(&[3, 4], 1);
        let b = rand_arr(&[3, 4], 2);
        fd_check(&[a.clone(), b.clone()], |t, v| {
            let x = t.mul(v[0], v[1]);
            let y = t.tanh(x);
            let z = t.abs(y);
            let w = t.sigmoid(z);
            t.mean_all(w)
        }, 1e-5);
        fd_check(&[a, b], |t, v| {
            let d = t.sub(v[0], v[1]);
            let s = t.add_scalar(d, 0.3);
            let m = t.mul_scalar(s, -1.7);
            t.sum_all(m)
        }, 1e-5);
    }

    #[test]
    fn matmul_family() {
        let a = rand_arr(&[3, 5], 3);
        let b = rand_arr(&[5, 2], 4);
        fd_check(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.mean_all(m)
        }, 1e-5);

        let a3 = rand_arr(&[2, 3, 4], 5);
        let w = rand_arr(&[4, 6], 6);
        let bias = rand_arr(&[6], 7);
        fd_check(&[a3, w, bias], |t, v| {
            let m = t.matmul_last(v[0], v[1]);
            let m = t.add_rowvec(m, v[2]);
            let m = t.tanh(m);
            t.mean_all(m)
        }, 1e-5);

        let p = rand_arr(&[2, 3, 4], 8);
        let q = rand_arr(&[2, 4, 5], 9);
        fd_check(&[p, q], |t, v| {
            let m = t.bmm(v[0], v[1]);
            t.mean_all(m)
        }, 1e-5);
    }

    #[test]
    fn shape_ops() {
        let a = rand_arr(&[2, 3, 4], 10);
        fd_check(&[a.clone()], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1]);
            let r = t.reshape(p, &[4, 6]);
            let s = t.mul(r, r);
            t.sum_all(s)
        }, 1e-5);
        let b = rand_arr(&[2, 2, 3, 3], 11);
        let c = rand_arr(&[2, 1, 3, 3], 12);
        fd_check(&[b, c], |t, v| {
            let cat = t.concat_axis1(v[0], v[1]);
            let m = t.mul(cat, cat);
            t.mean_all(m)
        }, 1e-5);
    }

    #[test]
    fn softmax_and_normalize() {
        let a = rand_arr(&[3, 4, 5], 13);
        fd_check(&[a.clone()], |t, v| {
            let s = t.softmax_last(v[0]);
            let s2 = t.mul(s, s);
            t.sum_all(s2)
        }, 1e-4);
        fd_check(&[a], |t, v| {
            let n = t.normalize_last(v[0]);
            let w = t.tanh(n);
            t.mean_all(w)
        }, 1e-4);
    }

    #[test]
    fn picked_nll_matches_fd() {
        let p = rand_arr(&[2, 3, 4], 14);
        let picks = vec![(0, 0, 1, 0.7), (0, 2, 3, 0.4), (1, 1, 0, 1.0)];
        fd_check(&[p], |t, v| {
            let picks = picks.clone();
            t.picked_nll_last(v[0], &picks)
        }, 1e-4);
    }

    #[test]
    fn conv_and_upsample() {
        let x = rand_arr(&[2, 3, 5, 5], 15);
        let k = rand_arr(&[2, 3, 3, 3], 16);
        let b = rand_arr(&[2], 17);
        fd_check(&[x.clone(), k.clone(), b.clone()], |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 1, 1);
            let u = t.upsample_nearest(c, 2);
            let m = t.mul(u, u);
            t.mean_all(m)
        }, 1e-4);
        // stride 2, no pad
        fd_check(&[x, k, b], |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 2, 1);
            t.mean_all(c)
        }, 1e-4);
    }

    #[test]
    fn nc_broadcast_and_scalar_var() {
        let x = rand_arr(&[2, 3, 4, 4], 18);
        let s = rand_arr(&[2, 3], 19);
        fd_check(&[x.clone(), s.clone()], |t, v| {
            let a = t.mul_nc(v[0], v[1]);
            let b = t.add_nc(a, v[1]);
            t.mean_all(b)
        }, 1e-5);
        let eta = rand_arr(&[], 20);
        fd_check(&[x, eta], |t, v| {
            let y = t.mul_scalar_var(v[0], v[1]);
            t.sum_all(y)
        }, 1e-5);
    }

    #[test]
    fn clamp01_gradient_inside_interval() {
        let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.2, 0.8, -0.5, 1.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.clamp01(v);
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        let gx = g.of(v).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(tape.value(y).as_slice().unwrap(), &[0.2, 0.8, 0.0, 1.0]);
    }

    #[test]
    fn gradient_accumulates_over_shared_inputs() {
        // f = mean(x*x) + sum(x) exercises multi-consumer accumulation.
        let x = rand_arr(&[3, 3], 21);
        fd_check(&[x], |t, v| {
            let sq = t.mul(v[0], v[0]);
            let a = t.mean_all(sq);
            let b = t.sum_all(v[0]);
            t.add(a, b)
        }, 1e-5);
    }
}

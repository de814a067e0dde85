//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it
//! in reverse and returns gradients for every recorded variable. Tapes are
//! built per sample and are cheap to discard, so data parallelism is done by
//! giving each batch entry its own tape (parameters live outside the tape
//! and are borrowed read-only).
//!
//! All values are double precision so analytic gradients can be checked
//! against central finite differences at tight tolerances.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Epsilon added to the standard deviation inside normalization layers.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    /// Index of this variable in its tape's gradient vector.
    pub fn id(&self) -> usize {
        self.id
    }
}

type BackFn = Box<dyn Fn(&[Node], &ArrayD<f64>, &mut [Option<ArrayD<f64>>])>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

fn accum(grads: &mut [Option<ArrayD<f64>>], id: usize, delta: ArrayD<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Records a forward computation for later reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    /// `grad_enabled = false` skips recording backward closures (inference).
    pub fn new(grad_enabled: bool) -> Tape {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            back: if self.grad_enabled { back } else { None },
        });
        Var { id }
    }

    /// Records an input or parameter value. Gradients w.r.t. leaves are
    /// available from [`Tape::backward`].
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.id].value;
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    /// Runs the backward pass from a scalar root (shape `[1]` or one element).
    ///
    /// Returns one gradient slot per recorded variable; interior slots are
    /// consumed during the sweep, leaf slots survive.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<f64>>> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(
            self.nodes[root.id].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::ones(self.nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            if self.nodes[id].back.is_none() {
                continue; // leaf: retain gradient
            }
            let Some(g) = grads[id].take() else { continue };
            let back = self.nodes[id].back.as_ref().unwrap();
            back(&self.nodes, &g, &mut grads);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.id].value + &self.nodes[b.id].value;
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accum(grads, a.id, g.clone());
                accum(grads, b.id, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.id].value - &self.nodes[b.id].value;
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accum(grads, a.id, g.clone());
                accum(grads, b.id, -g);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &self.nodes[a.id].value * &self.nodes[b.id].value;
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                accum(grads, a.id, g * &n[b.id].value);
                accum(grads, b.id, g * &n[a.id].value);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.id].value * k;
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accum(grads, a.id, g * k);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.id].value + k;
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accum(grads, a.id, g.clone());
            })),
        )
    }

    /// Gaussian error linear unit, tanh approximation (smooth everywhere,
    /// which keeps finite-difference gradient checks well conditioned).
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let value = self.nodes[a.id].value.mapv(|x| {
            let u = C * (x + A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let x = &n[a.id].value;
                let dg = x.mapv(|x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
                });
                accum(grads, a.id, g * &dg);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = self.push(value, None);
        if self.grad_enabled {
            let oid = out.id;
            self.nodes[oid].back = Some(Box::new(move |n, g, grads| {
                let s = &n[oid].value;
                let ds = s.mapv(|s| s * (1.0 - s));
                accum(grads, a.id, g * &ds);
            }));
        }
        out
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.sum();
        let shape = self.nodes[a.id].value.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |_n, g, grads| {
                let gv = g[0];
                accum(grads, a.id, ArrayD::from_elem(shape.clone(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.id].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of a `(T, d)` matrix, producing `(d,)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.nodes[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let (t, d) = (m.nrows(), m.ncols());
        let value = m.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = Array2::<f64>::zeros((t, d));
                let scaled = gv.mapv(|x| x / t as f64);
                for mut row in out.rows_mut() {
                    row.assign(&scaled);
                }
                accum(grads, a.id, out.into_dyn());
            })),
        )
    }

    // ---- linear algebra ----

    /// `(m, k) x (k, n) -> (m, n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = n[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = n[b.id].value.view().into_dimensionality::<Ix2>().unwrap();
                accum(grads, a.id, gv.dot(&bv.t()).into_dyn());
                accum(grads, b.id, av.t().dot(&gv).into_dyn());
            })),
        )
    }

    /// Adds a `(n,)` bias to every row of a `(t, n)` matrix.
    pub fn add_bias_row(&mut self, m: Var, b: Var) -> Var {
        let mv = self.nodes[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.id].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(mv.ncols(), bv.len());
        let value = (&mv + &bv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                accum(grads, m.id, g.clone());
                accum(grads, b.id, gv.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Multiplies every row of a `(t, n)` matrix by a `(n,)` vector.
    pub fn mul_row(&mut self, m: Var, s: Var) -> Var {
        let mv = self.nodes[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let sv = self.nodes[s.id].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(mv.ncols(), sv.len());
        let value = (&mv * &sv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mv = n[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let sv = n[s.id].value.view().into_dimensionality::<Ix1>().unwrap();
                accum(grads, m.id, (&gv * &sv).into_dyn());
                accum(grads, s.id, (&gv * &mv).sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Scales each row `i` of a `(t, n)` matrix by scalar `s[i]`.
    pub fn mul_col(&mut self, m: Var, s: Var) -> Var {
        let mv = self.nodes[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let sv = self.nodes[s.id].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(mv.nrows(), sv.len());
        let mut value = mv.to_owned();
        for (mut row, &k) in value.rows_mut().into_iter().zip(sv.iter()) {
            row.mapv_inplace(|x| x * k);
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mv = n[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let sv = n[s.id].value.view().into_dimensionality::<Ix1>().unwrap();
                let mut dm = gv.to_owned();
                for (mut row, &k) in dm.rows_mut().into_iter().zip(sv.iter()) {
                    row.mapv_inplace(|x| x * k);
                }
                let mut ds = Array1::<f64>::zeros(sv.len());
                for ((gr, mr), d) in gv.rows().into_iter().zip(mv.rows()).zip(ds.iter_mut()) {
                    *d = gr.iter().zip(mr.iter()).map(|(a, b)| a * b).sum();
                }
                accum(grads, m.id, dm.into_dyn());
                accum(grads, s.id, ds.into_dyn());
            })),
        )
    }

    /// Adds scalar `s[i]` to each element of row `i` of a `(t, n)` matrix.
    pub fn add_col(&mut self, m: Var, s: Var) -> Var {
        let mv = self.nodes[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let sv = self.nodes[s.id].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(mv.nrows(), sv.len());
        let mut value = mv.to_owned();
        for (mut row, &k) in value.rows_mut().into_iter().zip(sv.iter()) {
            row.mapv_inplace(|x| x + k);
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let ds: Array1<f64> = gv.sum_axis(Axis(1));
                accum(grads, m.id, g.clone());
                accum(grads, s.id, ds.into_dyn());
            })),
        )
    }

    /// Per-channel scale of a `(c, h, w)` map by a `(c,)` vector.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix3>().unwrap();
        let sv = self.nodes[s.id].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.shape()[0], sv.len());
        let mut value = xv.to_owned();
        for (mut plane, &g) in value.outer_iter_mut().zip(sv.iter()) {
            plane.mapv_inplace(|v| v * g);
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let xv = n[x.id].value.view().into_dimensionality::<Ix3>().unwrap();
                let sv = n[s.id].value.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = gv.to_owned();
                for (mut plane, &sc) in dx.outer_iter_mut().zip(sv.iter()) {
                    plane.mapv_inplace(|v| v * sc);
                }
                let mut ds = Array1::<f64>::zeros(sv.len());
                for ((gp, xp), d) in gv.outer_iter().zip(xv.outer_iter()).zip(ds.iter_mut()) {
                    *d = (&gp * &xp).sum();
                }
                accum(grads, x.id, dx.into_dyn());
                accum(grads, s.id, ds.into_dyn());
            })),
        )
    }

    /// Per-channel shift of a `(c, h, w)` map by a `(c,)` vector.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.id].value.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.shape()[0], bv.len());
        let mut value = xv.to_owned();
        for (mut plane, &g) in value.outer_iter_mut().zip(bv.iter()) {
            plane.mapv_inplace(|v| v + g);
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut db = Array1::<f64>::zeros(gv.shape()[0]);
                for (gp, d) in gv.outer_iter().zip(db.iter_mut()) {
                    *d = gp.sum();
                }
                accum(grads, x.id, g.clone());
                accum(grads, b.id, db.into_dyn());
            })),
        )
    }

    /// Multiplies a whole array by a scalar variable of shape `[1]`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.id].value.len(), 1);
        let sv = self.nodes[s.id].value[0];
        let value = &self.nodes[x.id].value * sv;
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let sv = n[s.id].value[0];
                accum(grads, x.id, g * sv);
                let d = (g * &n[x.id].value).sum();
                accum(grads, s.id, ArrayD::from_elem(IxDyn(&[1]), d));
            })),
        )
    }

    /// Adds a scalar variable of shape `[1]` to every element.
    pub fn shift_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.id].value.len(), 1);
        let sv = self.nodes[s.id].value[0];
        let value = &self.nodes[x.id].value + sv;
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accum(grads, x.id, g.clone());
                accum(grads, s.id, ArrayD::from_elem(IxDyn(&[1]), g.sum()));
            })),
        )
    }

    // ---- normalization ----

    /// Normalizes each row of a `(t, d)` matrix to zero mean and unit
    /// deviation: `(x - mu) / (sqrt(mean dev^2) + eps)`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.nodes[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let (t, d) = (m.nrows(), m.ncols());
        let mut value = Array2::<f64>::zeros((t, d));
        let mut stds = Array1::<f64>::zeros(t);
        for (i, row) in m.rows().into_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let s = var.sqrt();
            stds[i] = s;
            let sigma = s + NORM_EPS;
            for (j, x) in row.iter().enumerate() {
                value[(i, j)] = (x - mu) / sigma;
            }
        }
        let out = self.push(value.into_dyn(), None);
        if self.grad_enabled {
            let oid = out.id;
            self.nodes[oid].back = Some(Box::new(move |n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let xhat = n[oid].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f64>::zeros((t, d));
                for i in 0..t {
                    let s = stds[i];
                    let sigma = s + NORM_EPS;
                    let gr = gv.row(i);
                    let xr = xhat.row(i);
                    let gmean = gr.mean().unwrap();
                    let gdotx = gr
                        .iter()
                        .zip(xr.iter())
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                    let corr = if s > 0.0 { gdotx / (d as f64 * s) } else { 0.0 };
                    for j in 0..d {
                        dx[(i, j)] = (gr[j] - gmean) / sigma - xr[j] * corr;
                    }
                }
                accum(grads, a.id, dx.into_dyn());
            }));
        }
        out
    }

    /// Normalizes all elements of an arbitrary-shape array as one group.
    pub fn normalize_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.id].value;
        let n = x.len() as f64;
        let mu = x.sum() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let s = var.sqrt();
        let sigma = s + NORM_EPS;
        let value = x.mapv(|v| (v - mu) / sigma);
        let out = self.push(value, None);
        if self.grad_enabled {
            let oid = out.id;
            self.nodes[oid].back = Some(Box::new(move |nodes, g, grads| {
                let xhat = &nodes[oid].value;
                let gmean = g.sum() / n;
                let gdotx = g
                    .iter()
                    .zip(xhat.iter())
                    .map(|(g, x)| g * x)
                    .sum::<f64>();
                let corr = if s > 0.0 { gdotx / (n * s) } else { 0.0 };
                let mut dx = g.clone();
                dx.zip_mut_with(xhat, |dv, &xh| *dv = (*dv - gmean) / sigma - xh * corr);
                accum(grads, a.id, dx);
            }));
        }
        out
    }

    // ---- softmax ----

    /// Row-wise softmax of a `(t, n)` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.nodes[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = m.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let out = self.push(value.into_dyn(), None);
        if self.grad_enabled {
            let oid = out.id;
            self.nodes[oid].back = Some(Box::new(move |n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let sv = n[oid].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = gv.to_owned();
                for (mut drow, srow) in dx.rows_mut().into_iter().zip(sv.rows()) {
                    let dot = drow
                        .iter()
                        .zip(srow.iter())
                        .map(|(g, s)| g * s)
                        .sum::<f64>();
                    for (d, &s) in drow.iter_mut().zip(srow.iter()) {
                        *d = s * (*d - dot);
                    }
                }
                accum(grads, a.id, dx.into_dyn());
            }));
        }
        out
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.nodes[a.id].value.raw_dim();
        let value = self.nodes[a.id]
            .value
            .to_owned()
            .into_shape_clone(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let back = g.to_owned().into_shape_clone(orig.clone()).unwrap();
                accum(grads, a.id, back);
            })),
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let m = self.nodes[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let value = m.t().as_standard_layout().to_owned().into_dyn();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                accum(grads, a.id, gv.t().as_standard_layout().to_owned().into_dyn());
            })),
        )
    }

    /// `(c, h, w)` feature map to `(h*w, c)` spatial tokens.
    pub fn spatial_tokens(&mut self, a: Var) -> Var {
        let x = self.nodes[a.id].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut value = Array2::<f64>::zeros((h * w, c));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    value[(hi * w + wi, ci)] = x[(ci, hi, wi)];
                }
            }
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[(ci, hi, wi)] = gv[(hi * w + wi, ci)];
                        }
                    }
                }
                accum(grads, a.id, dx.into_dyn());
            })),
        )
    }

    /// Stacks `(d,)` vectors into a `(t, d)` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let d = self.nodes[rows[0].id].value.len();
        let t = rows.len();
        let mut value = Array2::<f64>::zeros((t, d));
        for (i, r) in rows.iter().enumerate() {
            let rv = self.nodes[r.id].value.view().into_dimensionality::<Ix1>().unwrap();
            value.row_mut(i).assign(&rv);
        }
        let ids: Vec<usize> = rows.iter().map(|r| r.id).collect();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                for (i, &id) in ids.iter().enumerate() {
                    accum(grads, id, gv.row(i).to_owned().into_dyn());
                }
            })),
        )
    }

    /// Column slice `[start, end)` of a `(t, d)` matrix.
    pub fn slice_cols(&mut self, m: Var, start: usize, end: usize) -> Var {
        let mv = self.nodes[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let (t, d) = (mv.nrows(), mv.ncols());
        assert!(start < end && end <= d);
        let value = mv
            .slice(ndarray::s![.., start..end])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dm = Array2::<f64>::zeros((t, d));
                dm.slice_mut(ndarray::s![.., start..end]).assign(&gv);
                accum(grads, m.id, dm.into_dyn());
            })),
        )
    }

    /// Concatenates `(t, d_i)` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let t = self.nodes[parts[0].id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .nrows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = self.nodes[p.id].value.view().into_dimensionality::<Ix2>().unwrap();
                assert_eq!(v.nrows(), t);
                v.ncols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = Array2::<f64>::zeros((t, total));
        let mut off = 0;
        for (p, w) in parts.iter().zip(widths.iter()) {
            let v = self.nodes[p.id].value.view().into_dimensionality::<Ix2>().unwrap();
            value.slice_mut(ndarray::s![.., off..off + w]).assign(&v);
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(widths.iter()) {
                    accum(
                        grads,
                        id,
                        gv.slice(ndarray::s![.., off..off + w])
                            .as_standard_layout()
                            .to_owned()
                            .into_dyn(),
                    );
                    off += w;
                }
            })),
        )
    }

    /// Appends one `(d,)` row to a `(t, d)` matrix.
    pub fn append_row(&mut self, m: Var, v: Var) -> Var {
        let mv = self.nodes[m.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let vv = self.nodes[v.id].value.view().into_dimensionality::<Ix1>().unwrap();
        let (t, d) = (mv.nrows(), mv.ncols());
        assert_eq!(vv.len(), d);
        let mut value = Array2::<f64>::zeros((t + 1, d));
        value.slice_mut(ndarray::s![..t, ..]).assign(&mv);
        value.row_mut(t).assign(&vv);
        self.push(
            value.into_dyn(),
            Some(Box::new(move |_n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                accum(
                    grads,
                    m.id,
                    gv.slice(ndarray::s![..t, ..]).to_owned().into_dyn(),
                );
                accum(grads, v.id, gv.row(t).to_owned().into_dyn());
            })),
        )
    }

    // ---- convolution ----

    /// 2D convolution: input `(c_in, h, w)`, weight `(c_out, c_in, kh, kw)`,
    /// zero padding `pad`, square stride. Cross-correlation convention.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.nodes[w.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (c_in, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, c_in_w, kh, kw) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        assert_eq!(c_in, c_in_w, "conv2d channel mismatch");
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wid + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, h_out, w_out);
        let wmat = wv
            .to_shape((c_out, c_in * kh * kw))
            .unwrap()
            .to_owned();
        let out = wmat.dot(&cols); // (c_out, h_out*w_out)
        let value = out.into_shape_clone((c_out, h_out, w_out)).unwrap().into_dyn();

        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let gmat = gv.to_shape((c_out, h_out * w_out)).unwrap().to_owned();
                let xv = n[x.id].value.view().into_dimensionality::<Ix3>().unwrap();
                let wv = n[w.id].value.view().into_dimensionality::<Ix4>().unwrap();
                let cols = im2col(&xv, kh, kw, stride, pad, h_out, w_out);
                // dW = g . cols^T
                let dw = gmat.dot(&cols.t());
                accum(
                    grads,
                    w.id,
                    dw.into_shape_clone((c_out, c_in, kh, kw)).unwrap().into_dyn(),
                );
                // dx = col2im(W^T . g)
                let wmat = wv.to_shape((c_out, c_in * kh * kw)).unwrap().to_owned();
                let dcols = wmat.t().dot(&gmat);
                let dx = col2im(&dcols, c_in, h, wid, kh, kw, stride, pad, h_out, w_out);
                accum(grads, x.id, dx.into_dyn());
            })),
        )
    }

    /// Same-padded 1D convolution of a `(n,)` vector with `(k, s)` kernels and
    /// `(k,)` biases, producing `(k, n)`. `s` must be odd. Gradients flow into
    /// the input, the kernels and the biases, which is what lets generated
    /// weights be trained through this op.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix1>().unwrap();
        let wv = self.nodes[w.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.id].value.view().into_dimensionality::<Ix1>().unwrap();
        let n = xv.len();
        let (k, s) = (wv.nrows(), wv.ncols());
        assert_eq!(bv.len(), k);
        assert!(s % 2 == 1, "kernel size must be odd for same padding");
        let half = (s / 2) as isize;
        let mut value = Array2::<f64>::zeros((k, n));
        for ki in 0..k {
            for i in 0..n {
                let mut acc = bv[ki];
                for j in 0..s {
                    let src = i as isize + j as isize - half;
                    if src >= 0 && (src as usize) < n {
                        acc += xv[src as usize] * wv[(ki, j)];
                    }
                }
                value[(ki, i)] = acc;
            }
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |nodes, g, grads| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = nodes[x.id].value.view().into_dimensionality::<Ix1>().unwrap();
                let wv = nodes[w.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array1::<f64>::zeros(n);
                let mut dw = Array2::<f64>::zeros((k, s));
                let mut db = Array1::<f64>::zeros(k);
                for ki in 0..k {
                    for i in 0..n {
                        let go = gv[(ki, i)];
                        db[ki] += go;
                        for j in 0..s {
                            let src = i as isize + j as isize - half;
                            if src >= 0 && (src as usize) < n {
                                dx[src as usize] += go * wv[(ki, j)];
                                dw[(ki, j)] += go * xv[src as usize];
                            }
                        }
                    }
                }
                accum(grads, x.id, dx.into_dyn());
                accum(grads, w.id, dw.into_dyn());
                accum(grads, b.id, db.into_dyn());
            })),
        )
    }
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array2<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, h_out * w_out));
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..h_out {
                    let src_i = (oi * stride + ki) as isize - pad as isize;
                    if src_i < 0 || src_i as usize >= h {
                        continue;
                    }
                    for oj in 0..w_out {
                        let src_j = (oj * stride + kj) as isize - pad as isize;
                        if src_j < 0 || src_j as usize >= w {
                            continue;
                        }
                        cols[(row, oi * w_out + oj)] = x[(ci, src_i as usize, src_j as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..h_out {
                    let src_i = (oi * stride + ki) as isize - pad as isize;
                    if src_i < 0 || src_i as usize >= h {
                        continue;
                    }
                    for oj in 0..w_out {
                        let src_j = (oj * stride + kj) as isize - pad as isize;
                        if src_j < 0 || src_j as usize >= w {
                            continue;
                        }
                        x[(ci, src_i as usize, src_j as usize)] += cols[(row, oi * w_out + oj)];
                    }
                }
            }
        }
    }
    x
}

/// Central-difference gradient of `f` w.r.t. `x`, one coordinate at a time.
///
/// Test oracle: independent of the tape machinery.
pub fn numeric_gradient<F>(mut f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative-tolerance comparison used by the gradient checks:
/// `|a - b| <= atol + rtol * max(|a|, |b|)`.
pub fn close_rel(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_array(shape: &[usize], rng: &mut impl Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Checks the tape gradient of `scalar(op(x))` against finite differences.
    fn gradcheck<F>(shape: &[usize], seed: u64, rtol: f64, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(shape, &mut rng);
        let mut tape = Tape::new(true);
        let xv = tape.leaf(x.clone());
        let out = build(&mut tape, xv);
        let root = tape.sum_all(out);
        let grads = tape.backward(root);
        let analytic = grads[0].as_ref().expect("leaf gradient missing");

        let numeric = numeric_gradient(
            |probe| {
                let mut t = Tape::new(false);
                let xv = t.leaf(probe.clone());
                let out = build(&mut t, xv);
                t.value(out).sum()
            },
            &x,
            1e-6,
        );
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert!(
                close_rel(*a, *b, rtol, 1e-8),
                "gradient mismatch: analytic {a} numeric {b}"
            );
        }
    }

    #[test]
    fn gradcheck_elementwise_chain() {
        gradcheck(&[4, 3], 1, 1e-6, |t, x| {
            let y = t.gelu(x);
            let z = t.mul(y, x);
            t.scale(z, 0.7)
        });
    }

    #[test]
    fn gradcheck_sigmoid() {
        gradcheck(&[6], 2, 1e-6, |t, x| t.sigmoid(x));
    }

    #[test]
    fn gradcheck_matmul_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_array(&[3, 5], &mut rng);
        let b = random_array(&[5], &mut rng);
        gradcheck(&[4, 3], 4, 1e-6, move |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.matmul(x, wv);
            t.add_bias_row(y, bv)
        });
    }

    #[test]
    fn gradcheck_matmul_weight_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_array(&[4, 3], &mut rng);
        gradcheck(&[3, 5], 6, 1e-6, move |t, w| {
            let av = t.leaf(a.clone());
            t.matmul(av, w)
        });
    }

    #[test]
    fn gradcheck_normalize_rows() {
        gradcheck(&[3, 8], 7, 1e-5, |t, x| t.normalize_rows(x));
    }

    #[test]
    fn gradcheck_normalize_all() {
        gradcheck(&[2, 3, 4], 8, 1e-5, |t, x| t.normalize_all(x));
    }

    #[test]
    fn gradcheck_softmax() {
        gradcheck(&[3, 6], 9, 1e-5, |t, x| t.softmax_rows(x));
    }

    #[test]
    fn gradcheck_conv2d_input_and_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random_array(&[3, 2, 3, 3], &mut rng);
        gradcheck(&[2, 5, 6], 11, 1e-5, move |t, x| {
            let wv = t.leaf(w.clone());
            t.conv2d(x, wv, 2, 1)
        });
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            random_array(&[2, 5, 6], &mut rng)
        };
        gradcheck(&[3, 2, 3, 3], 13, 1e-5, move |t, w| {
            let xv = t.leaf(x.clone());
            t.conv2d(xv, w, 1, 1)
        });
    }

    #[test]
    fn gradcheck_conv1d_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random_array(&[4, 5], &mut rng);
        let b = random_array(&[4], &mut rng);
        gradcheck(&[9], 15, 1e-5, move |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            t.conv1d_same(x, wv, bv)
        });
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            random_array(&[9], &mut rng)
        };
        let b2 = {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            random_array(&[4], &mut rng)
        };
        gradcheck(&[4, 5], 18, 1e-5, move |t, w| {
            let xv = t.leaf(x.clone());
            let bv = t.leaf(b2.clone());
            t.conv1d_same(xv, w, bv)
        });
    }

    #[test]
    fn gradcheck_structure_ops() {
        gradcheck(&[2, 4, 3], 19, 1e-6, |t, x| {
            let tok = t.spatial_tokens(x);
            t.mean_rows(tok)
        });
        gradcheck(&[4, 3], 20, 1e-6, |t, x| {
            let y = t.transpose2d(x);
            t.reshape(y, &[12])
        });
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let extra = random_array(&[3], &mut rng);
        gradcheck(&[2, 3], 22, 1e-6, move |t, x| {
            let ev = t.leaf(extra.clone());
            t.append_row(x, ev)
        });
    }

    #[test]
    fn gradcheck_column_ops() {
        gradcheck(&[3, 7], 30, 1e-6, |t, x| t.slice_cols(x, 2, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let s = random_array(&[3], &mut rng);
        gradcheck(&[3, 5], 34, 1e-6, move |t, x| {
            let sv = t.leaf(s.clone());
            let y = t.mul_col(x, sv);
            t.add_col(y, sv)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let other = random_array(&[3, 2], &mut rng);
        gradcheck(&[3, 4], 32, 1e-6, move |t, x| {
            let o = t.leaf(other.clone());
            let left = t.slice_cols(x, 0, 2);
            t.concat_cols(&[left, o, x])
        });
    }

    #[test]
    fn gradcheck_channel_and_scalar_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = random_array(&[3], &mut rng);
        let c = random_array(&[1], &mut rng);
        gradcheck(&[3, 2, 2], 24, 1e-6, move |t, x| {
            let sv = t.leaf(s.clone());
            let cv = t.leaf(c.clone());
            let y = t.mul_channel(x, sv);
            let z = t.add_channel(y, sv);
            let u = t.scale_by(z, cv);
            t.shift_by(u, cv)
        });
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = random_array(&[2, 6, 7], &mut rng);
        let w = random_array(&[3, 2, 3, 3], &mut rng);
        let mut tape = Tape::new(false);
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let out = tape.conv2d(xv, wv, 2, 1);
        let got = tape.value(out).view().into_dimensionality::<Ix3>().unwrap().to_owned();

        let xv3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let wv4 = w.view().into_dimensionality::<Ix4>().unwrap();
        for co in 0..3 {
            for oi in 0..3 {
                for oj in 0..4 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let si = (oi * 2 + ki) as isize - 1;
                                let sj = (oj * 2 + kj) as isize - 1;
                                if si >= 0 && si < 6 && sj >= 0 && sj < 7 {
                                    acc += xv3[(ci, si as usize, sj as usize)]
                                        * wv4[(co, ci, ki, kj)];
                                }
                            }
                        }
                    }
                    assert!((got[(co, oi, oj)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stack_rows_roundtrip_and_grads() {
        let mut tape = Tape::new(true);
        let a = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let b = tape.leaf(arr1(&[3.0, 4.0]).into_dyn());
        let m = tape.stack_rows(&[a, b]);
        assert_eq!(
            tape.value(m).view().into_dimensionality::<Ix2>().unwrap(),
            arr2(&[[1.0, 2.0], [3.0, 4.0]])
        );
        let s = tape.sum_all(m);
        let grads = tape.backward(s);
        assert_eq!(grads[0].as_ref().unwrap().len(), 2);
        assert_eq!(grads[1].as_ref().unwrap().len(), 2);
    }

    #[test]
    fn normalize_rows_zero_variance_guarded() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(arr2(&[[2.0, 2.0, 2.0]]).into_dyn());
        let y = tape.normalize_rows(x);
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert!(grads[0].as_ref().unwrap().iter().all(|v| v.is_finite()));
    }
}

//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every tensor is a dense 2-D matrix. Batches of variable-length sequences
//! are carried as row-stacked matrices plus a `lens` slice giving the rows of
//! each segment; ops that need the segment structure take it explicitly.
//!
//! The tape records one node per op output. Backward closures capture only
//! node ids and small scalars; values are read back from the tape during the
//! reverse sweep, so recording does not duplicate tensor storage.

use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&[Array2<T>], &Array2<T>, &mut Grads<T>)>;

/// Per-node gradient accumulator produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Array2<T>>>,
    needs: Vec<bool>,
}

impl<T: Scalar> Grads<T> {
    fn new(needs: &[bool]) -> Self {
        Grads {
            slots: needs.iter().map(|_| None).collect(),
            needs: needs.to_vec(),
        }
    }

    /// Accumulated gradient of the loss with respect to `v`, if any path
    /// reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.slots[v.0].take()
    }

    pub(crate) fn accum(&mut self, v: Var, contrib: Array2<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(g) => *g += &contrib,
            slot => *slot = Some(contrib),
        }
    }

    pub(crate) fn accum_view(&mut self, v: Var, f: impl FnOnce(&mut Array2<T>), shape: (usize, usize)) {
        if !self.needs[v.0] {
            return;
        }
        if self.slots[v.0].is_none() {
            self.slots[v.0] = Some(Array2::zeros(shape));
        }
        f(self.slots[v.0].as_mut().unwrap());
    }
}

/// Wengert tape: forward values plus backward closures.
pub struct Tape<T: Scalar> {
    values: Vec<Array2<T>>,
    needs_grad: Vec<bool>,
    backs: Vec<Option<BackFn<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            needs_grad: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that does not require a gradient (inputs, targets, noise).
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, false, None)
    }

    /// Leaf that accumulates a gradient (parameters, probed inputs).
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, true, None)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.values[v.0]
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0][[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, needs_grad: bool, back: Option<BackFn<T>>) -> Var {
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    pub(crate) fn record(
        &mut self,
        value: Array2<T>,
        inputs: &[Var],
        back: impl Fn(&[Array2<T>], &Array2<T>, &mut Grads<T>) + 'static,
    ) -> Var {
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        if needs {
            self.push(value, true, Some(Box::new(back)))
        } else {
            self.push(value, false, None)
        }
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads = Grads::new(&self.needs_grad);
        grads.accum(loss, Array2::from_elem((1, 1), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                if let Some(g) = grads.slots[i].take() {
                    back(&self.values, &g, &mut grads);
                    grads.slots[i] = Some(g);
                }
            }
        }
        grads
    }

    // ── elementwise and affine ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) + self.value(b);
        self.record(out, &[a, b], move |_, g, grads| {
            grads.accum(a, g.clone());
            grads.accum(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) - self.value(b);
        self.record(out, &[a, b], move |_, g, grads| {
            grads.accum(a, g.clone());
            grads.accum(b, g.mapv(|x| -x));
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) * self.value(b);
        self.record(out, &[a, b], move |vals, g, grads| {
            grads.accum(a, g * &vals[b.0]);
            grads.accum(b, g * &vals[a.0]);
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) / self.value(b);
        self.record(out, &[a, b], move |vals, g, grads| {
            let vb = &vals[b.0];
            grads.accum(a, g / vb);
            let va = &vals[a.0];
            grads.accum(b, -(g * va) / (vb * vb));
        })
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        self.record(out, &[a], move |_, g, grads| {
            grads.accum(a, g.mapv(|x| x * k));
        })
    }

    pub fn add_const(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).mapv(|x| x + k);
        self.record(out, &[a], move |_, g, grads| {
            grads.accum(a, g.clone());
        })
    }

    /// out = a + k * b, for scalar loss assembly and residual sums.
    pub fn add_scaled(&mut self, a: Var, b: Var, k: T) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let out = self.value(a) + &self.value(b).mapv(|x| x * k);
        self.record(out, &[a, b], move |_, g, grads| {
            grads.accum(a, g.clone());
            grads.accum(b, g.mapv(|x| x * k));
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid_scalar);
        let out_id = Var(self.values.len());
        self.record(out, &[a], move |vals, g, grads| {
            let y = &vals[out_id.0];
            grads.accum(a, g * &y.mapv(|v| v * (T::one() - v)));
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        let out_id = Var(self.values.len());
        self.record(out, &[a], move |vals, g, grads| {
            let y = &vals[out_id.0];
            grads.accum(a, g * &y.mapv(|t| T::one() - t * t));
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus_scalar);
        self.record(out, &[a], move |vals, g, grads| {
            grads.accum(a, g * &vals[a.0].mapv(sigmoid_scalar));
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu_scalar);
        self.record(out, &[a], move |vals, g, grads| {
            grads.accum(a, g * &vals[a.0].mapv(gelu_grad_scalar));
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.sqrt());
        let out_id = Var(self.values.len());
        self.record(out, &[a], move |vals, g, grads| {
            let y = &vals[out_id.0];
            let half = s::<T>(0.5);
            grads.accum(a, g * &y.mapv(|r| half / r));
        })
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    /// out = a @ b
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.record(out, &[a, b], move |vals, g, grads| {
            grads.accum(a, g.dot(&vals[b.0].t()));
            grads.accum(b, vals[a.0].t().dot(g));
        })
    }

    /// out = a @ b^T
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.record(out, &[a, b], move |vals, g, grads| {
            grads.accum(a, g.dot(&vals[b.0]));
            grads.accum(b, g.t().dot(&vals[a.0]));
        })
    }

    /// Broadcast-add a 1xC row vector to every row of a RxC matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_owned();
        let out = self.value(x) + &r;
        self.record(out, &[x, row], move |_, g, grads| {
            grads.accum(x, g.clone());
            grads.accum(row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
        })
    }

    /// Multiply each row r of x (RxC) by m[r] (Rx1).
    pub fn mul_col(&mut self, x: Var, m: Var) -> Var {
        let (rows, _cols) = self.value(x).dim();
        assert_eq!(self.value(m).dim(), (rows, 1));
        let mv = self.value(m).column(0).to_owned();
        let mut out = self.value(x).clone();
        for (mut row, f) in out.axis_iter_mut(Axis(0)).zip(mv.iter()) {
            row.mapv_inplace(|v| v * *f);
        }
        self.record(out, &[x, m], move |vals, g, grads| {
            let xm = &vals[m.0];
            let mut gx = g.clone();
            for (mut row, f) in gx.axis_iter_mut(Axis(0)).zip(xm.column(0).iter()) {
                row.mapv_inplace(|v| v * *f);
            }
            grads.accum(x, gx);
            let gm = (g * &vals[x.0])
                .sum_axis(Axis(1))
                .insert_axis(Axis(1));
            grads.accum(m, gm);
        })
    }

    /// Stack inputs top-to-bottom.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut at = 0;
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.ncols(), cols, "concat_rows: column mismatch");
            out.slice_mut(ndarray::s![at..at + v.nrows(), ..]).assign(v);
            offsets.push((at, v.nrows()));
            at += v.nrows();
        }
        let parts: Vec<Var> = parts.to_vec();
        let parts_bk = parts.clone();
        self.record(out, &parts, move |_, g, grads| {
            for (p, (at, n)) in parts_bk.iter().zip(offsets.iter()) {
                grads.accum(*p, g.slice(ndarray::s![*at..*at + *n, ..]).to_owned());
            }
        })
    }

    /// Stack inputs left-to-right.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut at = 0;
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            out.slice_mut(ndarray::s![.., at..at + v.ncols()]).assign(v);
            offsets.push((at, v.ncols()));
            at += v.ncols();
        }
        let parts: Vec<Var> = parts.to_vec();
        let parts_bk = parts.clone();
        self.record(out, &parts, move |_, g, grads| {
            for (p, (at, n)) in parts_bk.iter().zip(offsets.iter()) {
                grads.accum(*p, g.slice(ndarray::s![.., *at..*at + *n]).to_owned());
            }
        })
    }

    /// Rows `start..start+len` of x.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.value(x).dim();
        assert!(start + len <= rows);
        let out = self
            .value(x)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.record(out, &[x], move |_, g, grads| {
            grads.accum_view(
                x,
                |gx| {
                    let mut v = gx.slice_mut(ndarray::s![start..start + len, ..]);
                    v += g;
                },
                (rows, cols),
            );
        })
    }

    /// Gather rows of `table` by index; gradient scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (vocab, dim) = self.value(table).dim();
        let mut out = Array2::zeros((ids.len(), dim));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            out.row_mut(r).assign(&self.value(table).row(id));
        }
        let ids: Vec<usize> = ids.to_vec();
        self.record(out, &[table], move |_, g, grads| {
            grads.accum_view(
                table,
                |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                },
                (vocab, dim),
            );
        })
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let dim = self.value(a).dim();
        let out = Array2::from_elem((1, 1), total);
        self.record(out, &[a], move |_, g, grads| {
            grads.accum(a, Array2::from_elem(dim, g[[0, 0]]));
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = s::<T>(self.value(a).len() as f64);
        let total = self.value(a).sum() / n;
        let dim = self.value(a).dim();
        let out = Array2::from_elem((1, 1), total);
        self.record(out, &[a], move |_, g, grads| {
            grads.accum(a, Array2::from_elem(dim, g[[0, 0]] / n));
        })
    }

    /// Mean over rows: RxC -> 1xC.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (rows, _cols) = self.value(a).dim();
        let n = s::<T>(rows as f64);
        let out = (self.value(a).sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.record(out, &[a], move |_, g, grads| {
            let per_row = g.row(0).mapv(|x| x / n);
            let gx = Array2::from_shape_fn((rows, per_row.len()), |(_, c)| per_row[c]);
            grads.accum(a, gx);
        })
    }

    /// Frobenius norm as a 1x1 node.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let f = self.value(a).iter().map(|x| *x * *x).sum::<T>().sqrt();
        let out = Array2::from_elem((1, 1), f);
        self.record(out, &[a], move |vals, g, grads| {
            if f > T::zero() {
                grads.accum(a, vals[a.0].mapv(|x| x / f * g[[0, 0]]));
            }
        })
    }

    /// Broadcast-subtract a 1x1 scalar node from every entry.
    pub fn sub_scalar(&mut self, a: Var, k: Var) -> Var {
        assert_eq!(self.value(k).len(), 1);
        let kv = self.value(k)[[0, 0]];
        let out = self.value(a).mapv(|x| x - kv);
        self.record(out, &[a, k], move |_, g, grads| {
            grads.accum(a, g.clone());
            grads.accum(k, Array2::from_elem((1, 1), -g.sum()));
        })
    }

    // ── row-structured ops ──────────────────────────────────────────────

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows_value(self.value(a));
        let out_id = Var(self.values.len());
        self.record(out, &[a], move |vals, g, grads| {
            let y = &vals[out_id.0];
            let mut gx = g * y;
            for (mut row, yrow) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                let dot = row.iter().copied().sum::<T>();
                for (gv, yv) in row.iter_mut().zip(yrow.iter()) {
                    *gv -= *yv * dot;
                }
            }
            grads.accum(a, gx);
        })
    }

    /// Row-wise log-softmax, the stable front end of cross-entropy.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        let out_id = Var(self.values.len());
        self.record(out, &[a], move |vals, g, grads| {
            let y = &vals[out_id.0];
            let mut gx = g.clone();
            for (mut grow, yrow) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                let gsum = grow.iter().copied().sum::<T>();
                for (gv, yv) in grow.iter_mut().zip(yrow.iter()) {
                    *gv -= yv.exp() * gsum;
                }
            }
            grads.accum(a, gx);
        })
    }

    /// Per-row layer norm with learned gain/bias (1xC each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let gv = self.value(gain).row(0).to_owned();
        let bv = self.value(bias).row(0).to_owned();
        let mut out = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        let mut normed = Array2::zeros((rows, cols));
        let n = s::<T>(cols as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let xc = (row[c] - mu) * istd;
                normed[[r, c]] = xc;
                out[[r, c]] = xc * gv[c] + bv[c];
            }
        }
        self.record(out, &[x, gain, bias], move |_, g, grads| {
            // d bias, d gain
            grads.accum(bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            grads.accum(gain, (g * &normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
            // d x: standard layer-norm backward per row
            let mut gx = Array2::zeros((rows, cols));
            for r in 0..rows {
                let istd = inv_std[r];
                let mut sum_gh = T::zero();
                let mut sum_gh_x = T::zero();
                for c in 0..cols {
                    let gh = g[[r, c]] * gv[c];
                    sum_gh += gh;
                    sum_gh_x += gh * normed[[r, c]];
                }
                for c in 0..cols {
                    let gh = g[[r, c]] * gv[c];
                    gx[[r, c]] = istd * (gh - (sum_gh + normed[[r, c]] * sum_gh_x) / n);
                }
            }
            grads.accum(x, gx);
        })
    }

    // ── segment ops (ragged batches) ────────────────────────────────────

    /// Mask-weighted mean per segment: out[s] = sum(m_i x_i) / sum(m_i).
    ///
    /// `x` is (sum lens)xC, `m` is (sum lens)x1. Gradient flows to both.
    pub fn segment_masked_mean(&mut self, x: Var, m: Var, lens: &[usize]) -> Var {
        let xv = self.value(x);
        let mv = self.value(m);
        let cols = xv.ncols();
        assert_eq!(mv.dim(), (xv.nrows(), 1));
        assert_eq!(lens.iter().sum::<usize>(), xv.nrows());
        let mut out = Array2::zeros((lens.len(), cols));
        let mut denoms = Array1::zeros(lens.len());
        let mut at = 0;
        for (si, &len) in lens.iter().enumerate() {
            let denom = (at..at + len).map(|i| mv[[i, 0]]).sum::<T>();
            assert!(
                denom > T::zero(),
                "segment_masked_mean: segment {si} has all-zero mask"
            );
            denoms[si] = denom;
            for i in at..at + len {
                let w = mv[[i, 0]] / denom;
                for c in 0..cols {
                    out[[si, c]] += xv[[i, c]] * w;
                }
            }
            at += len;
        }
        let lens: Vec<usize> = lens.to_vec();
        let out_id = Var(self.values.len());
        self.record(out, &[x, m], move |vals, g, grads| {
            let xv = &vals[x.0];
            let mv = &vals[m.0];
            let outv = &vals[out_id.0];
            let mut gx = Array2::zeros(xv.dim());
            let mut gm = Array2::zeros(mv.dim());
            let mut at = 0;
            for (si, &len) in lens.iter().enumerate() {
                let denom = denoms[si];
                for i in at..at + len {
                    let mut dm = T::zero();
                    for c in 0..cols {
                        gx[[i, c]] = g[[si, c]] * mv[[i, 0]] / denom;
                        dm += g[[si, c]] * (xv[[i, c]] - outv[[si, c]]) / denom;
                    }
                    gm[[i, 0]] = dm;
                }
                at += len;
            }
            grads.accum(x, gx);
            grads.accum(m, gm);
        })
    }

    /// Repeat segment row s of z (SxC) for every row of that segment.
    pub fn broadcast_segments(&mut self, z: Var, lens: &[usize]) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.nrows(), lens.len());
        let cols = zv.ncols();
        let total: usize = lens.iter().sum();
        let mut out = Array2::zeros((total, cols));
        let mut at = 0;
        for (si, &len) in lens.iter().enumerate() {
            for i in at..at + len {
                out.row_mut(i).assign(&zv.row(si));
            }
            at += len;
        }
        let lens: Vec<usize> = lens.to_vec();
        self.record(out, &[z], move |_, g, grads| {
            let mut gz = Array2::zeros((lens.len(), cols));
            let mut at = 0;
            for (si, &len) in lens.iter().enumerate() {
                for i in at..at + len {
                    let mut row = gz.row_mut(si);
                    row += &g.row(i);
                }
                at += len;
            }
            grads.accum(z, gz);
        })
    }

    /// Multi-head scaled dot-product attention over row-stacked segments.
    ///
    /// `q` is (sum q_lens)xE, `k`/`v` are (sum kv_lens)xE with the same
    /// segment count; heads partition the E columns. `key_mask`, when given,
    /// removes masked keys from the softmax (hard side information, no
    /// gradient through the masking itself).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_lens: &[usize],
        kv_lens: &[usize],
        n_heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Var {
        assert_eq!(q_lens.len(), kv_lens.len(), "segment count mismatch");
        let dim = self.value(q).ncols();
        assert_eq!(self.value(k).ncols(), dim);
        assert_eq!(self.value(v).ncols(), dim);
        assert_eq!(dim % n_heads, 0, "heads must divide the embedding dim");
        let dh = dim / n_heads;
        let scale = T::one() / s::<T>(dh as f64).sqrt();
        let total_q: usize = q_lens.iter().sum();
        let total_kv: usize = kv_lens.iter().sum();
        assert_eq!(self.value(q).nrows(), total_q);
        assert_eq!(self.value(k).nrows(), total_kv);
        let mask: Option<Vec<bool>> = key_mask.map(|m| {
            assert_eq!(m.len(), total_kv);
            m.to_vec()
        });

        // Forward: per segment, per head.
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = Array2::zeros((total_q, dim));
        // Attention weights are kept for backward: one (q_len x kv_len)
        // matrix per (segment, head).
        let mut weights: Vec<Array2<T>> = Vec::with_capacity(q_lens.len() * n_heads);
        let (mut qa, mut ka) = (0usize, 0usize);
        for (&ql, &kl) in q_lens.iter().zip(kv_lens.iter()) {
            for h in 0..n_heads {
                let hc = h * dh;
                let mut scores = Array2::zeros((ql, kl));
                for i in 0..ql {
                    for j in 0..kl {
                        if let Some(m) = &mask {
                            if !m[ka + j] {
                                scores[[i, j]] = s::<T>(-1e9);
                                continue;
                            }
                        }
                        let mut dot = T::zero();
                        for c in 0..dh {
                            dot += qv[[qa + i, hc + c]] * kv[[ka + j, hc + c]];
                        }
                        scores[[i, j]] = dot * scale;
                    }
                }
                let w = softmax_rows_value(&scores);
                for i in 0..ql {
                    for j in 0..kl {
                        let wij = w[[i, j]];
                        for c in 0..dh {
                            out[[qa + i, hc + c]] += wij * vv[[ka + j, hc + c]];
                        }
                    }
                }
                weights.push(w);
            }
            qa += ql;
            ka += kl;
        }

        let q_lens: Vec<usize> = q_lens.to_vec();
        let kv_lens: Vec<usize> = kv_lens.to_vec();
        self.record(out, &[q, k, v], move |vals, g, grads| {
            let qv = &vals[q.0];
            let kv = &vals[k.0];
            let vv = &vals[v.0];
            let mut gq = Array2::zeros(qv.dim());
            let mut gk = Array2::zeros(kv.dim());
            let mut gv = Array2::zeros(vv.dim());
            let (mut qa, mut ka) = (0usize, 0usize);
            for (si, (&ql, &kl)) in q_lens.iter().zip(kv_lens.iter()).enumerate() {
                for h in 0..n_heads {
                    let hc = h * dh;
                    let w = &weights[si * n_heads + h];
                    // dP[i,j] = g_out[i,:h] . v[j,:h] ; dV[j] += w[i,j] g_out[i]
                    let mut dp = Array2::zeros((ql, kl));
                    for i in 0..ql {
                        for j in 0..kl {
                            let mut dot = T::zero();
                            let wij = w[[i, j]];
                            for c in 0..dh {
                                let go = g[[qa + i, hc + c]];
                                dot += go * vv[[ka + j, hc + c]];
                                gv[[ka + j, hc + c]] += wij * go;
                            }
                            dp[[i, j]] = dot;
                        }
                    }
                    // softmax backward -> dS, then dQ, dK
                    for i in 0..ql {
                        let mut row_dot = T::zero();
                        for j in 0..kl {
                            row_dot += dp[[i, j]] * w[[i, j]];
                        }
                        for j in 0..kl {
                            let ds = w[[i, j]] * (dp[[i, j]] - row_dot) * scale;
                            if ds != T::zero() {
                                for c in 0..dh {
                                    gq[[qa + i, hc + c]] += ds * kv[[ka + j, hc + c]];
                                    gk[[ka + j, hc + c]] += ds * qv[[qa + i, hc + c]];
                                }
                            }
                        }
                    }
                }
                qa += ql;
                ka += kl;
            }
            grads.accum(q, gq);
            grads.accum(k, gk);
            grads.accum(v, gv);
        })
    }

    // ── fused losses ────────────────────────────────────────────────────

    /// Mean squared error against a constant target, averaged over elements.
    pub fn mse(&mut self, pred: Var, target: &Array2<T>) -> Var {
        assert_eq!(self.value(pred).dim(), target.dim());
        let diff = self.value(pred) - target;
        let n = s::<T>(diff.len() as f64);
        let loss = diff.iter().map(|d| *d * *d).sum::<T>() / n;
        let two = s::<T>(2.0);
        self.record(
            Array2::from_elem((1, 1), loss),
            &[pred],
            move |_, g, grads| {
                grads.accum(pred, diff.mapv(|d| two * d / n * g[[0, 0]]));
            },
        )
    }

    /// Mean cross-entropy of logit rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let rows = lv.nrows();
        let n = s::<T>(rows as f64);
        let mut loss = T::zero();
        let mut probs = Array2::zeros(lv.dim());
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            for c in 0..row.len() {
                probs[[r, c]] = (row[c] - lse).exp();
            }
        }
        loss /= n;
        let targets: Vec<usize> = targets.to_vec();
        self.record(
            Array2::from_elem((1, 1), loss),
            &[logits],
            move |_, g, grads| {
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gx[[r, t]] -= T::one();
                }
                grads.accum(logits, gx.mapv(|v| v / n * g[[0, 0]]));
            },
        )
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Scalar>(x: T) -> T {
    // ln(1 + e^x), stable on both tails
    if x > s(20.0) {
        x
    } else if x < s(-20.0) {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = s::<T>(0.7978845608028654); // sqrt(2/pi)
    let k = s::<T>(0.044715);
    let half = s::<T>(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = s::<T>(0.7978845608028654);
    let k = s::<T>(0.044715);
    let half = s::<T>(0.5);
    let three = s::<T>(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

pub(crate) fn softmax_rows_value<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    /// Central finite differences of `f` at `x0`, compared entrywise against
    /// the tape gradient computed by the same closure.
    fn check_grad(
        x0: Array2<f64>,
        f: impl Fn(&mut Tape<f64>, Var) -> Var,
        rel_tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss);
        let g = grads.get(x).expect("gradient reached input").clone();

        let h = 1e-6;
        for r in 0..x0.nrows() {
            for c in 0..x0.ncols() {
                let mut plus = x0.clone();
                plus[[r, c]] += h;
                let mut minus = x0.clone();
                minus[[r, c]] -= h;
                let mut tp = Tape::new();
                let xp = tp.leaf(plus);
                let lp_var = f(&mut tp, xp);
                let lp = tp.scalar(lp_var);
                let mut tm = Tape::new();
                let xm = tm.leaf(minus);
                let lm_var = f(&mut tm, xm);
                let lm = tm.scalar(lm_var);
                let fd = (lp - lm) / (2.0 * h);
                let got = g[[r, c]];
                let denom = fd.abs().max(got.abs()).max(1e-4);
                assert!(
                    (fd - got).abs() / denom < rel_tol,
                    "grad mismatch at ({r},{c}): fd {fd} vs tape {got}"
                );
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4).mapv(|v| v + 2.5); // keep divisors away from 0
        for op in 0..6 {
            let b = b.clone();
            check_grad(
                a.clone(),
                move |t, x| {
                    let bv = t.leaf(b.clone());
                    let y = match op {
                        0 => t.add(x, bv),
                        1 => t.sub(x, bv),
                        2 => t.mul(x, bv),
                        3 => t.div(x, bv),
                        4 => t.add_scaled(x, bv, 0.7),
                        _ => t.scale(x, -1.3),
                    };
                    let y = t.mul(y, y);
                    t.mean(y)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let a = rand_mat(&mut rng, 4, 3);
        for op in 0..6 {
            check_grad(
                a.clone(),
                move |t, x| {
                    let y = match op {
                        0 => t.sigmoid(x),
                        1 => t.tanh(x),
                        2 => t.gelu(x),
                        3 => t.softplus(x),
                        4 => t.softmax_rows(x),
                        _ => t.log_softmax_rows(x),
                    };
                    let y2 = t.mul(y, y);
                    t.sum(y2)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 3, 5);
        let w = rand_mat(&mut rng, 5, 2);
        let row = rand_mat(&mut rng, 1, 2);
        let wc = w.clone();
        let rc = row.clone();
        check_grad(
            a.clone(),
            move |t, x| {
                let wv = t.leaf(wc.clone());
                let rv = t.leaf(rc.clone());
                let y = t.matmul(x, wv);
                let y = t.add_row(y, rv);
                let y = t.gelu(y);
                t.mean(y)
            },
            1e-5,
        );
        // gradient w.r.t. the weight as well
        let ac = a.clone();
        check_grad(
            w,
            move |t, x| {
                let av = t.constant(ac.clone());
                let y = t.matmul(av, x);
                let y = t.tanh(y);
                t.sum(y)
            },
            1e-5,
        );
        // a @ b^T
        let b = rand_mat(&mut rng, 4, 5);
        let bc = b.clone();
        check_grad(
            a,
            move |t, x| {
                let bv = t.leaf(bc.clone());
                let y = t.matmul_bt(x, bv);
                let y = t.frobenius(y);
                t.sum(y)
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let x = rand_mat(&mut rng, 4, 6);
        let gain = rand_mat(&mut rng, 1, 6).mapv(|v| v + 1.5);
        let bias = rand_mat(&mut rng, 1, 6);
        let (gc, bc) = (gain.clone(), bias.clone());
        check_grad(
            x.clone(),
            move |t, v| {
                let g = t.leaf(gc.clone());
                let b = t.leaf(bc.clone());
                let y = t.layer_norm(v, g, b, 1e-5);
                let y = t.mul(y, y);
                t.mean(y)
            },
            1e-4,
        );
        let xc = x.clone();
        let bc2 = bias.clone();
        check_grad(
            gain,
            move |t, g| {
                let v = t.constant(xc.clone());
                let b = t.leaf(bc2.clone());
                let y = t.layer_norm(v, g, b, 1e-5);
                t.mean(y)
            },
            1e-5,
        );
    }

    #[test]
    fn segment_ops_grads() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let lens = [3usize, 2, 4];
        let x = rand_mat(&mut rng, 9, 4);
        let m = Array2::from_shape_fn((9, 1), |_| rng.gen_range(0.2..1.0));
        let mc = m.clone();
        check_grad(
            x.clone(),
            move |t, v| {
                let mv = t.leaf(mc.clone());
                let pooled = t.segment_masked_mean(v, mv, &lens);
                let spread = t.broadcast_segments(pooled, &lens);
                let y = t.mul(spread, spread);
                t.mean(y)
            },
            1e-5,
        );
        let xc = x.clone();
        check_grad(
            m,
            move |t, mv| {
                let v = t.constant(xc.clone());
                let pooled = t.segment_masked_mean(v, mv, &lens);
                let y = t.mul(pooled, pooled);
                t.sum(y)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_grads_with_and_without_mask() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let q_lens = [2usize, 3];
        let kv_lens = [4usize, 3];
        let q = rand_mat(&mut rng, 5, 8);
        let k = rand_mat(&mut rng, 7, 8);
        let v = rand_mat(&mut rng, 7, 8);
        let mask = vec![true, false, true, true, true, true, false];
        for with_mask in [false, true] {
            for probe in 0..3 {
                let (kc, vc, qc) = (k.clone(), v.clone(), q.clone());
                let maskc = mask.clone();
                let f = move |t: &mut Tape<f64>, x: Var| {
                    let (qv, kv, vv) = match probe {
                        0 => (x, t.leaf(kc.clone()), t.leaf(vc.clone())),
                        1 => (t.leaf(qc.clone()), x, t.leaf(vc.clone())),
                        _ => (t.leaf(qc.clone()), t.leaf(kc.clone()), x),
                    };
                    let m = if with_mask { Some(&maskc[..]) } else { None };
                    let y = t.attention(qv, kv, vv, &q_lens, &kv_lens, 2, m);
                    let y = t.mul(y, y);
                    t.mean(y)
                };
                let x0 = match probe {
                    0 => q.clone(),
                    1 => k.clone(),
                    _ => v.clone(),
                };
                check_grad(x0, f, 1e-4);
            }
        }
    }

    #[test]
    fn losses_and_reductions() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let x = rand_mat(&mut rng, 5, 3);
        let target = rand_mat(&mut rng, 5, 3);
        let tc = target.clone();
        check_grad(x.clone(), move |t, v| t.mse(v, &tc), 1e-5);
        let classes = vec![0usize, 2, 1, 1, 0];
        check_grad(x.clone(), move |t, v| t.cross_entropy(v, &classes), 1e-5);
        check_grad(
            x.clone(),
            |t, v| {
                let m = t.mean_rows(v);
                let m = t.mul(m, m);
                t.sum(m)
            },
            1e-5,
        );
        check_grad(
            x.clone(),
            |t, v| {
                let sq = t.mul(v, v);
                let sm = t.mean(sq);
                t.sqrt(sm)
            },
            1e-5,
        );
        // sub_scalar and embedding
        check_grad(
            x.clone(),
            |t, v| {
                let k = t.mean(v);
                let d = t.sub_scalar(v, k);
                let d2 = t.mul(d, d);
                t.sum(d2)
            },
            1e-5,
        );
        let table = rand_mat(&mut rng, 6, 4);
        check_grad(
            table,
            |t, tab| {
                let e = t.embedding(tab, &[1, 3, 3, 0]);
                let e2 = t.mul(e, e);
                t.mean(e2)
            },
            1e-5,
        );
    }

    #[test]
    fn concat_and_slice_grads() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 2, 4);
        let bc = b.clone();
        check_grad(
            a.clone(),
            move |t, x| {
                let bv = t.leaf(bc.clone());
                let cat = t.concat_rows(&[x, bv]);
                let sliced = t.slice_rows(cat, 1, 3);
                let y = t.mul(sliced, sliced);
                t.sum(y)
            },
            1e-5,
        );
        let c = rand_mat(&mut rng, 3, 2);
        let cc = c.clone();
        check_grad(
            a.clone(),
            move |t, x| {
                let cv = t.leaf(cc.clone());
                let cat = t.concat_cols(&[x, cv]);
                let y = t.tanh(cat);
                t.mean(y)
            },
            1e-5,
        );
        let m = Array2::from_shape_fn((3, 1), |_| rng.gen_range(0.1..1.0));
        let mc = m.clone();
        check_grad(
            a,
            move |t, x| {
                let mv = t.leaf(mc.clone());
                let y = t.mul_col(x, mv);
                let y = t.mul(y, y);
                t.sum(y)
            },
            1e-5,
        );
        check_grad(
            m,
            |t, mv| {
                let x = t.constant(arr2(&[[1.0, -2.0], [0.5, 0.25], [3.0, 1.0]]));
                let y = t.mul_col(x, mv);
                t.sum(y)
            },
            1e-5,
        );
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(arr2(&[[1.0, 2.0]]));
        let x = tape.leaf(arr2(&[[3.0, 4.0]]));
        let y = tape.mul(c, x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &arr2(&[[1.0, 2.0]]));
    }
}

//! Minimal reverse-mode automatic differentiation over `ndarray` in f64.
//!
//! A [`Graph`] is a tape of nodes created per forward pass; [`Graph::backward`]
//! walks the tape in reverse creation order and accumulates gradients into the
//! parameter slots registered with [`Graph::param`]. Values are immutable once
//! created and shared via `Rc`, so backward closures capture them cheaply.
//!
//! The op set is exactly what the models here need: dense linear algebra,
//! 2-d convolution via im2col, normalization layers, attention primitives,
//! bilinear resampling and the loss heads. Everything is deterministic; no
//! op consults a RNG.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::collections::HashMap;
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`]; cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T(usize);

type BackFn = Box<dyn Fn(&Arr) -> Vec<(usize, Arr)>>;

struct Node {
    value: Rc<Arr>,
    back: Option<BackFn>,
    needs_grad: bool,
    param_slot: Option<usize>,
}

/// Gradients keyed by parameter slot, as produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub by_slot: HashMap<usize, Arr>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Arr> {
        self.by_slot.get(&slot)
    }

    pub fn global_norm(&self) -> f64 {
        self.by_slot
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_slot.values_mut() {
            g.mapv_inplace(|v| v * c);
        }
    }

    /// Adds `other` into `self` (gradient accumulation across a batch).
    pub fn accumulate(&mut self, other: Gradients) {
        for (slot, g) in other.by_slot {
            match self.by_slot.get_mut(&slot) {
                Some(acc) => *acc += &g,
                None => {
                    self.by_slot.insert(slot, g);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn view2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

fn view3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("3-d value")
}

fn view1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d value")
}

fn dynify<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> Arr {
    a.into_dyn()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr, back: Option<BackFn>, needs_grad: bool) -> T {
        self.nodes.push(Node {
            value: Rc::new(value),
            back,
            needs_grad,
            param_slot: None,
        });
        T(self.nodes.len() - 1)
    }

    pub fn value(&self, t: T) -> &Arr {
        &self.nodes[t.0].value
    }

    fn rc(&self, t: T) -> Rc<Arr> {
        Rc::clone(&self.nodes[t.0].value)
    }

    pub fn scalar(&self, t: T) -> f64 {
        *self.value(t).first().expect("scalar node")
    }

    fn needs(&self, t: T) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Leaf with no gradient tracking.
    pub fn constant(&mut self, value: Arr) -> T {
        self.push(value, None, false)
    }

    /// Leaf bound to a parameter slot; gradients accumulate under `slot`.
    pub fn param(&mut self, slot: usize, value: Rc<Arr>) -> T {
        self.nodes.push(Node {
            value,
            back: None,
            needs_grad: true,
            param_slot: Some(slot),
        });
        T(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node. Returns gradients per parameter slot.
    pub fn backward(&self, loss: T) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Arr::ones(self.value(loss).raw_dim()));
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Some(slot) = self.nodes[id].param_slot {
                match out.by_slot.get_mut(&slot) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.by_slot.insert(slot, g.clone());
                    }
                }
            }
            if let Some(back) = &self.nodes[id].back {
                for (pid, contrib) in back(&g) {
                    if !self.nodes[pid].needs_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
        out
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: T, b: T) -> T {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())]);
        self.push(v, Some(back), needs)
    }

    pub fn sub(&mut self, a: T, b: T) -> T {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g| vec![(a.0, g.clone()), (b.0, -g)]);
        self.push(v, Some(back), needs)
    }

    pub fn mul(&mut self, a: T, b: T) -> T {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let av = self.rc(a);
        let bv = self.rc(b);
        let v = &*av * &*bv;
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g| vec![(a.0, g * &*bv), (b.0, g * &*av)]);
        self.push(v, Some(back), needs)
    }

    pub fn div(&mut self, a: T, b: T) -> T {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let av = self.rc(a);
        let bv = self.rc(b);
        let v = &*av / &*bv;
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g| {
            let ga = g / &*bv;
            let gb = -(g * &*av) / (&*bv * &*bv);
            vec![(a.0, ga), (b.0, gb)]
        });
        self.push(v, Some(back), needs)
    }

    pub fn neg(&mut self, a: T) -> T {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: T, c: f64) -> T {
        let v = self.value(a).mapv(|x| x * c);
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a.0, g * c)]);
        self.push(v, Some(back), needs)
    }

    pub fn add_scalar(&mut self, a: T, c: f64) -> T {
        let v = self.value(a).mapv(|x| x + c);
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a.0, g.clone())]);
        self.push(v, Some(back), needs)
    }

    pub fn ln(&mut self, a: T) -> T {
        let av = self.rc(a);
        let v = av.mapv(f64::ln);
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| vec![(a.0, g / &*av)]);
        self.push(v, Some(back), needs)
    }

    pub fn clamp(&mut self, a: T, lo: f64, hi: f64) -> T {
        let av = self.rc(a);
        let v = av.mapv(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let mut gx = g.clone();
            ndarray::Zip::from(&mut gx).and(&*av).for_each(|gi, &x| {
                if x < lo || x > hi {
                    *gi = 0.0;
                }
            });
            vec![(a.0, gx)]
        });
        self.push(v, Some(back), needs)
    }

    pub fn sigmoid(&mut self, a: T) -> T {
        let v = self.value(a).mapv(crate::val::sigmoid_scalar);
        let needs = self.needs(a);
        let yv = Rc::new(v.clone());
        let back: BackFn = Box::new(move |g| {
            let gx = g * &yv.mapv(|y| y * (1.0 - y));
            vec![(a.0, gx)]
        });
        self.push(v, Some(back), needs)
    }

    pub fn silu(&mut self, a: T) -> T {
        let av = self.rc(a);
        let v = av.mapv(crate::val::silu_scalar);
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let gx = g * &av.mapv(|x| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            });
            vec![(a.0, gx)]
        });
        self.push(v, Some(back), needs)
    }

    /// Detached copy: identical value, no gradient flow.
    pub fn detach(&mut self, a: T) -> T {
        let v = self.rc(a);
        self.nodes.push(Node {
            value: v,
            back: None,
            needs_grad: false,
            param_slot: None,
        });
        T(self.nodes.len() - 1)
    }

    /// Straight-through composition: forward value of `fwd`, gradient of `grad_path`.
    pub fn straight_through(&mut self, fwd: T, grad_path: T) -> T {
        let delta = self.sub(fwd, grad_path);
        let frozen = self.detach(delta);
        self.add(grad_path, frozen)
    }

    // ---- shapes ----

    pub fn reshape(&mut self, a: T, shape: &[usize]) -> T {
        let n: usize = shape.iter().product();
        assert_eq!(self.value(a).len(), n, "reshape length mismatch");
        let v = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let needs = self.needs(a);
        let old_shape: Vec<usize> = self.value(a).shape().to_vec();
        let back: BackFn = Box::new(move |g| {
            let gx = g
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&old_shape))
                .expect("reshape back");
            vec![(a.0, gx)]
        });
        self.push(v, Some(back), needs)
    }

    pub fn transpose2(&mut self, a: T) -> T {
        let v = view2(self.value(a)).t().as_standard_layout().to_owned();
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let gx = view2(g).t().as_standard_layout().to_owned();
            vec![(a.0, dynify(gx))]
        });
        self.push(dynify(v), Some(back), needs)
    }

    pub fn slice_rows(&mut self, a: T, start: usize, end: usize) -> T {
        let av = view2(self.value(a));
        let (n, d) = (av.nrows(), av.ncols());
        assert!(start <= end && end <= n);
        let v = av.slice(ndarray::s![start..end, ..]).to_owned();
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let mut gx = Array2::<f64>::zeros((n, d));
            gx.slice_mut(ndarray::s![start..end, ..]).assign(&view2(g));
            vec![(a.0, dynify(gx))]
        });
        self.push(dynify(v), Some(back), needs)
    }

    pub fn slice_cols(&mut self, a: T, start: usize, end: usize) -> T {
        let av = view2(self.value(a));
        let (n, d) = (av.nrows(), av.ncols());
        assert!(start <= end && end <= d);
        let v = av.slice(ndarray::s![.., start..end]).to_owned();
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let mut gx = Array2::<f64>::zeros((n, d));
            gx.slice_mut(ndarray::s![.., start..end]).assign(&view2(g));
            vec![(a.0, dynify(gx))]
        });
        self.push(dynify(v), Some(back), needs)
    }

    pub fn concat_rows(&mut self, parts: &[T]) -> T {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| view2(self.value(*t))).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat rows");
        let sizes: Vec<usize> = parts.iter().map(|t| view2(self.value(*t)).nrows()).collect();
        let ids: Vec<usize> = parts.iter().map(|t| t.0).collect();
        let needs = parts.iter().any(|t| self.needs(*t));
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g);
            let mut out = Vec::with_capacity(ids.len());
            let mut row = 0;
            for (i, &id) in ids.iter().enumerate() {
                let part = gv.slice(ndarray::s![row..row + sizes[i], ..]).to_owned();
                out.push((id, dynify(part)));
                row += sizes[i];
            }
            out
        });
        self.push(dynify(v), Some(back), needs)
    }

    pub fn concat_cols(&mut self, parts: &[T]) -> T {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| view2(self.value(*t))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat cols");
        let sizes: Vec<usize> = parts.iter().map(|t| view2(self.value(*t)).ncols()).collect();
        let ids: Vec<usize> = parts.iter().map(|t| t.0).collect();
        let needs = parts.iter().any(|t| self.needs(*t));
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g);
            let mut out = Vec::with_capacity(ids.len());
            let mut col = 0;
            for (i, &id) in ids.iter().enumerate() {
                let part = gv.slice(ndarray::s![.., col..col + sizes[i]]).to_owned();
                out.push((id, dynify(part)));
                col += sizes[i];
            }
            out
        });
        self.push(dynify(v), Some(back), needs)
    }

    /// Repeats a `[d]` vector into `n` identical rows.
    pub fn repeat_row(&mut self, v: T, n: usize) -> T {
        let vv = view1(self.value(v)).to_owned();
        let d = vv.len();
        let mut out = Array2::<f64>::zeros((n, d));
        for mut row in out.rows_mut() {
            row.assign(&vv);
        }
        let needs = self.needs(v);
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g).sum_axis(Axis(0));
            vec![(v.0, dynify(gv))]
        });
        self.push(dynify(out), Some(back), needs)
    }

    // ---- broadcast arithmetic ----

    /// `a[n,d] + v[d]` per row.
    pub fn add_rowvec(&mut self, a: T, v: T) -> T {
        let av = view2(self.value(a));
        let vv = view1(self.value(v));
        assert_eq!(av.ncols(), vv.len());
        let out = &av + &vv.insert_axis(Axis(0));
        let needs = self.needs(a) || self.needs(v);
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g).sum_axis(Axis(0));
            vec![(a.0, g.clone()), (v.0, dynify(gv))]
        });
        self.push(dynify(out), Some(back), needs)
    }

    /// `a[n,d] * v[d]` per row.
    pub fn mul_rowvec(&mut self, a: T, v: T) -> T {
        let arc = self.rc(a);
        let vrc = self.rc(v);
        let av = view2(&arc);
        let vv = view1(&vrc);
        assert_eq!(av.ncols(), vv.len());
        let out = &av * &vv.insert_axis(Axis(0));
        let needs = self.needs(a) || self.needs(v);
        let back: BackFn = Box::new(move |g| {
            let gv2 = view2(g);
            let ga = &gv2 * &view1(&vrc).insert_axis(Axis(0));
            let gv = (&gv2 * &view2(&arc)).sum_axis(Axis(0));
            vec![(a.0, dynify(ga)), (v.0, dynify(gv))]
        });
        self.push(dynify(out), Some(back), needs)
    }

    /// `x[c,h,w] + b[c]` per channel.
    pub fn add_chan_bias(&mut self, x: T, b: T) -> T {
        let xv = view3(self.value(x));
        let bv = view1(self.value(b));
        let (c, h, w) = xv.dim();
        assert_eq!(c, bv.len());
        let mut out = xv.to_owned();
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + bv[ci]);
        }
        let needs = self.needs(x) || self.needs(b);
        let back: BackFn = Box::new(move |g| {
            let gv = view3(g);
            let mut gb = Array1::<f64>::zeros(c);
            for ci in 0..c {
                gb[ci] = gv.index_axis(Axis(0), ci).sum();
            }
            let _ = (h, w);
            vec![(x.0, g.clone()), (b.0, dynify(gb))]
        });
        self.push(dynify(out), Some(back), needs)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: T) -> T {
        let s = self.value(a).sum();
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let gs = *g.first().unwrap();
            vec![(a.0, Arr::from_elem(IxDyn(&shape), gs))]
        });
        self.push(Arr::from_elem(IxDyn(&[]), s), Some(back), needs)
    }

    pub fn mean_all(&mut self, a: T) -> T {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means of `a[n,d]` -> `[d]`.
    pub fn mean_rows(&mut self, a: T) -> T {
        let av = view2(self.value(a));
        let n = av.nrows();
        let v = av.mean_axis(Axis(0)).expect("nonempty");
        let needs = self.needs(a);
        let d = av.ncols();
        let back: BackFn = Box::new(move |g| {
            let gv = view1(g);
            let mut gx = Array2::<f64>::zeros((n, d));
            for mut row in gx.rows_mut() {
                row.assign(&(&gv / n as f64));
            }
            vec![(a.0, dynify(gx))]
        });
        self.push(dynify(v), Some(back), needs)
    }

    /// Euclidean norm of the flattened input; gradient is defined as zero at 0.
    pub fn l2_norm(&mut self, a: T) -> T {
        let av = self.rc(a);
        let norm = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let gs = *g.first().unwrap();
            let gx = if norm == 0.0 {
                Arr::zeros(av.raw_dim())
            } else {
                av.mapv(|x| gs * x / norm)
            };
            vec![(a.0, gx)]
        });
        self.push(Arr::from_elem(IxDyn(&[]), norm), Some(back), needs)
    }

    // ---- linear algebra ----

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: T, b: T) -> T {
        let arc = self.rc(a);
        let brc = self.rc(b);
        let av = view2(&arc);
        let bv = view2(&brc);
        assert_eq!(av.ncols(), bv.nrows());
        let v = av.dot(&bv);
        let needs = self.needs(a) || self.needs(b);
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g);
            let ga = gv.dot(&view2(&brc).t());
            let gb = view2(&arc).t().dot(&gv);
            vec![(a.0, dynify(ga)), (b.0, dynify(gb))]
        });
        self.push(dynify(v), Some(back), needs)
    }

    /// `x[n,in] @ w[out,in]^T (+ b[out])`, the standard dense layer.
    pub fn linear(&mut self, x: T, w: T, b: Option<T>) -> T {
        let xrc = self.rc(x);
        let wrc = self.rc(w);
        let xv = view2(&xrc);
        let wv = view2(&wrc);
        assert_eq!(xv.ncols(), wv.ncols(), "linear fan-in mismatch");
        let y = xv.dot(&wv.t());
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        let y = match b {
            Some(bt) => {
                let bv = view1(self.value(bt)).to_owned();
                &y + &bv.insert_axis(Axis(0))
            }
            None => y,
        };
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g);
            let gx = gv.dot(&view2(&wrc));
            let gw = gv.t().dot(&view2(&xrc));
            let mut out = vec![(x.0, dynify(gx)), (w.0, dynify(gw))];
            if let Some(bt) = b {
                out.push((bt.0, dynify(gv.sum_axis(Axis(0)))));
            }
            out
        });
        self.push(dynify(y), Some(back), needs)
    }

    /// Row gather from `table[v,d]` at `indices`; backward scatter-adds.
    pub fn embedding(&mut self, table: T, indices: &[usize]) -> T {
        let tv = view2(self.value(table));
        let (vocab, d) = (tv.nrows(), tv.ncols());
        let mut out = Array2::<f64>::zeros((indices.len(), d));
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < vocab, "embedding index {idx} out of range {vocab}");
            out.row_mut(i).assign(&tv.row(idx));
        }
        let needs = self.needs(table);
        let idxs: Vec<usize> = indices.to_vec();
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g);
            let mut gt = Array2::<f64>::zeros((vocab, d));
            for (i, &idx) in idxs.iter().enumerate() {
                let mut row = gt.row_mut(idx);
                row += &gv.row(i);
            }
            vec![(table.0, dynify(gt))]
        });
        self.push(dynify(out), Some(back), needs)
    }

    // ---- normalization ----

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm_rows(&mut self, a: T, eps: f64) -> T {
        let arc = self.rc(a);
        let av = view2(&arc);
        let (n, d) = av.dim();
        let mut xhat = Array2::<f64>::zeros((n, d));
        let mut inv_std = Array1::<f64>::zeros(n);
        for i in 0..n {
            let row = av.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                xhat[(i, j)] = (row[j] - mean) * is;
            }
        }
        let xhat_rc = Rc::new(xhat.clone());
        let needs = self.needs(a);
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g);
            let mut gx = Array2::<f64>::zeros((n, d));
            for i in 0..n {
                let grow = gv.row(i);
                let xrow = xhat_rc.row(i);
                let mean_g = grow.mean().unwrap();
                let mean_gx = grow
                    .iter()
                    .zip(xrow.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / d as f64;
                for j in 0..d {
                    gx[(i, j)] = inv_std[i] * (grow[j] - mean_g - xrow[j] * mean_gx);
                }
            }
            vec![(a.0, dynify(gx))]
        });
        self.push(dynify(xhat), Some(back), needs)
    }

    /// Group normalization over `[c,h,w]` with per-channel affine.
    pub fn group_norm(&mut self, x: T, gamma: T, beta: T, groups: usize, eps: f64) -> T {
        let xrc = self.rc(x);
        let xv = view3(&xrc);
        let (c, h, w) = xv.dim();
        assert!(c % groups == 0, "channels must divide into groups");
        let gsz = c / groups;
        let gv = view1(self.value(gamma)).to_owned();
        let bv = view1(self.value(beta)).to_owned();
        let m = gsz * h * w;
        let mut xhat = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = vec![0.0; groups];
        for g in 0..groups {
            let sl = xv.slice(ndarray::s![g * gsz..(g + 1) * gsz, .., ..]);
            let mean = sl.sum() / m as f64;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[g] = is;
            let mut dst = xhat.slice_mut(ndarray::s![g * gsz..(g + 1) * gsz, .., ..]);
            dst.assign(&sl.mapv(|v| (v - mean) * is));
        }
        let mut y = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let xh = xhat.index_axis(Axis(0), ci);
            let mut dst = y.index_axis_mut(Axis(0), ci);
            dst.assign(&xh.mapv(|v| v * gv[ci] + bv[ci]));
        }
        let xhat_rc = Rc::new(xhat);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let gamma_vals = gv;
        let back: BackFn = Box::new(move |gout| {
            let go = view3(gout);
            let mut ggamma = Array1::<f64>::zeros(c);
            let mut gbeta = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let gslice = go.index_axis(Axis(0), ci);
                let xh = xhat_rc.index_axis(Axis(0), ci);
                ggamma[ci] = (&gslice * &xh).sum();
                gbeta[ci] = gslice.sum();
            }
            let mut gx = Array3::<f64>::zeros((c, h, w));
            for g in 0..groups {
                let range = g * gsz..(g + 1) * gsz;
                // gradient w.r.t. xhat within the group
                let mut gxh = Array3::<f64>::zeros((gsz, h, w));
                for (local, ci) in range.clone().enumerate() {
                    let gslice = go.index_axis(Axis(0), ci);
                    let mut dst = gxh.index_axis_mut(Axis(0), local);
                    dst.assign(&gslice.mapv(|v| v * gamma_vals[ci]));
                }
                let xh = xhat_rc.slice(ndarray::s![range.clone(), .., ..]);
                let mean_g = gxh.sum() / m as f64;
                let mean_gx = (&gxh * &xh).sum() / m as f64;
                let mut dst = gx.slice_mut(ndarray::s![range, .., ..]);
                dst.assign(&(inv_std[g] * (&gxh - mean_g - &(&xh * mean_gx))));
            }
            vec![
                (x.0, dynify(gx)),
                (gamma.0, dynify(ggamma)),
                (beta.0, dynify(gbeta)),
            ]
        });
        self.push(dynify(y), Some(back), needs)
    }

    // ---- attention / softmax ----

    /// Row softmax of `x[n,m] + mask_bias`, where `mask_bias` entries are 0 or
    /// `-inf`. Masked positions get exactly zero probability and zero gradient.
    pub fn softmax_rows(&mut self, x: T, mask_bias: Option<&Array2<f64>>) -> T {
        let xv = view2(self.value(x)).to_owned();
        let (n, m) = xv.dim();
        let biased = match mask_bias {
            Some(mb) => {
                assert_eq!(mb.dim(), (n, m));
                &xv + mb
            }
            None => xv,
        };
        let mut y = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            let row = biased.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                y[(i, j)] = e;
                denom += e;
            }
            for j in 0..m {
                y[(i, j)] /= denom;
            }
        }
        let yrc = Rc::new(y.clone());
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g| {
            let gv = view2(g);
            let mut gx = Array2::<f64>::zeros((n, m));
            for i in 0..n {
                let yrow = yrc.row(i);
                let grow = gv.row(i);
                let dot = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum::<f64>();
                for j in 0..m {
                    gx[(i, j)] = yrow[j] * (grow[j] - dot);
                }
            }
            vec![(x.0, dynify(gx))]
        });
        self.push(dynify(y), Some(back), needs)
    }

    /// Mean categorical cross-entropy of `logits[n,v]` against target indices.
    pub fn cross_entropy_mean(&mut self, logits: T, targets: &[usize]) -> T {
        let lv = view2(self.value(logits)).to_owned();
        let (n, v) = lv.dim();
        assert_eq!(n, targets.len());
        let mut total = 0.0;
        let mut probs = Array2::<f64>::zeros((n, v));
        for i in 0..n {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[(i, j)] = e;
                denom += e;
            }
            for j in 0..v {
                probs[(i, j)] /= denom;
            }
            let t = targets[i];
            assert!(t < v, "target {t} out of vocabulary {v}");
            total += denom.ln() + mx - row[t];
        }
        let loss = total / n as f64;
        let needs = self.needs(logits);
        let targets_owned: Vec<usize> = targets.to_vec();
        let probs_rc = Rc::new(probs);
        let back: BackFn = Box::new(move |g| {
            let gs = *g.first().unwrap();
            let mut gx = (*probs_rc).clone();
            for (i, &t) in targets_owned.iter().enumerate() {
                gx[(i, t)] -= 1.0;
            }
            gx.mapv_inplace(|x| x * gs / n as f64);
            vec![(logits.0, dynify(gx))]
        });
        self.push(Arr::from_elem(IxDyn(&[]), loss), Some(back), needs)
    }

    // ---- spatial ----

    /// 2-d convolution on `x[cin,h,w]` with `w[cout,cin,kh,kw]`, via im2col.
    pub fn conv2d(&mut self, x: T, w: T, b: Option<T>, stride: usize, pad: usize) -> T {
        let xrc = self.rc(x);
        let wrc = self.rc(w);
        let xv = view3(&xrc);
        let wv = wrc
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight is 4-d");
        let (cin, h, wdt) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv channel mismatch");
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wdt + 2 * pad - kw) / stride + 1;
        let cols = im2col(&xv, kh, kw, stride, pad, hout, wout);
        let wmat = wv
            .to_shape((cout, cin * kh * kw))
            .expect("conv weight reshape")
            .to_owned();
        let ymat = cols.dot(&wmat.t()); // [hout*wout, cout]
        let mut y = Array3::<f64>::zeros((cout, hout, wout));
        for co in 0..cout {
            for oy in 0..hout {
                for ox in 0..wout {
                    y[(co, oy, ox)] = ymat[(oy * wout + ox, co)];
                }
            }
        }
        if let Some(bt) = b {
            let bv = view1(self.value(bt));
            for co in 0..cout {
                y.index_axis_mut(Axis(0), co).mapv_inplace(|v| v + bv[co]);
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bt| self.needs(bt)).unwrap_or(false);
        let cols_rc = Rc::new(cols);
        let back: BackFn = Box::new(move |g| {
            let gv = view3(g);
            let mut gymat = Array2::<f64>::zeros((hout * wout, cout));
            for co in 0..cout {
                for oy in 0..hout {
                    for ox in 0..wout {
                        gymat[(oy * wout + ox, co)] = gv[(co, oy, ox)];
                    }
                }
            }
            let wv = wrc
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let wmat = wv
                .to_shape((cout, cin * kh * kw))
                .unwrap()
                .to_owned();
            let gwmat = gymat.t().dot(&*cols_rc); // [cout, cin*kh*kw]
            let gcols = gymat.dot(&wmat); // [hout*wout, cin*kh*kw]
            let gx = col2im(&gcols, cin, h, wdt, kh, kw, stride, pad, hout, wout);
            let gw = gwmat
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap();
            let mut out = vec![(x.0, dynify(gx)), (w.0, dynify(gw))];
            if let Some(bt) = b {
                let mut gb = Array1::<f64>::zeros(cout);
                for co in 0..cout {
                    gb[co] = gv.index_axis(Axis(0), co).sum();
                }
                out.push((bt.0, dynify(gb)));
            }
            out
        });
        self.push(dynify(y), Some(back), needs)
    }

    /// Nearest-neighbour 2x upsampling of `[c,h,w]`.
    pub fn upsample_nearest2(&mut self, x: T) -> T {
        let xv = view3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut y = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[(ci, i, j)];
                    y[(ci, 2 * i, 2 * j)] = v;
                    y[(ci, 2 * i, 2 * j + 1)] = v;
                    y[(ci, 2 * i + 1, 2 * j)] = v;
                    y[(ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g| {
            let gv = view3(g);
            let mut gx = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        gx[(ci, i, j)] = gv[(ci, 2 * i, 2 * j)]
                            + gv[(ci, 2 * i, 2 * j + 1)]
                            + gv[(ci, 2 * i + 1, 2 * j)]
                            + gv[(ci, 2 * i + 1, 2 * j + 1)];
                    }
                }
            }
            vec![(x.0, dynify(gx))]
        });
        self.push(dynify(y), Some(back), needs)
    }

    /// Corner-aligned bilinear resampling of `[c,h,w]` to `(h2,w2)`.
    pub fn bilinear(&mut self, x: T, h2: usize, w2: usize) -> T {
        let xv = view3(self.value(x));
        let (c, h, w) = xv.dim();
        if h2 == h && w2 == w {
            // exact identity fast path
            let v = xv.to_owned();
            let needs = self.needs(x);
            let back: BackFn = Box::new(move |g| vec![(x.0, g.clone())]);
            return self.push(dynify(v), Some(back), needs);
        }
        let plan = BilinearPlan::new(h, w, h2, w2);
        let y = plan.apply(&xv);
        let needs = self.needs(x);
        let back: BackFn = Box::new(move |g| {
            let gv = view3(g);
            let gx = plan.transpose(&gv, c, h, w);
            vec![(x.0, dynify(gx))]
        });
        self.push(dynify(y), Some(back), needs)
    }
}

/// Precomputed sampling weights for corner-aligned bilinear interpolation.
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    h2: usize,
    w2: usize,
    // per output row: (y0, y1, weight of y1)
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

impl BilinearPlan {
    pub fn new(h: usize, w: usize, h2: usize, w2: usize) -> Self {
        let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
            (0..dst)
                .map(|i| {
                    if dst == 1 || src == 1 {
                        (0, 0, 0.0)
                    } else {
                        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
                        let i0 = pos.floor() as usize;
                        let i0 = i0.min(src - 1);
                        let i1 = (i0 + 1).min(src - 1);
                        (i0, i1, pos - i0 as f64)
                    }
                })
                .collect()
        };
        BilinearPlan {
            h2,
            w2,
            ys: axis(h, h2),
            xs: axis(w, w2),
        }
    }

    pub fn apply(&self, x: &ndarray::ArrayView3<'_, f64>) -> Array3<f64> {
        let (c, _, _) = x.dim();
        let mut y = Array3::<f64>::zeros((c, self.h2, self.w2));
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let v00 = x[(ci, y0, x0)];
                    let v01 = x[(ci, y0, x1)];
                    let v10 = x[(ci, y1, x0)];
                    let v11 = x[(ci, y1, x1)];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    y[(ci, oy, ox)] = top + (bot - top) * fy;
                }
            }
        }
        y
    }

    fn transpose(
        &self,
        g: &ndarray::ArrayView3<'_, f64>,
        c: usize,
        h: usize,
        w: usize,
    ) -> Array3<f64> {
        let mut gx = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let gv = g[(ci, oy, ox)];
                    gx[(ci, y0, x0)] += gv * (1.0 - fy) * (1.0 - fx);
                    gx[(ci, y0, x1)] += gv * (1.0 - fy) * fx;
                    gx[(ci, y1, x0)] += gv * fy * (1.0 - fx);
                    gx[(ci, y1, x1)] += gv * fy * fx;
                }
            }
        }
        gx
    }
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((hout * wout, cin * kh * kw));
    for oy in 0..hout {
        for ox in 0..wout {
            let row = oy * wout + ox;
            for ci in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, ci * kh * kw + ky * kw + kx)] =
                            x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array3<f64> {
    let mut gx = Array3::<f64>::zeros((cin, h, w));
    for oy in 0..hout {
        for ox in 0..wout {
            let row = oy * wout + ox;
            for ci in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[(ci, iy as usize, ix as usize)] +=
                            gcols[(row, ci * kh * kw + ky * kw + kx)];
                    }
                }
            }
        }
    }
    gx
}

//! Parameter storage, layer wrappers, the AdamW optimizer and the
//! finite-difference gradient checker.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::rc::Rc;

use crate::autograd::{Arr, Gradients, Graph, T};

/// Named, slot-addressed parameter set for one model.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Rc<Arr>)>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let slot = self.entries.len();
        self.entries.push((name.to_string(), Rc::new(value)));
        self.by_name.insert(name.to_string(), slot);
        slot
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn rc(&self, slot: usize) -> Rc<Arr> {
        Rc::clone(&self.entries[slot].1)
    }

    pub fn value(&self, slot: usize) -> &Arr {
        &self.entries[slot].1
    }

    /// Mutable access for optimizer updates and checkpoint restore. Must not
    /// be called while a graph still holds the parameter.
    pub fn value_mut(&mut self, slot: usize) -> &mut Arr {
        Rc::make_mut(&mut self.entries[slot].1)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Graph-building context: a graph plus a parameter binding cache.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    bound: Vec<Option<T>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Binds parameter `slot` into the graph (cached per context).
    pub fn p(&mut self, slot: usize) -> T {
        if let Some(t) = self.bound[slot] {
            return t;
        }
        let t = self.g.param(slot, self.store.rc(slot));
        self.bound[slot] = Some(t);
        t
    }
}

// ---- initializers ----

pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Arr {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

// ---- layers ----

/// Dense layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(&format!("{name}.weight"), uniform_init(rng, &[out_dim, in_dim], bound));
        let b = bias.then(|| store.add(&format!("{name}.bias"), uniform_init(rng, &[out_dim], bound)));
        Linear { w, b }
    }

    /// Zero-initialized variant (used for modulation heads).
    pub fn new_zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(&format!("{name}.weight"), zeros(&[out_dim, in_dim]));
        let b = Some(store.add(&format!("{name}.bias"), zeros(&[out_dim])));
        Linear { w, b }
    }

    pub fn apply(&self, ctx: &mut Ctx<'_>, x: T) -> T {
        let w = ctx.p(self.w);
        let b = self.b.map(|b| ctx.p(b));
        ctx.g.linear(x, w, b)
    }
}

/// 3x3 (or generic) convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(&format!("{name}.weight"), uniform_init(rng, &[cout, cin, k, k], bound));
        let b = store.add(&format!("{name}.bias"), uniform_init(rng, &[cout], bound));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized bias, weight as usual (per-scale refiners).
    #[allow(clippy::too_many_arguments)]
    pub fn new_zero_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(&format!("{name}.weight"), uniform_init(rng, &[cout, cin, k, k], bound));
        let b = store.add(&format!("{name}.bias"), zeros(&[cout]));
        Conv2d { w, b, stride, pad }
    }

    pub fn apply(&self, ctx: &mut Ctx<'_>, x: T) -> T {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        let beta = store.add(&format!("{name}.beta"), zeros(&[channels]));
        GroupNorm {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        }
    }

    pub fn apply(&self, ctx: &mut Ctx<'_>, x: T) -> T {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        ctx.g.group_norm(x, gamma, beta, self.groups, self.eps)
    }
}

// ---- optimizer ----

/// AdamW with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub step_count: u64,
    state: Vec<Option<(Arr, Arr)>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step_count: 0,
            state: vec![None; store.len()],
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, lr: f64) {
        if let Some(max_norm) = self.clip_norm {
            let norm = grads.global_norm();
            if norm > max_norm {
                grads.scale(max_norm / norm);
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for slot in 0..store.len() {
            let Some(g) = grads.get(slot) else { continue };
            if self.state[slot].is_none() {
                let z = ArrayD::zeros(store.value(slot).raw_dim());
                self.state[slot] = Some((z.clone(), z));
            }
            let (m, v) = self.state[slot].as_mut().unwrap();
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            let p = store.value_mut(slot);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pi);
            });
        }
    }

    pub fn state_tensors(&self) -> Vec<(usize, &Arr, &Arr)> {
        self.state
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|(m, v)| (i, m, v)))
            .collect()
    }

    pub fn restore_state(&mut self, slot: usize, m: Arr, v: Arr) {
        self.state[slot] = Some((m, v));
    }
}

/// Cosine-annealed learning rate: full rate at step 0, zero at the last step.
pub fn cosine_lr(initial: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return initial;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    0.5 * initial * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---- gradient checking ----

/// Central finite difference of `loss_fn` w.r.t. one parameter coordinate.
pub fn central_difference<F>(
    store: &mut ParamStore,
    slot: usize,
    flat_index: usize,
    eps: f64,
    mut loss_fn: F,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let original = store.value(slot).as_slice().unwrap()[flat_index];
    store.value_mut(slot).as_slice_mut().unwrap()[flat_index] = original + eps;
    let plus = loss_fn(store);
    store.value_mut(slot).as_slice_mut().unwrap()[flat_index] = original - eps;
    let minus = loss_fn(store);
    store.value_mut(slot).as_slice_mut().unwrap()[flat_index] = original;
    (plus - minus) / (2.0 * eps)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Draws `n` distinct (slot, flat_index) coordinates for spot checks.
pub fn sample_param_coords(
    store: &ParamStore,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut coords = Vec::with_capacity(n);
    let mut guard = 0;
    while coords.len() < n && guard < 100 * n {
        guard += 1;
        let slot = rng.random_range(0..store.len());
        let len = store.value(slot).len();
        if len == 0 {
            continue;
        }
        let idx = rng.random_range(0..len);
        if !coords.contains(&(slot, idx)) {
            coords.push((slot, idx));
        }
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let lr0 = 1e-4;
        assert_eq!(cosine_lr(lr0, 0, 100), lr0);
        let last = cosine_lr(lr0, 99, 100);
        assert!(last <= 1e-6 * lr0, "final lr {last} not annealed to zero");
        // monotone decreasing
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = cosine_lr(lr0, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adamw_decreases_quadratic() {
        let mut rng = rng();
        let mut store = ParamStore::new();
        let slot = store.add("x", uniform_init(&mut rng, &[4], 1.0));
        let mut opt = AdamW::new(&store, 0.0, None);
        let loss_of = |s: &ParamStore| s.value(slot).iter().map(|v| v * v).sum::<f64>();
        let before = loss_of(&store);
        for _ in 0..200 {
            let mut ctx = Ctx::new(&store);
            let x = ctx.p(slot);
            let sq = ctx.g.mul(x, x);
            let loss = ctx.g.sum_all(sq);
            let mut grads = ctx.g.backward(loss);
            drop(ctx);
            opt.step(&mut store, &mut grads, 0.05);
        }
        let after = loss_of(&store);
        assert!(after < before * 1e-2, "{after} vs {before}");
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        let slot = store.add("x", zeros(&[3]));
        let mut opt = AdamW::new(&store, 0.0, Some(1.0));
        let mut ctx = Ctx::new(&store);
        let x = ctx.p(slot);
        let big = ctx.g.scale(x, 1e6);
        let shifted = ctx.g.add_scalar(big, 5.0);
        let loss = ctx.g.sum_all(shifted);
        let mut grads = ctx.g.backward(loss);
        drop(ctx);
        // gradient is 1e6 per coordinate; after clipping the norm must be 1
        opt.step(&mut store, &mut grads, 0.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-9);
    }
}

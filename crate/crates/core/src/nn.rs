//! Parameter storage, layer building blocks and the Adam optimizer.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters of one model. Every store gets a process-unique id so a
/// [`Ctx`] can bind parameters from several stores onto one tape.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    entries: Vec<ParamEntry>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].value = value;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces values by name; every stored parameter must be present with a
    /// matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = map
                .get(e.name.as_str())
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter {} has shape {:?}, expected {:?}", e.name, t.shape(), e.value.shape()),
                ));
            }
            e.value = (*t).clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    /// sha256 over names, shapes and value bits.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        for e in &self.entries {
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(0);
            for &d in e.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::io::sha256_hex(&buf)
    }
}

/// Binds parameters onto a tape and carries the train/eval switch plus the
/// dropout RNG for one forward pass.
pub struct Ctx<'t> {
    tape: &'t Tape,
    bound: RefCell<HashMap<(u64, usize), Var<'t>>>,
    train: bool,
    rng: RefCell<rand_chacha::ChaCha8Rng>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, train: bool, seed: u64) -> Self {
        use rand::SeedableRng;
        Ctx {
            tape,
            bound: RefCell::new(HashMap::new()),
            train,
            rng: RefCell::new(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval(tape: &'t Tape) -> Self {
        Self::new(tape, false, 0)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'t> {
        *self
            .bound
            .borrow_mut()
            .entry((store.id, id.0))
            .or_insert_with(|| {
                let v = store.get(id).clone();
                if store.is_trainable(id) {
                    self.tape.var(v)
                } else {
                    self.tape.constant(v)
                }
            })
    }

    pub fn dropout(&self, x: Var<'t>, p: f64) -> Var<'t> {
        if !self.train || p <= 0.0 {
            return x;
        }
        x.dropout(p, &mut *self.rng.borrow_mut())
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut rand_chacha::ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    /// Gradients of every parameter of `store` that was used in this pass.
    pub fn grads_for(&self, store: &ParamStore, grads: &Grads) -> Vec<Option<Tensor>> {
        let bound = self.bound.borrow();
        (0..store.len())
            .map(|i| bound.get(&(store.id, i)).and_then(|v| grads.get(*v).cloned()))
            .collect()
    }

    pub fn scope<'a>(&'a self, store: &'a ParamStore) -> Scope<'a, 't> {
        Scope { ctx: self, store }
    }
}

/// A [`Ctx`] paired with the store whose parameters a layer reads.
#[derive(Clone, Copy)]
pub struct Scope<'a, 't> {
    pub ctx: &'a Ctx<'t>,
    pub store: &'a ParamStore,
}

impl<'a, 't> Scope<'a, 't> {
    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.ctx.param(self.store, id)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Normal(f64),
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Scaled(g) => Tensor::randn(shape, g / (fan_in as f64).sqrt(), rng),
        Init::Normal(s) => Tensor::randn(shape, s, rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[d_in, d_out], d_in, init, rng));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn no_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[d_in, d_out], d_in, init, rng));
        Linear { w, b: None, d_in, d_out }
    }

    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(s.p(self.w));
        match self.b {
            Some(b) => y.add(s.p(b)),
            None => y,
        }
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            g: store.add(format!("{name}.g"), Tensor::ones(&[d])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(LN_EPS).mul(s.p(self.g)).add(s.p(self.b))
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Channels-last 3D convolution over `[B, T, H, W, C]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub lin: Linear,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan = kernel.iter().product::<usize>() * c_in;
        Conv3d {
            lin: Linear::new(store, name, fan, c_out, init, rng),
            kernel,
            stride,
            pad,
        }
    }

    /// A "same" convolution with a cubic kernel of odd size.
    pub fn same<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, init: Init, rng: &mut R) -> Self {
        Self::new(store, name, c_in, c_out, [k; 3], [1; 3], [k / 2; 3], init, rng)
    }

    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>) -> Var<'t> {
        let cols = if self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] {
            x
        } else if self.kernel == self.stride && self.pad == [0, 0, 0] {
            space_to_depth(x, self.kernel)
        } else {
            x.unfold3d(self.kernel, self.stride, self.pad)
        };
        self.lin.forward(s, cols)
    }
}

/// `x + conv(gelu(conv(x)))` with two "same" `3×3×3` convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock3d {
    pub a: Conv3d,
    pub b: Conv3d,
}

impl ResBlock3d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        ResBlock3d {
            a: Conv3d::same(store, &format!("{name}.a"), c, c, 3, Init::Scaled(1.0), rng),
            b: Conv3d::same(store, &format!("{name}.b"), c, c, 3, Init::Scaled(0.5), rng),
        }
    }

    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>) -> Var<'t> {
        x.add(self.b.forward(s, self.a.forward(s, x).gelu()))
    }
}

/// `[B, T, H, W, C] -> [B, T/ft, H/fh, W/fw, ft*fh*fw*C]` with `(dt, dh, dw, c)`
/// feature order, matching [`crate::tensor::unfold3d`] for non-overlapping patches.
pub fn space_to_depth<'t>(x: Var<'t>, f: [usize; 3]) -> Var<'t> {
    let s = x.shape();
    let (b, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    assert!(t % f[0] == 0 && h % f[1] == 0 && w % f[2] == 0, "space_to_depth {s:?} by {f:?}");
    x.reshape(&[b, t / f[0], f[0], h / f[1], f[1], w / f[2], f[2], c])
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])
        .reshape(&[b, t / f[0], h / f[1], w / f[2], f[0] * f[1] * f[2] * c])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<'t>(x: Var<'t>, f: [usize; 3]) -> Var<'t> {
    let s = x.shape();
    let (b, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
    let k = f[0] * f[1] * f[2];
    assert_eq!(d % k, 0, "depth_to_space {s:?} by {f:?}");
    let c = d / k;
    x.reshape(&[b, t, h, w, f[0], f[1], f[2], c])
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])
        .reshape(&[b, t * f[0], h * f[1], w * f[2], c])
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, out_init: Init, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, Init::Scaled(1.0), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, out_init, rng),
        }
    }

    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(s, self.fc1.forward(s, x).gelu())
    }
}

/// Scaled dot-product attention on `[N, heads, L, dh]` projections already
/// split into heads. `mask` is an additive `[Lq, Lk]` constant.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: Option<Var<'t>>) -> Var<'t> {
    let dh = *q.shape().last().unwrap();
    let scores = q.matmul_t(k).scale(1.0 / (dh as f64).sqrt());
    let scores = match mask {
        Some(m) => scores.add(m),
        None => scores,
    };
    scores.softmax_last().matmul(v)
}

/// `[N, L, heads*dh] -> [N, heads, L, dh]`
pub fn split_heads<'t>(x: Var<'t>, heads: usize) -> Var<'t> {
    let s = x.shape();
    let (n, l, d) = (s[0], s[1], s[2]);
    x.reshape(&[n, l, heads, d / heads]).permute(&[0, 2, 1, 3])
}

/// `[N, heads, L, dh] -> [N, L, heads*dh]`
pub fn merge_heads<'t>(x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    let (n, h, l, dh) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3]).reshape(&[n, l, h * dh])
}

/// Multi-head attention with separate query/key-value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, d_kv: usize, heads: usize, out_init: Init, rng: &mut R) -> Self {
        assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, Init::Scaled(1.0), rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d, Init::Scaled(1.0), rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d, Init::Scaled(1.0), rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, out_init, rng),
            heads,
        }
    }

    /// `x: [N, Lq, d]`, `kv: [N, Lk, d_kv]`. `rope` rotates queries and keys
    /// after head splitting.
    pub fn forward<'t>(
        &self,
        s: Scope<'_, 't>,
        x: Var<'t>,
        kv: Var<'t>,
        mask: Option<Var<'t>>,
        rope: Option<&crate::dit::rope::Rope>,
    ) -> Var<'t> {
        let mut q = split_heads(self.q.forward(s, x), self.heads);
        let mut k = split_heads(self.k.forward(s, kv), self.heads);
        let v = split_heads(self.v.forward(s, kv), self.heads);
        if let Some(r) = rope {
            q = r.apply(s.ctx, q);
            k = r.apply(s.ctx, k);
        }
        self.o.forward(s, merge_heads(attention(q, k, v, mask)))
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; frozen parameters and missing gradients are skipped.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr_scale: f64) -> f64 {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = &self.cfg;
        let b1c = 1.0 - c.beta1.powi(self.t as i32);
        let b2c = 1.0 - c.beta2.powi(self.t as i32);
        let lr = c.lr * lr_scale;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            if !store.is_trainable(id) {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.numel()]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let upd = (m[j] / b1c) / ((v[j] / b2c).sqrt() + c.eps);
                p[j] -= lr * (upd + c.weight_decay * p[j]);
            }
        }
        norm
    }

    /// Drops optimizer moments for one parameter (used after codebook restarts).
    pub fn reset_moments(&mut self, id: ParamId) {
        if let Some(m) = self.m.get_mut(id.0) {
            *m = None;
        }
        if let Some(v) = self.v.get_mut(id.0) {
            *v = None;
        }
    }
}

/// Linear warmup then cosine decay to 10% of the base rate.
pub fn lr_schedule(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let p = (step - warmup) as f64 / (total.saturating_sub(warmup)).max(1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn space_depth_round_trip_and_unfold_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn(&[2, 4, 4, 6, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(x0.clone());
        let s = space_to_depth(x, [2, 2, 3]);
        assert!(depth_to_space(s, [2, 2, 3]).value().bit_eq(&x0));
        let u = crate::tensor::unfold3d(&x0, [2, 2, 3], [2, 2, 3], [0, 0, 0]);
        assert!(s.value().bit_eq(&u));
    }

    #[test]
    fn frozen_params_get_no_grad_and_no_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, Init::Scaled(1.0), &mut rng);
        store.set_trainable(false);
        let before = store.get(lin.w).clone();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let x = tape.var(Tensor::ones(&[1, 3]));
        let y = lin.forward(ctx.scope(&store), x).sum_all();
        let g = tape.backward(y);
        let pg = ctx.grads_for(&store, &g);
        assert!(pg.iter().all(|g| g.is_none()));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, &pg, 1.0);
        assert!(store.get(lin.w).bit_eq(&before));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            clip_norm: 0.0,
            ..Default::default()
        });
        for _ in 0..300 {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape);
            let l = ctx.param(&store, id).sqr().sum_all();
            let g = tape.backward(l);
            let pg = ctx.grads_for(&store, &g);
            opt.step(&mut store, &pg, 1.0);
        }
        assert!(store.get(id).sq_norm() < 1e-3);
    }
}

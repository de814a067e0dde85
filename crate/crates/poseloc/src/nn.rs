//! Parameter storage and the standard layers the model variants are
//! assembled from.
//!
//! Parameters live in a [`ParamStore`] outside any tape. Each forward pass
//! creates a [`Fwd`] context that lazily binds the parameters it touches
//! onto its own tape, so batch entries can run on independent tapes in
//! parallel against one shared read-only store. Initialization is keyed by
//! parameter name, never by registration order, which makes checkpoints and
//! training runs reproducible.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// How a parameter tensor is filled at registration time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    KaimingUniform { fan_in: usize },
    /// Uniform in `[-scale, scale]`.
    Uniform { scale: f64 },
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Named parameter tensors with deterministic, name-keyed initialization.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a tensor initialized from `(seed, name)` alone.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        assert!(!self.map.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in } => {
                let b = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Uniform { scale } => (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        };
        self.map
            .insert(name.to_string(), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.map
            .get_index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn name_at(&self, index: usize) -> &str {
        self.map.get_index(index).unwrap().0
    }

    pub fn value_at(&self, index: usize) -> &ArrayD<f64> {
        self.map.get_index(index).unwrap().1
    }

    pub fn value_at_mut(&mut self, index: usize) -> &mut ArrayD<f64> {
        self.map.get_index_mut(index).unwrap().1
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    /// Total scalar parameter count across all tensors.
    pub fn total_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Copies every tensor whose name and shape exist in both stores from
    /// `other`. Returns the copied names.
    pub fn load_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut loaded = Vec::new();
        for (name, value) in other.iter() {
            if let Some(slot) = self.map.get_mut(name) {
                if slot.shape() == value.shape() {
                    *slot = value.clone();
                    loaded.push(name.clone());
                }
            }
        }
        loaded
    }
}

/// Per-parameter gradient accumulator aligned with [`ParamStore`] indices.
#[derive(Debug, Clone)]
pub struct GradMap {
    pub slots: Vec<Option<ArrayD<f64>>>,
}

impl GradMap {
    pub fn zeros(n_params: usize) -> GradMap {
        GradMap {
            slots: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn merge(&mut self, other: GradMap) {
        for (dst, src) in self.slots.iter_mut().zip(other.slots) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => *d += &s,
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * k);
        }
    }
}

/// One forward pass: a tape plus the parameter bindings it created.
pub struct Fwd<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Fwd<'s> {
    pub fn new(store: &'s ParamStore, grad_enabled: bool) -> Fwd<'s> {
        Fwd {
            tape: Tape::new(grad_enabled),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Binds a named parameter onto the tape (once per tape).
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self.store.index_of(name);
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.tape.leaf(self.store.value_at(idx).clone());
        self.bound[idx] = Some(v);
        v
    }

    /// Backward from `root`, collecting gradients for every bound parameter.
    pub fn grads(self, root: Var) -> GradMap {
        let grads = self.tape.backward(root);
        let mut map = GradMap::zeros(self.store.len());
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(var) = bound {
                if let Some(g) = &grads[var.id()] {
                    map.slots[idx] = Some(g.clone());
                }
            }
        }
        map
    }
}

/// Linear layer `x (t, in) -> (t, out)` with optional bias.
pub fn linear(fwd: &mut Fwd, name: &str, x: Var, with_bias: bool) -> Var {
    let w = fwd.param(&format!("{name}.w"));
    let y = fwd.tape.matmul(x, w);
    if with_bias {
        let b = fwd.param(&format!("{name}.b"));
        fwd.tape.add_bias_row(y, b)
    } else {
        y
    }
}

pub fn register_linear(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    with_bias: bool,
    seed: u64,
) {
    store.register(
        &format!("{name}.w"),
        &[d_in, d_out],
        Init::KaimingUniform { fan_in: d_in },
        seed,
    );
    if with_bias {
        store.register(&format!("{name}.b"), &[d_out], Init::Zeros, seed);
    }
}

/// Conv layer `(c_in, h, w) -> (c_out, h', w')`, no bias (a norm follows).
pub fn conv2d(fwd: &mut Fwd, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = fwd.param(&format!("{name}.w"));
    fwd.tape.conv2d(x, w, stride, pad)
}

pub fn register_conv2d(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    seed: u64,
) {
    store.register(
        &format!("{name}.w"),
        &[c_out, c_in, k, k],
        Init::KaimingUniform {
            fan_in: c_in * k * k,
        },
        seed,
    );
}

/// How a normalization layer applies its affine stage.
#[derive(Clone, Copy)]
pub enum NormAffine {
    /// Learnable per-channel (conv maps) or per-dim (token rows) affine.
    Learned,
    /// Pose-conditioned scalars, one gamma and one beta per entry, produced
    /// by this layer's own 16 -> 2 head from the pose embedding.
    Conditional { pose_embed: Var },
    /// Pure normalization (used during backbone pretraining).
    None,
}

/// Conditional (gamma, beta) scalars from a `(1, 16)` pose embedding. The
/// head is zero-initialized, so training starts from plain normalization:
/// `gamma = 1 + h[0]`, `beta = h[1]`.
pub fn cln_scalars(fwd: &mut Fwd, name: &str, pose_embed: Var) -> (Var, Var) {
    let h = linear(fwd, &format!("{name}.cln"), pose_embed, true); // (1, 2)
    let g_col = fwd.tape.slice_cols(h, 0, 1);
    let b_col = fwd.tape.slice_cols(h, 1, 2);
    let g_flat = fwd.tape.reshape(g_col, &[1]);
    let b_flat = fwd.tape.reshape(b_col, &[1]);
    let gamma = fwd.tape.add_scalar(g_flat, 1.0);
    (gamma, b_flat)
}

pub fn register_cln_head(store: &mut ParamStore, name: &str, seed: u64) {
    store.register(&format!("{name}.cln.w"), &[16, 2], Init::Zeros, seed);
    store.register(&format!("{name}.cln.b"), &[2], Init::Zeros, seed);
}

/// Normalization of a `(c, h, w)` feature map over all its elements,
/// followed by the configured affine stage.
pub fn norm_map(fwd: &mut Fwd, name: &str, x: Var, affine: NormAffine) -> Var {
    let xh = fwd.tape.normalize_all(x);
    match affine {
        NormAffine::Learned => {
            let g = fwd.param(&format!("{name}.gain"));
            let b = fwd.param(&format!("{name}.bias"));
            let y = fwd.tape.mul_channel(xh, g);
            fwd.tape.add_channel(y, b)
        }
        NormAffine::Conditional { pose_embed } => {
            let (gamma, beta) = cln_scalars(fwd, name, pose_embed);
            let y = fwd.tape.scale_by(xh, gamma);
            fwd.tape.shift_by(y, beta)
        }
        NormAffine::None => xh,
    }
}

/// Row-wise normalization of `(t, d)` tokens plus the affine stage.
pub fn norm_rows(fwd: &mut Fwd, name: &str, x: Var, affine: NormAffine) -> Var {
    let xh = fwd.tape.normalize_rows(x);
    match affine {
        NormAffine::Learned => {
            let g = fwd.param(&format!("{name}.gain"));
            let b = fwd.param(&format!("{name}.bias"));
            let y = fwd.tape.mul_row(xh, g);
            fwd.tape.add_bias_row(y, b)
        }
        NormAffine::Conditional { pose_embed } => {
            let (gamma, beta) = cln_scalars(fwd, name, pose_embed);
            let y = fwd.tape.scale_by(xh, gamma);
            fwd.tape.shift_by(y, beta)
        }
        NormAffine::None => xh,
    }
}

pub fn register_norm_learned(store: &mut ParamStore, name: &str, width: usize, seed: u64) {
    store.register(&format!("{name}.gain"), &[width], Init::Ones, seed);
    store.register(&format!("{name}.bias"), &[width], Init::Zeros, seed);
}

/// Multi-head self-attention over `(t, d)` tokens.
pub fn self_attention(fwd: &mut Fwd, name: &str, x: Var, heads: usize) -> Var {
    let d = fwd.tape.value(x).shape()[1];
    assert!(d % heads == 0);
    let dh = d / heads;
    let q = linear(fwd, &format!("{name}.q"), x, false);
    let k = linear(fwd, &format!("{name}.k"), x, false);
    let v = linear(fwd, &format!("{name}.v"), x, false);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = fwd.tape.slice_cols(q, s, e);
        let kh = fwd.tape.slice_cols(k, s, e);
        let vh = fwd.tape.slice_cols(v, s, e);
        let kt = fwd.tape.transpose2d(kh);
        let scores = fwd.tape.matmul(qh, kt);
        let scaled = fwd.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = fwd.tape.softmax_rows(scaled);
        outs.push(fwd.tape.matmul(attn, vh));
    }
    let cat = fwd.tape.concat_cols(&outs);
    linear(fwd, &format!("{name}.o"), cat, false)
}

pub fn register_self_attention(store: &mut ParamStore, name: &str, d: usize, seed: u64) {
    for p in ["q", "k", "v", "o"] {
        register_linear(store, &format!("{name}.{p}"), d, d, false, seed);
    }
}

/// Cross-attention of `(t, d)` tokens onto a single `(1, d)` key/value pair.
/// The output projection is zero-initialized, so the residual insertion
/// leaves tokens unchanged at initialization.
pub fn cross_attention_single(fwd: &mut Fwd, name: &str, x: Var, kv: Var, heads: usize) -> Var {
    let d = fwd.tape.value(x).shape()[1];
    let dh = d / heads;
    let q = linear(fwd, &format!("{name}.q"), x, false);
    let k = linear(fwd, &format!("{name}.k"), kv, false);
    let v = linear(fwd, &format!("{name}.v"), kv, false);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = fwd.tape.slice_cols(q, s, e);
        let kh = fwd.tape.slice_cols(k, s, e);
        let vh = fwd.tape.slice_cols(v, s, e);
        let kt = fwd.tape.transpose2d(kh);
        let scores = fwd.tape.matmul(qh, kt); // (t, 1)
        let scaled = fwd.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = fwd.tape.softmax_rows(scaled); // single key: weights are 1
        outs.push(fwd.tape.matmul(attn, vh));
    }
    let cat = fwd.tape.concat_cols(&outs);
    linear(fwd, &format!("{name}.o"), cat, false)
}

pub fn register_cross_attention(store: &mut ParamStore, name: &str, d: usize, seed: u64) {
    for p in ["q", "k", "v"] {
        register_linear(store, &format!("{name}.{p}"), d, d, false, seed);
    }
    store.register(&format!("{name}.o.w"), &[d, d], Init::Zeros, seed);
}

/// Options for one transformer encoder layer.
#[derive(Clone, Copy)]
pub struct EncoderLayerCfg {
    pub heads: usize,
    pub ffn_dim: usize,
}

/// Pre-norm transformer encoder layer. `affine` selects the norm flavor;
/// `pose_kv` inserts a pose cross-attention sublayer when present.
pub fn encoder_layer(
    fwd: &mut Fwd,
    name: &str,
    x: Var,
    cfg: EncoderLayerCfg,
    affine: NormAffine,
    pose_kv: Option<Var>,
) -> Var {
    let n1 = norm_rows(fwd, &format!("{name}.norm1"), x, affine);
    let attn = self_attention(fwd, &format!("{name}.attn"), n1, cfg.heads);
    let mut x = fwd.tape.add(x, attn);
    if let Some(kv) = pose_kv {
        let nc = norm_rows(fwd, &format!("{name}.normx"), x, affine);
        let cross = cross_attention_single(fwd, &format!("{name}.xattn"), nc, kv, cfg.heads);
        x = fwd.tape.add(x, cross);
    }
    let n2 = norm_rows(fwd, &format!("{name}.norm2"), x, affine);
    let h = linear(fwd, &format!("{name}.ffn1"), n2, true);
    let h = fwd.tape.gelu(h);
    let h = linear(fwd, &format!("{name}.ffn2"), h, true);
    fwd.tape.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{close_rel, numeric_gradient};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn register_encoder_layer_learned(store: &mut ParamStore, name: &str, d: usize, f: usize) {
        register_norm_learned(store, &format!("{name}.norm1"), d, 7);
        register_norm_learned(store, &format!("{name}.norm2"), d, 7);
        register_self_attention(store, &format!("{name}.attn"), d, 7);
        register_linear(store, &format!("{name}.ffn1"), d, f, true, 7);
        register_linear(store, &format!("{name}.ffn2"), f, d, true, 7);
    }

    #[test]
    fn init_is_name_keyed_not_order_keyed() {
        let mut a = ParamStore::new();
        a.register("x.w", &[4, 4], Init::KaimingUniform { fan_in: 4 }, 1);
        a.register("y.w", &[4, 4], Init::KaimingUniform { fan_in: 4 }, 1);
        let mut b = ParamStore::new();
        b.register("y.w", &[4, 4], Init::KaimingUniform { fan_in: 4 }, 1);
        b.register("x.w", &[4, 4], Init::KaimingUniform { fan_in: 4 }, 1);
        assert_eq!(a.get("x.w"), b.get("x.w"));
        assert_eq!(a.get("y.w"), b.get("y.w"));
    }

    #[test]
    fn encoder_layer_gradcheck_against_finite_differences() {
        let d = 8;
        let mut store = ParamStore::new();
        register_encoder_layer_learned(&mut store, "enc", d, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x: Array2<f64> = Array2::from_shape_fn((3, d), |_| rng.random_range(-1.0..1.0));
        let cfg = EncoderLayerCfg {
            heads: 2,
            ffn_dim: 16,
        };

        let loss = |store: &ParamStore| -> f64 {
            let mut fwd = Fwd::new(store, false);
            let xv = fwd.tape.leaf2(x.clone());
            let y = encoder_layer(&mut fwd, "enc", xv, cfg, NormAffine::Learned, None);
            let s = fwd.tape.sum_all(y);
            fwd.tape.scalar_value(s)
        };

        let mut fwd = Fwd::new(&store, true);
        let xv = fwd.tape.leaf2(x.clone());
        let y = encoder_layer(&mut fwd, "enc", xv, cfg, NormAffine::Learned, None);
        let root = fwd.tape.sum_all(y);
        let grads = fwd.grads(root);

        for pname in ["enc.attn.q.w", "enc.ffn1.w", "enc.norm1.gain"] {
            let idx = store.index_of(pname);
            let analytic = grads.slots[idx].as_ref().expect("missing grad");
            let base = store.get(pname).clone();
            let numeric = numeric_gradient(
                |probe| {
                    let mut s2 = store.clone();
                    *s2.get_mut(pname) = probe.clone();
                    loss(&s2)
                },
                &base,
                1e-5,
            );
            for (a, b) in analytic.iter().zip(numeric.iter()) {
                assert!(
                    close_rel(*a, *b, 1e-4, 1e-7),
                    "{pname}: analytic {a} vs numeric {b}"
                );
            }
        }
    }

    #[test]
    fn cross_attention_zero_out_proj_is_identity_in_residual() {
        let d = 8;
        let mut store = ParamStore::new();
        register_cross_attention(&mut store, "x.xattn", d, 3);
        let mut fwd = Fwd::new(&store, false);
        let tokens: Array2<f64> = Array2::from_shape_fn((4, d), |(i, j)| (i + j) as f64 * 0.1);
        let kv: Array2<f64> = Array2::from_shape_fn((1, d), |(_, j)| j as f64 * 0.2);
        let xv = fwd.tape.leaf2(tokens.clone());
        let kvv = fwd.tape.leaf2(kv);
        let delta = cross_attention_single(&mut fwd, "x.xattn", xv, kvv, 2);
        let out = fwd.tape.add(xv, delta);
        assert_eq!(*fwd.tape.value(out), tokens.into_dyn());
    }

    #[test]
    fn cln_head_zero_init_reproduces_plain_normalization() {
        let mut store = ParamStore::new();
        register_cln_head(&mut store, "n0", 5);
        let mut fwd = Fwd::new(&store, false);
        let x = fwd.tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 3, 4]), (0..24).map(|i| i as f64).collect())
                .unwrap(),
        );
        let embed = fwd.tape.leaf2(Array2::from_elem((1, 16), 0.37));
        let plain = fwd.tape.normalize_all(x);
        let cond = norm_map(
            &mut fwd,
            "n0",
            x,
            NormAffine::Conditional { pose_embed: embed },
        );
        assert_eq!(fwd.tape.value(plain), fwd.tape.value(cond));
    }
}

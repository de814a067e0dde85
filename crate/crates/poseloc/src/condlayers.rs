//! Pose-conditioned layers: the pose-expansion network, conditional 1D
//! convolution, conditional layer normalization, and the two comparison
//! conditioning mechanisms (pose cross-attention and pose-token
//! concatenation).
//!
//! A node's pose enters as the 7-value encoding from [`crate::geometry`].
//! PoseExpand maps it through a small MLP to either the flattened
//! convolution kernels and biases (CondConv) or a 16-dim embedding from
//! which each normalization layer's own head derives one gamma and one
//! beta scalar per batch entry (CLN).

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Fwd, Init, ParamStore};

/// Output role of a pose-expansion network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseExpandRole {
    /// Final width `k * s + k`: flattened kernels followed by biases.
    CondConvKernels { k: usize, s: usize },
    /// Final width 16: shared embedding consumed by per-layer CLN heads.
    ClnEmbedding,
}

/// Architecture of a pose-expansion MLP (input is always the 7-vector).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseExpandSpec {
    pub hidden_dims: Vec<usize>,
    pub role: PoseExpandRole,
}

impl PoseExpandSpec {
    pub const INPUT_DIM: usize = 7;

    pub fn output_dim(&self) -> usize {
        match self.role {
            PoseExpandRole::CondConvKernels { k, s } => k * s + k,
            PoseExpandRole::ClnEmbedding => 16,
        }
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![Self::INPUT_DIM];
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.output_dim());
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

pub fn register_pose_expand(store: &mut ParamStore, name: &str, spec: &PoseExpandSpec, seed: u64) {
    let widths = spec.widths();
    for (i, pair) in widths.windows(2).enumerate() {
        nn::register_linear(store, &format!("{name}.l{i}"), pair[0], pair[1], true, seed);
    }
}

/// Runs the pose-expansion MLP on a `(b, 7)` batch of pose vectors,
/// producing `(b, out)` conditioning vectors. GELU between layers, linear
/// output.
pub fn pose_expand(fwd: &mut Fwd, name: &str, spec: &PoseExpandSpec, pose7: Var) -> Var {
    assert_eq!(fwd.tape.value(pose7).shape()[1], PoseExpandSpec::INPUT_DIM);
    let n_layers = spec.widths().len() - 1;
    let mut x = pose7;
    for i in 0..n_layers {
        x = nn::linear(fwd, &format!("{name}.l{i}"), x, true);
        if i + 1 < n_layers {
            x = fwd.tape.gelu(x);
        }
    }
    x
}

/// Conditional 1D convolution configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondConvSpec {
    /// Kernel count.
    pub k: usize,
    /// Kernel size; odd, so same padding is symmetric.
    pub s: usize,
}

impl CondConvSpec {
    pub fn new(k: usize, s: usize) -> Result<CondConvSpec> {
        if k < 1 {
            return Err(Error::InvalidInput("cond conv needs k >= 1".into()));
        }
        if s % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "cond conv kernel size must be odd, got {s}"
            )));
        }
        Ok(CondConvSpec { k, s })
    }
}

impl Default for CondConvSpec {
    fn default() -> CondConvSpec {
        CondConvSpec { k: 8, s: 5 }
    }
}

/// Splits a `(1, k*s + k)` generated vector into `(k, s)` kernels and `(k,)`
/// biases.
pub fn split_generated_kernels(fwd: &mut Fwd, generated: Var, spec: &CondConvSpec) -> (Var, Var) {
    let (k, s) = (spec.k, spec.s);
    assert_eq!(fwd.tape.value(generated).shape(), &[1, k * s + k]);
    let w_flat = fwd.tape.slice_cols(generated, 0, k * s);
    let b_flat = fwd.tape.slice_cols(generated, k * s, k * s + k);
    let w = fwd.tape.reshape(w_flat, &[k, s]);
    let b = fwd.tape.reshape(b_flat, &[k]);
    (w, b)
}

/// Applies explicit `(k, s)` kernels and `(k,)` biases to a `(n,)` feature
/// vector: k same-padded 1D convolutions, aggregated by mean over k back to
/// length n.
pub fn cond_conv1d_with_kernels(fwd: &mut Fwd, x: Var, w: Var, b: Var) -> Var {
    let y = fwd.tape.conv1d_same(x, w, b); // (k, n)
    fwd.tape.mean_rows(y) // (n,)
}

/// Conditional 1D convolution over a node's modality feature vectors.
///
/// The kernels and biases are generated once from the node's pose and shared
/// across that node's modality vectors. Non-finite features are rejected.
pub fn cond_conv1d(
    fwd: &mut Fwd,
    name: &str,
    pose_spec: &PoseExpandSpec,
    conv_spec: &CondConvSpec,
    features: &[Var],
    pose7: Var,
) -> Result<Vec<Var>> {
    for f in features {
        if fwd.tape.value(*f).iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "cond conv features contain non-finite values".into(),
            ));
        }
    }
    let generated = pose_expand(fwd, name, pose_spec, pose7);
    let (w, b) = split_generated_kernels(fwd, generated, conv_spec);
    Ok(features
        .iter()
        .map(|&x| cond_conv1d_with_kernels(fwd, x, w, b))
        .collect())
}

/// Conditional layer normalization over a `(b, n)` batch with one pose per
/// entry (`(b, 7)`).
///
/// Entry `i` is normalized by its own mean and deviation, then scaled and
/// shifted by scalars `gamma_i`, `beta_i` derived from pose `i` through the
/// shared pose-expansion network (`expand_name`) and this layer's own
/// 16 -> 2 head (`layer_name`).
pub fn cond_layer_norm(
    fwd: &mut Fwd,
    expand_name: &str,
    expand_spec: &PoseExpandSpec,
    layer_name: &str,
    x: Var,
    pose7s: Var,
) -> Var {
    assert!(matches!(expand_spec.role, PoseExpandRole::ClnEmbedding));
    let b = fwd.tape.value(x).shape()[0];
    assert_eq!(fwd.tape.value(pose7s).shape()[0], b);
    let embed = pose_expand(fwd, expand_name, expand_spec, pose7s); // (b, 16)
    let head = nn::linear(fwd, &format!("{layer_name}.cln"), embed, true); // (b, 2)
    let g_col = fwd.tape.slice_cols(head, 0, 1);
    let b_col = fwd.tape.slice_cols(head, 1, 2);
    let g_flat = fwd.tape.reshape(g_col, &[b]);
    let beta = fwd.tape.reshape(b_col, &[b]);
    let gamma = fwd.tape.add_scalar(g_flat, 1.0);
    let xh = fwd.tape.normalize_rows(x);
    let scaled = fwd.tape.mul_col(xh, gamma);
    fwd.tape.add_col(scaled, beta)
}

/// Pose cross-attention: embeds the pose to a single key/value token and
/// lets `tokens` attend to it through a residual cross-attention block.
/// Token count is unchanged; with the zero-initialized output projection the
/// block is an exact identity at initialization.
pub fn pose_cross_attention(
    fwd: &mut Fwd,
    name: &str,
    tokens: Var,
    pose7: Var,
    heads: usize,
) -> Var {
    assert!(fwd.tape.value(tokens).shape()[0] > 0, "tokens non-empty");
    let kv = nn::linear(fwd, &format!("{name}.embed"), pose7, true); // (1, d)
    let delta = nn::cross_attention_single(fwd, &format!("{name}.xattn"), tokens, kv, heads);
    fwd.tape.add(tokens, delta)
}

pub fn register_pose_cross_attention(store: &mut ParamStore, name: &str, d: usize, seed: u64) {
    nn::register_linear(store, &format!("{name}.embed"), 7, d, true, seed);
    nn::register_cross_attention(store, &format!("{name}.xattn"), d, seed);
}

/// Pose-token concatenation: embeds the pose to token dimension and appends
/// it to the token sequence. Downstream must pool over or strip the extra
/// token.
pub fn pose_token_concat(fwd: &mut Fwd, name: &str, tokens: Var, pose7: Var) -> Var {
    assert!(fwd.tape.value(tokens).shape()[0] > 0, "tokens non-empty");
    let embedded = nn::linear(fwd, &format!("{name}.embed"), pose7, true); // (1, d)
    let d = fwd.tape.value(embedded).shape()[1];
    let row = fwd.tape.reshape(embedded, &[d]);
    fwd.tape.append_row(tokens, row)
}

pub fn register_pose_token(store: &mut ParamStore, name: &str, d: usize, seed: u64) {
    store.register(
        &format!("{name}.embed.w"),
        &[7, d],
        Init::Uniform { scale: 0.5 },
        seed,
    );
    store.register(&format!("{name}.embed.b"), &[d], Init::Zeros, seed);
}

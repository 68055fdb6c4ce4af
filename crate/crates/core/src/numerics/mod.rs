//! Dense arithmetic, a reverse-mode tape, a seeded generator and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use rng::{Rng, RngAlgorithm, RngState};
pub use tensor::Tensor;

use crate::error::{shape_err, Result};

pub const DEFAULT_RMS_EPS: f64 = 1e-6;

/// Token-wise RMS normalization over the last dimension:
/// `x · gain / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if gain.numel() != x.cols() {
        return shape_err(format!(
            "rms_norm gain length {} vs last dim {}",
            gain.numel(),
            x.cols()
        ));
    }
    let (y, _) = kernels::rms_norm_rows(x.data(), gain.data(), eps);
    Tensor::new(x.shape().to_vec(), y)
}

/// Softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.cols();
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        kernels::softmax_prefix(src, n, dst);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Single-head causal attention: `out[i] = Σ_{j≤i} softmax_j(scale·q[i]·k[j]) v[j]`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return shape_err("causal_attention expects equal n×d_h operands");
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let s = g.matmul_bt(qv, kv)?;
    let s = g.scale(s, scale);
    let p = g.softmax(s, Some(0))?;
    let out = g.matmul(p, vv)?;
    Ok(g.value(out).clone())
}

/// Elementwise GELU (tanh approximation).
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

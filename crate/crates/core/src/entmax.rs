//! Softmax, sparsemax and α-entmax simplex mappings.
//!
//! α-entmax is `p_i = [(α-1) z_i - τ]_+^{1/(α-1)}` with `τ` chosen so that
//! `Σ p_i = 1`. At α = 2 it is sparsemax; as α → 1 it tends to softmax.
//! `τ` is found by a fixed 50-step bisection on
//! `[max((α-1) z) - 1, max((α-1) z)]`, which brackets the root for any input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BISECTION_STEPS: usize = 50;

/// Finite-difference step on α for [`alpha_grad`].
pub const ALPHA_FD_STEP: f64 = 1e-4;

const ALPHA_FLOOR: f64 = 1.0 + 1e-9;

/// Learnable α kept strictly inside `(1, 2)` through `α = 1 + sigmoid(raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaParam {
    pub raw: f64,
}

impl Default for AlphaParam {
    /// `raw = 0` gives α = 1.5 exactly.
    fn default() -> Self {
        AlphaParam { raw: 0.0 }
    }
}

impl AlphaParam {
    /// Parametrisation reaching the given α ∈ (1, 2).
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha < 2.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        let s = alpha - 1.0;
        Ok(AlphaParam {
            raw: (s / (1.0 - s)).ln(),
        })
    }

    pub fn alpha(&self) -> f64 {
        alpha_from_raw(self.raw)
    }
}

#[inline]
pub fn alpha_from_raw(raw: f64) -> f64 {
    // keeps α strictly inside (1, 2) even where the sigmoid saturates
    1.0 + sigmoid(raw).clamp(1e-9, 1.0 - 1e-9)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Euclidean projection onto the probability simplex (sort-based closed form).
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("sparsemax"));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let kk = (k + 1) as f64;
        if 1.0 + kk * v > cumsum {
            tau = (cumsum - 1.0) / kk;
        } else {
            break;
        }
    }
    Ok(z.iter().map(|&v| (v - tau).max(0.0)).collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(())
}

/// α-entmax of `z` for α ∈ (1, 2]. α ≤ 1 is rejected; callers wanting the
/// softmax limit must call [`softmax`] themselves.
pub fn entmax(z: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("entmax"));
    }
    check_alpha(alpha)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("entmax input must be finite".into()));
    }
    let mut out = vec![0.0; z.len()];
    entmax_into(z, alpha, &mut out);
    Ok(out)
}

/// Unvalidated bisection solve writing into `out`.
pub(crate) fn entmax_into(z: &[f64], alpha: f64, out: &mut [f64]) {
    let am1 = alpha - 1.0;
    let inv = 1.0 / am1;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) * am1;
    let mut lo = max - 1.0;
    let mut hi = max;
    let mass = |tau: f64| -> f64 {
        z.iter()
            .map(|&v| {
                let x = v * am1 - tau;
                if x > 0.0 {
                    x.powf(inv)
                } else {
                    0.0
                }
            })
            .sum()
    };
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        let x = v * am1 - lo;
        *o = if x > 0.0 { x.powf(inv) } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Vector-Jacobian product of α-entmax with respect to its input.
pub fn entmax_backward(p: &[f64], upstream: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if p.len() != upstream.len() {
        return Err(Error::ShapeMismatch {
            op: "entmax_backward",
            lhs: (1, p.len()),
            rhs: (1, upstream.len()),
        });
    }
    check_alpha(alpha)?;
    let mut out = vec![0.0; p.len()];
    if !entmax_backward_into(p, upstream, alpha, &mut out) {
        return Err(Error::Domain("entmax_backward: empty support".into()));
    }
    Ok(out)
}

/// Returns `false` when `p` has no support.
pub(crate) fn entmax_backward_into(p: &[f64], upstream: &[f64], alpha: f64, out: &mut [f64]) -> bool {
    let expo = 2.0 - alpha;
    let mut s_sum = 0.0;
    let mut sg = 0.0;
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(upstream) {
        let s = if pi > 0.0 { pi.powf(expo) } else { 0.0 };
        *o = s;
        s_sum += s;
        sg += s * gi;
    }
    if s_sum <= 0.0 {
        return false;
    }
    let q = sg / s_sum;
    for (o, &gi) in out.iter_mut().zip(upstream) {
        *o *= gi - q;
    }
    true
}

/// `d loss / d α` by a central difference of width [`ALPHA_FD_STEP`],
/// clipped so both probes stay inside `(1, 2]`.
pub(crate) fn alpha_sensitivity(z: &[f64], alpha: f64, upstream: &[f64], scratch: &mut [f64]) -> f64 {
    let hi = (alpha + ALPHA_FD_STEP).min(2.0);
    let lo = (alpha - ALPHA_FD_STEP).max(ALPHA_FLOOR);
    entmax_into(z, hi, scratch);
    let up: f64 = scratch.iter().zip(upstream).map(|(p, g)| p * g).sum();
    entmax_into(z, lo, scratch);
    let down: f64 = scratch.iter().zip(upstream).map(|(p, g)| p * g).sum();
    (up - down) / (hi - lo)
}

/// Gradient of `<upstream, entmax(z, α)>` with respect to the raw α parameter.
pub fn alpha_grad(z: &[f64], alpha: f64, upstream: &[f64]) -> Result<f64> {
    if z.len() != upstream.len() {
        return Err(Error::ShapeMismatch {
            op: "alpha_grad",
            lhs: (1, z.len()),
            rhs: (1, upstream.len()),
        });
    }
    if z.is_empty() {
        return Err(Error::Empty("alpha_grad"));
    }
    check_alpha(alpha)?;
    let mut scratch = vec![0.0; z.len()];
    let d_alpha = alpha_sensitivity(z, alpha, upstream, &mut scratch);
    Ok(d_alpha * raw_chain(alpha))
}

/// `dα/draw = σ(raw)(1 - σ(raw)) = (α - 1)(2 - α)`.
#[inline]
pub fn raw_chain(alpha: f64) -> f64 {
    (alpha - 1.0) * (2.0 - alpha)
}

pub fn support_size(p: &[f64]) -> usize {
    p.iter().filter(|&&v| v > 0.0).count()
}

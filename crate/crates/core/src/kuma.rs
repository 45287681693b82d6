//! Kumaraswamy and stretched-and-rectified ("hard") Kumaraswamy laws.
//!
//! A HardKuma draw takes uniform noise `u`, maps it through the Kuma inverse
//! CDF to `k ∈ [0, 1]`, stretches it to `t = l + (r - l)·k` on `(l, r)` with
//! `l < 0 < 1 < r`, and clamps `t` to `[0, 1]`. The clamp puts finite
//! probability mass on exactly 0 and exactly 1 while leaving the draw
//! differentiable in the shape parameters wherever `0 < t < 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STRETCH_LOWER: f64 = -0.1;
pub const STRETCH_UPPER: f64 = 1.1;

/// Floor applied to the bases of fractional powers and logarithms on the
/// sampling path.
const GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardKumaParams {
    pub a: f64,
    pub b: f64,
    pub l: f64,
    pub r: f64,
}

impl HardKumaParams {
    pub fn new(a: f64, b: f64, l: f64, r: f64) -> Result<Self> {
        let p = HardKumaParams { a, b, l, r };
        p.validate()?;
        Ok(p)
    }

    /// Shape parameters with the standard stretch `(-0.1, 1.1)`.
    pub fn standard(a: f64, b: f64) -> Result<Self> {
        Self::new(a, b, STRETCH_LOWER, STRETCH_UPPER)
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.a, self.b)?;
        if !(self.l < 0.0 && self.r > 1.0) || !self.l.is_finite() || !self.r.is_finite() {
            return Err(Error::Domain(format!(
                "stretch bounds must satisfy l < 0 < 1 < r, got l={}, r={}",
                self.l, self.r
            )));
        }
        Ok(())
    }
}

fn check_shape(a: f64, b: f64) -> Result<()> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "Kumaraswamy shapes must be positive and finite, got a={a}, b={b}"
        )));
    }
    Ok(())
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("{name}={x} outside [0, 1]")));
    }
    Ok(())
}

/// `F(k) = 1 - (1 - k^a)^b`.
pub fn kuma_cdf(k: f64, a: f64, b: f64) -> Result<f64> {
    check_unit("k", k)?;
    check_shape(a, b)?;
    Ok(kuma_cdf_unchecked(k, a, b))
}

#[inline]
fn kuma_cdf_unchecked(k: f64, a: f64, b: f64) -> f64 {
    let base = (1.0 - k.powf(a)).clamp(0.0, 1.0);
    1.0 - base.powf(b)
}

/// `F⁻¹(u) = (1 - (1 - u)^{1/b})^{1/a}`.
pub fn kuma_icdf(u: f64, a: f64, b: f64) -> Result<f64> {
    check_unit("u", u)?;
    check_shape(a, b)?;
    let v = (1.0 - u).clamp(0.0, 1.0).powf(1.0 / b);
    Ok((1.0 - v).clamp(0.0, 1.0).powf(1.0 / a))
}

/// Draws `h ∈ [0, 1]` from HardKuma using externally supplied noise `u`.
pub fn hardkuma_sample(params: HardKumaParams, u: f64) -> Result<f64> {
    params.validate()?;
    check_unit("u", u)?;
    Ok(hardkuma_draw(params.a, params.b, params.l, params.r, u).h)
}

/// One reparameterised draw with its partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardKumaDraw {
    /// Stretched value before rectification.
    pub t: f64,
    /// Rectified output.
    pub h: f64,
    pub dh_da: f64,
    pub dh_db: f64,
}

/// Unvalidated draw; derivatives are zero where the clamp is active.
pub fn hardkuma_draw(a: f64, b: f64, l: f64, r: f64, u: f64) -> HardKumaDraw {
    let one_minus_u = (1.0 - u).clamp(GUARD, 1.0);
    let v = one_minus_u.powf(1.0 / b);
    let w = (1.0 - v).clamp(GUARD, 1.0);
    let k = w.powf(1.0 / a);
    let t = l + (r - l) * k;
    if t <= 0.0 {
        return HardKumaDraw {
            t,
            h: 0.0,
            dh_da: 0.0,
            dh_db: 0.0,
        };
    }
    if t >= 1.0 {
        return HardKumaDraw {
            t,
            h: 1.0,
            dh_da: 0.0,
            dh_db: 0.0,
        };
    }
    let dk_da = -k * w.ln() / (a * a);
    let dk_db = k / (a * w) * v * one_minus_u.ln() / (b * b);
    HardKumaDraw {
        t,
        h: t,
        dh_da: (r - l) * dk_da,
        dh_db: (r - l) * dk_db,
    }
}

/// Probability mass at exactly 0 and exactly 1.
pub fn hardkuma_point_masses(params: HardKumaParams) -> Result<(f64, f64)> {
    params.validate()?;
    let HardKumaParams { a, b, l, r } = params;
    let p0 = kuma_cdf_unchecked(-l / (r - l), a, b);
    let p1 = 1.0 - kuma_cdf_unchecked((1.0 - l) / (r - l), a, b);
    Ok((p0, p1))
}

//! The nonlocal form factor `G(sigma; T1, T2)` of the W-field stress tensor.
//!
//! `G = -(1/4 pi^4) d^2/dsigma^2 F(sigma)` with the braced factor
//! `F = P(1/sigma) [T1 Theta(sigma+T1^2)/sqrt(sigma+T1^2) + T2 Theta(T2^2-sigma)/sqrt(T2^2-sigma)]`.
//! The regularized `F_eps` is the boundary value at `sigma + i eps` of the
//! analytic function whose real part on the axis is `F`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice_noise::LatticeSpec;
use crate::quadrature::{integrate, QuadOptions};

/// Overall prefactor of `G`.
pub const PREFACTOR: f64 = -1.0 / (4.0 * PI * PI * PI * PI);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormFactorQuery {
    /// `(x - x1)^2 - (x - x2)^2`.
    pub sigma: f64,
    pub t1: f64,
    pub t2: f64,
    pub eps: f64,
}

/// Principal square root with the branch cut on the negative real axis,
/// written so that `csqrt(conj z) == conj(csqrt z)` holds bit for bit.
pub fn csqrt(z: C64) -> C64 {
    if z.re == 0.0 && z.im == 0.0 {
        return C64::new(0.0, z.im);
    }
    let t = ((z.re.abs() + z.re.hypot(z.im)) * 0.5).sqrt();
    if z.re >= 0.0 {
        C64::new(t, z.im / (2.0 * t))
    } else {
        C64::new(z.im.abs() / (2.0 * t), t.copysign(z.im))
    }
}

/// `T1/(z sqrt(z+T1^2)) + T2/(z sqrt(T2^2-z))` and its first two derivatives.
fn braced_analytic(z: C64, t1: f64, t2: f64) -> [C64; 3] {
    let p = z.inv();
    let (p1, p2) = (-p * p, 2.0 * p * p * p);
    let mut out = [C64::new(0.0, 0.0); 3];
    if t1 != 0.0 {
        let s = csqrt(z + t1 * t1);
        let q = s.inv();
        let q3 = q * q * q;
        let (q1, q2) = (-0.5 * q3, 0.75 * q3 * q * q);
        out[0] += t1 * p * q;
        out[1] += t1 * (p1 * q + p * q1);
        out[2] += t1 * (p2 * q + 2.0 * p1 * q1 + p * q2);
    }
    if t2 != 0.0 {
        let s = csqrt(t2 * t2 - z);
        let q = s.inv();
        let q3 = q * q * q;
        let (q1, q2) = (0.5 * q3, 0.75 * q3 * q * q);
        out[0] += t2 * p * q;
        out[1] += t2 * (p1 * q + p * q1);
        out[2] += t2 * (p2 * q + 2.0 * p1 * q1 + p * q2);
    }
    out
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("regulator eps must be > 0, got {eps}")));
    }
    Ok(())
}

/// Regularized braced factor `F_eps(sigma)`.
pub fn braced_regularized(q: &FormFactorQuery) -> Result<f64> {
    check_eps(q.eps)?;
    Ok(braced_analytic(C64::new(q.sigma, q.eps), q.t1, q.t2)[0].re)
}

/// One term of the unregularized braced factor, `T Theta(sigma+T^2) / (sigma sqrt(sigma+T^2))`.
pub fn braced_term(sigma: f64, t: f64) -> f64 {
    let u = sigma + t * t;
    if u <= 0.0 {
        0.0
    } else {
        t / (sigma * u.sqrt())
    }
}

pub fn g_closed(q: &FormFactorQuery) -> Result<f64> {
    check_eps(q.eps)?;
    let v = PREFACTOR * braced_analytic(C64::new(q.sigma, q.eps), q.t1, q.t2)[2].re;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("form factor at {q:?}")));
    }
    Ok(v)
}

/// Roots of `y(Omega) = sigma + T^2 - (T - Omega)^2` found by a sign-change
/// scan over `[-span, span]` followed by bisection.
pub fn scan_roots(sigma: f64, t: f64, span: f64, n_scan: usize) -> Vec<f64> {
    let y = |o: f64| sigma + t * t - (t - o) * (t - o);
    let h = 2.0 * span / n_scan as f64;
    let mut roots = Vec::new();
    let mut a = -span;
    let mut ya = y(a);
    for i in 1..=n_scan {
        let b = -span + i as f64 * h;
        let yb = y(b);
        if ya == 0.0 {
            roots.push(a);
        } else if ya * yb < 0.0 {
            let (mut lo, mut hi, mut ylo) = (a, b, ya);
            for _ in 0..200 {
                let m = 0.5 * (lo + hi);
                if m <= lo || m >= hi {
                    break;
                }
                let ym = y(m);
                if ym * ylo <= 0.0 {
                    hi = m;
                } else {
                    lo = m;
                    ylo = ym;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        a = b;
        ya = yb;
    }
    roots
}

/// `int dOmega P(1/Omega) delta_eta(sigma + T^2 - (T - Omega)^2)` with a
/// Gaussian `delta_eta`, integrated adaptively over a window around each root.
/// Returns `-T / (sigma sqrt(sigma+T^2))` in the limit `eta -> 0`.
pub fn omega_representation(sigma: f64, t: f64, eta: f64) -> Result<f64> {
    check_eps(eta)?;
    let span = 2.0 * (t.abs() + (sigma.abs() + t * t).sqrt()) + 1.0;
    let roots = scan_roots(sigma, t, span, 4096);
    let norm = 1.0 / ((2.0 * PI).sqrt() * eta);
    let mut total = 0.0;
    for r in roots {
        let slope = (2.0 * (t - r)).abs();
        let half = 14.0 * eta / slope.max(1e-300);
        if r.abs() < 2.0 * half {
            return Err(invalid(format!("root {r} too close to the principal-value pole for eta {eta}")));
        }
        let f = |o: f64| {
            let y = sigma + t * t - (t - o) * (t - o);
            norm * (-0.5 * (y / eta).powi(2)).exp() / o
        };
        let res = integrate(
            f,
            r - half,
            r + half,
            &[r],
            QuadOptions { abs_tol: 0.0, rel_tol: 1e-10, max_intervals: 4000, relative_to_l1: false },
        )?;
        total += res.value;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialQuery {
    pub t: f64,
    pub t1: f64,
    pub t2: f64,
    /// Width `w` of the test function `exp(-|x1-x2|^2 / 2 w^2)`.
    pub width: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialCheck {
    /// Smeared integrals at `eps`, `eps/2`, `eps/4`.
    pub raw: [f64; 3],
    /// Linear extrapolations from the pairs `(eps, eps/2)` and `(eps/2, eps/4)`.
    pub extrapolated: [f64; 2],
    pub value: f64,
    /// `1/4 sign(t1 - t2)` times the test function at zero.
    pub predicted: f64,
}

impl SpatialCheck {
    pub fn relative_error(&self) -> f64 {
        if self.predicted == 0.0 {
            self.value.abs()
        } else {
            ((self.value - self.predicted) / self.predicted).abs()
        }
    }
}

/// `W_uu` for `W(u, v) = (v^2 - u^2)(g(u) - g(v))`, `g(u) = exp(-u^2 / 2 w^2)`.
fn weight_uu(u: f64, v: f64, w: f64) -> f64 {
    let w2 = w * w;
    let u2 = u * u;
    let g = (-0.5 * u2 / w2).exp();
    let gv = (-0.5 * v * v / w2).exp();
    -2.0 * (g - gv) + 4.0 * u2 / w2 * g + (v * v - u2) * (u2 / (w2 * w2) - 1.0 / w2) * g
}

/// `v^-3 int dsigma W_uu F_eps` over the strip `|sigma - dT| <= v^2`.
fn inner(v: f64, t1: f64, t2: f64, w: f64, eps: f64) -> Result<f64> {
    let dt = t2 * t2 - t1 * t1;
    let gv_dead = v > 14.0 * w;
    let ucut = if gv_dead { 14.0 * w } else { v };
    let (lo, hi) = (dt - ucut * v, dt + ucut * v);
    let mut bps = Vec::new();
    for p in [-t1 * t1, 0.0, t2 * t2] {
        for k in [-8.0, -2.0, 0.0, 2.0, 8.0] {
            bps.push(p + k * eps);
        }
    }
    let f = |s: f64| {
        let u = (s - dt) / v;
        weight_uu(u, v, w) * braced_analytic(C64::new(s, eps), t1, t2)[0].re
    };
    let r = integrate(
        f,
        lo,
        hi,
        &bps,
        QuadOptions { abs_tol: 0.0, rel_tol: 1e-9, max_intervals: 20000, relative_to_l1: true },
    )?;
    Ok(r.value / (v * v * v))
}

fn smeared_integral(t1: f64, t2: f64, w: f64, eps: f64) -> Result<f64> {
    let v0 = 16.0 * w.max(t1.abs()).max(t2.abs());
    let opts = QuadOptions { abs_tol: 0.0, rel_tol: 1e-7, max_intervals: 4000, relative_to_l1: true };
    let mut err = None;
    let mut guard = |r: Result<f64>| match r {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            0.0
        }
    };
    let bps: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|k| k * w).collect();
    let near = integrate(|v| guard(inner(v, t1, t2, w, eps)), 0.0, v0, &bps, opts)?.value;
    // v = v0 / s^2 maps the tail to s in (0, 1].
    let far = integrate(
        |s| {
            let v = v0 / (s * s);
            2.0 * v0 / (s * s * s) * guard(inner(v, t1, t2, w, eps))
        },
        0.0,
        1.0,
        &[],
        opts,
    )?
    .value;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(PREFACTOR * PI * PI * w * w * (near + far))
}

/// Integral of `G` over `x` and over `x1 - x2` against a Gaussian test
/// function, reduced to `(r1, r2)` bipolar coordinates. Both angular
/// integrals are analytic and the sigma derivatives are moved onto the weight
/// by parts. Times enter as `T_i = t - t_i`.
pub fn g_spatial_integral(q: &SpatialQuery) -> Result<SpatialCheck> {
    check_eps(q.eps)?;
    if !(q.width > 0.0) {
        return Err(invalid("test-function width must be > 0"));
    }
    let (t1, t2) = (q.t - q.t1, q.t - q.t2);
    let mut raw = [0.0; 3];
    for (k, r) in raw.iter_mut().enumerate() {
        *r = smeared_integral(t1, t2, q.width, q.eps / f64::powi(2.0, k as i32))?;
    }
    let extrapolated = [2.0 * raw[1] - raw[0], 2.0 * raw[2] - raw[1]];
    let value = extrapolated[1];
    if (extrapolated[0] - extrapolated[1]).abs() > 0.1 * value.abs().max(1e-3) {
        return Err(Error::NonConvergence(format!(
            "eps extrapolation disagrees: {} vs {}",
            extrapolated[0], extrapolated[1]
        )));
    }
    let predicted = 0.25 * sign(q.t1 - q.t2);
    Ok(SpatialCheck { raw, extrapolated, value, predicted })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Local stencil `1/4 delta(x - x1) delta(x - x2) sign(t1 - t2)` with the
/// lattice delta `1/dV` on the matching cell.
pub fn g_approx(lattice: &LatticeSpec, x: usize, x1: usize, x2: usize, t1: f64, t2: f64) -> Result<f64> {
    let n = lattice.n_cells();
    if x >= n || x1 >= n || x2 >= n {
        return Err(invalid(format!("cell index out of range for {n} cells")));
    }
    if x != x1 || x != x2 {
        return Ok(0.0);
    }
    let dv = lattice.cell_volume();
    Ok(0.25 * sign(t1 - t2) / (dv * dv))
}

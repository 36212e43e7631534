//! Fixed-step RK4 with a step-doubling error probe.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Minimal vector-space interface RK4 needs.
pub trait OdeState: Clone {
    /// `self + s * other`
    fn add_scaled(&self, other: &Self, s: f64) -> Self;
    fn max_abs_diff(&self, other: &Self) -> f64;
    fn is_finite(&self) -> bool;
}

impl OdeState for Vec<f64> {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self.iter().zip(other).map(|(a, b)| a + s * b).collect()
    }
    fn max_abs_diff(&self, other: &Self) -> f64 {
        self.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for Vec<C64> {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self.iter().zip(other).map(|(a, b)| a + b * s).collect()
    }
    fn max_abs_diff(&self, other: &Self) -> f64 {
        self.iter().zip(other).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

impl OdeState for DMatrix<C64> {
    fn add_scaled(&self, other: &Self, s: f64) -> Self {
        let mut out = self.clone();
        out.zip_apply(other, |a, b| *a += b * s);
        out
    }
    fn max_abs_diff(&self, other: &Self) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

pub fn rk4_step<S: OdeState>(f: &impl Fn(f64, &S) -> S, t: f64, y: &S, h: f64) -> S {
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &y.add_scaled(&k1, 0.5 * h));
    let k3 = f(t + 0.5 * h, &y.add_scaled(&k2, 0.5 * h));
    let k4 = f(t + h, &y.add_scaled(&k3, h));
    y.add_scaled(&k1, h / 6.0).add_scaled(&k2, h / 3.0).add_scaled(&k3, h / 3.0).add_scaled(&k4, h / 6.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rk4Options {
    pub dt: f64,
    /// Step-doubling probe runs on step 0 and every `check_every` steps after.
    pub check_every: usize,
    pub tolerance: f64,
}

impl Rk4Options {
    pub fn new(dt: f64) -> Self {
        Rk4Options { dt, check_every: 64, tolerance: 1e-8 }
    }
}

/// Integrate from `t0` over `n_steps` fixed steps, calling `observe(k, t, y)`
/// at step 0 and every `record_every` steps (and after the last one).
///
/// `post` runs after each step (e.g. to re-hermitize a density matrix).
pub fn integrate<S: OdeState>(
    f: impl Fn(f64, &S) -> S,
    y0: S,
    t0: f64,
    n_steps: usize,
    opts: Rk4Options,
    record_every: usize,
    mut post: impl FnMut(&mut S),
    mut observe: impl FnMut(usize, f64, &S) -> Result<()>,
) -> Result<S> {
    let h = opts.dt;
    let mut y = y0;
    observe(0, t0, &y)?;
    let every = record_every.max(1);
    for k in 0..n_steps {
        let t = t0 + k as f64 * h;
        let mut next = rk4_step(&f, t, &y, h);
        if opts.check_every > 0 && k % opts.check_every == 0 {
            let half = rk4_step(&f, t, &y, 0.5 * h);
            let two = rk4_step(&f, t + 0.5 * h, &half, 0.5 * h);
            let est = next.max_abs_diff(&two) / 15.0;
            if !(est <= opts.tolerance) {
                return Err(Error::StepTooLarge { estimate: est, tolerance: opts.tolerance });
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("ODE state at step {}", k + 1)));
        }
        post(&mut next);
        y = next;
        if (k + 1) % every == 0 || k + 1 == n_steps {
            observe(k + 1, t0 + (k + 1) as f64 * h, &y)?;
        }
    }
    Ok(y)
}

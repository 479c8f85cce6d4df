//! p-to-e calibrators and e-to-p calibration.
//!
//! A decreasing `f: [0,1] -> [0,inf]` turns p-values into e-values iff
//! `int_0^1 f <= 1`; `e -> min(1/e, 1)` goes the other way.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::oracle::{CheckReport, Witness};
use crate::table::{mul_ext, FnTable};

/// Tolerance on the admissibility integral.
pub const INTEGRAL_TOL: f64 = 1e-6;
const QUADRATURE_TOL: f64 = 1e-8;
const MAX_DEPTH: u32 = 50;
const MONOTONE_GRID: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    Power { delta: f64 },
    Kappa { kappa: f64 },
    Shafer,
}

impl Calibrator {
    pub fn power(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(LabError::InvalidParameter(format!("power calibrator needs delta in (0,1), got {delta}")));
        }
        Ok(Calibrator::Power { delta })
    }

    pub fn kappa(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(LabError::InvalidParameter(format!("kappa calibrator needs kappa > 0, got {kappa}")));
        }
        Ok(Calibrator::Kappa { kappa })
    }

    pub fn shafer() -> Self {
        Calibrator::Shafer
    }

    pub fn apply(&self, p: f64) -> f64 {
        match *self {
            Calibrator::Power { delta } => power_calibrator(delta, p),
            Calibrator::Kappa { kappa } => kappa_calibrator(kappa, p),
            Calibrator::Shafer => shafer_calibrator(p),
        }
    }
}

/// `delta * p^(delta - 1)`, infinite at `p = 0`.
pub fn power_calibrator(delta: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return f64::INFINITY;
    }
    delta * p.powf(delta - 1.0)
}

/// `kappa (1+kappa)^kappa / (p (-ln p)^(1+kappa))` on `(0, exp(-1-kappa)]`, infinite at 0, zero above.
pub fn kappa_calibrator(kappa: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return f64::INFINITY;
    }
    if p > (-1.0 - kappa).exp() {
        return 0.0;
    }
    kappa * (1.0 + kappa).powf(kappa) / (p * (-p.ln()).powf(1.0 + kappa))
}

/// `p^(-1/2) - 1`.
pub fn shafer_calibrator(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::INFINITY;
    }
    p.sqrt().recip() - 1.0
}

/// The optimal e-to-p calibrator `min(1/e, 1)`.
pub fn e_to_p(e: f64) -> f64 {
    if e <= 1.0 {
        1.0
    } else if e.is_infinite() {
        0.0
    } else {
        1.0 / e
    }
}

/// Result of integrating a calibrator over `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    /// False when some subinterval reached the recursion cap (singular or divergent integrand).
    pub converged: bool,
}

/// `int_0^1 f(p) dp` by adaptive Simpson after substituting `p = exp(1 - 1/u)`, `u in [0,1]`.
///
/// The substitution sends the neighbourhood of `p = 0` to a neighbourhood of `u = 0`
/// where the Jacobian `p / u^2` vanishes faster than any power of `u`, so integrable
/// singularities of the form `p^(-a)` become smooth.
///
/// Mass below the smallest normal double is dropped. For integrands with a
/// logarithmic tail at 0, such as the kappa calibrator (missing mass
/// `kappa^-1 (1+kappa)^kappa / 708^kappa`), the value is therefore an underestimate.
pub fn integrate_unit(f: &dyn Fn(f64) -> f64) -> Quadrature {
    let g = |u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        let p = (1.0 - 1.0 / u).exp();
        if p < f64::MIN_POSITIVE {
            return 0.0;
        }
        mul_ext(f(p), p / (u * u))
    };
    let (a, b) = (0.0, 1.0);
    let (fa, fm, fb) = (g(a), g(0.5), g(b));
    let whole = simpson(a, b, fa, fm, fb);
    let mut converged = true;
    let value = adaptive(&g, a, b, fa, fm, fb, whole, QUADRATURE_TOL, MAX_DEPTH, &mut converged);
    Quadrature { value, converged }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    g: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    converged: &mut bool,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (g(lm), g(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        *converged = false;
        return left + right;
    }
    if delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    if depth == 0 {
        *converged = false;
        return left + right + delta / 15.0;
    }
    adaptive(g, a, m, fa, flm, fm, left, tol / 2.0, depth - 1, converged)
        + adaptive(g, m, b, fm, frm, fb, right, tol / 2.0, depth - 1, converged)
}

/// `ok` iff `f` is non-increasing on a 10^4-point grid and `int_0^1 f <= 1 + 1e-6`.
pub fn is_calibrator(f: &dyn Fn(f64) -> f64) -> CheckReport {
    let mut prev = f(0.0);
    let mut decreasing = true;
    for i in 1..=MONOTONE_GRID {
        let v = f(i as f64 / MONOTONE_GRID as f64);
        if v.is_nan() || v < 0.0 || v > prev {
            decreasing = false;
            break;
        }
        prev = v;
    }
    let q = integrate_unit(f);
    let value = if q.value.is_finite() { q.value } else { f64::INFINITY };
    let mut report = CheckReport::new("calibrator", value, 1.0, Witness::None, INTEGRAL_TOL);
    report.converged = q.converged;
    report.require(decreasing, "decreasing")
}

/// Applies `f` entrywise to a p-table.
pub fn apply_calibrator(f: &Calibrator, table: &FnTable) -> FnTable {
    table.map(|p| f.apply(p.clamp(0.0, 1.0)))
}

/// Applies `min(1/e, 1)` entrywise to an e-table.
pub fn apply_e_to_p(table: &FnTable) -> FnTable {
    table.map(e_to_p)
}

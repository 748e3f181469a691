//! Likelihood of a transformed observation `y' = h(y)` given the transformed latent `f' = h(f)`,
//! with Gaussian noise on the untransformed scale: `p(y'|f') = Σ_branches N(h⁻¹(y'); h⁻¹(f'), σ²) |dh⁻¹/dy'|`.

use std::f64::consts::PI;

use num_dual::{Dual3, Dual64, DualNum};

use crate::transform::Nonlinearity;

/// Log-density assigned to observations outside the support.
pub const LOG_DENSITY_FLOOR: f64 = -1e10;

/// Width of the region near `|f'| = 1` where the sine likelihood is continued by a quadratic.
const SINE_EDGE: f64 = 1e-4;

/// Branch shifts summed in the sine likelihood.
const SINE_BRANCHES: i64 = 3;

/// Below this `|u|` the square likelihood uses the Taylor series of `log cosh √u`.
const SERIES_CUTOFF: f64 = 1e-3;

type J = Dual3<Dual64>;

/// Likelihood attached to one observed entry.
#[derive(Clone, Debug)]
pub enum ObsLikelihood {
    /// Observation `y' = h(y)` of a noisy `y`.
    Transformed(Nonlinearity),
    /// Virtual measurement at a branch point `y₀`: Gaussian on the transformed scale with the
    /// variance of `h(y₀ + ε)` to second order, `s² = h'²σ² + h''²σ⁴/2`.
    Virtual { slope: f64, curvature: f64 },
}

impl ObsLikelihood {
    /// Virtual measurement of value `y'` on a task with nonlinearity `nl`.
    pub fn virtual_for(nl: &Nonlinearity, y_prime: f64) -> Self {
        let (slope, curvature) = nl.local_derivatives(y_prime);
        ObsLikelihood::Virtual { slope, curvature }
    }

    pub fn is_gaussian_identity(&self) -> bool {
        matches!(self, ObsLikelihood::Transformed(Nonlinearity::Identity))
    }
}

impl From<Nonlinearity> for ObsLikelihood {
    fn from(nl: Nonlinearity) -> Self {
        ObsLikelihood::Transformed(nl)
    }
}

/// Log-density with derivatives in `f'` up to third order and mixed derivatives in `σ_n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikDerivs {
    pub logp: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// `∂ log p / ∂σ_n`.
    pub ds: f64,
    /// `∂² log p / ∂f' ∂σ_n`.
    pub ds_d1: f64,
    /// `∂³ log p / ∂f'² ∂σ_n`.
    pub ds_d2: f64,
}

impl LikDerivs {
    fn floor() -> Self {
        LikDerivs { logp: LOG_DENSITY_FLOOR, d1: 0.0, d2: 0.0, d3: 0.0, ds: 0.0, ds_d1: 0.0, ds_d2: 0.0 }
    }
}

fn gauss_norm(sigma: J) -> J {
    -(sigma.ln()) - 0.5 * (2.0 * PI).ln()
}

/// `log cosh √u`, continued for `u < 0` by its quadratic Taylor polynomial.
fn log_cosh_sqrt(u: J) -> J {
    let r = u.re.re;
    if r < 0.0 {
        u * 0.5 - u * u / 12.0
    } else if r < SERIES_CUTOFF {
        let u2 = u * u;
        let u3 = u2 * u;
        u * 0.5 - u2 / 12.0 + u3 / 45.0 - u2 * u2 * (17.0 / 2520.0) + u3 * u2 * (31.0 / 14175.0)
    } else {
        let w = u.sqrt();
        w + (w * -2.0).exp().ln_1p() - std::f64::consts::LN_2
    }
}

fn square_logp(y: f64, f: J, sigma: J) -> Option<J> {
    if !(y > 0.0) {
        return None;
    }
    // noncentral chi-squared with one degree of freedom, both sign branches summed
    let s2 = sigma * sigma;
    let u = f * y / (s2 * s2);
    let logp = gauss_norm(sigma) - 0.5 * y.ln() - (f + y) / (s2 * 2.0) + log_cosh_sqrt(u);
    if f.re.re < 0.0 {
        // below the support: add the curvature of a Gaussian with the variance 2σ⁴ of y' at f' = 0,
        // which keeps the mode near y' - σ² instead of drifting to large negative f'
        Some(logp - f * f / (s2 * s2 * 4.0))
    } else {
        Some(logp)
    }
}

fn log_logp(y: f64, f: J, sigma: J) -> J {
    let d = f.exp() - y.exp();
    gauss_norm(sigma) - d * d / (sigma * sigma * 2.0) + y
}

fn sine_core(y: f64, f: J, sigma: J) -> J {
    let a = f.asin();
    let ay = y.asin();
    let s2 = sigma * sigma * 2.0;
    let terms: Vec<J> = (-SINE_BRANCHES..=SINE_BRANCHES)
        .map(|k| {
            let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            let d = -a + (k as f64 * PI + sign * ay);
            -(d * d) / s2
        })
        .collect();
    let m = terms.iter().map(|t| t.re.re).fold(f64::NEG_INFINITY, f64::max);
    let sum: J = terms.iter().map(|t| (*t - m).exp()).sum();
    sum.ln() + m + gauss_norm(sigma) - 0.5 * (1.0 - y * y).ln()
}

fn sine_logp(y: f64, f: J, sigma: J) -> Option<J> {
    if !(y.abs() < 1.0) {
        return None;
    }
    let fr = f.re.re;
    if fr.abs() <= 1.0 - SINE_EDGE {
        return Some(sine_core(y, f, sigma));
    }
    // quadratic continuation beyond the edge, never convex
    let b = fr.signum() * (1.0 - SINE_EDGE);
    let at_b = sine_core(y, J::new(Dual64::from(b), Dual64::from(1.0), Dual64::from(0.0), Dual64::from(0.0)), sigma);
    let curv = if at_b.v2.re < 0.0 { at_b.v2 } else { Dual64::from(0.0) };
    let h = f - b;
    Some(J::from_re(at_b.re) + h * J::from_re(at_b.v1) + h * h * J::from_re(curv) * 0.5)
}

fn custom_logp(y: f64, f: J, sigma: J, nl: &dyn crate::transform::MonotoneTransform) -> Option<J> {
    let jy = nl.inverse_jet(y);
    if !jy.iter().all(|v| v.is_finite()) || jy[1] == 0.0 {
        return None;
    }
    let jf = nl.inverse_jet(f.re.re);
    if !jf.iter().all(|v| v.is_finite()) {
        return None;
    }
    // f is seeded with unit first derivative, so the jet of h⁻¹ at f is the composed jet
    let hf = J::new(Dual64::from(jf[0]), Dual64::from(jf[1]), Dual64::from(jf[2]), Dual64::from(jf[3]));
    let d = hf - jy[0];
    Some(gauss_norm(sigma) - d * d / (sigma * sigma * 2.0) + jy[1].abs().ln())
}

fn logp_dual(nl: &Nonlinearity, y: f64, f: J, sigma: J) -> Option<J> {
    match nl {
        Nonlinearity::Identity => {
            let d = f - y;
            Some(gauss_norm(sigma) - d * d / (sigma * sigma * 2.0))
        }
        Nonlinearity::Square => square_logp(y, f, sigma),
        Nonlinearity::Log => Some(log_logp(y, f, sigma)),
        Nonlinearity::Sine => sine_logp(y, f, sigma),
        Nonlinearity::Custom(c) => custom_logp(y, f, sigma, c.as_ref()),
    }
}

/// Log-density of `y'` given `f'` and its derivatives, or the floor if `y'` is unsupported.
pub fn transformed_likelihood(nl: &Nonlinearity, y_prime: f64, f_prime: f64, sigma_n: f64) -> LikDerivs {
    let f = J::new(Dual64::from(f_prime), Dual64::from(1.0), Dual64::from(0.0), Dual64::from(0.0));
    let s = J::from_re(Dual64::new(sigma_n, 1.0));
    match logp_dual(nl, y_prime, f, s) {
        Some(r) if r.re.re.is_finite() => {
            let logp = r.re.re.max(LOG_DENSITY_FLOOR);
            LikDerivs {
                logp,
                d1: r.v1.re,
                d2: r.v2.re,
                d3: r.v3.re,
                ds: r.re.eps,
                ds_d1: r.v1.eps,
                ds_d2: r.v2.eps,
            }
        }
        _ => LikDerivs::floor(),
    }
}

/// Log-density of an observed entry and its derivatives.
pub fn observation_likelihood(lik: &ObsLikelihood, y_prime: f64, f_prime: f64, sigma_n: f64) -> LikDerivs {
    match lik {
        ObsLikelihood::Transformed(nl) => transformed_likelihood(nl, y_prime, f_prime, sigma_n),
        ObsLikelihood::Virtual { slope, curvature } => {
            let f = J::new(Dual64::from(f_prime), Dual64::from(1.0), Dual64::from(0.0), Dual64::from(0.0));
            let s = J::from_re(Dual64::new(sigma_n, 1.0));
            let s2 = s * s;
            let sv = (s2 * (slope * slope) + s2 * s2 * (0.5 * curvature * curvature)).sqrt();
            let d = f - y_prime;
            let r = gauss_norm(sv) - d * d / (sv * sv * 2.0);
            LikDerivs { logp: r.re.re, d1: r.v1.re, d2: r.v2.re, d3: r.v3.re, ds: r.re.eps, ds_d1: r.v1.eps, ds_d2: r.v2.eps }
        }
    }
}

/// Plain log-density.
pub fn log_density(nl: &Nonlinearity, y_prime: f64, f_prime: f64, sigma_n: f64) -> f64 {
    transformed_likelihood(nl, y_prime, f_prime, sigma_n).logp
}

/// Mode of `f'` most consistent with an observation, used to seed the Laplace iteration.
pub fn natural_latent(nl: &Nonlinearity, y_prime: f64) -> f64 {
    match nl {
        Nonlinearity::Square => y_prime.max(0.0),
        Nonlinearity::Sine => y_prime.clamp(-1.0, 1.0),
        _ => y_prime,
    }
}

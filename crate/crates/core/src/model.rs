//! Closed-form pieces of the structural model: the CES production function,
//! the productivity law of motion, and their derivatives.
//!
//! Everything here is a pure function of its arguments. Parameter vectors are
//! ordered `(alpha, rho, nu, mu_omega, rho_omega, alpha_omega)`; the first three
//! belong to the production function, the last three to the law of motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of structural parameters.
pub const N_PARAMS: usize = 6;

/// Parameter names in vector order.
pub const PARAM_NAMES: [&str; N_PARAMS] =
    ["alpha", "rho", "nu", "mu_omega", "rho_omega", "alpha_omega"];

/// Largest admissible substitution parameter; keeps away from the
/// Cobb-Douglas limit where the CES closed form is singular.
pub const RHO_MAX: f64 = -1e-3;

/// Structural parameters of production and the law of motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub rho: f64,
    pub nu: f64,
    pub mu_omega: f64,
    pub rho_omega: f64,
    pub alpha_omega: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        let ok = p.alpha > 0.0
            && p.alpha < 1.0
            && p.rho <= RHO_MAX
            && p.nu > 0.0
            && p.rho_omega > 0.0
            && p.rho_omega < 1.0
            && (0.0..=1.0).contains(&p.alpha_omega)
            && p.mu_omega.is_finite()
            && p.rho.is_finite()
            && p.nu.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("{p:?}")))
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.alpha,
            self.rho,
            self.nu,
            self.mu_omega,
            self.rho_omega,
            self.alpha_omega,
        ]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        Self {
            alpha: a[0],
            rho: a[1],
            nu: a[2],
            mu_omega: a[3],
            rho_omega: a[4],
            alpha_omega: a[5],
        }
    }

    /// Elasticity of substitution `1 / (1 - rho)`.
    pub fn sigma(&self) -> f64 {
        1.0 / (1.0 - self.rho)
    }

    /// Slope of the law of motion at zero productivity.
    pub fn persistence(&self) -> f64 {
        self.rho_omega
            * ((1.0 - self.alpha_omega)
                + self.alpha_omega / (2.0 * std::f64::consts::LN_2))
    }
}

/// Firm-level state entering the static input and capital decisions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirmState {
    pub omega: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub p_k: f64,
    pub p_v: f64,
}

fn check_finite(vals: &[f64]) -> Result<()> {
    if vals.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite input {vals:?}")))
    }
}

/// Intermediate CES quantities shared by the value and its derivatives.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Ces {
    /// `ln(alpha e^{rho k} + (1-alpha) e^{rho v})`
    pub lse: f64,
    /// cost share of capital inside the aggregator
    pub s_k: f64,
    /// cost share of the variable input inside the aggregator
    pub s_v: f64,
}

#[inline]
pub(crate) fn ces_parts(k: f64, v: f64, alpha: f64, rho: f64) -> Ces {
    let a = alpha.ln() + rho * k;
    let b = (1.0 - alpha).ln() + rho * v;
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    let lse = hi + (lo - hi).exp().ln_1p();
    Ces {
        lse,
        s_k: (a - lse).exp(),
        s_v: (b - lse).exp(),
    }
}

#[inline]
pub(crate) fn ces_value(k: f64, v: f64, alpha: f64, rho: f64, nu: f64) -> f64 {
    nu / rho * ces_parts(k, v, alpha, rho).lse
}

#[inline]
pub(crate) fn ces_dv(k: f64, v: f64, alpha: f64, rho: f64, nu: f64) -> f64 {
    nu * ces_parts(k, v, alpha, rho).s_v
}

/// Value and `(alpha, rho, nu)` gradient of the production function.
#[inline]
pub(crate) fn ces_grad(k: f64, v: f64, alpha: f64, rho: f64, nu: f64) -> (f64, [f64; 3]) {
    let c = ces_parts(k, v, alpha, rho);
    let f = nu / rho * c.lse;
    let d_alpha = nu / rho * (c.s_k / alpha - c.s_v / (1.0 - alpha));
    let d_rho = -nu / (rho * rho) * c.lse + nu / rho * (k * c.s_k + v * c.s_v);
    let d_nu = c.lse / rho;
    (f, [d_alpha, d_rho, d_nu])
}

/// Log output net of productivity, `(nu/rho) ln(alpha e^{rho k} + (1-alpha) e^{rho v})`.
pub fn production_f(k: f64, v: f64, p: &ModelParams) -> Result<f64> {
    check_finite(&[k, v])?;
    Ok(ces_value(k, v, p.alpha, p.rho, p.nu))
}

/// Output elasticity of the variable input.
pub fn production_dv(k: f64, v: f64, p: &ModelParams) -> Result<f64> {
    check_finite(&[k, v])?;
    Ok(ces_dv(k, v, p.alpha, p.rho, p.nu))
}

/// Gradient of the production function with respect to `(alpha, rho, nu)`.
pub fn production_dtheta(k: f64, v: f64, p: &ModelParams) -> Result<[f64; 3]> {
    check_finite(&[k, v])?;
    Ok(ces_grad(k, v, p.alpha, p.rho, p.nu).1)
}

// ---------------------------------------------------------------------------
// Law of motion
// ---------------------------------------------------------------------------

/// `ln(ln(1 + e^x))`, accurate for all finite `x`.
#[inline]
pub(crate) fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        // ln(1+e^x) = e^x (1 - e^x/2 + ...), so the outer log is x - e^x/2 + O(e^{2x})
        x - 0.5 * x.exp()
    } else if x > 30.0 {
        (x + (-x).exp().ln_1p()).ln()
    } else {
        x.exp().ln_1p().ln()
    }
}

/// `sigmoid(x) / softplus(x)`, the derivative of `log_softplus`.
#[inline]
fn ratio(x: f64) -> f64 {
    if x < -30.0 {
        1.0 - 0.5 * x.exp()
    } else if x > 30.0 {
        1.0 / (x + (-x).exp().ln_1p())
    } else {
        let sig = 1.0 / (1.0 + (-x).exp());
        sig / x.exp().ln_1p()
    }
}

/// Derivative of [`ratio`].
#[inline]
fn ratio_prime(x: f64) -> f64 {
    if x < -30.0 {
        -0.5 * x.exp()
    } else {
        let sig = 1.0 / (1.0 + (-x).exp());
        let sp = if x > 30.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        };
        let r = sig / sp;
        sig * (1.0 - sig) / sp - r * r
    }
}

/// Law-of-motion coefficients `(mu_omega, rho_omega, alpha_omega)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Law {
    pub mu: f64,
    pub rho: f64,
    pub a: f64,
}

impl Law {
    #[inline]
    pub fn of(p: &ModelParams) -> Self {
        Self {
            mu: p.mu_omega,
            rho: p.rho_omega,
            a: p.alpha_omega,
        }
    }

    #[inline]
    pub fn value(&self, w: f64) -> f64 {
        let nl = if self.a == 0.0 {
            0.0
        } else {
            self.a / 6.0 * log_softplus(6.0 * w)
        };
        self.mu + self.rho * ((1.0 - self.a) * w + nl)
    }

    #[inline]
    pub fn prime(&self, w: f64) -> f64 {
        if self.a == 0.0 {
            return self.rho;
        }
        self.rho * ((1.0 - self.a) + self.a * ratio(6.0 * w))
    }

    #[inline]
    pub fn dprime(&self, w: f64) -> f64 {
        if self.a == 0.0 {
            return 0.0;
        }
        6.0 * self.rho * self.a * ratio_prime(6.0 * w)
    }

    /// Value, slope, curvature, `dg/dtheta_g` and `d2g/(domega dtheta_g)` in one pass.
    #[inline]
    pub fn all(&self, w: f64) -> LawEval {
        let x = 6.0 * w;
        let ls = log_softplus(x);
        let r = ratio(x);
        let rp = ratio_prime(x);
        let lin = (1.0 - self.a) * w + self.a / 6.0 * ls;
        LawEval {
            g: self.mu + self.rho * lin,
            g1: self.rho * ((1.0 - self.a) + self.a * r),
            g2: 6.0 * self.rho * self.a * rp,
            dtheta: [1.0, lin, self.rho * (ls / 6.0 - w)],
            cross: [0.0, (1.0 - self.a) + self.a * r, self.rho * (r - 1.0)],
            // only d2g/(d rho_omega d alpha_omega) is non-zero
            hess_ra: ls / 6.0 - w,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LawEval {
    pub g: f64,
    pub g1: f64,
    pub g2: f64,
    pub dtheta: [f64; 3],
    pub cross: [f64; 3],
    pub hess_ra: f64,
}

/// Conditional mean of next-period productivity.
pub fn law_g(omega: f64, p: &ModelParams) -> Result<f64> {
    check_finite(&[omega])?;
    Ok(Law::of(p).value(omega))
}

/// First derivative of the law of motion in productivity.
pub fn law_g_prime(omega: f64, p: &ModelParams) -> Result<f64> {
    check_finite(&[omega])?;
    Ok(Law::of(p).prime(omega))
}

/// Second derivative of the law of motion in productivity.
pub fn law_g_dprime(omega: f64, p: &ModelParams) -> Result<f64> {
    check_finite(&[omega])?;
    Ok(Law::of(p).dprime(omega))
}

/// Gradient of the law of motion with respect to `(mu_omega, rho_omega, alpha_omega)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LawGradient {
    /// `dg/dtheta_g`
    pub dtheta: [f64; 3],
    /// `d2g/(domega dtheta_g)`
    pub cross: [f64; 3],
}

pub fn law_g_dtheta(omega: f64, p: &ModelParams) -> Result<LawGradient> {
    check_finite(&[omega])?;
    let e = Law::of(p).all(omega);
    Ok(LawGradient {
        dtheta: e.dtheta,
        cross: e.cross,
    })
}

/// Log markup plus the output disturbance, recovered from the output
/// elasticity and the variable-input expenditure share.
pub fn log_markup_plus_eps(p_out: f64, q: f64, p_v: f64, v: f64, dfdv: f64) -> Result<f64> {
    if !(dfdv > 0.0) {
        return Err(Error::Domain(format!("output elasticity {dfdv} must be positive")));
    }
    check_finite(&[p_out, q, p_v, v])?;
    Ok(p_out + q - p_v - v + dfdv.ln())
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn baseline() -> ModelParams {
        ModelParams {
            alpha: 0.3,
            rho: -1.0,
            nu: 0.95,
            mu_omega: 0.0,
            rho_omega: 0.7,
            alpha_omega: 1.0,
        }
    }

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn ces_collapses_on_equal_inputs() {
        let p = baseline();
        for c in [-3.0, 0.0, 0.4, 7.5] {
            let f = production_f(c, c, &p).unwrap();
            assert!((f - p.nu * c).abs() < 1e-12, "{c}: {f}");
        }
        assert!(production_f(0.0, 0.0, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn ces_value_at_unit_capital() {
        // (0.95/-1) ln(0.3 e^{-1} + 0.7), evaluated with 50-digit arithmetic
        let expected = 0.199_758_358_601_250_274;
        let f = production_f(1.0, 0.0, &baseline()).unwrap();
        assert!((f - expected).abs() < 1e-14, "{f}");
    }

    #[test]
    fn dv_matches_share_and_differences() {
        let p = baseline();
        assert!((production_dv(0.2, 0.2, &p).unwrap() - 0.665).abs() < 1e-12);
        let (k, v) = (0.7, -0.3);
        let fd = central(|v| production_f(k, v, &p).unwrap(), v, 1e-6);
        assert!(rel_close(production_dv(k, v, &p).unwrap(), fd, 1e-6));
        let mut q = p;
        q.alpha = 1.0 - 1e-9;
        assert!(production_dv(1.0, 0.0, &q).unwrap() < 1e-8);
    }

    #[test]
    fn dtheta_properties() {
        let p = baseline();
        let (k, v) = (0.5, 0.2);
        let g = production_dtheta(k, v, &p).unwrap();
        assert!((g[2] - production_f(k, v, &p).unwrap() / p.nu).abs() < 1e-15);
        let fa = central(
            |a| production_f(k, v, &ModelParams { alpha: a, ..p }).unwrap(),
            p.alpha,
            1e-6,
        );
        let fr = central(
            |r| production_f(k, v, &ModelParams { rho: r, ..p }).unwrap(),
            p.rho,
            1e-6,
        );
        let fn_ = central(
            |n| production_f(k, v, &ModelParams { nu: n, ..p }).unwrap(),
            p.nu,
            1e-6,
        );
        assert!(rel_close(g[0], fa, 1e-6));
        assert!(rel_close(g[1], fr, 1e-6));
        assert!(rel_close(g[2], fn_, 1e-6));
        assert!(production_dtheta(0.9, 0.9, &p).unwrap()[0].abs() < 1e-14);
    }

    #[test]
    fn law_special_cases() {
        let mut p = baseline();
        p.alpha_omega = 0.0;
        p.mu_omega = 0.1;
        assert_eq!(law_g(2.0, &p).unwrap(), 0.1 + 0.7 * 2.0);
        assert_eq!(law_g_prime(-5.0, &p).unwrap(), 0.7);
        assert_eq!(law_g_dprime(3.0, &p).unwrap(), 0.0);
        let gr = law_g_dtheta(0.4, &p).unwrap();
        assert_eq!(gr.cross[1], 1.0);
        assert_eq!(gr.dtheta[0], 1.0);

        let p = baseline();
        let expected = p.rho_omega / 6.0 * (2f64.ln()).ln();
        assert!((law_g(0.0, &p).unwrap() - expected).abs() < 1e-15);
        let g0 = law_g_prime(0.0, &p).unwrap();
        assert!((g0 - p.persistence()).abs() < 1e-15);
    }

    #[test]
    fn law_large_omega_matches_high_precision() {
        // 0.7/6 * ln(ln(1+e^60)), 50-digit reference
        let expected = 0.477_673_532_259_245_080;
        let g = law_g(10.0, &baseline()).unwrap();
        assert!((g - expected).abs() < 1e-14, "{g}");
    }

    #[test]
    fn law_tails_are_finite() {
        let p = baseline();
        for w in [-1e3, -200.0, -6.0, -5.0, 5.0, 200.0, 1e4] {
            let e = Law::of(&p).all(w);
            assert!(e.g.is_finite() && e.g1.is_finite() && e.g2.is_finite(), "{w}");
            assert!(e.g1 > 0.0);
        }
        // very negative omega: behaves like the linear law
        let g = law_g(-1e3, &p).unwrap();
        assert!((g - 0.7 * -1e3).abs() < 1e-9);
    }

    #[test]
    fn law_derivatives_match_differences() {
        let p = baseline();
        for w in [-1.0, 0.0, 1.5] {
            let fd1 = central(|w| law_g(w, &p).unwrap(), w, 1e-5);
            let fd2 = central(|w| law_g_prime(w, &p).unwrap(), w, 1e-5);
            assert!(rel_close(law_g_prime(w, &p).unwrap(), fd1, 1e-6), "{w}");
            assert!(rel_close(law_g_dprime(w, &p).unwrap(), fd2, 1e-6), "{w}");
        }
        let w = 0.3;
        let gr = law_g_dtheta(w, &p).unwrap();
        let setters: [fn(&mut ModelParams, f64); 3] = [
            |p, x| p.mu_omega = x,
            |p, x| p.rho_omega = x,
            |p, x| p.alpha_omega = x,
        ];
        let base = [p.mu_omega, p.rho_omega, 0.8];
        let mut p = p;
        p.alpha_omega = 0.8;
        let gr08 = law_g_dtheta(w, &p).unwrap();
        for j in 0..3 {
            let eval = |x: f64| {
                let mut q = p;
                setters[j](&mut q, x);
                law_g(w, &q).unwrap()
            };
            let evalp = |x: f64| {
                let mut q = p;
                setters[j](&mut q, x);
                law_g_prime(w, &q).unwrap()
            };
            assert!(rel_close(gr08.dtheta[j], central(eval, base[j], 1e-6), 1e-6));
            if j > 0 {
                assert!(rel_close(gr08.cross[j], central(evalp, base[j], 1e-6), 1e-6));
            }
        }
        assert_eq!(gr.dtheta[0], 1.0);
    }

    #[test]
    fn markup_identity() {
        assert!(log_markup_plus_eps(0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(log_markup_plus_eps(0.0, 0.0, 0.0, 0.0, -1.0).is_err());
        let m = log_markup_plus_eps(1.0, 2.0, 0.5, 0.25, 1.0).unwrap();
        assert!((m - 2.25).abs() < 1e-15);
        // competitive limit of the markup 1 + e^{delta2}
        assert!(softplus(-50.0) < 1e-20);
    }

    #[test]
    fn validate_rejects_bad_params() {
        let mut p = baseline();
        assert!(p.validate().is_ok());
        p.rho = 0.0;
        assert!(p.validate().is_err());
        let mut p = baseline();
        p.alpha = 1.0;
        assert!(p.validate().is_err());
        assert!(production_f(f64::NAN, 0.0, &baseline()).is_err());
    }
}

//! Uncertainty-guided opacity modulation and concrete-relaxation soft dropout.
//!
//! Given a base opacity `alpha` and uncertainty `u`:
//!
//! ```text
//! alpha_mod = alpha * (1 - u)
//! omega     = 1 - sigmoid((logit(u) + logit(q)) / tau),   q ~ U(0, 1)
//! omega_c   = clamp(omega, omega_min, omega_max)
//! alpha_eff = alpha_mod * omega_c
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Domain};
use crate::scalar::{lit, sigmoid, Real};

/// `u` and `q` are clamped into `[PROB_GUARD, 1 - PROB_GUARD]` before taking logits.
pub const PROB_GUARD: f64 = 1e-6;

/// How `q` is chosen when rendering for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Fresh random `q`, as during training.
    Stochastic,
    /// `q = 0.5`, which removes the `logit(q)` term.
    DeterministicQHalf,
    /// Dropout disabled: `omega_c = 1`.
    Off,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "deterministic_q_half" | "q-half" | "q_half" => Ok(Self::DeterministicQHalf),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("unknown eval mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftDropConfig {
    pub temperature: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub eval_mode: EvalMode,
}

impl Default for SoftDropConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            omega_min: 0.2,
            omega_max: 0.8,
            eval_mode: EvalMode::DeterministicQHalf,
        }
    }
}

impl SoftDropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0 < self.omega_min && self.omega_min < self.omega_max && self.omega_max < 1.0) {
            return Err(Error::Config(
                "clamp bounds must satisfy 0 < omega_min < omega_max < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which parts of the uncertainty pipeline are active. With `uncertainty`
/// off the base opacity is rendered unchanged and the network is unused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanism {
    pub uncertainty: bool,
    pub modulation: bool,
    pub dropout: bool,
}

impl Default for Mechanism {
    fn default() -> Self {
        Self {
            uncertainty: true,
            modulation: true,
            dropout: true,
        }
    }
}

impl Mechanism {
    pub fn disabled() -> Self {
        Self {
            uncertainty: false,
            modulation: false,
            dropout: false,
        }
    }

    pub fn modulation_active(&self) -> bool {
        self.uncertainty && self.modulation
    }

    pub fn dropout_active(&self) -> bool {
        self.uncertainty && self.dropout
    }
}

fn check_open_unit<T: Real>(name: &str, v: T) -> Result<()> {
    if v > T::zero() && v < T::one() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} is not in (0, 1)")))
    }
}

/// `alpha * (1 - u)` for `alpha, u` in the open unit interval.
pub fn modulate_opacity<T: Real>(alpha: T, u: T) -> Result<T> {
    check_open_unit("alpha", alpha)?;
    check_open_unit("u", u)?;
    Ok(alpha * (T::one() - u))
}

#[inline]
fn guard<T: Real>(p: T) -> (T, bool) {
    let lo = lit::<T>(PROB_GUARD);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

#[inline]
fn guarded_logit<T: Real>(p: T) -> T {
    let (p, _) = guard(p);
    p.ln() - (T::one() - p).ln()
}

/// Raw (unclamped) soft drop weight.
pub fn soft_drop_weight<T: Real>(u: T, q: T, tau: T) -> T {
    let z = (guarded_logit(u) + guarded_logit(q)) / tau;
    T::one() - sigmoid(z)
}

/// `d omega / d u`; zero where the probability guard is active.
pub fn soft_drop_weight_du<T: Real>(u: T, q: T, tau: T) -> T {
    let (ug, live) = guard(u);
    if !live {
        return T::zero();
    }
    let z = (guarded_logit(ug) + guarded_logit(q)) / tau;
    let s = sigmoid(z);
    -(s * (T::one() - s)) / (tau * ug * (T::one() - ug))
}

pub fn clamp_weight<T: Real>(omega: T, cfg: &SoftDropConfig) -> T {
    omega.max(lit(cfg.omega_min)).min(lit(cfg.omega_max))
}

/// Derivative of [`clamp_weight`]: 1 inside the band, 0 outside.
pub fn clamp_weight_grad<T: Real>(omega: T, cfg: &SoftDropConfig) -> T {
    if omega >= lit(cfg.omega_min) && omega <= lit(cfg.omega_max) {
        T::one()
    } else {
        T::zero()
    }
}

pub fn effective_opacity<T: Real>(alpha_mod: T, omega_clamped: T) -> T {
    alpha_mod * omega_clamped
}

/// Intermediate values of the opacity pipeline for one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftDropOutput<T> {
    pub alpha_mod: T,
    pub omega: T,
    pub omega_clamped: T,
    pub alpha_eff: T,
}

/// Full forward chain. `q = None` disables dropout (`omega_c = 1`).
pub fn softdrop_forward<T: Real>(
    alpha: T,
    u: T,
    q: Option<T>,
    cfg: &SoftDropConfig,
    mech: Mechanism,
) -> SoftDropOutput<T> {
    let alpha_mod = if mech.modulation_active() {
        alpha * (T::one() - u)
    } else {
        alpha
    };
    let (omega, omega_clamped) = match q {
        Some(q) if mech.dropout_active() => {
            let w = soft_drop_weight(u, q, lit(cfg.temperature));
            (w, clamp_weight(w, cfg))
        }
        _ => (T::one(), T::one()),
    };
    SoftDropOutput {
        alpha_mod,
        omega,
        omega_clamped,
        alpha_eff: effective_opacity(alpha_mod, omega_clamped),
    }
}

/// Gradients `(dL/d alpha, dL/d u)` given `upstream = dL/d alpha_eff`.
pub fn softdrop_backward<T: Real>(
    alpha: T,
    u: T,
    q: Option<T>,
    cfg: &SoftDropConfig,
    mech: Mechanism,
    upstream: T,
) -> (T, T) {
    let fwd = softdrop_forward(alpha, u, q, cfg, mech);
    let d_alpha_mod = upstream * fwd.omega_clamped;
    let d_omega_c = upstream * fwd.alpha_mod;
    let (d_alpha, mut d_u) = if mech.modulation_active() {
        (d_alpha_mod * (T::one() - u), -d_alpha_mod * alpha)
    } else {
        (d_alpha_mod, T::zero())
    };
    if let Some(q) = q {
        if mech.dropout_active() {
            let d_omega = d_omega_c * clamp_weight_grad(fwd.omega, cfg);
            if d_omega != T::zero() {
                d_u += d_omega * soft_drop_weight_du(u, q, lit(cfg.temperature));
            }
        }
    }
    (d_alpha, d_u)
}

/// One batch of dropout draws.
#[derive(Clone, Debug, PartialEq)]
pub struct DropSample<T> {
    pub q: Vec<T>,
    pub omega: Vec<T>,
    pub omega_clamped: Vec<T>,
    pub seed: u64,
    pub iteration: u64,
}

/// `q` for Gaussian `index` at `iteration`.
pub fn draw_q<T: Real>(seed: u64, iteration: u64, index: u64) -> T {
    lit(CounterRng::new(seed, Domain::DropoutQ).uniform_open(iteration, index))
}

/// Draws `q` for each `(gaussian index, u)` pair and evaluates the weights.
pub fn sample_drop<T: Real>(
    indexed_u: &[(usize, T)],
    cfg: &SoftDropConfig,
    seed: u64,
    iteration: u64,
) -> DropSample<T> {
    let tau = lit::<T>(cfg.temperature);
    let mut out = DropSample {
        q: Vec::with_capacity(indexed_u.len()),
        omega: Vec::with_capacity(indexed_u.len()),
        omega_clamped: Vec::with_capacity(indexed_u.len()),
        seed,
        iteration,
    };
    for &(i, u) in indexed_u {
        let q: T = draw_q(seed, iteration, i as u64);
        let w = soft_drop_weight(u, q, tau);
        out.q.push(q);
        out.omega.push(w);
        out.omega_clamped.push(clamp_weight(w, cfg));
    }
    out
}

/// One sample of the `omega(u)` curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub u: f64,
    /// `q = 0.5` slice, before and after clamping.
    pub omega_q_half: f64,
    pub omega_q_half_clamped: f64,
    /// Monte-Carlo mean over `q ~ U(0, 1)`, before and after clamping.
    pub omega_mean: f64,
    pub omega_mean_clamped: f64,
}

pub fn omega_curve(us: &[f64], cfg: &SoftDropConfig, samples: usize, seed: u64) -> Vec<CurvePoint> {
    let rng = CounterRng::new(seed, Domain::DropoutQ);
    us.iter()
        .enumerate()
        .map(|(k, &u)| {
            let tau = cfg.temperature;
            let half = soft_drop_weight(u, 0.5, tau);
            let mut sum = 0.0;
            let mut sum_c = 0.0;
            for s in 0..samples {
                let q = rng.uniform_open(k as u64, s as u64);
                let w = soft_drop_weight(u, q, tau);
                sum += w;
                sum_c += clamp_weight(w, cfg);
            }
            let n = samples.max(1) as f64;
            CurvePoint {
                u,
                omega_q_half: half,
                omega_q_half_clamped: clamp_weight(half, cfg),
                omega_mean: sum / n,
                omega_mean_clamped: sum_c / n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SoftDropConfig {
        SoftDropConfig::default()
    }

    #[test]
    fn modulation_examples() {
        assert!((modulate_opacity(0.6f64, 0.25).unwrap() - 0.45).abs() < 1e-15);
        assert!((modulate_opacity(0.7f64, 1e-9).unwrap() - 0.7).abs() < 1e-8);
        assert!(modulate_opacity(0.7f64, 1.0 - 1e-9).unwrap() < 1e-8);
        assert!(modulate_opacity(1.2, 0.5).is_err());
        assert!(modulate_opacity(0.5, 0.0).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(soft_drop_weight(0.5, 0.5, 0.1), 0.5);
        assert_eq!(soft_drop_weight(0.5, 0.5, 3.0), 0.5);
        // oracle: 1 - 1 / (1 + exp(-ln(1.5) / 0.1))
        let z: f64 = (0.6f64 / 0.4).ln() / 0.1;
        let oracle = 1.0 - 1.0 / (1.0 + (-z).exp());
        let w = soft_drop_weight(0.6, 0.5, 0.1);
        assert!((w - oracle).abs() < 1e-14);
        assert!((w - 0.01703).abs() < 1e-4);
        let w = soft_drop_weight(0.47f64, 0.5, 0.1);
        let z: f64 = (0.47f64 / 0.53).ln() / 0.1;
        assert!((w - (1.0 - 1.0 / (1.0 + (-z).exp()))).abs() < 1e-14);
        assert!((w - 0.7686).abs() < 5e-4);
        assert!(w < 0.8);
    }

    #[test]
    fn clamp_examples() {
        let c = cfg();
        assert_eq!(clamp_weight(0.5, &c), 0.5);
        assert_eq!(clamp_weight(0.017, &c), 0.2);
        assert_eq!(clamp_weight(0.95, &c), 0.8);
        assert_eq!(clamp_weight_grad(0.5, &c), 1.0);
        assert_eq!(clamp_weight_grad(0.95, &c), 0.0);
    }

    #[test]
    fn effective_examples() {
        assert!((effective_opacity(0.45f64, 0.5) - 0.225).abs() < 1e-16);
        assert!((effective_opacity(1.0f64 - 1e-12, 0.8) - 0.8).abs() < 1e-11);
        let out = softdrop_forward(0.7f64, 1e-9, Some(0.5), &cfg(), Mechanism::default());
        assert!((out.alpha_mod - 0.7).abs() < 1e-8);
        assert_eq!(out.omega_clamped, 0.8);
        assert!((out.alpha_eff - 0.56).abs() < 1e-8);
    }

    #[test]
    fn derivative_at_symmetry_point() {
        assert!((soft_drop_weight_du(0.5f64, 0.5, 0.1) - (-10.0)).abs() < 1e-12);
    }

    #[test]
    fn saturated_clamp_only_modulation_gradient() {
        let c = cfg();
        let (alpha, u, q) = (0.7f64, 0.2, 0.5);
        let (_, du) = softdrop_backward(alpha, u, Some(q), &c, Mechanism::default(), 1.0);
        // omega(0.2) saturates above omega_max, so only -alpha * omega_max survives
        assert!((du - (-alpha * 0.8)).abs() < 1e-15);
        let (da, du) = softdrop_backward(alpha, u, Some(q), &c, Mechanism::default(), 0.0);
        assert_eq!((da, du), (0.0, 0.0));
    }

    #[test]
    fn disabled_mechanism_is_identity() {
        let out = softdrop_forward(0.3, 0.9, Some(0.2), &cfg(), Mechanism::disabled());
        assert_eq!(out.alpha_eff, 0.3);
        let (da, du) = softdrop_backward(0.3, 0.9, Some(0.2), &cfg(), Mechanism::disabled(), 2.0);
        assert_eq!((da, du), (2.0, 0.0));
    }

    #[test]
    fn sample_is_reproducible() {
        let us: Vec<(usize, f64)> = (0..50).map(|i| (i, 0.3 + 0.005 * i as f64)).collect();
        let a = sample_drop(&us, &cfg(), 11, 4);
        let b = sample_drop(&us, &cfg(), 11, 4);
        assert_eq!(a, b);
        assert!(a.omega_clamped.iter().all(|w| (0.2..=0.8).contains(w)));
    }
}

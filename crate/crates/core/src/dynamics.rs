//! Population-level Unknown/Support/Denial dynamics.
//!
//! The environmental model moves Unknown mass to Support and Denial at rates
//! `alpha` and `beta`, driven only by the source post (environment rate `e`,
//! fixed to 1):
//!
//! ```text
//! dU/dt = -(alpha + beta) U e,   dS/dt = alpha U e,   dD/dt = beta U e
//! ```
//!
//! The bilinear variant (`step_usd`) makes the transitions depend on the current
//! Support and Denial mass instead and is kept for the ablation.

use thiserror::Error;

/// Environment influence rate. Treated as a universal scale and fixed.
pub const ENVIRONMENT_RATE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid rates alpha={alpha}, beta={beta}: need alpha, beta > 0 and alpha + beta < 1")]
    InvalidRates { alpha: f64, beta: f64 },
    #[error("closed form needs alpha + beta > 0")]
    ZeroTotalRate,
    #[error("state ({u}, {s}, {d}) is not a normalized fraction vector")]
    Unnormalized { u: f64, s: f64, d: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EusdParams {
    pub alpha: f64,
    pub beta: f64,
    pub e: f64,
}

impl EusdParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DynamicsError> {
        let p = Self {
            alpha,
            beta,
            e: ENVIRONMENT_RATE,
        };
        p.validate()?;
        Ok(p)
    }

    /// Rates without the discrete-stability check (e.g. for the closed form
    /// or the bilinear variant with boundary values).
    pub fn unchecked(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            e: ENVIRONMENT_RATE,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.alpha + self.beta < 1.0
            && self.alpha.is_finite()
            && self.beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidRates {
                alpha: self.alpha,
                beta: self.beta,
            })
        }
    }

    /// Rates for a substep of length `dt`.
    pub fn scaled(&self, dt: f64) -> Self {
        Self {
            alpha: self.alpha * dt,
            beta: self.beta * dt,
            e: self.e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationState {
    pub u: f64,
    pub s: f64,
    pub d: f64,
}

impl PopulationState {
    pub fn new(u: f64, s: f64, d: f64) -> Self {
        Self { u, s, d }
    }

    pub fn total(&self) -> f64 {
        self.u + self.s + self.d
    }
}

/// One forward-difference stage of the environmental model.
pub fn step_eusd(state: PopulationState, p: &EusdParams) -> PopulationState {
    let to_support = p.alpha * state.u * p.e;
    let to_denial = p.beta * state.u * p.e;
    PopulationState {
        u: state.u - to_support - to_denial,
        s: state.s + to_support,
        d: state.d + to_denial,
    }
}

/// Runs `units` unit stages, each split into `substeps` forward-difference steps
/// with rates scaled by `1 / substeps`.
pub fn integrate_eusd(
    initial: PopulationState,
    p: &EusdParams,
    units: usize,
    substeps: usize,
) -> PopulationState {
    let fine = p.scaled(1.0 / substeps as f64);
    (0..units * substeps).fold(initial, |s, _| step_eusd(s, &fine))
}

/// Exact solution of the continuous environmental model at time `t`.
pub fn solve_eusd_closed_form(
    initial: PopulationState,
    p: &EusdParams,
    t: f64,
) -> Result<PopulationState, DynamicsError> {
    let rate = (p.alpha + p.beta) * p.e;
    if rate == 0.0 {
        return Err(DynamicsError::ZeroTotalRate);
    }
    let decay = (-rate * t).exp();
    let moved = initial.u * (1.0 - decay);
    let total = p.alpha + p.beta;
    Ok(PopulationState {
        u: initial.u * decay,
        s: initial.s + p.alpha / total * moved,
        d: initial.d + p.beta / total * moved,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsdStep {
    pub state: PopulationState,
    /// Set when the Unknown fraction would have gone negative and the outflow
    /// was scaled back.
    pub clamped: bool,
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// One forward-difference stage of the bilinear model on fractions.
pub fn step_usd(state: PopulationState, p: &EusdParams) -> Result<UsdStep, DynamicsError> {
    let PopulationState { u, s, d } = state;
    if u < 0.0 || s < 0.0 || d < 0.0 || (u + s + d - 1.0).abs() > NORMALIZATION_TOL {
        return Err(DynamicsError::Unnormalized { u, s, d });
    }
    let mut to_support = p.alpha * u * s;
    let mut to_denial = p.beta * u * d;
    let outflow = to_support + to_denial;
    let clamped = outflow > u;
    if clamped {
        let keep = u / outflow;
        to_support *= keep;
        to_denial *= keep;
        log::debug!("usd step clamped: outflow {outflow} exceeds unknown mass {u}");
    }
    Ok(UsdStep {
        state: PopulationState {
            u: if clamped { 0.0 } else { u - to_support - to_denial },
            s: s + to_support,
            d: d + to_denial,
        },
        clamped,
    })
}

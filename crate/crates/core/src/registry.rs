//! Named benchmark problems and their closed-form solutions.

use std::sync::Arc;

use crate::convex::{ConvexFunction, ConvexSet};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

/// Catalog entry shown by `list-problems`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemInfo {
    pub name: &'static str,
    pub description: &'static str,
    /// Name of the closed-form reference, if any.
    pub analytic: Option<&'static str>,
}

pub const PROBLEMS: &[ProblemInfo] = &[
    ProblemInfo {
        name: "bm_linear",
        description: "dX = drift dt + sigma dW, g(x) = x, F = 0",
        analytic: Some("martingale"),
    },
    ProblemInfo {
        name: "bm_abs",
        description: "dX = drift dt + sigma dW, g(x) = |x|, F = 0, phi = indicator of [0, inf) by default",
        analytic: None,
    },
    ProblemInfo {
        name: "gbm_linear",
        description: "dX = mu X dt + sigma X dW, g(x) = x, F = 0",
        analytic: Some("gbm_mean"),
    },
    ProblemInfo {
        name: "linear_decay",
        description: "dX = drift dt + sigma dW, g = 1, F(y) = -rate y",
        analytic: Some("exp_decay"),
    },
    ProblemInfo {
        name: "bm_nonlinear",
        description: "dX = drift dt + sigma dW, g(x) = |x|, F(y, z) = -rate sin(y) + cos(z) / 4",
        analytic: None,
    },
    ProblemInfo {
        name: "reflected_drift",
        description: "dX = drift dt + sigma dW reflected into a domain, g(x) = x, G = boundary_g",
        analytic: None,
    },
];

pub fn list_problems() -> &'static [ProblemInfo] {
    PROBLEMS
}

/// Parameters of a named problem; unset fields take per-problem defaults.
#[derive(Debug, Clone, Default)]
pub struct ProblemConfig {
    pub name: String,
    pub x0: Option<f64>,
    pub horizon: Option<f64>,
    pub phi: Option<ConvexFunction>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub rate: Option<f64>,
    pub drift: Option<f64>,
    pub domain: Option<ConvexSet>,
    pub boundary_g: Option<f64>,
    pub lipschitz: Option<f64>,
}

impl ProblemConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon.unwrap_or(1.0)
    }

    fn drift(&self) -> f64 {
        self.drift.unwrap_or(if self.name == "reflected_drift" { 2.0 } else { 0.0 })
    }

    fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(match self.name.as_str() {
            "gbm_linear" => 0.2,
            "reflected_drift" => 0.5,
            _ => 1.0,
        })
    }

    fn mu(&self) -> f64 {
        self.mu.unwrap_or(0.05)
    }

    fn rate(&self) -> f64 {
        self.rate.unwrap_or(1.0)
    }
}

/// Builds the [`ProblemSpec`] for a catalog entry.
pub fn build_problem(cfg: &ProblemConfig) -> Result<ProblemSpec> {
    let info = PROBLEMS
        .iter()
        .find(|p| p.name == cfg.name)
        .ok_or_else(|| Error::UnknownProblem(cfg.name.clone()))?;
    if cfg.domain.is_some() && info.name != "reflected_drift" {
        return Err(Error::invalid(format!("problem {} takes no domain", info.name)));
    }
    if cfg.boundary_g.is_some() && info.name != "reflected_drift" {
        return Err(Error::invalid(format!("problem {} takes no boundary_g", info.name)));
    }
    let (drift, sigma, rate) = (cfg.drift(), cfg.sigma(), cfg.rate());
    let builder = ProblemSpec::builder(1, 1)
        .horizon(cfg.horizon())
        .initial_x(vec![cfg.x0.unwrap_or(if info.name == "gbm_linear" { 1.0 } else { 0.0 })]);
    let (builder, lipschitz) = match info.name {
        "bm_linear" => (
            builder
                .scalar_drift(move |_, _| drift)
                .scalar_diffusion(move |_, _| sigma)
                .terminal(|x| x[0])
                .phi(cfg.phi.clone().unwrap_or_else(ConvexFunction::zero)),
            1.0,
        ),
        "bm_abs" => (
            builder
                .scalar_drift(move |_, _| drift)
                .scalar_diffusion(move |_, _| sigma)
                .terminal(|x| x[0].abs())
                .phi(
                    cfg.phi
                        .clone()
                        .unwrap_or_else(|| ConvexFunction::indicator_interval(0.0, f64::INFINITY).expect("valid")),
                ),
            1.0,
        ),
        "gbm_linear" => {
            let mu = cfg.mu();
            (
                builder
                    .scalar_drift(move |_, x| mu * x)
                    .scalar_diffusion(move |_, x| sigma * x)
                    .terminal(|x| x[0])
                    .phi(cfg.phi.clone().unwrap_or_else(ConvexFunction::zero)),
                mu.abs().max(sigma.abs()).max(1.0),
            )
        }
        "linear_decay" => (
            builder
                .scalar_drift(move |_, _| drift)
                .scalar_diffusion(move |_, _| sigma)
                .generator(move |_, _, y, _| -rate * y)
                .terminal(|_| 1.0)
                .phi(cfg.phi.clone().unwrap_or_else(ConvexFunction::zero)),
            rate.abs(),
        ),
        "bm_nonlinear" => (
            builder
                .scalar_drift(move |_, _| drift)
                .scalar_diffusion(move |_, _| sigma)
                .generator(move |_, _, y, z| -rate * y.sin() + 0.25 * z[0].cos())
                .terminal(|x| x[0].abs())
                .phi(cfg.phi.clone().unwrap_or_else(ConvexFunction::zero)),
            rate.abs().max(1.0),
        ),
        "reflected_drift" => {
            if cfg.phi.as_ref().is_some_and(|p| !p.is_zero()) {
                return Err(Error::invalid("reflected_drift supports only phi = zero"));
            }
            let g = cfg.boundary_g.unwrap_or(1.0);
            let domain = match &cfg.domain {
                Some(d) => d.clone(),
                None => ConvexSet::interval(f64::NEG_INFINITY, 1.0)?,
            };
            (
                builder
                    .scalar_drift(move |_, _| drift)
                    .scalar_diffusion(move |_, _| sigma)
                    .boundary_generator(move |_, _, _| g)
                    .terminal(|x| x[0])
                    .domain(domain),
                1.0,
            )
        }
        _ => unreachable!("catalog entry without a builder"),
    };
    builder.lipschitz(cfg.lipschitz.unwrap_or(lipschitz)).build()
}

type ValueFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Closed-form `(Y, Z)` of the continuous problem as functions of `(t, x)`.
#[derive(Clone)]
pub struct AnalyticSolution {
    pub name: &'static str,
    y: ValueFn,
    z: ValueFn,
}

impl std::fmt::Debug for AnalyticSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticSolution").field("name", &self.name).finish()
    }
}

impl AnalyticSolution {
    pub fn y(&self, t: f64, x: &[f64]) -> f64 {
        (self.y)(t, x)
    }

    /// `Z` for the single Brownian component.
    pub fn z(&self, t: f64, x: &[f64]) -> f64 {
        (self.z)(t, x)
    }
}

/// Looks up the closed-form reference `name` for the problem in `cfg`.
/// Only valid without penalization.
pub fn analytic_solution(name: &str, cfg: &ProblemConfig) -> Result<AnalyticSolution> {
    let info = PROBLEMS
        .iter()
        .find(|p| p.analytic == Some(name))
        .ok_or_else(|| Error::invalid(format!("unknown analytic reference `{name}`")))?;
    if info.name != cfg.name {
        return Err(Error::invalid(format!(
            "analytic reference `{name}` belongs to problem {}",
            info.name
        )));
    }
    if cfg.phi.as_ref().is_some_and(|p| !p.is_zero()) {
        return Err(Error::invalid(format!("analytic reference `{name}` assumes phi = zero")));
    }
    let horizon = cfg.horizon();
    let (drift, sigma, mu, rate) = (cfg.drift(), cfg.sigma(), cfg.mu(), cfg.rate());
    let (y, z): (ValueFn, ValueFn) = match name {
        "martingale" => (
            Arc::new(move |t, x| x[0] + drift * (horizon - t)),
            Arc::new(move |_, _| sigma),
        ),
        "gbm_mean" => (
            Arc::new(move |t, x| x[0] * (mu * (horizon - t)).exp()),
            Arc::new(move |t, x| sigma * x[0] * (mu * (horizon - t)).exp()),
        ),
        "exp_decay" => (
            Arc::new(move |t, _| (-rate * (horizon - t)).exp()),
            Arc::new(|_, _| 0.0),
        ),
        _ => unreachable!("catalog analytic without a formula"),
    };
    Ok(AnalyticSolution {
        name: info.analytic.expect("matched above"),
        y,
        z,
    })
}

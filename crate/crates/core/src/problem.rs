//! Problem data, time partitions, scheme parameters and assumption probing.

use std::fmt;
use std::sync::Arc;

use crate::cond_exp::EstimatorKind;
use crate::convex::{ConvexFunction, ConvexSet};
use crate::error::{Error, Result};
use crate::rng::IncrementLaw;

/// `(t, x, out)`: writes a vector (drift, length m) or a row-major m x d
/// matrix (diffusion) into `out`.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, y, z) -> F`.
pub type GeneratorFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x, y) -> G`.
pub type BoundaryFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
/// `x -> g(x)`.
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Tolerance on `l(x0) <= 0` at construction.
const DOMAIN_TOL: f64 = 1e-12;

/// Decoupled forward-backward system with a scalar backward component.
///
/// Forward: `dX = b(t,X) dt + sigma(t,X) dW` (reflected on the closure of
/// `{l < 0}` when a domain is present). Backward:
/// `dY + F(t,X,Y,Z) dt + G(t,X,Y) dA in dphi(Y) dt + Z dW`, `Y_T = g(X_T)`.
#[derive(Clone)]
pub struct ProblemSpec {
    state_dim: usize,
    noise_dim: usize,
    drift: VectorField,
    diffusion: VectorField,
    generator: GeneratorFn,
    boundary_generator: Option<BoundaryFn>,
    terminal: TerminalFn,
    phi: ConvexFunction,
    domain: Option<ConvexSet>,
    horizon: f64,
    start_time: f64,
    initial_x: Vec<f64>,
    lipschitz: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("phi", &self.phi)
            .field("domain", &self.domain)
            .field("horizon", &self.horizon)
            .field("start_time", &self.start_time)
            .field("initial_x", &self.initial_x)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn builder(state_dim: usize, noise_dim: usize) -> ProblemBuilder {
        ProblemBuilder::new(state_dim, noise_dim)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn initial_x(&self) -> &[f64] {
        &self.initial_x
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn phi(&self) -> &ConvexFunction {
        &self.phi
    }

    pub fn domain(&self) -> Option<&ConvexSet> {
        self.domain.as_ref()
    }

    pub fn has_boundary_generator(&self) -> bool {
        self.boundary_generator.is_some()
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    pub fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.generator)(t, x, y, z)
    }

    /// `G(t, x, y)`, zero when no boundary generator was given.
    pub fn boundary_generator(&self, t: f64, x: &[f64], y: f64) -> f64 {
        self.boundary_generator.as_ref().map_or(0.0, |g| g(t, x, y))
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    /// Copy of this problem with a different convex function.
    pub fn with_phi(&self, phi: ConvexFunction) -> Self {
        Self {
            phi,
            ..self.clone()
        }
    }

    /// Copy of this problem with a different (or no) reflecting domain.
    pub fn with_domain(&self, domain: Option<ConvexSet>) -> Result<Self> {
        let out = Self {
            domain,
            ..self.clone()
        };
        out.check_domain()?;
        Ok(out)
    }

    fn check_domain(&self) -> Result<()> {
        if let Some(domain) = &self.domain {
            if let Some(dim) = domain.dim() {
                if dim != self.state_dim {
                    return Err(Error::invalid(format!(
                        "domain has dimension {dim}, state has dimension {}",
                        self.state_dim
                    )));
                }
            }
            let level = domain.level(&self.initial_x);
            if level > DOMAIN_TOL {
                return Err(Error::invalid(format!(
                    "initial state lies outside the domain closure (level {level})"
                )));
            }
        }
        Ok(())
    }
}

pub struct ProblemBuilder {
    state_dim: usize,
    noise_dim: usize,
    drift: Option<VectorField>,
    diffusion: Option<VectorField>,
    generator: Option<GeneratorFn>,
    boundary_generator: Option<BoundaryFn>,
    terminal: Option<TerminalFn>,
    phi: ConvexFunction,
    domain: Option<ConvexSet>,
    horizon: f64,
    start_time: f64,
    initial_x: Option<Vec<f64>>,
    lipschitz: f64,
    scalar_coefficients: bool,
}

impl ProblemBuilder {
    fn new(state_dim: usize, noise_dim: usize) -> Self {
        Self {
            state_dim,
            noise_dim,
            drift: None,
            diffusion: None,
            generator: None,
            boundary_generator: None,
            terminal: None,
            phi: ConvexFunction::zero(),
            domain: None,
            horizon: 1.0,
            start_time: 0.0,
            initial_x: None,
            lipschitz: 0.0,
            scalar_coefficients: false,
        }
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    /// Drift for a one-dimensional state.
    pub fn scalar_drift(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.scalar_coefficients = true;
        self.drift = Some(Arc::new(move |t, x, out| out[0] = f(t, x[0])));
        self
    }

    /// Diffusion for a one-dimensional state driven by one Brownian motion.
    pub fn scalar_diffusion(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.scalar_coefficients = true;
        self.diffusion = Some(Arc::new(move |t, x, out| out[0] = f(t, x[0])));
        self
    }

    pub fn generator(
        mut self,
        f: impl Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.generator = Some(Arc::new(f));
        self
    }

    pub fn boundary_generator(mut self, f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.boundary_generator = Some(Arc::new(f));
        self
    }

    pub fn terminal(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Some(Arc::new(f));
        self
    }

    pub fn phi(mut self, phi: ConvexFunction) -> Self {
        self.phi = phi;
        self
    }

    pub fn domain(mut self, domain: ConvexSet) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn start_time(mut self, t0: f64) -> Self {
        self.start_time = t0;
        self
    }

    pub fn initial_x(mut self, x0: Vec<f64>) -> Self {
        self.initial_x = Some(x0);
        self
    }

    /// Declared joint Lipschitz constant of `b`, `sigma`, `F`, `g` (and `G`).
    pub fn lipschitz(mut self, k: f64) -> Self {
        self.lipschitz = k;
        self
    }

    /// Unset coefficients default to zero.
    pub fn build(self) -> Result<ProblemSpec> {
        let (m, d) = (self.state_dim, self.noise_dim);
        if m == 0 || d == 0 {
            return Err(Error::invalid("state and noise dimensions must be >= 1"));
        }
        if self.scalar_coefficients && (m != 1 || d != 1) {
            return Err(Error::invalid("scalar coefficients need state_dim = noise_dim = 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if !(self.start_time.is_finite() && self.start_time >= 0.0 && self.start_time < self.horizon) {
            return Err(Error::invalid(format!(
                "start time must lie in [0, T), got {}",
                self.start_time
            )));
        }
        if !(self.lipschitz >= 0.0 && self.lipschitz.is_finite()) {
            return Err(Error::invalid("Lipschitz constant must be finite and >= 0"));
        }
        let initial_x = self.initial_x.unwrap_or_else(|| vec![0.0; m]);
        if initial_x.len() != m || initial_x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("initial state must be a finite vector of length {m}")));
        }
        let spec = ProblemSpec {
            state_dim: m,
            noise_dim: d,
            drift: self
                .drift
                .unwrap_or_else(|| Arc::new(|_, _, out: &mut [f64]| out.fill(0.0))),
            diffusion: self
                .diffusion
                .unwrap_or_else(|| Arc::new(|_, _, out: &mut [f64]| out.fill(0.0))),
            generator: self.generator.unwrap_or_else(|| Arc::new(|_, _, _, _| 0.0)),
            boundary_generator: self.boundary_generator,
            terminal: self.terminal.unwrap_or_else(|| Arc::new(|_| 0.0)),
            phi: self.phi,
            domain: self.domain,
            horizon: self.horizon,
            start_time: self.start_time,
            initial_x,
            lipschitz: self.lipschitz,
        };
        spec.check_domain()?;
        Ok(spec)
    }
}

/// Uniform grid `t_i = t0 + i * (T - t0) / n`. Nodes are derived from
/// `(t0, T, n)` on every access, never accumulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partition {
    start: f64,
    end: f64,
    steps: usize,
}

/// Partition of `[0, T]` into `n` equal steps.
pub fn make_partition(horizon: f64, n: usize) -> Result<Partition> {
    Partition::new(0.0, horizon, n)
}

impl Partition {
    pub fn new(start: f64, end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("partition needs n >= 1"));
        }
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::invalid(format!("invalid time interval [{start}, {end}]")));
        }
        Ok(Self { start, end, steps })
    }

    /// Partition matching the time interval of `spec`.
    pub fn for_problem(spec: &ProblemSpec, steps: usize) -> Result<Self> {
        Self::new(spec.start_time(), spec.horizon(), steps)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn h(&self) -> f64 {
        (self.end - self.start) / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.end
        } else {
            self.start + (i as f64 * (self.end - self.start)) / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Partition with `factor` times fewer steps on the same interval.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps
            )));
        }
        Self::new(self.start, self.end, self.steps / factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeVariant {
    Implicit,
    Explicit,
}

impl fmt::Display for SchemeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeVariant::Implicit => "implicit",
            SchemeVariant::Explicit => "explicit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeParams {
    /// Yosida exponent `a` in `(0, 1/2)`; the penalization is `eps = h^a`.
    pub a_exponent: f64,
    pub num_paths: usize,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
    pub estimator: EstimatorKind,
    pub variant: SchemeVariant,
    pub seed: u64,
    pub law: IncrementLaw,
    /// Clamp regression outputs to the sample range of the target.
    pub clip_regression: bool,
    /// Maximum `n * d` for tree enumeration.
    pub tree_cap: usize,
    /// Add `h * F(t_i, X_i, Y_i, Z_i)` to the reflected-forward backward scheme.
    pub generalized_with_generator: bool,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            a_exponent: 1.0 / 3.0,
            num_paths: 10_000,
            fixed_point_tol: 1e-13,
            fixed_point_max_iter: 1_000,
            estimator: EstimatorKind::LsmcPoly { degree: 3 },
            variant: SchemeVariant::Implicit,
            seed: 0,
            law: IncrementLaw::Gaussian,
            clip_regression: false,
            tree_cap: 20,
            generalized_with_generator: false,
        }
    }
}

impl SchemeParams {
    /// Tree-exact parameters: Rademacher law, enumerated paths.
    pub fn tree() -> Self {
        Self {
            estimator: EstimatorKind::TreeExact,
            law: IncrementLaw::Rademacher,
            ..Self::default()
        }
    }

    pub fn eps(&self, h: f64) -> f64 {
        h.powf(self.a_exponent)
    }

    pub fn validate(&self, noise_dim: usize, steps: usize) -> Result<()> {
        if !(self.a_exponent > 0.0 && self.a_exponent < 0.5) {
            return Err(Error::invalid(format!(
                "Yosida exponent must lie in (0, 1/2), got {}",
                self.a_exponent
            )));
        }
        if self.num_paths == 0 {
            return Err(Error::invalid("need at least one path"));
        }
        if !(self.fixed_point_tol > 0.0) || self.fixed_point_max_iter == 0 {
            return Err(Error::invalid("fixed-point tolerance and budget must be positive"));
        }
        match self.estimator {
            EstimatorKind::TreeExact => {
                if self.law != IncrementLaw::Rademacher || noise_dim != 1 {
                    return Err(Error::invalid(
                        "tree_exact requires the rademacher law and a single Brownian motion",
                    ));
                }
                if steps > self.tree_cap {
                    return Err(Error::invalid(format!(
                        "tree_exact with n = {steps} exceeds the cap of {}",
                        self.tree_cap
                    )));
                }
            }
            EstimatorKind::LsmcPoly { .. } => {}
            EstimatorKind::Binning { bins } => {
                if bins == 0 {
                    return Err(Error::invalid("binning needs at least one bin"));
                }
            }
        }
        Ok(())
    }
}

/// One finding of [`validate_spec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite {
        component: &'static str,
        t: f64,
        args: Vec<f64>,
    },
    Lipschitz {
        component: &'static str,
        observed: f64,
        declared: f64,
    },
    /// `h (K + h^{-a}) >= 1`: plain Picard iteration may not contract.
    Contraction { product: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite { component, t, args } => {
                write!(f, "{component} is not finite at t={t}, args={args:?}")
            }
            Violation::Lipschitz {
                component,
                observed,
                declared,
            } => write!(
                f,
                "{component}: observed Lipschitz ratio {observed:.4} exceeds 1.5 x declared {declared}"
            ),
            Violation::Contraction { product } => {
                write!(f, "h (K + h^-a) = {product:.4} >= 1; fixed point will be damped")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_contraction_warning(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::Contraction { .. }))
    }

    pub fn lipschitz_violation(&self, component: &str) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::Lipschitz { component: c, .. } if *c == component))
    }
}

const PROBES_PER_DIM: usize = 64;
const PROBE_HALF_WIDTH: f64 = 2.0;
const LIPSCHITZ_SLACK: f64 = 1.5;
const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Probes the coefficients of `spec` on a Halton point set and reports
/// non-finite outputs, Lipschitz ratios above `1.5 K`, and whether the
/// implicit step map fails the contraction test `h (K + h^{-a}) < 1`.
pub fn validate_spec(spec: &ProblemSpec, params: &SchemeParams, partition: &Partition) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let declared = spec.lipschitz;

    let mut drift_out = vec![0.0; m];
    let mut diff_out = vec![0.0; m * d];

    probe(&mut report, "drift", spec, m, declared, |t, p| {
        spec.drift(t, p, &mut drift_out);
        drift_out.clone()
    });
    probe(&mut report, "diffusion", spec, m, declared, |t, p| {
        spec.diffusion(t, p, &mut diff_out);
        diff_out.clone()
    });
    probe(&mut report, "generator", spec, m + 1 + d, declared, |t, p| {
        vec![spec.generator(t, &p[..m], p[m], &p[m + 1..])]
    });
    probe(&mut report, "terminal", spec, m, declared, |_, p| vec![spec.terminal(p)]);
    if spec.has_boundary_generator() {
        probe(&mut report, "boundary_generator", spec, m + 1, declared, |t, p| {
            vec![spec.boundary_generator(t, &p[..m], p[m])]
        });
    }

    let h = partition.h();
    let product = h * (declared + h.powf(-params.a_exponent));
    if product >= 1.0 {
        report.violations.push(Violation::Contraction { product });
    }
    report
}

/// Probes `f` over `dim` spatial arguments: the first `m` are centred at the
/// initial state, the rest at zero.
fn probe<F>(report: &mut ValidationReport, component: &'static str, spec: &ProblemSpec, dim: usize, declared: f64, mut f: F)
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let m = spec.state_dim;
    let count = PROBES_PER_DIM * dim;
    let t_span = spec.horizon - spec.start_time;
    let centre = |k: usize| if k < m { spec.initial_x[k] } else { 0.0 };
    let point = |idx: u64| -> (f64, Vec<f64>) {
        let t = spec.start_time + t_span * radical_inverse(idx, PRIMES[0]);
        let p = (0..dim)
            .map(|k| {
                let u = radical_inverse(idx, PRIMES[(k + 1) % PRIMES.len()]);
                centre(k) + PROBE_HALF_WIDTH * (2.0 * u - 1.0)
            })
            .collect();
        (t, p)
    };

    let mut worst = 0.0_f64;
    for idx in 1..=count as u64 {
        let (t, p) = point(idx);
        let fp = f(t, &p);
        if fp.iter().any(|v| !v.is_finite()) {
            report.violations.push(Violation::NonFinite {
                component,
                t,
                args: p,
            });
            return;
        }
        // Local slope along the direction to the next probe point, plus the
        // chord to that point.
        let (_, q) = point(idx + 1);
        let dir: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len == 0.0 {
            continue;
        }
        for step in [1e-4 * PROBE_HALF_WIDTH / len, 1.0] {
            let r: Vec<f64> = p.iter().zip(&dir).map(|(a, v)| a + step * v).collect();
            let fr = f(t, &r);
            if fr.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let num = fp
                .iter()
                .zip(&fr)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(num / (step * len));
        }
    }
    if worst > LIPSCHITZ_SLACK * declared + 1e-9 {
        report.violations.push(Violation::Lipschitz {
            component,
            observed: worst,
            declared,
        });
    }
}

/// Van der Corput radical inverse of `idx` in `base`.
fn radical_inverse(mut idx: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while idx > 0 {
        out += (idx % base) as f64 * scale;
        idx /= base;
        scale *= inv;
    }
    out
}

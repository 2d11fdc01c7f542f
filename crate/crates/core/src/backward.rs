//! Backward recursions: the Yosida-penalized implicit and explicit schemes
//! and the reflected-forward scheme driven by the boundary process `A`.
//!
//! The pass runs from the terminal layer down to step 0, fitting the
//! conditional expectations of each layer with a [`RegressionBasis`] built
//! on the states at that step. Finished layers are handed to a
//! [`LayerSink`]; [`BackwardSolution`] is the sink that keeps everything.

use std::io::Write;

use rayon::prelude::*;

use crate::cond_exp::{EstimatorKind, RegressionBasis, TreeLayout};
use crate::error::{Error, Result};
use crate::forward::ForwardEnsemble;
use crate::problem::{Partition, ProblemSpec, SchemeParams, SchemeVariant};

/// Result of [`solve_fixed_point`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub value: f64,
    pub iterations: usize,
    /// `|map(y) - y|` at the last iterate.
    pub residual: f64,
    pub damped: bool,
}

/// Solves `y = c + h [F(t, x, y, z) - grad phi_eps(y)]`.
///
/// Plain Picard iteration when `h (K + 1/eps) < 1`, otherwise the damped
/// update `y <- (1 - theta) y + theta map(y)` with
/// `theta = 1 / (1 + h (K + 1/eps))`. Stops once the residual is at most
/// `tol * max(1, |y|)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_fixed_point(
    c: f64,
    x: &[f64],
    z: &[f64],
    t: f64,
    spec: &ProblemSpec,
    h: f64,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    if !(h > 0.0 && eps > 0.0 && tol > 0.0) {
        return Err(Error::invalid("h, eps and tol must be positive"));
    }
    let phi = spec.phi();
    let slope = if phi.is_zero() {
        spec.lipschitz()
    } else {
        spec.lipschitz() + 1.0 / eps
    };
    iterate(c, h, slope, tol, max_iter, |y| {
        let grad = if phi.is_zero() { 0.0 } else { phi.yosida_gradient(y, eps)? };
        Ok(spec.generator(t, x, y, z) - grad)
    })
}

fn iterate(
    c: f64,
    h: f64,
    slope: f64,
    tol: f64,
    max_iter: usize,
    f: impl Fn(f64) -> Result<f64>,
) -> Result<FixedPoint> {
    let damped = h * slope >= 1.0;
    let theta = if damped { 1.0 / (1.0 + h * slope) } else { 1.0 };
    let mut y = c;
    let mut residual = f64::INFINITY;
    for k in 1..=max_iter {
        let mapped = c + h * f(y)?;
        if !mapped.is_finite() {
            return Err(Error::FixedPointNoConvergence {
                iterations: k,
                residual: f64::INFINITY,
            });
        }
        residual = (mapped - y).abs();
        let next = if damped { y + theta * (mapped - y) } else { mapped };
        if residual <= tol * y.abs().max(1.0) {
            return Ok(FixedPoint {
                value: next,
                iterations: k,
                residual,
                damped,
            });
        }
        y = next;
    }
    Err(Error::FixedPointNoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Which backward recursion to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recursion {
    /// Yosida-penalized scheme (implicit or explicit per the params).
    Penalized,
    /// Reflected-forward scheme with `G dA` increments.
    Generalized,
}

/// Receives each finished layer, terminal layer first.
pub trait LayerSink {
    /// `y` and `u` hold one value per path, `z` holds `paths * d` values.
    fn layer(&mut self, step: usize, y: &[f64], z: &[f64], u: &[f64]) -> Result<()>;
}

/// Diagnostics of one backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PassSummary {
    /// Sum over steps of `dof * residual variance / M` of the `Y` fits.
    pub noise_floor: f64,
    pub max_fixed_point_iterations: usize,
    pub damped_steps: usize,
}

/// Runs a backward pass over `forward`, streaming layers into `sink`.
pub fn run_backward<S: LayerSink>(
    spec: &ProblemSpec,
    params: &SchemeParams,
    forward: &ForwardEnsemble,
    recursion: Recursion,
    sink: &mut S,
) -> Result<PassSummary> {
    let partition = *forward.partition();
    let n = partition.steps();
    let m = spec.state_dim();
    let d = spec.noise_dim();
    let paths = forward.num_paths();
    params.validate(d, n)?;
    if forward.state_dim() != m || forward.increments().noise_dim() != d {
        return Err(Error::invalid("forward ensemble does not match the problem dimensions"));
    }
    let tree = matches!(params.estimator, EstimatorKind::TreeExact);
    if tree && !forward.increments().is_enumerated() {
        return Err(Error::invalid("tree_exact needs an enumerated Rademacher ensemble"));
    }
    if recursion == Recursion::Generalized {
        if !forward.is_reflected() {
            return Err(Error::invalid("the reflected scheme needs a forward ensemble with A"));
        }
        if !spec.phi().is_zero() {
            return Err(Error::invalid("the reflected scheme supports only phi = 0"));
        }
    }

    let h = partition.h();
    let eps = params.eps(h);
    let mut summary = PassSummary::default();

    let mut y_next: Vec<f64> = forward
        .step_states(n)
        .chunks(m)
        .map(|x| spec.terminal(x))
        .collect();
    if let Some(j) = y_next.iter().position(|v| !v.is_finite()) {
        return Err(Error::Estimator(format!("terminal value of path {j} is not finite")).at_step(n));
    }
    sink.layer(n, &y_next, &vec![0.0; paths * d], &vec![0.0; paths])?;

    for i in (0..n).rev() {
        let layer = step(spec, params, forward, recursion, i, h, eps, &y_next, tree, &mut summary)
            .map_err(|e| e.at_step(i))?;
        sink.layer(i, &layer.y, &layer.z, &layer.u)?;
        y_next = layer.y;
    }
    Ok(summary)
}

struct Layer {
    y: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn step(
    spec: &ProblemSpec,
    params: &SchemeParams,
    forward: &ForwardEnsemble,
    recursion: Recursion,
    i: usize,
    h: f64,
    eps: f64,
    y_next: &[f64],
    tree: bool,
    summary: &mut PassSummary,
) -> Result<Layer> {
    let partition = forward.partition();
    let m = spec.state_dim();
    let d = spec.noise_dim();
    let paths = forward.num_paths();
    let t = partition.time(i);
    let states = forward.step_states(i);
    let layout = tree.then_some(TreeLayout {
        steps: partition.steps(),
        noise_dim: d,
        step: i,
    });
    let basis = RegressionBasis::prepare(states, m, params.estimator, layout, params.clip_regression)?;
    let dw = forward.increments().step(i);

    let target: Vec<f64> = match recursion {
        Recursion::Penalized => y_next.to_vec(),
        Recursion::Generalized => {
            let t_next = partition.time(i + 1);
            let next_states = forward.step_states(i + 1);
            let a_now = forward.boundary_step(i).expect("checked reflected");
            let a_next = forward.boundary_step(i + 1).expect("checked reflected");
            (0..paths)
                .map(|j| {
                    let da = a_next[j] - a_now[j];
                    if da == 0.0 {
                        y_next[j]
                    } else {
                        let x = &next_states[j * m..(j + 1) * m];
                        y_next[j] - spec.boundary_generator(t_next, x, y_next[j]) * da
                    }
                })
                .collect()
        }
    };

    let c_fit = basis.fit(&target)?;
    summary.noise_floor += c_fit.dof as f64 * c_fit.residual_mean_square / paths as f64;
    // E^i(c dW) = 0, so centering only removes variance.
    let centred: Vec<f64> = target.iter().zip(&c_fit.fitted).map(|(v, c)| v - c).collect();
    let z_fits = basis.fit_z(&centred, dw, h)?;
    let mut z = vec![0.0; paths * d];
    for (k, fit) in z_fits.iter().enumerate() {
        for (j, v) in fit.fitted.iter().enumerate() {
            z[j * d + k] = *v;
        }
    }
    let c = c_fit.fitted;

    let phi = spec.phi();
    let (y, u) = match (recursion, params.variant) {
        (Recursion::Penalized, SchemeVariant::Implicit) => {
            let solved: Vec<FixedPoint> = (0..paths)
                .into_par_iter()
                .map(|j| {
                    solve_fixed_point(
                        c[j],
                        &states[j * m..(j + 1) * m],
                        &z[j * d..(j + 1) * d],
                        t,
                        spec,
                        h,
                        eps,
                        params.fixed_point_tol,
                        params.fixed_point_max_iter,
                    )
                })
                .collect::<Result<_>>()?;
            for fp in &solved {
                summary.max_fixed_point_iterations = summary.max_fixed_point_iterations.max(fp.iterations);
            }
            if solved.first().is_some_and(|fp| fp.damped) {
                summary.damped_steps += 1;
            }
            let u = c.iter().map(|&v| phi.yosida_gradient(v, eps)).collect::<Result<_>>()?;
            (solved.into_iter().map(|fp| fp.value).collect::<Vec<_>>(), u)
        }
        (Recursion::Penalized, SchemeVariant::Explicit) => {
            let bracket: Vec<f64> = (0..paths)
                .into_par_iter()
                .map(|j| {
                    let x = &states[j * m..(j + 1) * m];
                    let grad = phi.yosida_gradient(y_next[j], eps)?;
                    Ok(y_next[j] + h * (spec.generator(t, x, y_next[j], &z[j * d..(j + 1) * d]) - grad))
                })
                .collect::<Result<_>>()?;
            let y = basis.fit(&bracket)?.fitted;
            let u = c.iter().map(|&v| phi.yosida_gradient(v, eps)).collect::<Result<_>>()?;
            (y, u)
        }
        (Recursion::Generalized, _) => {
            let y = if params.generalized_with_generator {
                (0..paths)
                    .into_par_iter()
                    .map(|j| {
                        let x = &states[j * m..(j + 1) * m];
                        let zj = &z[j * d..(j + 1) * d];
                        iterate(
                            c[j],
                            h,
                            spec.lipschitz(),
                            params.fixed_point_tol,
                            params.fixed_point_max_iter,
                            |y| Ok(spec.generator(t, x, y, zj)),
                        )
                        .map(|fp| fp.value)
                    })
                    .collect::<Result<_>>()?
            } else {
                c
            };
            (y, vec![0.0; paths])
        }
    };
    if let Some(j) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Estimator(format!("Y of path {j} is not finite")));
    }
    Ok(Layer { y, z, u })
}

/// Per-node arrays `Y[j][i]`, `Z[j][i]`, `U[j][i]` of a backward pass.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    partition: Partition,
    num_paths: usize,
    noise_dim: usize,
    variant: SchemeVariant,
    recursion: Recursion,
    a_exponent: f64,
    estimator: EstimatorKind,
    summary: PassSummary,
    /// Step-major: `y[i * M + j]`.
    y: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

struct FullSink {
    paths: usize,
    d: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

impl LayerSink for FullSink {
    fn layer(&mut self, step: usize, y: &[f64], z: &[f64], u: &[f64]) -> Result<()> {
        let p = self.paths;
        self.y[step * p..(step + 1) * p].copy_from_slice(y);
        self.z[step * p * self.d..(step + 1) * p * self.d].copy_from_slice(z);
        self.u[step * p..(step + 1) * p].copy_from_slice(u);
        Ok(())
    }
}

/// Runs the penalized scheme and keeps every layer.
pub fn solve_bsvi(spec: &ProblemSpec, params: &SchemeParams, forward: &ForwardEnsemble) -> Result<BackwardSolution> {
    solve(spec, params, forward, Recursion::Penalized)
}

/// Runs the reflected-forward scheme and keeps every layer.
pub fn solve_generalized(
    spec: &ProblemSpec,
    params: &SchemeParams,
    forward: &ForwardEnsemble,
) -> Result<BackwardSolution> {
    solve(spec, params, forward, Recursion::Generalized)
}

/// Dispatches on whether the forward ensemble is reflected.
pub fn solve_auto(spec: &ProblemSpec, params: &SchemeParams, forward: &ForwardEnsemble) -> Result<BackwardSolution> {
    if forward.is_reflected() {
        solve_generalized(spec, params, forward)
    } else {
        solve_bsvi(spec, params, forward)
    }
}

fn solve(
    spec: &ProblemSpec,
    params: &SchemeParams,
    forward: &ForwardEnsemble,
    recursion: Recursion,
) -> Result<BackwardSolution> {
    let n = forward.partition().steps();
    let paths = forward.num_paths();
    let d = spec.noise_dim();
    let mut sink = FullSink {
        paths,
        d,
        y: vec![0.0; (n + 1) * paths],
        z: vec![0.0; (n + 1) * paths * d],
        u: vec![0.0; (n + 1) * paths],
    };
    let summary = run_backward(spec, params, forward, recursion, &mut sink)?;
    Ok(BackwardSolution {
        partition: *forward.partition(),
        num_paths: paths,
        noise_dim: d,
        variant: params.variant,
        recursion,
        a_exponent: params.a_exponent,
        estimator: params.estimator,
        summary,
        y: sink.y,
        z: sink.z,
        u: sink.u,
    })
}

impl BackwardSolution {
    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn variant(&self) -> SchemeVariant {
        self.variant
    }

    pub fn recursion(&self) -> Recursion {
        self.recursion
    }

    pub fn a_exponent(&self) -> f64 {
        self.a_exponent
    }

    pub fn estimator(&self) -> EstimatorKind {
        self.estimator
    }

    pub fn summary(&self) -> &PassSummary {
        &self.summary
    }

    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[step * self.num_paths + path]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let start = (step * self.num_paths + path) * self.noise_dim;
        &self.z[start..start + self.noise_dim]
    }

    pub fn u(&self, path: usize, step: usize) -> f64 {
        self.u[step * self.num_paths + path]
    }

    /// All `Y` values at one step, indexed by path.
    pub fn step_y(&self, step: usize) -> &[f64] {
        &self.y[step * self.num_paths..(step + 1) * self.num_paths]
    }

    /// All `Z` values at one step, `paths * d`.
    pub fn step_z(&self, step: usize) -> &[f64] {
        let w = self.num_paths * self.noise_dim;
        &self.z[step * w..(step + 1) * w]
    }

    /// Sample mean of `Y` at step 0.
    pub fn initial_value(&self) -> f64 {
        self.step_y(0).iter().sum::<f64>() / self.num_paths as f64
    }

    /// Writes `path,step,t,x0..,y,z0..,u[,a]`, one row per node.
    pub fn write_csv<W: Write>(&self, forward: &ForwardEnsemble, mut w: W) -> Result<()> {
        if forward.num_paths() != self.num_paths || forward.partition() != &self.partition {
            return Err(Error::invalid("forward ensemble does not belong to this solution"));
        }
        let m = forward.state_dim();
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..m).map(|k| format!("x{k}")));
        header.push("y".into());
        header.extend((0..self.noise_dim).map(|k| format!("z{k}")));
        header.push("u".into());
        if forward.is_reflected() {
            header.push("a".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for j in 0..self.num_paths {
            for i in 0..=self.partition.steps() {
                let mut row = vec![j.to_string(), i.to_string(), crate::fmt17(self.partition.time(i))];
                row.extend(forward.state(j, i).iter().map(|&v| crate::fmt17(v)));
                row.push(crate::fmt17(self.y(j, i)));
                row.extend(self.z(j, i).iter().map(|&v| crate::fmt17(v)));
                row.push(crate::fmt17(self.u(j, i)));
                if let Some(a) = forward.boundary(j, i) {
                    row.push(crate::fmt17(a));
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

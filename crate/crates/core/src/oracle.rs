//! Exact dynamic programming on the binary Rademacher tree.
//!
//! Rebuilds the Euler tree from the problem directly, averages over the two
//! children of each node and solves the implicit per-node equation by
//! bisection. Nothing here goes through the regression or fixed-point code,
//! so agreement with [`crate::backward::solve_bsvi`] under `tree_exact` is
//! a genuine check.

use std::sync::Arc;

use crate::backward::{solve_bsvi, BackwardSolution};
use crate::cond_exp::EstimatorKind;
use crate::error::{Error, Result};
use crate::forward::simulate_forward;
use crate::problem::{Partition, ProblemSpec, SchemeParams, SchemeVariant};
use crate::rng::{enumerate_tree, IncrementLaw};

const BISECTION_TOL: f64 = 1e-13;
const BISECTION_MAX_ITER: usize = 400;

/// Node values level by level. Level `i` has `2^i` nodes indexed by the
/// sign prefix, first step in the most significant bit, `1` meaning `-`.
#[derive(Debug, Clone)]
pub struct TreeTable {
    partition: Partition,
    state_dim: usize,
    levels: Vec<Level>,
}

#[derive(Debug, Clone, Default)]
struct Level {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

impl TreeTable {
    pub fn steps(&self) -> usize {
        self.partition.steps()
    }

    pub fn num_nodes(&self, level: usize) -> usize {
        self.levels[level].y.len()
    }

    pub fn x(&self, level: usize, node: usize) -> &[f64] {
        &self.levels[level].x[node * self.state_dim..(node + 1) * self.state_dim]
    }

    pub fn y(&self, level: usize, node: usize) -> f64 {
        self.levels[level].y[node]
    }

    pub fn z(&self, level: usize, node: usize) -> f64 {
        self.levels[level].z[node]
    }

    pub fn u(&self, level: usize, node: usize) -> f64 {
        self.levels[level].u[node]
    }

    /// Largest absolute difference in `Y`, `Z` or `U` against a solution
    /// computed on the enumerated tree with the same partition.
    pub fn max_deviation(&self, solution: &BackwardSolution) -> Result<f64> {
        let n = self.steps();
        if solution.partition() != &self.partition
            || solution.num_paths() != 1 << n
            || solution.noise_dim() != 1
        {
            return Err(Error::invalid("solution is not on this tree"));
        }
        let mut worst = 0.0_f64;
        for i in 0..=n {
            for j in 0..solution.num_paths() {
                let node = j >> (n - i);
                worst = worst
                    .max((self.y(i, node) - solution.y(j, i)).abs())
                    .max((self.z(i, node) - solution.z(j, i)[0]).abs())
                    .max((self.u(i, node) - solution.u(j, i)).abs());
            }
        }
        Ok(worst)
    }
}

/// Solves the penalized scheme exactly on the `2^n`-leaf tree.
pub fn oracle_solve(spec: &ProblemSpec, params: &SchemeParams, steps: usize) -> Result<TreeTable> {
    if spec.noise_dim() != 1 {
        return Err(Error::invalid("the tree oracle needs a single Brownian motion"));
    }
    if spec.domain().is_some() {
        return Err(Error::invalid("the tree oracle does not reflect"));
    }
    if steps == 0 || steps > params.tree_cap {
        return Err(Error::invalid(format!(
            "tree with n = {steps} outside 1..={}",
            params.tree_cap
        )));
    }
    let partition = Partition::for_problem(spec, steps)?;
    let m = spec.state_dim();
    let h = partition.h();
    let sqrt_h = h.sqrt();
    let eps = params.eps(h);

    let mut levels: Vec<Level> = Vec::with_capacity(steps + 1);
    levels.push(Level {
        x: spec.initial_x().to_vec(),
        ..Level::default()
    });
    let mut b = vec![0.0; m];
    let mut s = vec![0.0; m];
    for i in 0..steps {
        let t = partition.time(i);
        let parent = &levels[i].x;
        let mut x = Vec::with_capacity(parent.len() * 2);
        for p in parent.chunks(m) {
            spec.drift(t, p, &mut b);
            spec.diffusion(t, p, &mut s);
            for sign in [1.0, -1.0] {
                x.extend((0..m).map(|k| p[k] + b[k] * h + s[k] * (sign * sqrt_h)));
            }
        }
        levels.push(Level {
            x,
            ..Level::default()
        });
    }

    let phi = spec.phi();
    let leaves = &mut levels[steps];
    leaves.y = leaves.x.chunks(m).map(|x| spec.terminal(x)).collect();
    leaves.z = vec![0.0; leaves.y.len()];
    leaves.u = vec![0.0; leaves.y.len()];

    for i in (0..steps).rev() {
        let t = partition.time(i);
        let nodes = 1usize << i;
        let (y, z, u) = {
            let child = &levels[i + 1].y;
            let xs = &levels[i].x;
            let mut y = Vec::with_capacity(nodes);
            let mut z = Vec::with_capacity(nodes);
            let mut u = Vec::with_capacity(nodes);
            for node in 0..nodes {
                let (up, down) = (child[2 * node], child[2 * node + 1]);
                let x = &xs[node * m..(node + 1) * m];
                let c = 0.5 * (up + down);
                let zn = (up - down) / (2.0 * sqrt_h);
                let yn = match params.variant {
                    SchemeVariant::Implicit => {
                        let residual = |v: f64| -> Result<f64> {
                            Ok(v - c - h * (spec.generator(t, x, v, &[zn]) - phi.yosida_gradient(v, eps)?))
                        };
                        bisect(c, h, &residual).map_err(|e| e.at_step(i))?
                    }
                    SchemeVariant::Explicit => {
                        let bracket = |v: f64| -> Result<f64> {
                            Ok(v + h * (spec.generator(t, x, v, &[zn]) - phi.yosida_gradient(v, eps)?))
                        };
                        0.5 * (bracket(up)? + bracket(down)?)
                    }
                };
                y.push(yn);
                z.push(zn);
                u.push(phi.yosida_gradient(c, eps)?);
            }
            (y, z, u)
        };
        levels[i].y = y;
        levels[i].z = z;
        levels[i].u = u;
    }
    Ok(TreeTable {
        partition,
        state_dim: m,
        levels,
    })
}

/// Runs `solve_bsvi` with `tree_exact` on the enumerated tree and returns
/// its largest node deviation from [`oracle_solve`].
pub fn oracle_deviation(spec: &ProblemSpec, params: &SchemeParams, steps: usize) -> Result<f64> {
    let params = SchemeParams {
        estimator: EstimatorKind::TreeExact,
        law: IncrementLaw::Rademacher,
        ..params.clone()
    };
    let table = oracle_solve(spec, &params, steps)?;
    let inc = enumerate_tree(Partition::for_problem(spec, steps)?, 1, params.tree_cap)?;
    let forward = simulate_forward(spec, Arc::new(inc))?;
    table.max_deviation(&solve_bsvi(spec, &params, &forward)?)
}

/// Root of an increasing `residual` near `c`.
fn bisect(c: f64, h: f64, residual: &dyn Fn(f64) -> Result<f64>) -> Result<f64> {
    let probe = residual(c)?;
    if probe == 0.0 {
        return Ok(c);
    }
    let mut width = h * (probe.abs() / h + 1.0);
    let (mut lo, mut hi);
    let mut expansions = 0;
    loop {
        lo = c - width;
        hi = c + width;
        if residual(lo)? <= 0.0 && residual(hi)? >= 0.0 {
            break;
        }
        width *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Estimator(format!("no sign change around {c}")));
        }
    }
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= BISECTION_TOL * mid.abs().max(1.0) || mid == lo || mid == hi {
            return Ok(mid);
        }
        if residual(mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

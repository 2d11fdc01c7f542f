//! Forward simulators on the nodes of a partition.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt17;
use crate::problem::{Partition, ProblemSpec};
use crate::rng::IncrementEnsemble;

/// Paths are kept in `D` up to this slack on the level function.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Simulated `X[j][i]` (and the boundary process `A[j][i]` when reflected).
#[derive(Debug, Clone)]
pub struct ForwardEnsemble {
    increments: Arc<IncrementEnsemble>,
    state_dim: usize,
    /// Step-major `(n + 1) * M * m`.
    states: Vec<f64>,
    /// Step-major `(n + 1) * M`.
    boundary: Option<Vec<f64>>,
    /// `projected[i * M + j]`: the proposal for `t_{i+1}` left the domain.
    projected: Option<Vec<bool>>,
}

impl ForwardEnsemble {
    pub fn increments(&self) -> &IncrementEnsemble {
        &self.increments
    }

    pub fn shared_increments(&self) -> Arc<IncrementEnsemble> {
        self.increments.clone()
    }

    pub fn partition(&self) -> &Partition {
        self.increments.partition()
    }

    pub fn num_paths(&self) -> usize {
        self.increments.num_paths()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn is_reflected(&self) -> bool {
        self.boundary.is_some()
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let m = self.state_dim;
        let start = (step * self.num_paths() + path) * m;
        &self.states[start..start + m]
    }

    /// States of every path at `t_i`, `M * m` values.
    pub fn step_states(&self, step: usize) -> &[f64] {
        let w = self.num_paths() * self.state_dim;
        &self.states[step * w..(step + 1) * w]
    }

    pub fn boundary(&self, path: usize, step: usize) -> Option<f64> {
        self.boundary
            .as_ref()
            .map(|a| a[step * self.num_paths() + path])
    }

    /// `A` of every path at `t_i`.
    pub fn boundary_step(&self, step: usize) -> Option<&[f64]> {
        let w = self.num_paths();
        self.boundary.as_ref().map(|a| &a[step * w..(step + 1) * w])
    }

    /// Whether the proposal of path `j` for `t_{i+1}` was projected.
    pub fn was_projected(&self, path: usize, step: usize) -> bool {
        self.projected
            .as_ref()
            .is_some_and(|p| p[step * self.num_paths() + path])
    }

    /// CSV with columns `path,step,t,x0..x{m-1}[,a]`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.state_dim;
        let mut header = String::from("path,step,t");
        for k in 0..m {
            header.push_str(&format!(",x{k}"));
        }
        if self.is_reflected() {
            header.push_str(",a");
        }
        writeln!(w, "{header}")?;
        let part = self.partition();
        for j in 0..self.num_paths() {
            for i in 0..=part.steps() {
                let mut line = format!("{j},{i},{}", fmt17(part.time(i)));
                for &v in self.state(j, i) {
                    line.push(',');
                    line.push_str(&fmt17(v));
                }
                if let Some(a) = self.boundary(j, i) {
                    line.push(',');
                    line.push_str(&fmt17(a));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Classical Euler scheme
/// `X_{i+1} = X_i + b(t_i, X_i) h + sigma(t_i, X_i) (W_{t_{i+1}} - W_{t_i})`.
pub fn euler_simulate(spec: &ProblemSpec, increments: Arc<IncrementEnsemble>) -> Result<ForwardEnsemble> {
    if spec.domain().is_some() {
        return Err(Error::invalid(
            "problem has a reflecting domain; use projected_euler_simulate",
        ));
    }
    simulate(spec, increments, false)
}

/// Projected Euler scheme: an unconstrained Euler proposal, projected onto
/// the closed domain when it leaves it, with `A` increased by the distance
/// moved.
pub fn projected_euler_simulate(
    spec: &ProblemSpec,
    increments: Arc<IncrementEnsemble>,
) -> Result<ForwardEnsemble> {
    if spec.domain().is_none() {
        return Err(Error::invalid("problem has no reflecting domain"));
    }
    simulate(spec, increments, true)
}

/// Dispatches on whether `spec` has a domain.
pub fn simulate_forward(spec: &ProblemSpec, increments: Arc<IncrementEnsemble>) -> Result<ForwardEnsemble> {
    let reflected = spec.domain().is_some();
    simulate(spec, increments, reflected)
}

struct Scratch {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    proposal: Vec<f64>,
}

fn simulate(spec: &ProblemSpec, increments: Arc<IncrementEnsemble>, reflected: bool) -> Result<ForwardEnsemble> {
    let part = *increments.partition();
    check_consistent(spec, &increments)?;
    let (m, d) = (spec.state_dim(), spec.noise_dim());
    let num_paths = increments.num_paths();
    let n = part.steps();
    let h = part.h();
    let width = num_paths * m;
    let domain = if reflected { spec.domain() } else { None };

    let mut states = vec![0.0; (n + 1) * width];
    for chunk in states[..width].chunks_mut(m) {
        chunk.copy_from_slice(spec.initial_x());
    }
    let mut boundary = reflected.then(|| vec![0.0; (n + 1) * num_paths]);
    let mut projected = reflected.then(|| vec![false; n * num_paths]);
    let mut moved = vec![0.0; num_paths];
    let mut hit = vec![false; num_paths];

    for i in 0..n {
        let t = part.time(i);
        let (done, rest) = states.split_at_mut((i + 1) * width);
        let current = &done[i * width..];
        let next = &mut rest[..width];
        let dw = increments.step(i);

        next.par_chunks_mut(m)
            .zip(moved.par_iter_mut().zip(hit.par_iter_mut()))
            .enumerate()
            .for_each_init(
                || Scratch {
                    drift: vec![0.0; m],
                    diffusion: vec![0.0; m * d],
                    proposal: vec![0.0; m],
                },
                |s, (j, (out, (dist, outside)))| {
                    let x = &current[j * m..(j + 1) * m];
                    let w = &dw[j * d..(j + 1) * d];
                    spec.drift(t, x, &mut s.drift);
                    spec.diffusion(t, x, &mut s.diffusion);
                    for k in 0..m {
                        let mut noise = 0.0;
                        for l in 0..d {
                            noise += s.diffusion[k * d + l] * w[l];
                        }
                        s.proposal[k] = x[k] + s.drift[k] * h + noise;
                    }
                    *outside = domain.is_some_and(|dom| dom.level(&s.proposal) > 0.0);
                    *dist = match domain {
                        Some(dom) if *outside => dom.project_into(&s.proposal, out),
                        _ => {
                            out.copy_from_slice(&s.proposal);
                            0.0
                        }
                    };
                },
            );

        if let Some(j) = next.chunks(m).position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteState { path: j, step: i + 1 });
        }
        if let (Some(a), Some(flags)) = (boundary.as_mut(), projected.as_mut()) {
            let (before, after) = a.split_at_mut((i + 1) * num_paths);
            let prev = &before[i * num_paths..];
            flags[i * num_paths..(i + 1) * num_paths].copy_from_slice(&hit);
            for j in 0..num_paths {
                after[j] = prev[j] + moved[j];
            }
        }
    }

    Ok(ForwardEnsemble {
        increments,
        state_dim: m,
        states,
        boundary,
        projected,
    })
}

fn check_consistent(spec: &ProblemSpec, increments: &IncrementEnsemble) -> Result<()> {
    let part = increments.partition();
    if increments.noise_dim() != spec.noise_dim() {
        return Err(Error::invalid(format!(
            "increments have d = {}, problem has d = {}",
            increments.noise_dim(),
            spec.noise_dim()
        )));
    }
    if part.start() != spec.start_time() || part.end() != spec.horizon() {
        return Err(Error::invalid(format!(
            "partition [{}, {}] does not match the problem interval [{}, {}]",
            part.start(),
            part.end(),
            spec.start_time(),
            spec.horizon()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::ConvexSet;
    use crate::problem::make_partition;
    use crate::rng::{sample_increments, IncrementLaw};

    fn increments(n: usize, paths: usize, seed: u64) -> Arc<IncrementEnsemble> {
        let part = make_partition(1.0, n).unwrap();
        Arc::new(sample_increments(part, paths, 1, IncrementLaw::Gaussian, seed).unwrap())
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let spec = ProblemSpec::builder(2, 1).initial_x(vec![0.3, -1.0]).build().unwrap();
        let f = euler_simulate(&spec, increments(5, 7, 1)).unwrap();
        for j in 0..7 {
            for i in 0..=5 {
                assert_eq!(f.state(j, i), &[0.3, -1.0]);
            }
        }
    }

    #[test]
    fn constant_drift_is_exact() {
        let spec = ProblemSpec::builder(1, 1)
            .scalar_drift(|_, _| 1.0)
            .initial_x(vec![0.5])
            .build()
            .unwrap();
        let f = euler_simulate(&spec, increments(4, 3, 2)).unwrap();
        for i in 0..=4 {
            assert_eq!(f.state(2, i)[0], 0.5 + 0.25 * i as f64);
        }
    }

    #[test]
    fn reflected_problem_needs_projected_scheme() {
        let spec = ProblemSpec::builder(1, 1)
            .domain(ConvexSet::interval(-1.0, 1.0).unwrap())
            .build()
            .unwrap();
        assert!(euler_simulate(&spec, increments(2, 2, 0)).is_err());
        let free = ProblemSpec::builder(1, 1).build().unwrap();
        assert!(projected_euler_simulate(&free, increments(2, 2, 0)).is_err());
    }

    #[test]
    fn no_projection_inside_domain() {
        let spec = ProblemSpec::builder(1, 1)
            .initial_x(vec![0.2])
            .domain(ConvexSet::interval(-1.0, 1.0).unwrap())
            .build()
            .unwrap();
        let f = projected_euler_simulate(&spec, increments(6, 4, 0)).unwrap();
        for j in 0..4 {
            for i in 0..=6 {
                assert_eq!(f.boundary(j, i), Some(0.0));
                assert_eq!(f.state(j, i), &[0.2]);
            }
        }
    }

    #[test]
    fn injected_proposal_is_clamped() {
        let spec = ProblemSpec::builder(1, 1)
            .scalar_diffusion(|_, _| 1.0)
            .initial_x(vec![0.5])
            .domain(ConvexSet::interval(f64::NEG_INFINITY, 1.0).unwrap())
            .build()
            .unwrap();
        let part = make_partition(1.0, 1).unwrap();
        let inc = IncrementEnsemble::from_values(part, 1, 1, &[0.7]).unwrap();
        let f = projected_euler_simulate(&spec, Arc::new(inc)).unwrap();
        assert_eq!(f.state(0, 1), &[1.0]);
        assert!((f.boundary(0, 1).unwrap() - 0.2).abs() < 1e-15);
        assert!(f.was_projected(0, 0));
    }

    #[test]
    fn drift_into_unit_ball() {
        // Hand recursion, h = 1/4: proposals 0.5, 1.0 (on the boundary, kept),
        // 1.5 -> 1 (dA = 0.5), 1.5 -> 1 (dA = 0.5).
        let spec = ProblemSpec::builder(1, 1)
            .scalar_drift(|_, _| 2.0)
            .domain(ConvexSet::ball(vec![0.0], 1.0).unwrap())
            .build()
            .unwrap();
        let f = projected_euler_simulate(&spec, increments(4, 1, 0)).unwrap();
        let xs: Vec<f64> = (0..=4).map(|i| f.state(0, i)[0]).collect();
        let a: Vec<f64> = (0..=4).map(|i| f.boundary(0, i).unwrap()).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(a, vec![0.0, 0.0, 0.0, 0.5, 1.0]);
        assert_eq!((0..4).map(|i| f.was_projected(0, i)).collect::<Vec<_>>(), vec![false, false, true, true]);
    }

    #[test]
    fn blow_up_is_reported() {
        let spec = ProblemSpec::builder(1, 1)
            .scalar_drift(|_, x| if x > 0.2 { f64::NAN } else { 1.0 })
            .build()
            .unwrap();
        let err = euler_simulate(&spec, increments(4, 2, 0)).unwrap_err();
        assert_eq!(err, Error::NonFiniteState { path: 0, step: 2 });
    }

    #[test]
    fn mismatched_horizon_is_rejected() {
        let spec = ProblemSpec::builder(1, 1).horizon(2.0).build().unwrap();
        assert!(euler_simulate(&spec, increments(4, 2, 0)).is_err());
    }

    #[test]
    fn projected_matches_plain_when_paths_stay_inside() {
        let spec = ProblemSpec::builder(1, 1)
            .scalar_drift(|_, x| -x)
            .scalar_diffusion(|_, _| 0.3)
            .build()
            .unwrap();
        let inc = increments(32, 50, 4);
        let free = euler_simulate(&spec, inc.clone()).unwrap();
        let reflected_spec = spec
            .with_domain(Some(ConvexSet::interval(-100.0, 100.0).unwrap()))
            .unwrap();
        let refl = projected_euler_simulate(&reflected_spec, inc).unwrap();
        for i in 0..=32 {
            assert_eq!(free.step_states(i), refl.step_states(i));
            assert!(refl.boundary_step(i).unwrap().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let spec = ProblemSpec::builder(1, 1)
            .domain(ConvexSet::interval(-1.0, 1.0).unwrap())
            .build()
            .unwrap();
        let f = projected_euler_simulate(&spec, increments(2, 2, 0)).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,x0,a");
        assert_eq!(lines.len(), 1 + 2 * 3);
    }
}

//! Convergence studies: error of the backward scheme against a reference
//! across a list of step counts, with seed replication and rate fits.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use crate::backward::{run_backward, solve_bsvi, solve_generalized, BackwardSolution, LayerSink, Recursion};
use crate::cond_exp::EstimatorKind;
use crate::config::{Config, Reference};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward, ForwardEnsemble};
use crate::problem::{Partition, ProblemSpec, SchemeParams};
use crate::registry::{analytic_solution, build_problem, AnalyticSolution};
use crate::rng::{enumerate_tree, sample_increments, IncrementEnsemble, IncrementLaw};

/// Rows whose replicate spread exceeds this fraction of the mean error are
/// flagged unreliable.
pub const UNRELIABLE_SPREAD: f64 = 0.3;
/// Errors within this multiple of the estimated noise floor are treated as
/// statistical noise.
pub const NOISE_FLOOR_FACTOR: f64 = 5.0;

pub const CSV_HEADER: &str =
    "n,h,eps,error_y_sup,error_z_l2,error_y_int,noise_floor_y,spread_y,wall_time";

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub h: f64,
    pub eps: f64,
    /// `max_i mean_j |dY|^2`, averaged over replicates.
    pub error_y_sup: f64,
    /// `mean_j sum_i h |dZ|^2`.
    pub error_z_l2: f64,
    /// `mean_j sum_i h |dY|^2`.
    pub error_y_int: f64,
    pub noise_floor_y: f64,
    /// Sample standard deviation of `error_y_sup` across replicates.
    pub spread_y: f64,
    /// Seconds spent on this `n`, all replicates.
    pub wall_time: f64,
}

impl StudyRow {
    pub fn is_unreliable(&self) -> bool {
        self.spread_y > UNRELIABLE_SPREAD * self.error_y_sup
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<StudyRow>,
    pub reference: Reference,
    pub replicates: usize,
    /// Slope of `log error_y_sup` against `log h`; absent if not fittable.
    pub rate_y: Option<f64>,
    pub rate_z: Option<f64>,
}

impl ConvergenceReport {
    /// Every `error_y_sup` lies within the noise-floor band.
    pub fn at_noise_floor(&self) -> bool {
        !self.rows.is_empty()
            && self
                .rows
                .iter()
                .all(|r| r.error_y_sup <= NOISE_FLOOR_FACTOR * r.noise_floor_y)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            let floats = [
                r.h,
                r.eps,
                r.error_y_sup,
                r.error_z_l2,
                r.error_y_int,
                r.noise_floor_y,
                r.spread_y,
                r.wall_time,
            ];
            let cells: Vec<String> = floats.iter().map(|&v| crate::fmt17(v)).collect();
            writeln!(w, "{},{}", r.n, cells.join(","))?;
        }
        Ok(())
    }

    /// Human-readable rate lines with annotations.
    pub fn summary(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.at_noise_floor() {
            notes.push("at noise floor".to_string());
        }
        let shaky: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.is_unreliable())
            .map(|r| r.n.to_string())
            .collect();
        if !shaky.is_empty() {
            notes.push(format!("unreliable (n = {})", shaky.join(", ")));
        }
        let suffix = if notes.is_empty() {
            String::new()
        } else {
            format!(" [{}]", notes.join("; "))
        };
        let show = |r: Option<f64>| r.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        vec![
            format!("reference: {} ({} replicates)", self.reference, self.replicates),
            format!("rate_y = {}{suffix}", show(self.rate_y)),
            format!("rate_z = {}", show(self.rate_z)),
        ]
    }
}

/// Least-squares slope of `log error` against `log h`.
pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::invalid("a rate needs at least two points"));
    }
    if pairs.iter().any(|&(h, e)| !(h > 0.0 && e > 0.0 && h.is_finite() && e.is_finite())) {
        return Err(Error::invalid("rate fit needs positive finite (h, error) pairs"));
    }
    let k = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("rate fit needs at least two distinct h"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Runs the study in `cfg` on a pool of `cfg.study.workers` threads.
pub fn run_study(cfg: &Config) -> Result<ConvergenceReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.study.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| study(cfg))
}

/// Errors of one replicate at one `n`.
#[derive(Debug, Clone, Copy, Default)]
struct Errors {
    y_sup: f64,
    z_l2: f64,
    y_int: f64,
    floor: f64,
    seconds: f64,
}

fn study(cfg: &Config) -> Result<ConvergenceReport> {
    let spec = build_problem(&cfg.problem)?;
    let steps = &cfg.study.steps;
    if steps.is_empty() {
        return Err(Error::invalid("the study needs at least one n"));
    }
    let params = &cfg.scheme;
    let analytic = match &cfg.study.reference {
        Reference::Analytic(name) => Some(analytic_solution(name, &cfg.problem)?),
        Reference::SelfRef(n_ref) => {
            if let Some(n) = steps.iter().find(|&&n| n_ref % n != 0) {
                return Err(Error::invalid(format!("n_ref = {n_ref} is not a multiple of n = {n}")));
            }
            if params.estimator == EstimatorKind::TreeExact || params.law != IncrementLaw::Gaussian {
                return Err(Error::invalid("a self reference needs sampled gaussian increments"));
            }
            None
        }
    };

    let mut per_n: Vec<Vec<Errors>> = vec![Vec::new(); steps.len()];
    for r in 0..cfg.study.replicates {
        let seed = params.seed.wrapping_add(r as u64);
        let replicate = SchemeParams { seed, ..params.clone() };
        let errors = match &analytic {
            Some(reference) => analytic_replicate(&spec, &replicate, steps, reference)?,
            None => {
                let Reference::SelfRef(n_ref) = cfg.study.reference else { unreachable!() };
                self_replicate(&spec, &replicate, steps, n_ref)?
            }
        };
        for (slot, e) in per_n.iter_mut().zip(errors) {
            slot.push(e);
        }
    }

    let rows: Vec<StudyRow> = steps
        .iter()
        .zip(&per_n)
        .map(|(&n, reps)| {
            let k = reps.len() as f64;
            let mean = |f: fn(&Errors) -> f64| reps.iter().map(f).sum::<f64>() / k;
            let y_sup = mean(|e| e.y_sup);
            let spread = if reps.len() > 1 {
                (reps.iter().map(|e| (e.y_sup - y_sup).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            let h = Partition::for_problem(&spec, n).map(|p| p.h()).unwrap_or(f64::NAN);
            StudyRow {
                n,
                h,
                eps: params.eps(h),
                error_y_sup: y_sup,
                error_z_l2: mean(|e| e.z_l2),
                error_y_int: mean(|e| e.y_int),
                noise_floor_y: mean(|e| e.floor),
                spread_y: spread,
                wall_time: reps.iter().map(|e| e.seconds).sum(),
            }
        })
        .collect();
    let rate_y = fit_rate(&rows.iter().map(|r| (r.h, r.error_y_sup)).collect::<Vec<_>>()).ok();
    let rate_z = fit_rate(&rows.iter().map(|r| (r.h, r.error_z_l2)).collect::<Vec<_>>()).ok();
    Ok(ConvergenceReport {
        rows,
        reference: cfg.study.reference.clone(),
        replicates: cfg.study.replicates,
        rate_y,
        rate_z,
    })
}

fn recursion_for(spec: &ProblemSpec) -> Recursion {
    if spec.domain().is_some() {
        Recursion::Generalized
    } else {
        Recursion::Penalized
    }
}

fn solve(spec: &ProblemSpec, params: &SchemeParams, forward: &ForwardEnsemble) -> Result<BackwardSolution> {
    match recursion_for(spec) {
        Recursion::Penalized => solve_bsvi(spec, params, forward),
        Recursion::Generalized => solve_generalized(spec, params, forward),
    }
}

/// Increments for every `n`: coarsened from one fine gaussian draw when
/// possible, otherwise drawn (or enumerated) separately.
fn increments_for(spec: &ProblemSpec, params: &SchemeParams, steps: &[usize]) -> Result<Vec<IncrementEnsemble>> {
    let d = spec.noise_dim();
    if params.estimator == EstimatorKind::TreeExact {
        return steps
            .iter()
            .map(|&n| enumerate_tree(Partition::for_problem(spec, n)?, d, params.tree_cap))
            .collect();
    }
    if params.law == IncrementLaw::Gaussian {
        let lcm = steps.iter().fold(1usize, |acc, &n| acc / gcd(acc, n) * n);
        let base = sample_increments(
            Partition::for_problem(spec, lcm)?,
            params.num_paths,
            d,
            params.law,
            params.seed,
        )?;
        return steps.iter().map(|&n| base.coarsen(lcm / n)).collect();
    }
    steps
        .iter()
        .map(|&n| sample_increments(Partition::for_problem(spec, n)?, params.num_paths, d, params.law, params.seed))
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn analytic_replicate(
    spec: &ProblemSpec,
    params: &SchemeParams,
    steps: &[usize],
    reference: &AnalyticSolution,
) -> Result<Vec<Errors>> {
    let ensembles = increments_for(spec, params, steps)?;
    let m = spec.state_dim();
    ensembles
        .into_iter()
        .map(|inc| {
            let started = Instant::now();
            let forward = simulate_forward(spec, Arc::new(inc))?;
            let sol = solve(spec, params, &forward)?;
            let part = *forward.partition();
            let (n, h, paths) = (part.steps(), part.h(), forward.num_paths());
            let mut e = Errors {
                floor: sol.summary().noise_floor,
                ..Errors::default()
            };
            let mut z_acc = 0.0;
            let mut y_acc = 0.0;
            for i in 0..=n {
                let t = part.time(i);
                let mut sq = 0.0;
                let mut zsq = 0.0;
                for j in 0..paths {
                    let x = &forward.step_states(i)[j * m..(j + 1) * m];
                    sq += (reference.y(t, x) - sol.y(j, i)).powi(2);
                    if i < n {
                        zsq += (reference.z(t, x) - sol.z(j, i)[0]).powi(2);
                    }
                }
                e.y_sup = e.y_sup.max(sq / paths as f64);
                if i < n {
                    y_acc += h * sq;
                    z_acc += h * zsq;
                }
            }
            e.y_int = y_acc / paths as f64;
            e.z_l2 = z_acc / paths as f64;
            e.seconds = started.elapsed().as_secs_f64();
            Ok(e)
        })
        .collect()
}

/// Keeps the fine `Y` at every `stride`-th node and the sums of `Z` and
/// `Z^2` over each block of `stride` fine steps.
struct FineSink {
    paths: usize,
    d: usize,
    stride: usize,
    y: Vec<f64>,
    z_sum: Vec<f64>,
    z_sq: Vec<f64>,
}

impl LayerSink for FineSink {
    fn layer(&mut self, step: usize, y: &[f64], z: &[f64], _u: &[f64]) -> Result<()> {
        let p = self.paths;
        if step.is_multiple_of(self.stride) {
            let node = step / self.stride;
            self.y[node * p..(node + 1) * p].copy_from_slice(y);
        }
        let block = step / self.stride;
        let w = p * self.d;
        if block * w < self.z_sum.len() {
            let (sum, sq) = (
                &mut self.z_sum[block * w..(block + 1) * w],
                &mut self.z_sq[block * w..(block + 1) * w],
            );
            for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(z) {
                *s += v;
                *q += v * v;
            }
        }
        Ok(())
    }
}

fn self_replicate(spec: &ProblemSpec, params: &SchemeParams, steps: &[usize], n_ref: usize) -> Result<Vec<Errors>> {
    let d = spec.noise_dim();
    let paths = params.num_paths;
    let fine_part = Partition::for_problem(spec, n_ref)?;
    let fine_inc = Arc::new(sample_increments(fine_part, paths, d, params.law, params.seed)?);
    let n_max = *steps.last().expect("nonempty");
    let stride = n_ref / n_max;

    let mut sink = FineSink {
        paths,
        d,
        stride,
        y: vec![0.0; (n_max + 1) * paths],
        z_sum: vec![0.0; n_max * paths * d],
        z_sq: vec![0.0; n_max * paths * d],
    };
    let fine_floor = {
        let forward = simulate_forward(spec, Arc::clone(&fine_inc))?;
        run_backward(spec, params, &forward, recursion_for(spec), &mut sink)?.noise_floor
    };
    let h_fine = fine_part.h();

    steps
        .iter()
        .map(|&n| {
            let started = Instant::now();
            let inc = fine_inc.coarsen(n_ref / n)?;
            let forward = simulate_forward(spec, Arc::new(inc))?;
            let sol = solve(spec, params, &forward)?;
            let h = forward.partition().h();
            let q = n_max / n;
            let r = (n_ref / n) as f64;
            let mut e = Errors {
                floor: sol.summary().noise_floor + fine_floor,
                ..Errors::default()
            };
            let (mut y_acc, mut z_acc) = (0.0, 0.0);
            for i in 0..=n {
                let fine_y = &sink.y[i * q * paths..(i * q + 1) * paths];
                let sq: f64 = fine_y
                    .iter()
                    .zip(sol.step_y(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                e.y_sup = e.y_sup.max(sq / paths as f64);
                if i == n {
                    continue;
                }
                y_acc += h * sq;
                let coarse_z = sol.step_z(i);
                for (c, zc) in coarse_z.iter().enumerate() {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for b in i * q..(i + 1) * q {
                        s1 += sink.z_sum[b * paths * d + c];
                        s2 += sink.z_sq[b * paths * d + c];
                    }
                    z_acc += h_fine * (s2 - 2.0 * zc * s1 + r * zc * zc).max(0.0);
                }
            }
            e.y_int = y_acc / paths as f64;
            e.z_l2 = z_acc / paths as f64;
            e.seconds = started.elapsed().as_secs_f64();
            Ok(e)
        })
        .collect()
}

/// Forward ensemble and backward solution of the configured problem at a
/// single `n`, with the configured seed.
pub fn solve_single(cfg: &Config, n: usize) -> Result<(ForwardEnsemble, BackwardSolution)> {
    let spec = build_problem(&cfg.problem)?;
    let inc = increments_for(&spec, &cfg.scheme, &[n])?.pop().expect("one ensemble");
    let forward = simulate_forward(&spec, Arc::new(inc))?;
    let sol = solve(&spec, &cfg.scheme, &forward)?;
    Ok((forward, sol))
}

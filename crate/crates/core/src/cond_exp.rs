//! Estimators of `E(V | X_{t_i})` from simulated samples.
//!
//! A [`RegressionBasis`] is prepared once per time step from the states
//! `X[.][i]` and then fitted against several targets (the next `Y`, the
//! `Y dW` products for `Z`, the explicit-scheme bracket). Every fitted value
//! is a function of the sample's own state only.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Least squares on all monomials of the state up to a total degree.
    LsmcPoly { degree: usize },
    /// Equal-count bins on the first state coordinate.
    Binning { bins: usize },
    /// Exact averages over the enumerated Rademacher tree.
    TreeExact,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::LsmcPoly { degree } => write!(f, "lsmc_poly({degree})"),
            EstimatorKind::Binning { bins } => write!(f, "binning({bins})"),
            EstimatorKind::TreeExact => write!(f, "tree_exact"),
        }
    }
}

/// Where step `i` sits in a full `2^(n d)` sign-pattern enumeration. Paths
/// sharing the first `i` steps form contiguous blocks of `2^((n - i) d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeLayout {
    pub steps: usize,
    pub noise_dim: usize,
    pub step: usize,
}

impl TreeLayout {
    pub fn num_paths(&self) -> usize {
        1 << (self.steps * self.noise_dim)
    }

    pub fn block_size(&self) -> usize {
        1 << ((self.steps - self.step) * self.noise_dim)
    }
}

/// A fitted conditional expectation, evaluable at any state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEstimator {
    dim: usize,
    state: EstimatorState,
}

#[derive(Debug, Clone, PartialEq)]
enum EstimatorState {
    Poly {
        monomials: Vec<Vec<u32>>,
        centre: Vec<f64>,
        scale: Vec<f64>,
        coefficients: Vec<f64>,
        clip: Option<(f64, f64)>,
    },
    Bins {
        lower: Vec<f64>,
        means: Vec<f64>,
    },
    Tree {
        /// One representative state per block, `blocks * dim`.
        states: Vec<f64>,
        values: Vec<f64>,
    },
}

impl ConditionalEstimator {
    pub fn evaluate(&self, state: &[f64]) -> f64 {
        debug_assert_eq!(state.len(), self.dim);
        match &self.state {
            EstimatorState::Poly {
                monomials,
                centre,
                scale,
                coefficients,
                clip,
            } => {
                let z: Vec<f64> = state
                    .iter()
                    .zip(centre.iter().zip(scale))
                    .map(|(x, (c, s))| (x - c) / s)
                    .collect();
                let v: f64 = monomials
                    .iter()
                    .zip(coefficients)
                    .map(|(e, b)| b * monomial(&z, e))
                    .sum();
                match clip {
                    Some((lo, hi)) => v.clamp(*lo, *hi),
                    None => v,
                }
            }
            EstimatorState::Bins { lower, means } => {
                let idx = lower.partition_point(|&l| l <= state[0]).saturating_sub(1);
                means[idx]
            }
            EstimatorState::Tree { states, values } => {
                let mut best = (f64::INFINITY, 0);
                for (b, s) in states.chunks(self.dim).enumerate() {
                    let d2: f64 = s.iter().zip(state).map(|(a, x)| (a - x) * (a - x)).sum();
                    if d2 < best.0 {
                        best = (d2, b);
                        if d2 == 0.0 {
                            break;
                        }
                    }
                }
                values[best.1]
            }
        }
    }
}

/// Free-function form of [`ConditionalEstimator::evaluate`].
pub fn evaluate_conditional(estimator: &ConditionalEstimator, state: &[f64]) -> f64 {
    estimator.evaluate(state)
}

/// Output of one fit: the estimator and its in-sample values.
#[derive(Debug, Clone)]
pub struct FittedConditional {
    pub estimator: ConditionalEstimator,
    pub fitted: Vec<f64>,
    /// Mean squared in-sample residual.
    pub residual_mean_square: f64,
    /// Effective number of fitted parameters.
    pub dof: usize,
}

/// Per-step design shared by every target fitted at that step.
#[derive(Debug, Clone)]
pub struct RegressionBasis {
    dim: usize,
    num: usize,
    kind: Prepared,
}

#[derive(Debug, Clone)]
enum Prepared {
    Poly {
        monomials: Vec<Vec<u32>>,
        centre: Vec<f64>,
        scale: Vec<f64>,
        /// Row-major `num * p`.
        design: Vec<f64>,
        eigenvectors: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        rank: usize,
        condition: f64,
        clip: bool,
    },
    Bins {
        lower: Vec<f64>,
        assignment: Vec<usize>,
        counts: Vec<usize>,
    },
    Tree {
        block: usize,
        states: Vec<f64>,
    },
}

impl RegressionBasis {
    /// Prepares the design for `states` (`M * dim`, sample-major).
    /// `tree` is required for [`EstimatorKind::TreeExact`].
    pub fn prepare(
        states: &[f64],
        dim: usize,
        kind: EstimatorKind,
        tree: Option<TreeLayout>,
        clip: bool,
    ) -> Result<Self> {
        if dim == 0 || states.is_empty() || !states.len().is_multiple_of(dim) {
            return Err(Error::Estimator(format!(
                "{} state values do not form samples of dimension {dim}",
                states.len()
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimator("non-finite state".into()));
        }
        let num = states.len() / dim;
        let kind = match kind {
            EstimatorKind::LsmcPoly { degree } => prepare_poly(states, dim, num, degree, clip)?,
            EstimatorKind::Binning { bins } => prepare_bins(states, dim, num, bins)?,
            EstimatorKind::TreeExact => {
                let layout = tree.ok_or_else(|| {
                    Error::Estimator("tree_exact needs an enumerated Rademacher ensemble".into())
                })?;
                if layout.step > layout.steps || layout.num_paths() != num {
                    return Err(Error::Estimator(format!(
                        "tree layout {layout:?} does not match {num} samples"
                    )));
                }
                Prepared::Tree {
                    block: layout.block_size(),
                    states: states.to_vec(),
                }
            }
        };
        Ok(Self { dim, num, kind })
    }

    pub fn num_samples(&self) -> usize {
        self.num
    }

    /// Number of basis functions (bins, blocks) the estimator can use.
    pub fn dof(&self) -> usize {
        match &self.kind {
            Prepared::Poly { rank, .. } => *rank,
            Prepared::Bins { counts, .. } => counts.len(),
            Prepared::Tree { block, .. } => self.num / block,
        }
    }

    /// Condition number of the retained part of the Gram matrix (1 for
    /// binning and trees).
    pub fn condition(&self) -> f64 {
        match &self.kind {
            Prepared::Poly { condition, .. } => *condition,
            _ => 1.0,
        }
    }

    /// Least-squares projection of `values` onto the estimator class.
    pub fn fit(&self, values: &[f64]) -> Result<FittedConditional> {
        if values.len() != self.num {
            return Err(Error::Estimator(format!(
                "{} values for {} samples",
                values.len(),
                self.num
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimator("non-finite regression target".into()));
        }
        let (estimator, fitted) = match &self.kind {
            Prepared::Poly {
                monomials,
                centre,
                scale,
                design,
                eigenvectors,
                eigenvalues,
                clip,
                ..
            } => {
                let p = monomials.len();
                let mut rhs = vec![0.0; p];
                for (row, &v) in design.chunks(p).zip(values) {
                    for (r, f) in rhs.iter_mut().zip(row) {
                        *r += f * v;
                    }
                }
                let rhs = DVector::from_vec(rhs);
                let mut coefficients = vec![0.0; p];
                let lead = eigenvalues.iter().cloned().fold(0.0, f64::max);
                for (k, &lambda) in eigenvalues.iter().enumerate() {
                    if lambda > RANK_TOL * lead {
                        let v = eigenvectors.column(k);
                        let proj = v.dot(&rhs) / lambda;
                        for (c, vk) in coefficients.iter_mut().zip(v.iter()) {
                            *c += proj * vk;
                        }
                    }
                }
                let range = clip.then(|| min_max(values));
                let fitted: Vec<f64> = design
                    .chunks(p)
                    .map(|row| {
                        let v: f64 = row.iter().zip(&coefficients).map(|(f, b)| f * b).sum();
                        match range {
                            Some((lo, hi)) => v.clamp(lo, hi),
                            None => v,
                        }
                    })
                    .collect();
                let est = EstimatorState::Poly {
                    monomials: monomials.clone(),
                    centre: centre.clone(),
                    scale: scale.clone(),
                    coefficients,
                    clip: range,
                };
                (est, fitted)
            }
            Prepared::Bins {
                lower,
                assignment,
                counts,
            } => {
                let mut sums = vec![0.0; counts.len()];
                for (&b, &v) in assignment.iter().zip(values) {
                    sums[b] += v;
                }
                let means: Vec<f64> = sums
                    .iter()
                    .zip(counts)
                    .map(|(s, &c)| s / c as f64)
                    .collect();
                let fitted = assignment.iter().map(|&b| means[b]).collect();
                (
                    EstimatorState::Bins {
                        lower: lower.clone(),
                        means,
                    },
                    fitted,
                )
            }
            Prepared::Tree { block, states } => {
                let means: Vec<f64> = values
                    .chunks(*block)
                    .map(|c| pairwise_sum(c) / *block as f64)
                    .collect();
                let fitted = means
                    .iter()
                    .flat_map(|&m| std::iter::repeat_n(m, *block))
                    .collect();
                let reps = states
                    .chunks(self.dim * block)
                    .flat_map(|c| c[..self.dim].iter().copied())
                    .collect();
                (
                    EstimatorState::Tree {
                        states: reps,
                        values: means,
                    },
                    fitted,
                )
            }
        };
        let residual_mean_square = values
            .iter()
            .zip(&fitted)
            .map(|(v, f)| (v - f) * (v - f))
            .sum::<f64>()
            / self.num as f64;
        Ok(FittedConditional {
            estimator: ConditionalEstimator {
                dim: self.dim,
                state: estimator,
            },
            fitted,
            residual_mean_square,
            dof: self.dof(),
        })
    }

    /// `Z_k = E(V dW_k | X) / h` for each Brownian component; `increments`
    /// holds `M * d` values. Returns one fit per component, already scaled.
    pub fn fit_z(&self, next_values: &[f64], increments: &[f64], h: f64) -> Result<Vec<FittedConditional>> {
        if next_values.len() != self.num || !increments.len().is_multiple_of(self.num) || increments.is_empty() {
            return Err(Error::Estimator("increment block does not match the sample count".into()));
        }
        let d = increments.len() / self.num;
        (0..d)
            .map(|k| {
                let target: Vec<f64> = next_values
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * increments[j * d + k])
                    .collect();
                let mut fit = self.fit(&target)?;
                fit.fitted.iter_mut().for_each(|v| *v /= h);
                fit.estimator.scale_output(1.0 / h);
                Ok(fit)
            })
            .collect()
    }
}

impl ConditionalEstimator {
    fn scale_output(&mut self, factor: f64) {
        match &mut self.state {
            EstimatorState::Poly {
                coefficients, clip, ..
            } => {
                coefficients.iter_mut().for_each(|c| *c *= factor);
                if let Some((lo, hi)) = clip {
                    let (a, b) = (*lo * factor, *hi * factor);
                    *clip = Some((a.min(b), a.max(b)));
                }
            }
            EstimatorState::Bins { means, .. } => means.iter_mut().for_each(|m| *m *= factor),
            EstimatorState::Tree { values, .. } => values.iter_mut().for_each(|v| *v *= factor),
        }
    }
}

/// Fits `E(values | states)` with a freshly prepared basis.
pub fn fit_conditional(
    values: &[f64],
    states: &[f64],
    dim: usize,
    kind: EstimatorKind,
    tree: Option<TreeLayout>,
) -> Result<ConditionalEstimator> {
    Ok(RegressionBasis::prepare(states, dim, kind, tree, false)?
        .fit(values)?
        .estimator)
}

/// Fits `Z = E(next_values * dW | states) / h`, one estimator per component.
pub fn fit_z_regression(
    next_values: &[f64],
    increments: &[f64],
    states: &[f64],
    dim: usize,
    kind: EstimatorKind,
    h: f64,
    tree: Option<TreeLayout>,
) -> Result<Vec<ConditionalEstimator>> {
    let basis = RegressionBasis::prepare(states, dim, kind, tree, false)?;
    Ok(basis
        .fit_z(next_values, increments, h)?
        .into_iter()
        .map(|f| f.estimator)
        .collect())
}

fn prepare_poly(states: &[f64], dim: usize, num: usize, degree: usize, clip: bool) -> Result<Prepared> {
    let monomials = monomial_exponents(dim, degree);
    let p = monomials.len();

    let mut centre = vec![0.0; dim];
    for x in states.chunks(dim) {
        for (c, v) in centre.iter_mut().zip(x) {
            *c += v;
        }
    }
    centre.iter_mut().for_each(|c| *c /= num as f64);
    let mut scale = vec![0.0; dim];
    for x in states.chunks(dim) {
        for ((s, v), c) in scale.iter_mut().zip(x).zip(&centre) {
            *s += (v - c) * (v - c);
        }
    }
    for s in scale.iter_mut() {
        *s = (*s / num as f64).sqrt();
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }

    let mut design = Vec::with_capacity(num * p);
    let mut z = vec![0.0; dim];
    for x in states.chunks(dim) {
        for k in 0..dim {
            z[k] = (x[k] - centre[k]) / scale[k];
        }
        design.extend(monomials.iter().map(|e| monomial(&z, e)));
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for row in design.chunks(p) {
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(gram);
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let lead = eigenvalues.iter().cloned().fold(0.0, f64::max);
    let retained: Vec<f64> = eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > RANK_TOL * lead)
        .collect();
    let smallest = retained.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if retained.is_empty() { f64::INFINITY } else { lead / smallest };
    if num < p {
        let full = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::Underdetermined {
            samples: num,
            features: p,
            condition: if full > 0.0 { lead / full } else { f64::INFINITY },
        });
    }
    if retained.is_empty() {
        return Err(Error::Underdetermined {
            samples: num,
            features: p,
            condition,
        });
    }
    Ok(Prepared::Poly {
        monomials,
        centre,
        scale,
        design,
        eigenvectors: eig.eigenvectors,
        eigenvalues,
        rank: retained.len(),
        condition,
        clip,
    })
}

fn prepare_bins(states: &[f64], dim: usize, num: usize, bins: usize) -> Result<Prepared> {
    if bins == 0 {
        return Err(Error::Estimator("binning needs at least one bin".into()));
    }
    let first: Vec<f64> = states.chunks(dim).map(|x| x[0]).collect();
    let mut sorted = first.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let edges: Vec<f64> = (1..bins)
        .filter_map(|k| sorted.get(k * num / bins).copied())
        .collect();
    let raw: Vec<usize> = first
        .iter()
        .map(|&x| edges.partition_point(|&e| e <= x))
        .collect();

    // Drop empty bins; equal states always share a bin.
    let mut compact = vec![usize::MAX; edges.len() + 1];
    let mut lower = Vec::new();
    let mut counts = Vec::new();
    let mut order: Vec<usize> = (0..num).collect();
    order.sort_by(|&a, &b| first[a].total_cmp(&first[b]).then(a.cmp(&b)));
    for &j in &order {
        let r = raw[j];
        if compact[r] == usize::MAX {
            compact[r] = lower.len();
            lower.push(first[j]);
            counts.push(0);
        }
        counts[compact[r]] += 1;
    }
    let assignment = raw.iter().map(|&r| compact[r]).collect();
    Ok(Prepared::Bins {
        lower,
        assignment,
        counts,
    })
}

/// Exponent vectors of all monomials in `dim` variables of total degree at
/// most `degree`, graded by degree.
fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut current = vec![0u32; dim];
        compositions(total, 0, &mut current, &mut out);
    }
    out
}

fn compositions(remaining: u32, k: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if k + 1 == current.len() {
        current[k] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[k] = e;
        compositions(remaining - e, k + 1, current, out);
    }
}

fn monomial(z: &[f64], exponents: &[u32]) -> f64 {
    z.iter()
        .zip(exponents)
        .map(|(v, &e)| v.powi(e as i32))
        .product()
}

/// Halving sum; exact on power-of-two blocks made of constant halves.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        len => {
            let (a, b) = v.split_at(len / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [problem]
//! name = bm_abs
//! phi = indicator:[0,inf)
//!
//! [scheme]
//! a = 1/3
//! paths = 10000
//! estimator = lsmc
//!
//! [study]
//! n = 16, 32, 64, 128
//! reference = self:4096
//! ```
//!
//! Lines starting with `#` or `;` are comments. Unknown sections, unknown
//! keys and repeated keys are errors.

use std::collections::HashSet;
use std::path::Path;

use crate::cond_exp::EstimatorKind;
use crate::error::{Error, Result};
use crate::problem::{SchemeParams, SchemeVariant};
use crate::registry::ProblemConfig;
use crate::rng::IncrementLaw;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reference {
    /// Closed-form solution from the registry.
    Analytic(String),
    /// Fine run with `n_ref` steps on the refined increments.
    SelfRef(usize),
}

impl std::fmt::Display for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Analytic(name) => write!(f, "analytic:{name}"),
            Reference::SelfRef(n) => write!(f, "self:{n}"),
        }
    }
}

impl std::str::FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(name) = s.strip_prefix("analytic:") {
            Ok(Reference::Analytic(name.trim().to_string()))
        } else if let Some(n) = s.strip_prefix("self:") {
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad reference step count `{n}`")))?;
            if n == 0 {
                return Err(Error::invalid("reference step count must be positive"));
            }
            Ok(Reference::SelfRef(n))
        } else {
            Err(Error::invalid(format!(
                "reference must be `analytic:<name>` or `self:<n_ref>`, got `{s}`"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyConfig {
    pub steps: Vec<usize>,
    pub reference: Reference,
    pub replicates: usize,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub problem: ProblemConfig,
    pub scheme: SchemeParams,
    pub study: StudyConfig,
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<Config> {
    let mut problem = ProblemConfig::default();
    let mut scheme = SchemeParams::default();
    let mut steps: Option<Vec<usize>> = None;
    let mut reference: Option<Reference> = None;
    let mut replicates = 3;
    let mut workers = 1;
    let mut estimator: Option<String> = None;
    let mut degree = 3;
    let mut bins = 32;
    let mut law: Option<IncrementLaw> = None;

    let mut section = String::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fail = |message: String| Error::Config {
            line: line_no,
            message,
        };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !matches!(name, "problem" | "scheme" | "study") {
                return Err(fail(format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if section.is_empty() {
            return Err(fail(format!("`{key}` appears before any section")));
        }
        if !seen.insert(format!("{section}.{key}")) {
            return Err(fail(format!("duplicate key `{key}` in [{section}]")));
        }
        let wrap = |e: Error| match e {
            Error::InvalidInput(m) => fail(m),
            other => fail(other.to_string()),
        };
        match (section.as_str(), key) {
            ("problem", "name") => problem.name = value.to_string(),
            ("problem", "x0") => problem.x0 = Some(number(value).map_err(wrap)?),
            ("problem", "horizon") => problem.horizon = Some(number(value).map_err(wrap)?),
            ("problem", "phi") => problem.phi = Some(value.parse().map_err(wrap)?),
            ("problem", "mu") => problem.mu = Some(number(value).map_err(wrap)?),
            ("problem", "sigma") => problem.sigma = Some(number(value).map_err(wrap)?),
            ("problem", "rate") => problem.rate = Some(number(value).map_err(wrap)?),
            ("problem", "drift") => problem.drift = Some(number(value).map_err(wrap)?),
            ("problem", "domain") => problem.domain = Some(value.parse().map_err(wrap)?),
            ("problem", "boundary_g") => problem.boundary_g = Some(number(value).map_err(wrap)?),
            ("problem", "lipschitz") => problem.lipschitz = Some(number(value).map_err(wrap)?),
            ("scheme", "a") => scheme.a_exponent = number(value).map_err(wrap)?,
            ("scheme", "paths") => scheme.num_paths = integer(value).map_err(wrap)?,
            ("scheme", "estimator") => estimator = Some(value.to_string()),
            ("scheme", "degree") => degree = integer(value).map_err(wrap)?,
            ("scheme", "bins") => bins = integer(value).map_err(wrap)?,
            ("scheme", "variant") => {
                scheme.variant = match value {
                    "implicit" => SchemeVariant::Implicit,
                    "explicit" => SchemeVariant::Explicit,
                    _ => return Err(fail(format!("variant must be implicit or explicit, got `{value}`"))),
                }
            }
            ("scheme", "seed") => scheme.seed = value.parse().map_err(|_| fail(format!("bad seed `{value}`")))?,
            ("scheme", "law") => law = Some(value.parse().map_err(wrap)?),
            ("scheme", "fp_tol") => scheme.fixed_point_tol = number(value).map_err(wrap)?,
            ("scheme", "fp_max_iter") => scheme.fixed_point_max_iter = integer(value).map_err(wrap)?,
            ("scheme", "clip") => scheme.clip_regression = boolean(value).map_err(wrap)?,
            ("scheme", "tree_cap") => scheme.tree_cap = integer(value).map_err(wrap)?,
            ("scheme", "generalized_generator") => {
                scheme.generalized_with_generator = boolean(value).map_err(wrap)?
            }
            ("study", "n") => {
                let list = value
                    .split(',')
                    .map(|v| integer(v.trim()))
                    .collect::<Result<Vec<usize>>>()
                    .map_err(wrap)?;
                steps = Some(list);
            }
            ("study", "reference") => reference = Some(value.parse().map_err(wrap)?),
            ("study", "replicates") => replicates = integer(value).map_err(wrap)?,
            ("study", "workers") => workers = integer(value).map_err(wrap)?,
            _ => return Err(fail(format!("unknown key `{key}` in [{section}]"))),
        }
    }

    if problem.name.is_empty() {
        return Err(Error::Config {
            line: 0,
            message: "[problem] name is required".into(),
        });
    }
    scheme.estimator = match estimator.as_deref().unwrap_or("lsmc") {
        "lsmc" => EstimatorKind::LsmcPoly { degree },
        "binning" => EstimatorKind::Binning { bins },
        "tree" => EstimatorKind::TreeExact,
        other => {
            return Err(Error::Config {
                line: 0,
                message: format!("estimator must be lsmc, binning or tree, got `{other}`"),
            })
        }
    };
    scheme.law = law.unwrap_or(if scheme.estimator == EstimatorKind::TreeExact {
        IncrementLaw::Rademacher
    } else {
        IncrementLaw::Gaussian
    });

    let mut steps = steps.unwrap_or_else(|| vec![16, 32, 64, 128]);
    steps.sort_unstable();
    steps.dedup();
    if steps.first() == Some(&0) {
        return Err(Error::Config {
            line: 0,
            message: "step counts must be positive".into(),
        });
    }
    let reference = match reference {
        Some(r) => r,
        None => default_reference(&problem.name, &steps),
    };
    if replicates == 0 || workers == 0 {
        return Err(Error::Config {
            line: 0,
            message: "replicates and workers must be positive".into(),
        });
    }
    Ok(Config {
        problem,
        scheme,
        study: StudyConfig {
            steps,
            reference,
            replicates,
            workers,
        },
    })
}

/// The registry's closed form if one exists, otherwise a fine run with at
/// least eight times the largest `n` that every `n` divides.
fn default_reference(problem: &str, steps: &[usize]) -> Reference {
    if let Some(name) = crate::registry::PROBLEMS
        .iter()
        .find(|p| p.name == problem)
        .and_then(|p| p.analytic)
    {
        return Reference::Analytic(name.to_string());
    }
    let lcm = steps.iter().fold(1usize, |acc, &n| acc / gcd(acc, n) * n);
    let target = 8 * steps.last().copied().unwrap_or(1);
    Reference::SelfRef(lcm * target.div_ceil(lcm))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A real number or a fraction `p/q`.
fn number(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((p, q)) => crate::convex::parse_real(p)? / crate::convex::parse_real(q)?,
        None => crate::convex::parse_real(s)?,
    };
    if v.is_nan() {
        return Err(Error::invalid(format!("not a number: `{s}`")));
    }
    Ok(v)
}

fn integer(s: &str) -> Result<usize> {
    s.replace('_', "")
        .parse::<usize>()
        .or_else(|_| {
            // Allow `1e4` style counts when they are exact integers.
            let v: f64 = s.parse().map_err(|_| ())?;
            if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
                Ok(v as usize)
            } else {
                Err(())
            }
        })
        .map_err(|_| Error::invalid(format!("not a nonnegative integer: `{s}`")))
}

fn boolean(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("not a boolean: `{s}`"))),
    }
}

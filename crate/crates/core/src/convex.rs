//! Convex-analysis kernel for scalar proper convex lsc functions.
//!
//! A [`ConvexFunction`] knows how to evaluate itself, report its
//! subdifferential as a closed interval, and compute the Moreau resolvent
//! `J_eps = (I + eps * dphi)^{-1}` together with the Yosida approximation
//! `grad phi_eps(x) = (x - J_eps(x)) / eps`. Catalog entries use closed forms;
//! custom functions go through a safeguarded one-dimensional minimizer.
//!
//! [`ConvexSet`] covers the Euclidean projections used by the reflected
//! forward scheme.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Iteration budget shared by the golden-section and bisection stages.
pub const RESOLVENT_MAX_ITER: usize = 200;
/// Tolerance used when testing membership in a subdifferential interval.
pub const INCLUSION_TOL: f64 = 1e-9;

/// Closed interval `[lo, hi]` of the extended reals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subdifferential {
    pub lo: f64,
    pub hi: f64,
}

impl Subdifferential {
    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi);
        Self { lo, hi }
    }

    /// Membership with an absolute slack of `tol` on both ends.
    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    /// Element of minimal absolute value.
    pub fn min_norm(&self) -> f64 {
        0.0_f64.clamp(self.lo, self.hi)
    }
}

type ValueFn = dyn Fn(f64) -> f64 + Send + Sync;
type SubdiffFn = dyn Fn(f64) -> Option<Subdifferential> + Send + Sync;

struct CustomParts {
    name: String,
    value: Box<ValueFn>,
    subdifferential: Box<SubdiffFn>,
}

/// Which member of the catalog a function is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvexKind {
    Zero,
    /// `c * y^2 / 2`, `c >= 0`.
    Quadratic(f64),
    /// `c * |y|`, `c >= 0`.
    Abs(f64),
    /// Indicator of `[lo, hi]`; either end may be infinite.
    IndicatorInterval { lo: f64, hi: f64 },
    /// Indicator of `{p}`.
    IndicatorPoint(f64),
    Custom,
}

#[derive(Clone)]
pub struct ConvexFunction {
    kind: ConvexKind,
    custom: Option<Arc<CustomParts>>,
    anchor: Option<f64>,
}

impl fmt::Debug for ConvexFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConvexFunction({self})")
    }
}

impl ConvexFunction {
    pub fn zero() -> Self {
        Self::catalog(ConvexKind::Zero)
    }

    pub fn quadratic(c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::invalid(format!("quadratic coefficient must be >= 0, got {c}")));
        }
        Ok(Self::catalog(ConvexKind::Quadratic(c)))
    }

    pub fn abs(c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::invalid(format!("abs coefficient must be >= 0, got {c}")));
        }
        Ok(Self::catalog(ConvexKind::Abs(c)))
    }

    pub fn indicator_interval(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY
        {
            return Err(Error::invalid(format!("empty indicator interval [{lo}, {hi}]")));
        }
        Ok(Self::catalog(ConvexKind::IndicatorInterval { lo, hi }))
    }

    pub fn indicator_point(p: f64) -> Result<Self> {
        if !p.is_finite() {
            return Err(Error::invalid(format!("indicator point must be finite, got {p}")));
        }
        Ok(Self::catalog(ConvexKind::IndicatorPoint(p)))
    }

    /// A user-supplied convex function. `subdifferential` must return `None`
    /// exactly outside the domain of the subdifferential. The resolvent is
    /// computed numerically.
    pub fn custom<V, S>(name: impl Into<String>, value: V, subdifferential: S) -> Self
    where
        V: Fn(f64) -> f64 + Send + Sync + 'static,
        S: Fn(f64) -> Option<Subdifferential> + Send + Sync + 'static,
    {
        Self {
            kind: ConvexKind::Custom,
            custom: Some(Arc::new(CustomParts {
                name: name.into(),
                value: Box::new(value),
                subdifferential: Box::new(subdifferential),
            })),
            anchor: None,
        }
    }

    /// Supplies a point of `dom dphi` for custom functions whose domain is
    /// not found by the default probe sequence.
    pub fn with_anchor(mut self, anchor: f64) -> Self {
        self.anchor = Some(anchor);
        self
    }

    fn catalog(kind: ConvexKind) -> Self {
        Self {
            kind,
            custom: None,
            anchor: None,
        }
    }

    pub fn kind(&self) -> ConvexKind {
        self.kind
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ConvexKind::Zero)
    }

    /// `phi(y)`, `+inf` outside the domain.
    pub fn evaluate(&self, y: f64) -> f64 {
        match self.kind {
            ConvexKind::Zero => 0.0,
            ConvexKind::Quadratic(c) => 0.5 * c * y * y,
            ConvexKind::Abs(c) => c * y.abs(),
            ConvexKind::IndicatorInterval { lo, hi } => {
                if y >= lo && y <= hi {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexKind::IndicatorPoint(p) => {
                if y == p {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexKind::Custom => (self.parts().value)(y),
        }
    }

    /// `dphi(y)` as a closed interval, `None` when empty.
    pub fn subdifferential(&self, y: f64) -> Option<Subdifferential> {
        match self.kind {
            ConvexKind::Zero => Some(Subdifferential::point(0.0)),
            ConvexKind::Quadratic(c) => Some(Subdifferential::point(c * y)),
            ConvexKind::Abs(c) => Some(if y > 0.0 {
                Subdifferential::point(c)
            } else if y < 0.0 {
                Subdifferential::point(-c)
            } else {
                Subdifferential::new(-c, c)
            }),
            ConvexKind::IndicatorInterval { lo, hi } => interval_normal_cone(y, lo, hi),
            ConvexKind::IndicatorPoint(p) => interval_normal_cone(y, p, p),
            ConvexKind::Custom => (self.parts().subdifferential)(y),
        }
    }

    /// Moreau resolvent `J_eps(x)`: the minimizer of `phi(y) + |y - x|^2 / (2 eps)`.
    pub fn resolvent(&self, x: f64, eps: f64) -> Result<f64> {
        check_eps(eps)?;
        Ok(match self.kind {
            ConvexKind::Zero => x,
            ConvexKind::Quadratic(c) => x / (1.0 + eps * c),
            ConvexKind::Abs(c) => soft_threshold(x, eps * c),
            ConvexKind::IndicatorInterval { lo, hi } => x.clamp(lo, hi),
            ConvexKind::IndicatorPoint(p) => p,
            ConvexKind::Custom => return self.numeric_resolvent(x, eps),
        })
    }

    /// Yosida approximation `(x - J_eps(x)) / eps`, an element of `dphi(J_eps(x))`.
    pub fn yosida_gradient(&self, x: f64, eps: f64) -> Result<f64> {
        check_eps(eps)?;
        Ok(match self.kind {
            ConvexKind::Zero => 0.0,
            ConvexKind::Quadratic(c) => c * x / (1.0 + eps * c),
            ConvexKind::Abs(c) => (x / eps).clamp(-c, c),
            ConvexKind::IndicatorInterval { .. }
            | ConvexKind::IndicatorPoint(_)
            | ConvexKind::Custom => (x - self.resolvent(x, eps)?) / eps,
        })
    }

    /// Resolvent computed by golden-section localization followed by bisection
    /// on the optimality inclusion `x - y in eps * dphi(y)`. Used for custom
    /// functions; exposed so catalog closed forms can be cross-checked.
    pub fn numeric_resolvent(&self, x: f64, eps: f64) -> Result<f64> {
        check_eps(eps)?;
        if !x.is_finite() {
            return Err(Error::invalid(format!("resolvent argument must be finite, got {x}")));
        }
        let (anchor, slope) = self.anchor(x)?;
        // J_eps(anchor + eps * slope) = anchor, and J_eps is nonexpansive.
        let radius = (x - anchor - eps * slope).abs();
        if radius == 0.0 {
            return Ok(anchor);
        }
        let mut lo = anchor - radius;
        let mut hi = anchor + radius;

        let objective = |y: f64| {
            let d = y - x;
            self.evaluate(y) + d * d / (2.0 * eps)
        };
        let (glo, ghi, mut iterations) = golden_localize(objective, lo, hi, 1e-3 * radius);
        if self.side(glo, x, eps, anchor) != Side::Above
            && self.side(ghi, x, eps, anchor) != Side::Below
        {
            lo = glo;
            hi = ghi;
        }

        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 2.0 * f64::EPSILON * mid.abs().max(1e-12) {
                return Ok(mid);
            }
            if iterations >= RESOLVENT_MAX_ITER {
                return Err(Error::ResolventNoConvergence {
                    iterations,
                    width: hi - lo,
                });
            }
            iterations += 1;
            match self.side(mid, x, eps, anchor) {
                Side::Inside => return Ok(mid),
                Side::Below => lo = mid,
                Side::Above => hi = mid,
            }
        }
    }

    /// Where `y` sits relative to `J_eps(x)`.
    fn side(&self, y: f64, x: f64, eps: f64, anchor: f64) -> Side {
        match self.subdifferential(y) {
            None => {
                if y < anchor {
                    Side::Below
                } else {
                    Side::Above
                }
            }
            Some(s) => {
                if y - x + eps * s.lo > 0.0 {
                    Side::Above
                } else if y - x + eps * s.hi < 0.0 {
                    Side::Below
                } else {
                    Side::Inside
                }
            }
        }
    }

    /// A point of `dom dphi` and its minimal-norm subgradient.
    fn anchor(&self, x: f64) -> Result<(f64, f64)> {
        let hinted = match self.kind {
            ConvexKind::Zero | ConvexKind::Quadratic(_) | ConvexKind::Abs(_) => Some(0.0),
            ConvexKind::IndicatorInterval { lo, hi } => Some(0.0_f64.clamp(lo, hi)),
            ConvexKind::IndicatorPoint(p) => Some(p),
            ConvexKind::Custom => self.anchor,
        };
        let probes = hinted.into_iter().chain([x, 0.0]).chain((0..62).flat_map(|k| {
            let v = (1u64 << k) as f64;
            [v, -v]
        }));
        for y in probes {
            if let Some(s) = self.subdifferential(y) {
                let slope = s.min_norm();
                if slope.is_finite() {
                    return Ok((y, slope));
                }
            }
        }
        Err(Error::invalid(format!("no point of dom dphi found for {self}")))
    }

    fn parts(&self) -> &CustomParts {
        self.custom
            .as_deref()
            .expect("custom convex function without parts")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Below,
    Inside,
    Above,
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("eps must be positive and finite, got {eps}")))
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn interval_normal_cone(y: f64, lo: f64, hi: f64) -> Option<Subdifferential> {
    if y < lo || y > hi || y.is_nan() {
        return None;
    }
    let left = if y == lo { f64::NEG_INFINITY } else { 0.0 };
    let right = if y == hi { f64::INFINITY } else { 0.0 };
    Some(Subdifferential::new(left, right))
}

/// Shrinks `[lo, hi]` around the minimizer of a unimodal `f` until the width
/// drops below `target`. Returns the bracket and the iterations used.
fn golden_localize<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, target: f64) -> (f64, f64, usize) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iterations = 0;
    while hi - lo > target && iterations < RESOLVENT_MAX_ITER / 2 {
        iterations += 1;
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    (lo, hi, iterations)
}

impl fmt::Display for ConvexFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ConvexKind::Zero => write!(f, "zero"),
            ConvexKind::Quadratic(c) => write!(f, "quadratic:{c}"),
            ConvexKind::Abs(c) => write!(f, "abs:{c}"),
            ConvexKind::IndicatorInterval { lo, hi } => write!(f, "indicator:[{lo},{hi}]"),
            ConvexKind::IndicatorPoint(p) => write!(f, "indicator_point:{p}"),
            ConvexKind::Custom => write!(f, "custom:{}", self.parts().name),
        }
    }
}

/// Parses the catalog syntax
/// `zero | quadratic:c | abs:c | indicator:[l,u] | indicator_point:p`.
impl FromStr for ConvexFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s, None),
        };
        let number = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| Error::invalid(format!("`{head}` needs an argument")))?;
            parse_real(a)
        };
        match head {
            "zero" if arg.is_none() => Ok(Self::zero()),
            "quadratic" => Self::quadratic(number(arg)?),
            "abs" => Self::abs(number(arg)?),
            "indicator_point" => Self::indicator_point(number(arg)?),
            "indicator" => {
                let (lo, hi) = parse_bracket_pair(arg.unwrap_or(""))?;
                Self::indicator_interval(lo, hi)
            }
            _ => Err(Error::invalid(format!("unknown convex function `{s}`"))),
        }
    }
}

/// Real number with `inf`/`-inf` accepted.
pub(crate) fn parse_real(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::invalid(format!("not a number: `{s}`")))
}

/// `[a,b]`, `[a,b)`, `(a,b]` or `(a,b)`; open/closed brackets are treated
/// alike (closures are what matter for lsc indicators).
pub(crate) fn parse_bracket_pair(s: &str) -> Result<(f64, f64)> {
    let s = s.trim();
    let inner = s
        .strip_prefix(['[', '('])
        .and_then(|r| r.strip_suffix([']', ')']))
        .ok_or_else(|| Error::invalid(format!("expected `[l,u]`, got `{s}`")))?;
    let (a, b) = inner
        .split_once(',')
        .ok_or_else(|| Error::invalid(format!("expected `[l,u]`, got `{s}`")))?;
    Ok((parse_real(a)?, parse_real(b)?))
}

/// Closed convex sets with closed-form Euclidean projections.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    /// Product of identical intervals `[lo, hi]^k` (a plain interval in 1D).
    Interval { lo: f64, hi: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    /// `{x : normal . x <= offset}` with a unit `normal`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
}

impl ConvexSet {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY
        {
            return Err(Error::invalid(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(ConvexSet::Interval { lo, hi })
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("ball radius must be >= 0, got {radius}")));
        }
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("ball center must be a finite nonempty vector"));
        }
        Ok(ConvexSet::Ball { center, radius })
    }

    /// Normalizes `normal` so that the level function has unit gradient.
    pub fn halfspace(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let norm = euclid(&normal);
        if !(norm > 0.0 && norm.is_finite()) || !offset.is_finite() {
            return Err(Error::invalid("halfspace needs a nonzero finite normal"));
        }
        Ok(ConvexSet::HalfSpace {
            normal: normal.iter().map(|v| v / norm).collect(),
            offset: offset / norm,
        })
    }

    /// Dimension the set is tied to, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ConvexSet::Interval { .. } => None,
            ConvexSet::Ball { center, .. } => Some(center.len()),
            ConvexSet::HalfSpace { normal, .. } => Some(normal.len()),
        }
    }

    /// Level function `l` with `D = {l < 0}`; `|grad l| = 1` on the boundary.
    pub fn level(&self, x: &[f64]) -> f64 {
        match self {
            ConvexSet::Interval { lo, hi } => x
                .iter()
                .map(|&v| (lo - v).max(v - hi))
                .fold(f64::NEG_INFINITY, f64::max),
            ConvexSet::Ball { center, radius } => dist(x, center) - radius,
            ConvexSet::HalfSpace { normal, offset } => dot(normal, x) - offset,
        }
    }

    /// Outward unit normal direction of the level function at `x`.
    pub fn level_gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self {
            ConvexSet::Interval { lo, hi } => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = (0, 0.0);
                for (k, &v) in x.iter().enumerate() {
                    let (val, dir) = if lo - v > v - hi { (lo - v, -1.0) } else { (v - hi, 1.0) };
                    if val > best {
                        best = val;
                        arg = (k, dir);
                    }
                }
                if !out.is_empty() {
                    out[arg.0] = arg.1;
                }
            }
            ConvexSet::Ball { center, .. } => {
                let r = dist(x, center);
                if r > 0.0 {
                    for (o, (xv, cv)) in out.iter_mut().zip(x.iter().zip(center)) {
                        *o = (xv - cv) / r;
                    }
                }
            }
            ConvexSet::HalfSpace { normal, .. } => out.copy_from_slice(normal),
        }
    }

    /// Writes the Euclidean projection of `x` into `out` and returns `|x - out|`.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        match self {
            ConvexSet::Interval { lo, hi } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = v.clamp(*lo, *hi);
                }
            }
            ConvexSet::Ball { center, radius } => {
                let r = dist(x, center);
                if r <= *radius {
                    out.copy_from_slice(x);
                } else {
                    let s = radius / r;
                    for (o, (xv, cv)) in out.iter_mut().zip(x.iter().zip(center)) {
                        *o = cv + s * (xv - cv);
                    }
                }
            }
            ConvexSet::HalfSpace { normal, offset } => {
                let excess = dot(normal, x) - offset;
                if excess <= 0.0 {
                    out.copy_from_slice(x);
                } else {
                    for (o, (xv, nv)) in out.iter_mut().zip(x.iter().zip(normal)) {
                        *o = xv - excess * nv;
                    }
                }
            }
        }
        dist(x, out)
    }
}

/// Euclidean projection onto `set`, returning the point and the distance moved.
pub fn project_to_convex(set: &ConvexSet, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if let Some(dim) = set.dim() {
        if dim != x.len() {
            return Err(Error::invalid(format!(
                "point has dimension {}, set has dimension {dim}",
                x.len()
            )));
        }
    }
    let mut out = vec![0.0; x.len()];
    let d = set.project_into(x, &mut out);
    Ok((out, d))
}

/// Parses `interval:[l,u]`, `ball:r@c1,c2,...` or `halfspace:n1,n2,...@offset`.
impl FromStr for ConvexSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("unknown domain `{s}`")))?;
        let list = |v: &str| -> Result<Vec<f64>> { v.split(',').map(parse_real).collect() };
        match head.trim() {
            "interval" => {
                let (lo, hi) = parse_bracket_pair(arg)?;
                ConvexSet::interval(lo, hi)
            }
            "ball" => {
                let (r, c) = arg
                    .split_once('@')
                    .ok_or_else(|| Error::invalid(format!("expected `ball:r@center`, got `{s}`")))?;
                ConvexSet::ball(list(c)?, parse_real(r)?)
            }
            "halfspace" => {
                let (n, b) = arg.split_once('@').ok_or_else(|| {
                    Error::invalid(format!("expected `halfspace:normal@offset`, got `{s}`"))
                })?;
                ConvexSet::halfspace(list(n)?, parse_real(b)?)
            }
            _ => Err(Error::invalid(format!("unknown domain `{s}`"))),
        }
    }
}

impl fmt::Display for ConvexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            ConvexSet::Interval { lo, hi } => write!(f, "interval:[{lo},{hi}]"),
            ConvexSet::Ball { center, radius } => write!(f, "ball:{radius}@{}", join(center)),
            ConvexSet::HalfSpace { normal, offset } => {
                write!(f, "halfspace:{}@{offset}", join(normal))
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn euclid(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

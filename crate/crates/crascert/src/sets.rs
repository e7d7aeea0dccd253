//! Semialgebraic set utilities: sublevel sets with bounding boxes, interval
//! arithmetic for one-step reachable-set over-approximation, closed-form
//! monomial moments over balls and boxes, and uniform rejection sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::poly::{Monomial, Var};
use crate::spec::SystemSpec;
use crate::Polynomial;

/// Closed interval [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn add(self, o: Interval) -> Interval {
        Interval::new(self.lo + o.lo, self.hi + o.hi)
    }

    pub fn mul(self, o: Interval) -> Interval {
        let c = [
            self.lo * o.lo,
            self.lo * o.hi,
            self.hi * o.lo,
            self.hi * o.hi,
        ];
        Interval::new(
            c.iter().cloned().fold(f64::INFINITY, f64::min),
            c.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn powi(self, k: u32) -> Interval {
        if k == 0 {
            return Interval::point(1.0);
        }
        let (plo, phi) = (self.lo.powi(k as i32), self.hi.powi(k as i32));
        if k % 2 == 1 {
            Interval::new(plo, phi)
        } else if self.lo >= 0.0 {
            Interval::new(plo, phi)
        } else if self.hi <= 0.0 {
            Interval::new(phi, plo)
        } else {
            Interval::new(0.0, plo.max(phi))
        }
    }

    pub fn scale(self, k: f64) -> Interval {
        if k >= 0.0 {
            Interval::new(self.lo * k, self.hi * k)
        } else {
            Interval::new(self.hi * k, self.lo * k)
        }
    }

    pub fn mag(self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn width(self) -> f64 {
        self.hi - self.lo
    }
}

/// Interval extension of a polynomial over a box.
pub fn interval_eval(p: &Polynomial, boxmap: &BTreeMap<Var, Interval>) -> Result<Interval> {
    let mut acc = Interval::point(0.0);
    for (m, c) in p.terms() {
        let mut t = Interval::point(*c);
        for (v, pow) in m.powers() {
            let iv = boxmap
                .get(v)
                .ok_or_else(|| Error::UnassignedVariable(v.to_string()))?;
            t = t.mul(iv.powi(pow));
        }
        acc = acc.add(t);
    }
    Ok(acc)
}

/// Recognized geometric shape of a sublevel set.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// {x | a·(Σ(x_i - c_i)^2 - r^2) < 0} with a > 0.
    Ball { center: Vec<f64>, radius: f64 },
    General,
}

/// A set {x | p(x) < 0} (or ≤ 0) together with a bounding box.
#[derive(Debug, Clone)]
pub struct SublevelSet {
    pub defining: Polynomial,
    pub strict: bool,
    pub vars: Vec<Var>,
    pub bounding_box: Vec<Interval>,
    pub shape: Shape,
}

/// Detect the ball form Σ a(x_i - c_i)^2 - a r^2 over the given variables.
pub fn detect_ball(p: &Polynomial, vars: &[Var]) -> Option<(Vec<f64>, f64)> {
    let mut quad = vec![0.0; vars.len()];
    let mut lin = vec![0.0; vars.len()];
    let mut cst = 0.0;
    for (m, c) in p.terms() {
        let powers: Vec<_> = m.powers().collect();
        match powers.as_slice() {
            [] => cst = *c,
            [(v, 1)] => {
                let i = vars.iter().position(|w| w == *v)?;
                lin[i] = *c;
            }
            [(v, 2)] => {
                let i = vars.iter().position(|w| w == *v)?;
                quad[i] = *c;
            }
            _ => return None,
        }
    }
    let a = quad[0];
    if a <= 0.0 {
        return None;
    }
    for q in &quad {
        if (q - a).abs() > 1e-9 * a.abs() {
            return None;
        }
    }
    let center: Vec<f64> = lin.iter().map(|b| -b / (2.0 * a)).collect();
    let r2 = center.iter().map(|c| c * c).sum::<f64>() - cst / a;
    if r2 <= 0.0 {
        return None;
    }
    Some((center, r2.sqrt()))
}

impl SublevelSet {
    /// Build a sublevel set, deriving the bounding box from the recognized
    /// shape. Errors when no box can be derived.
    pub fn new(defining: Polynomial, strict: bool, vars: Vec<Var>) -> Result<Self> {
        match detect_ball(&defining, &vars) {
            Some((center, radius)) => {
                let bounding_box = center
                    .iter()
                    .map(|c| Interval::new(c - radius, c + radius))
                    .collect();
                Ok(SublevelSet {
                    defining,
                    strict,
                    vars,
                    bounding_box,
                    shape: Shape::Ball { center, radius },
                })
            }
            None => Err(Error::UnsupportedSetShape(format!(
                "no bounding box derivable for `{defining}`; only ball-form sets are recognized"
            ))),
        }
    }

    /// Build with an explicit bounding box (for general defining polynomials).
    pub fn with_box(
        defining: Polynomial,
        strict: bool,
        vars: Vec<Var>,
        bounding_box: Vec<Interval>,
    ) -> Self {
        let shape = match detect_ball(&defining, &vars) {
            Some((center, radius)) => Shape::Ball { center, radius },
            None => Shape::General,
        };
        SublevelSet {
            defining,
            strict,
            vars,
            bounding_box,
            shape,
        }
    }

    pub fn box_map(&self) -> BTreeMap<Var, Interval> {
        self.vars
            .iter()
            .cloned()
            .zip(self.bounding_box.iter().cloned())
            .collect()
    }

    pub fn contains(&self, value: f64) -> bool {
        if self.strict {
            value < 0.0
        } else {
            value <= 0.0
        }
    }

    /// Uniform samples over the set via rejection from the bounding box.
    /// Deterministic for a fixed seed, independent of the worker count.
    pub fn sample_uniform(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let eval = self.defining.evaluator(&self.vars)?;
        let strict = self.strict;
        sample_where(&self.bounding_box, n, seed, move |pt| {
            let v = eval.eval(pt);
            if strict {
                v < 0.0
            } else {
                v <= 0.0
            }
        })
    }
}

/// A coordinate box, used for the input set U.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invariant("input box", "lower/upper length mismatch"));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if l >= u {
                return Err(Error::invariant(
                    "input box",
                    format!("lower bound {l} not below upper bound {u}"),
                ));
            }
        }
        Ok(BoxSet { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .product()
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| Interval::new(l, u))
            .collect()
    }

    pub fn min_half_width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Rejection-sample `n` points from `bounding_box` satisfying `pred`.
/// Work is split into fixed chunks with per-chunk derived seeds so the
/// result does not depend on the thread count.
pub fn sample_where<F>(
    bounding_box: &[Interval],
    n: usize,
    seed: u64,
    pred: F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> bool + Sync,
{
    if n == 0 {
        return Ok(Vec::new());
    }
    const CHUNK: usize = 8192;
    let n_chunks = n.div_ceil(CHUNK);
    // total proposal budget 1e8 at the minimum acceptance rate 1e-6
    let limit_per_point = (1e8 / n as f64).ceil().max(1e2) as usize;
    let chunks: Vec<Result<Vec<Vec<f64>>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let quota = CHUNK.min(n - ci * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(ci as u64 + 1)));
            let mut out = Vec::with_capacity(quota);
            let mut proposals = 0usize;
            let budget = quota * limit_per_point;
            let mut pt = vec![0.0; bounding_box.len()];
            while out.len() < quota {
                if proposals >= budget {
                    return Err(Error::ThinSet);
                }
                for (x, iv) in pt.iter_mut().zip(bounding_box) {
                    *x = rng.gen_range(iv.lo..iv.hi);
                }
                proposals += 1;
                if pred(&pt) {
                    out.push(pt.clone());
                }
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Γ(k/2) for integer k ≥ 1.
fn gamma_half(k: u32) -> f64 {
    let mut z = k as f64 / 2.0;
    let mut acc = 1.0;
    while z > 1.0 {
        z -= 1.0;
        acc *= z;
    }
    if (z - 0.5).abs() < 1e-12 {
        acc * std::f64::consts::PI.sqrt()
    } else {
        acc // Γ(1) = 1
    }
}

/// ∫ over the centered n-ball of radius r of Π x_i^{e_i}; 0 for odd exponents.
fn centered_ball_moment(exps: &[u32], n: usize, radius: f64) -> f64 {
    if exps.iter().any(|e| e % 2 == 1) {
        return 0.0;
    }
    let total: u32 = exps.iter().sum();
    let mut num = 1.0;
    for i in 0..n {
        let e = exps.get(i).copied().unwrap_or(0);
        num *= gamma_half(e + 1);
    }
    let denom = gamma_full((n as u32 + total) as f64 / 2.0 + 1.0);
    radius.powi((total + n as u32) as i32) * num / denom
}

/// Γ(z) for z a positive integer or half-integer.
fn gamma_full(z: f64) -> f64 {
    let k = (2.0 * z).round() as u32;
    gamma_half(k)
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// ∫ over the ball B(center, r) of x^exps, via shift to the centered ball.
pub fn ball_moment(center: &[f64], radius: f64, exps: &[u32]) -> f64 {
    let n = center.len();
    let mut exps = exps.to_vec();
    exps.resize(n, 0);
    // expand Π (y_i + c_i)^{e_i} over the centered ball
    let mut acc = 0.0;
    let mut beta = vec![0u32; n];
    loop {
        let mut coef = 1.0;
        for i in 0..n {
            coef *= binomial(exps[i], beta[i]) * center[i].powi((exps[i] - beta[i]) as i32);
        }
        if coef != 0.0 {
            acc += coef * centered_ball_moment(&beta, n, radius);
        }
        // next multi-index β ≤ exps
        let mut i = 0;
        loop {
            if i == n {
                return acc;
            }
            if beta[i] < exps[i] {
                beta[i] += 1;
                break;
            }
            beta[i] = 0;
            i += 1;
        }
    }
}

/// ∫ over a box of x^exps: product of per-axis power-rule integrals.
pub fn box_moment(intervals: &[Interval], exps: &[u32]) -> f64 {
    intervals
        .iter()
        .enumerate()
        .map(|(i, iv)| {
            let k = exps.get(i).copied().unwrap_or(0) as i32;
            (iv.hi.powi(k + 1) - iv.lo.powi(k + 1)) / (k + 1) as f64
        })
        .product()
}

/// Closed-form ∫_set x^α dx for ball-shaped sublevel sets.
/// Errors on unsupported shapes; callers fall back to the sample-sum objective.
pub fn monomial_moment(set: &SublevelSet, exponent: &Monomial) -> Result<f64> {
    match &set.shape {
        Shape::Ball { center, radius } => {
            let exps: Vec<u32> = set
                .vars
                .iter()
                .map(|v| exponent.degree_in(v))
                .collect();
            for (v, _) in exponent.powers() {
                if !set.vars.contains(v) {
                    return Err(Error::UnassignedVariable(v.to_string()));
                }
            }
            Ok(ball_moment(center, *radius, &exps))
        }
        Shape::General => Err(Error::UnsupportedSetShape(
            "closed-form moments require a ball or box".into(),
        )),
    }
}

/// ∫_box x^α dx for a box set.
pub fn box_monomial_moment(set: &BoxSet, vars: &[Var], exponent: &Monomial) -> f64 {
    let exps: Vec<u32> = vars.iter().map(|v| exponent.degree_in(v)).collect();
    box_moment(&set.intervals(), &exps)
}

/// One-step reachable-set over-approximation X̂ = {Σ x_i² − r² < 0}.
///
/// Interval arithmetic over box(X) × U bounds the range of every dynamics
/// component; the ball radius also covers the box of X itself, so
/// X̂ ⊇ f(X, U) ∪ X by construction.
pub fn compute_xhat(spec: &SystemSpec) -> Result<Polynomial> {
    let xbox = spec.safe_set()?.box_map();
    let mut boxmap = xbox.clone();
    for (j, u) in spec.input_vars.iter().enumerate() {
        boxmap.insert(
            u.clone(),
            Interval::new(spec.input_lower[j], spec.input_upper[j]),
        );
    }
    let mut r2 = 0.0;
    for (i, f) in spec.dynamics.iter().enumerate() {
        let range = interval_eval(f, &boxmap)?;
        let xi = xbox[&spec.state_vars[i]];
        let m = range.mag().max(xi.mag());
        r2 += m * m;
    }
    let mut h = Polynomial::constant(-r2);
    for v in &spec.state_vars {
        h = h.add(&Polynomial::var(v).pow(2));
    }
    Ok(h)
}

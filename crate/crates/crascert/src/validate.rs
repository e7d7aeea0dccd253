//! Solver-independent checks: Monte Carlo volume estimation, sampling
//! validation of certificate inequalities, and closed-loop greedy simulation.
//!
//! Expectation rows are recomputed here from the stored controller and
//! mixture parameters via the expect module, so validation does not share
//! code with the SOS compilation path.

use crate::error::{Error, Result};
use crate::expect::{expect_eps_greedy, expect_substitution, expect_uniform, EpsGreedyParams};
use crate::poly::Var;
use crate::sets::{compute_xhat, sample_where, SublevelSet};
use crate::spec::{Certificate, SafetySpec, SystemSpec};
use crate::Polynomial;

/// Monte Carlo estimate of γ = vol({v > 0} ∩ X) / vol(X).
#[derive(Debug, Clone)]
pub struct VolumeEstimate {
    pub gamma: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub std_error: f64,
}

fn volume_from_counts(inside: usize, n: usize, seed: u64) -> VolumeEstimate {
    let gamma = inside as f64 / n as f64;
    VolumeEstimate {
        gamma,
        n_samples: n,
        seed,
        std_error: (gamma * (1.0 - gamma) / n as f64).sqrt(),
    }
}

/// Fraction of uniform samples of the safe set X where v > 0.
pub fn estimate_volume(
    v: &Polynomial,
    spec: &SystemSpec,
    n: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    estimate_union_volume(std::slice::from_ref(v), spec, n, seed)
}

/// Fraction of uniform samples of X covered by ⋃ₖ {vₖ > 0}. With one
/// polynomial this is the plain volume estimate.
pub fn estimate_union_volume(
    vs: &[Polynomial],
    spec: &SystemSpec,
    n: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    let safe = spec.safe_set()?;
    let evals = vs
        .iter()
        .map(|v| v.evaluator(&spec.state_vars))
        .collect::<Result<Vec<_>>>()?;
    let pts = safe.sample_uniform(n, seed)?;
    let inside = pts
        .iter()
        .filter(|p| evals.iter().any(|e| e.eval(p) > 0.0))
        .count();
    Ok(volume_from_counts(inside, n, seed))
}

/// Worst sampled margin of one certificate inequality over one region.
/// The inequality is satisfied where the margin is non-negative.
#[derive(Debug, Clone)]
pub struct RowReport {
    pub name: String,
    pub worst_margin: f64,
    pub witness: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub rows: Vec<RowReport>,
    pub tol: f64,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.worst_margin >= -self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.worst_margin)
            .fold(f64::INFINITY, f64::min)
    }
}

fn worst_row(
    name: &str,
    poly: &Polynomial,
    vars: &[Var],
    points: &[Vec<f64>],
) -> Result<RowReport> {
    let eval = poly.evaluator(vars)?;
    let mut worst = f64::INFINITY;
    let mut witness = Vec::new();
    for p in points {
        let m = eval.eval(p);
        if m < worst {
            worst = m;
            witness = p.clone();
        }
    }
    Ok(RowReport {
        name: name.to_string(),
        worst_margin: worst,
        witness,
    })
}

/// The expectation operator a reach-avoid certificate claims to satisfy:
/// the ε-greedy mixture when a controller is stored, uniform otherwise.
fn certificate_expectation(
    cert: &Certificate,
    spec: &SystemSpec,
    v: &Polynomial,
) -> Result<Polynomial> {
    let ubox = spec.input_box()?;
    match cert.controller_polys(spec)? {
        Some(controller) => {
            let epsilon = cert.epsilon.ok_or_else(|| {
                Error::invariant("epsilon", "controller present but epsilon missing")
            })?;
            let delta = cert
                .delta
                .ok_or_else(|| Error::invariant("delta", "controller present but delta missing"))?;
            if epsilon == 0.0 && delta == 0.0 {
                // greedy certificate: the controller is substituted directly
                return expect_substitution(
                    v,
                    &spec.state_vars,
                    &spec.input_vars,
                    &spec.dynamics,
                    &controller,
                );
            }
            let params = EpsGreedyParams::new(epsilon, delta, controller)?;
            expect_eps_greedy(
                v,
                &spec.state_vars,
                &spec.input_vars,
                &spec.dynamics,
                &params,
                &ubox,
            )
        }
        None => expect_uniform(v, &spec.state_vars, &spec.input_vars, &spec.dynamics, &ubox),
    }
}

/// Sample-check the two reach-avoid rows: E[v∘f] − λv ≥ 0 on X∖T and
/// v ≤ 0 on X̂∖X. Returns a report; pass iff all margins ≥ −tol.
pub fn validate_reach_avoid(
    cert: &Certificate,
    spec: &SystemSpec,
    n_per_region: usize,
    tol: f64,
    seed: u64,
) -> Result<ValidationReport> {
    let v = cert.v_poly(&spec.state_vars)?;
    let expectation = certificate_expectation(cert, spec, &v)?;
    let growth = expectation.add(&v.scale(-cert.lambda));

    let safe = spec.safe_set()?;
    let h = spec.safe_h.evaluator(&spec.state_vars)?;
    let g = spec.target_g.evaluator(&spec.state_vars)?;
    let outside_target = sample_where(&safe.bounding_box, n_per_region, seed, |p| {
        h.eval(p) < 0.0 && g.eval(p) >= 0.0
    })?;

    let xhat_h = match &spec.xhat_h {
        Some(p) => p.clone(),
        None => compute_xhat(spec)?,
    };
    let xhat = SublevelSet::new(xhat_h.clone(), false, spec.state_vars.clone())?;
    let hx = xhat_h.evaluator(&spec.state_vars)?;
    // X̂∖X can be empty (one-step images stay inside X): vacuous row then
    let margin_pts = match sample_where(
        &xhat.bounding_box,
        n_per_region,
        seed ^ 0x5851f42d4c957f2d,
        |p| hx.eval(p) <= 0.0 && h.eval(p) >= 0.0,
    ) {
        Ok(pts) => pts,
        Err(Error::ThinSet) => Vec::new(),
        Err(e) => return Err(e),
    };

    let rows = vec![
        worst_row(
            "expected-growth on X∖T",
            &growth,
            &spec.state_vars,
            &outside_target,
        )?,
        worst_row(
            "nonpositivity on X̂∖X",
            &v.neg(),
            &spec.state_vars,
            &margin_pts,
        )?,
    ];
    Ok(ValidationReport { rows, tol })
}

/// Sample-check the three safety rows: E[B∘f] − λB ≥ 0 on the domain D,
/// B ≤ 0 on X_U, and B ≥ 0 on X_I.
pub fn validate_safety(
    cert: &Certificate,
    spec: &SafetySpec,
    n_per_region: usize,
    tol: f64,
    seed: u64,
) -> Result<ValidationReport> {
    let b = cert.v_poly(&spec.state_vars)?;
    let ubox = spec.input_box()?;
    let expectation = expect_uniform(
        &b,
        &spec.state_vars,
        &spec.input_vars,
        &spec.dynamics,
        &ubox,
    )?;
    let growth = expectation.add(&b.scale(-cert.lambda));

    let domain = spec.domain_set()?.sample_uniform(n_per_region, seed)?;
    let unsafe_pts = spec
        .unsafe_set()?
        .sample_uniform(n_per_region, seed ^ 0x2545f4914f6cdd1d)?;
    let init_pts = spec
        .init_set()?
        .sample_uniform(n_per_region, seed ^ 0x9e3779b97f4a7c15)?;

    let rows = vec![
        worst_row("expected-decrease on D", &growth, &spec.state_vars, &domain)?,
        worst_row(
            "nonpositivity on X_U",
            &b.neg(),
            &spec.state_vars,
            &unsafe_pts,
        )?,
        worst_row("nonnegativity on X_I", &b, &spec.state_vars, &init_pts)?,
    ];
    Ok(ValidationReport { rows, tol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Reached,
    LeftSafe,
    HorizonExhausted,
}

/// A closed-loop run under the greedy policy.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub verdict: Verdict,
}

/// Axis-wise grid over the input box: `m` points per axis including both
/// endpoints, full Cartesian product in row-major order.
pub fn control_grid(lower: &[f64], upper: &[f64], m: usize) -> Vec<Vec<f64>> {
    assert!(m >= 2, "need at least the two endpoints per axis");
    let axes: Vec<Vec<f64>> = lower
        .iter()
        .zip(upper)
        .map(|(&lo, &hi)| {
            (0..m)
                .map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64)
                .collect()
        })
        .collect();
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &val in axis {
                let mut p = prefix.clone();
                p.push(val);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Run the greedy policy from x0: at each step pick the grid control
/// maximizing v(f(x,u)) (ties to the smallest grid index). Stops with
/// `Reached` on entering T, `LeftSafe` on exiting X.
pub fn simulate_greedy(
    v: &Polynomial,
    spec: &SystemSpec,
    x0: &[f64],
    horizon: usize,
    m_controls: usize,
) -> Result<Trajectory> {
    let h = spec.safe_h.evaluator(&spec.state_vars)?;
    let g = spec.target_g.evaluator(&spec.state_vars)?;
    if h.eval(x0) >= 0.0 {
        return Err(Error::Validation(format!(
            "initial state {x0:?} lies outside the safe set"
        )));
    }
    let all_vars: Vec<Var> = spec
        .state_vars
        .iter()
        .chain(&spec.input_vars)
        .cloned()
        .collect();
    // v(f(x,u)) once symbolically, then pointwise over the control grid
    let w = v.compose(&crate::spec::dynamics_map(
        &spec.state_vars,
        &spec.dynamics,
    ))?;
    let w_eval = w.evaluator(&all_vars)?;
    let f_evals = spec
        .dynamics
        .iter()
        .map(|f| f.evaluator(&all_vars))
        .collect::<Result<Vec<_>>>()?;
    let grid = control_grid(&spec.input_lower, &spec.input_upper, m_controls);

    let mut states = vec![x0.to_vec()];
    let mut controls = Vec::new();
    let mut point = vec![0.0; all_vars.len()];
    for _ in 0..horizon {
        let x = states.last().expect("non-empty").clone();
        if g.eval(&x) < 0.0 {
            return Ok(Trajectory {
                states,
                controls,
                verdict: Verdict::Reached,
            });
        }
        if h.eval(&x) >= 0.0 {
            return Ok(Trajectory {
                states,
                controls,
                verdict: Verdict::LeftSafe,
            });
        }
        point[..x.len()].copy_from_slice(&x);
        let mut best_u = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (k, u) in grid.iter().enumerate() {
            point[x.len()..].copy_from_slice(u);
            let val = w_eval.eval(&point);
            if val > best_val {
                best_val = val;
                best_u = k;
            }
        }
        point[x.len()..].copy_from_slice(&grid[best_u]);
        let next: Vec<f64> = f_evals.iter().map(|f| f.eval(&point)).collect();
        controls.push(grid[best_u].clone());
        states.push(next);
    }
    // final-state verdicts still apply at the horizon
    let x = states.last().expect("non-empty");
    let verdict = if g.eval(x) < 0.0 {
        Verdict::Reached
    } else if h.eval(x) >= 0.0 {
        Verdict::LeftSafe
    } else {
        Verdict::HorizonExhausted
    };
    Ok(Trajectory {
        states,
        controls,
        verdict,
    })
}

/// CSV grid of v over the safe set's bounding box: one line per grid point,
/// `x1,…,xn,v,sign`, resolution points per axis. Intended for 1-D/2-D plots.
pub fn levelset_csv(v: &Polynomial, spec: &SystemSpec, resolution: usize) -> Result<String> {
    assert!(resolution >= 2);
    let safe = spec.safe_set()?;
    let eval = v.evaluator(&spec.state_vars)?;
    let mut out = String::new();
    for var in &spec.state_vars {
        out.push_str(var);
        out.push(',');
    }
    out.push_str("v,sign\n");
    let n = spec.state_vars.len();
    let mut idx = vec![0usize; n];
    let mut point = vec![0.0; n];
    loop {
        for (d, &i) in idx.iter().enumerate() {
            let iv = &safe.bounding_box[d];
            point[d] = iv.lo + (iv.hi - iv.lo) * i as f64 / (resolution - 1) as f64;
        }
        let val = eval.eval(&point);
        for c in &point {
            out.push_str(&format!("{c},"));
        }
        out.push_str(&format!("{val},{}\n", if val > 0.0 { 1 } else { 0 }));
        // odometer increment over the grid indices
        let mut d = n;
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < resolution {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Endpoints of the (assumed single) interval {v > 0} for a 1-D system,
/// located by sign changes on a fine grid plus bisection refinement.
pub fn positive_interval(v: &Polynomial, lo: f64, hi: f64, grid: usize) -> Option<(f64, f64)> {
    let vars = v.vars().into_iter().collect::<Vec<_>>();
    if vars.len() > 1 {
        return None;
    }
    let eval = v.evaluator(&vars).ok()?;
    let at = |x: f64| eval.eval(&[x]);
    let mut left: Option<f64> = None;
    let mut right: Option<f64> = None;
    let mut prev = at(lo);
    for k in 1..=grid {
        let x = lo + (hi - lo) * k as f64 / grid as f64;
        let cur = at(x);
        if prev <= 0.0 && cur > 0.0 && left.is_none() {
            left = Some(bisect(&at, x - (hi - lo) / grid as f64, x));
        }
        if prev > 0.0 && cur <= 0.0 && right.is_none() {
            right = Some(bisect(&at, x - (hi - lo) / grid as f64, x));
        }
        prev = cur;
    }
    match (left, right) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    }
}

fn bisect(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if (f(a) > 0.0) == (f(mid) > 0.0) {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_polynomial;
    use crate::poly::var;
    use std::collections::BTreeSet;

    fn one_dim_spec() -> SystemSpec {
        let vars: BTreeSet<_> = [var("x"), var("u")].into_iter().collect();
        let p = |s: &str| parse_polynomial(s, &vars).unwrap();
        SystemSpec {
            state_vars: vec![var("x")],
            input_vars: vec![var("u")],
            dynamics: vec![p("0.5*x + 0.01*u")],
            safe_h: p("x^2 - 1"),
            target_g: p("x^2 - 0.04"),
            input_lower: vec![-1.0],
            input_upper: vec![1.0],
            lambda: 1.01,
            xhat_h: Some(p("x^2 - 1.1025")),
        }
    }

    /// v = 1 − x² satisfies both rows for the contraction system: the
    /// expected-growth margin is 0.76x² − 0.01003… > 0 for |x| ≥ 0.2, and
    /// v ≤ 0 outside the unit interval.
    fn valid_certificate() -> Certificate {
        Certificate {
            v: "1 + -1*x^2".into(),
            lambda: 1.01,
            multipliers: Vec::new(),
            status: "feasible".into(),
            solver_iters: 0,
            gamma: None,
            controller: None,
            epsilon: None,
            delta: None,
            objective: None,
        }
    }

    #[test]
    fn constant_sign_volumes() {
        let spec = one_dim_spec();
        let one = Polynomial::constant(1.0);
        let minus = Polynomial::constant(-1.0);
        assert_eq!(estimate_volume(&one, &spec, 1000, 7).unwrap().gamma, 1.0);
        assert_eq!(estimate_volume(&minus, &spec, 1000, 7).unwrap().gamma, 0.0);
    }

    #[test]
    fn interval_length_ratio() {
        // {v > 0} = (0.1391, 0.9299) inside X = (−1, 1): γ = 0.7908/2
        let vars: BTreeSet<_> = [var("x")].into_iter().collect();
        let v = parse_polynomial("-1*(x - 0.1391)*(x - 0.9299)", &vars).unwrap();
        let est = estimate_volume(&v, &one_dim_spec(), 400_000, 3).unwrap();
        assert!((est.gamma - 0.3954).abs() < 0.004, "γ = {}", est.gamma);
    }

    #[test]
    fn volume_scatter_matches_binomial_theory() {
        let vars: BTreeSet<_> = [var("x")].into_iter().collect();
        let v = parse_polynomial("0.25 - x^2", &vars).unwrap();
        let spec = one_dim_spec();
        let base = estimate_volume(&v, &spec, 100_000, 0).unwrap();
        for seed in 1..6 {
            let e = estimate_volume(&v, &spec, 100_000, seed).unwrap();
            assert!(
                (e.gamma - base.gamma).abs() <= 4.0 * (base.std_error + e.std_error),
                "seed {seed}: {} vs {}",
                e.gamma,
                base.gamma
            );
        }
        // determinism per seed
        let again = estimate_volume(&v, &spec, 100_000, 0).unwrap();
        assert_eq!(again.gamma, base.gamma);
    }

    #[test]
    fn union_volume_covers_both_sets() {
        let vars: BTreeSet<_> = [var("x")].into_iter().collect();
        let left = parse_polynomial("-1*(x + 0.8)*(x + 0.2)", &vars).unwrap();
        let right = parse_polynomial("-1*(x - 0.2)*(x - 0.8)", &vars).unwrap();
        let spec = one_dim_spec();
        let u = estimate_union_volume(&[left.clone(), right.clone()], &spec, 200_000, 5).unwrap();
        let l = estimate_volume(&left, &spec, 200_000, 5).unwrap();
        // two disjoint 0.6-long intervals in (−1,1): union 0.6, each 0.3
        assert!((u.gamma - 0.6).abs() < 0.01, "union γ = {}", u.gamma);
        assert!((l.gamma - 0.3).abs() < 0.01, "left γ = {}", l.gamma);
    }

    #[test]
    fn hand_built_certificate_passes() {
        let spec = one_dim_spec();
        let report = validate_reach_avoid(&valid_certificate(), &spec, 10_000, 1e-6, 0).unwrap();
        assert!(report.pass(), "rows: {:?}", report.rows);
    }

    #[test]
    fn corrupted_certificate_fails_with_witness() {
        let spec = one_dim_spec();
        let mut bad = valid_certificate();
        bad.v = "1.1 + -1*x^2".into(); // v + 0.1 breaks nonpositivity on X̂∖X
        let report = validate_reach_avoid(&bad, &spec, 10_000, 1e-6, 0).unwrap();
        assert!(!report.pass());
        let row = &report.rows[1];
        assert!(row.worst_margin < -1e-3, "margin {}", row.worst_margin);
        // witness lies in X̂∖X: |x| ≥ 1
        assert!(row.witness[0].abs() >= 1.0 - 1e-9, "witness {:?}", row.witness);
    }

    #[test]
    fn simulate_reaches_from_target() {
        let spec = one_dim_spec();
        let v = valid_certificate().v_poly(&spec.state_vars).unwrap();
        let t = simulate_greedy(&v, &spec, &[0.05], 100, 11).unwrap();
        assert_eq!(t.verdict, Verdict::Reached);
        assert_eq!(t.states.len(), 1); // already inside T
    }

    #[test]
    fn simulate_contracts_to_target() {
        let spec = one_dim_spec();
        let v = valid_certificate().v_poly(&spec.state_vars).unwrap();
        let t = simulate_greedy(&v, &spec, &[0.5], 1000, 11).unwrap();
        assert_eq!(t.verdict, Verdict::Reached);
        // trajectory obeys the dynamics exactly
        for (k, u) in t.controls.iter().enumerate() {
            let expected = 0.5 * t.states[k][0] + 0.01 * u[0];
            assert_eq!(t.states[k + 1][0], expected);
        }
    }

    #[test]
    fn simulate_escape_goes_unsafe() {
        let vars: BTreeSet<_> = [var("x"), var("u")].into_iter().collect();
        let mut spec = one_dim_spec();
        spec.dynamics = vec![parse_polynomial("1.5*x + 0.01*u", &vars).unwrap()];
        let v = valid_certificate().v_poly(&spec.state_vars).unwrap();
        let t = simulate_greedy(&v, &spec, &[0.9], 1000, 11).unwrap();
        assert_eq!(t.verdict, Verdict::LeftSafe);
        let out = simulate_greedy(&v, &spec, &[1.5], 10, 11);
        assert!(out.is_err(), "x0 outside X must be rejected");
    }

    #[test]
    fn levelset_row_count_is_grid_power() {
        let spec = one_dim_spec();
        let v = valid_certificate().v_poly(&spec.state_vars).unwrap();
        let csv = levelset_csv(&v, &spec, 25).unwrap();
        assert_eq!(csv.lines().count(), 25 + 1); // header + 25 points in 1-D
    }

    #[test]
    fn positive_interval_finds_roots() {
        let vars: BTreeSet<_> = [var("x")].into_iter().collect();
        let v = parse_polynomial("-1*(x - 0.1391)*(x - 0.9299)", &vars).unwrap();
        let (a, b) = positive_interval(&v, -1.0, 1.0, 400).unwrap();
        assert!((a - 0.1391).abs() < 1e-9, "left {a}");
        assert!((b - 0.9299).abs() < 1e-9, "right {b}");
    }

    #[test]
    fn control_grid_is_cartesian() {
        let g = control_grid(&[-1.0, 0.0], &[1.0, 2.0], 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![-1.0, 0.0]);
        assert_eq!(g[8], vec![1.0, 2.0]);
        assert_eq!(g[5], vec![0.0, 2.0]);
    }
}

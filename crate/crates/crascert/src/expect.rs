//! Expectation operators that eliminate the control variable: the uniform
//! expectation over U and the ε-greedy mixture expectation around a fitted
//! controller ũ0, both returning polynomials in the state variables alone.

use crate::error::{Error, Result};
use crate::poly::Var;
use crate::sets::BoxSet;
use crate::spec::dynamics_map;
use crate::Polynomial;

/// ε-greedy mixture parameters: with probability mass (1−ε)/Z the control is
/// uniform on ũ0(x) ± δ, with mass ε/Z uniform on U.
#[derive(Debug, Clone)]
pub struct EpsGreedyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub controller: Vec<Polynomial>,
}

impl EpsGreedyParams {
    pub fn new(epsilon: f64, delta: f64, controller: Vec<Polynomial>) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invariant("epsilon", "must lie in [0, 1]"));
        }
        if epsilon == 0.0 && delta == 0.0 {
            return Err(Error::invariant(
                "delta",
                "epsilon and delta cannot both be zero",
            ));
        }
        if delta < 0.0 {
            return Err(Error::invariant("delta", "must be non-negative"));
        }
        Ok(EpsGreedyParams {
            epsilon,
            delta,
            controller,
        })
    }

    /// Normalizer Z = (1−ε)(2δ)^m + ε Πⱼ(ū(j) − u̲(j)).
    pub fn normalizer(&self, ubox: &BoxSet) -> f64 {
        let m = ubox.dim() as i32;
        (1.0 - self.epsilon) * (2.0 * self.delta).powi(m) + self.epsilon * ubox.volume()
    }

    pub fn validate_against(&self, ubox: &BoxSet) -> Result<()> {
        if self.delta > 0.0 && self.delta >= ubox.min_half_width() {
            return Err(Error::invariant(
                "delta",
                format!(
                    "delta {} must be below half the narrowest input range {}",
                    self.delta,
                    ubox.min_half_width()
                ),
            ));
        }
        if self.controller.len() != ubox.dim() {
            return Err(Error::invariant(
                "controller",
                "component count must match the input dimension",
            ));
        }
        Ok(())
    }
}

/// ∫ over the box U of v(f(x,u)) du, divided by vol(U): the uniform
/// expectation. Exact via iterated antiderivatives per input variable.
pub fn expect_uniform(
    v: &Polynomial,
    state_vars: &[Var],
    input_vars: &[Var],
    dynamics: &[Polynomial],
    ubox: &BoxSet,
) -> Result<Polynomial> {
    let composed = v.compose(&dynamics_map(state_vars, dynamics))?;
    let mut acc = composed;
    for (j, uj) in input_vars.iter().enumerate() {
        let lo = Polynomial::constant(ubox.lower[j]);
        let hi = Polynomial::constant(ubox.upper[j]);
        acc = acc.integrate_var(uj, &lo, &hi)?;
    }
    Ok(acc.scale(1.0 / ubox.volume()))
}

/// The ε-greedy mixture expectation
/// (1−ε)/Z ∫_{ũ0(x)±δ} v(f(x,u)) du + (ε/Z) ∫_U v(f(x,u)) du,
/// a polynomial in x (the polynomial bounds ũ0(x)±δ keep it polynomial).
pub fn expect_eps_greedy(
    v: &Polynomial,
    state_vars: &[Var],
    input_vars: &[Var],
    dynamics: &[Polynomial],
    params: &EpsGreedyParams,
    ubox: &BoxSet,
) -> Result<Polynomial> {
    params.validate_against(ubox)?;
    let z = params.normalizer(ubox);
    let composed = v.compose(&dynamics_map(state_vars, dynamics))?;

    // local term: iterated integrals with bounds ũ0(x)(j) ± δ
    let mut local = composed.clone();
    if params.epsilon < 1.0 {
        for (j, uj) in input_vars.iter().enumerate() {
            let lo = params.controller[j].add(&Polynomial::constant(-params.delta));
            let hi = params.controller[j].add(&Polynomial::constant(params.delta));
            local = local.integrate_var(uj, &lo, &hi)?;
        }
    } else {
        local = Polynomial::zero();
    }

    // global term: iterated integrals over the full box U
    let mut global = composed;
    if params.epsilon > 0.0 {
        for (j, uj) in input_vars.iter().enumerate() {
            let lo = Polynomial::constant(ubox.lower[j]);
            let hi = Polynomial::constant(ubox.upper[j]);
            global = global.integrate_var(uj, &lo, &hi)?;
        }
    } else {
        global = Polynomial::zero();
    }

    Ok(local
        .scale((1.0 - params.epsilon) / z)
        .add(&global.scale(params.epsilon / z)))
}

/// v(f(x, ũ0(x))): the greedy closed-loop composition, eliminating the
/// control by direct substitution of the fitted controller.
pub fn expect_substitution(
    v: &Polynomial,
    state_vars: &[Var],
    input_vars: &[Var],
    dynamics: &[Polynomial],
    controller: &[Polynomial],
) -> Result<Polynomial> {
    if controller.len() != input_vars.len() {
        return Err(Error::invariant(
            "controller",
            "component count must match the input dimension",
        ));
    }
    let composed = v.compose(&dynamics_map(state_vars, dynamics))?;
    let mut map: std::collections::BTreeMap<Var, Polynomial> = state_vars
        .iter()
        .map(|x| (x.clone(), Polynomial::var(x)))
        .collect();
    for (u, c) in input_vars.iter().zip(controller) {
        map.insert(u.clone(), c.clone());
    }
    composed.compose(&map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_polynomial;
    use crate::poly::{point, var};
    use crate::quad::quad_1d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn pv(text: &str, names: &[&str]) -> Polynomial {
        let allowed: BTreeSet<Var> = names.iter().map(|s| var(s)).collect();
        parse_polynomial(text, &allowed).unwrap()
    }

    fn ex1_dyn() -> Vec<Polynomial> {
        vec![pv("x + 0.01*(-x - x^2 + u)", &["x", "u"])]
    }

    fn ubox11() -> BoxSet {
        BoxSet::new(vec![-1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn uniform_kills_symmetric_input_term() {
        // E[u] = 0 over [−1,1], so E[f(x,u)] = 0.99x − 0.01x²
        let got = expect_uniform(
            &pv("x", &["x"]),
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &ubox11(),
        )
        .unwrap();
        let want = pv("0.99*x - 0.01*x^2", &["x"]);
        assert!(got.sub(&want).max_abs_coeff() < 1e-14, "{got}");
    }

    #[test]
    fn uniform_expectation_of_constant() {
        let got = expect_uniform(
            &pv("3.5", &["x"]),
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &ubox11(),
        )
        .unwrap();
        assert!((got.constant_term() - 3.5).abs() < 1e-14 && got.num_terms() == 1);
    }

    #[test]
    fn uniform_matches_quadrature() {
        // v = x², Example-1 dynamics: compare against 1-D quadrature in u
        let v = pv("x^2", &["x"]);
        let got = expect_uniform(&v, &[var("x")], &[var("u")], &ex1_dyn(), &ubox11()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let want = quad_1d(
                |u| {
                    let fx = x + 0.01 * (-x - x * x + u);
                    fx * fx
                },
                -1.0,
                1.0,
            ) / 2.0;
            let have = got.eval(&point(&[("x", x)])).unwrap();
            assert!((have - want).abs() < 1e-8, "x={x} have={have} want={want}");
        }
    }

    #[test]
    fn normalizer_arithmetic() {
        let p = EpsGreedyParams::new(0.5, 0.1, vec![Polynomial::zero()]).unwrap();
        assert!((p.normalizer(&ubox11()) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn eps_one_reduces_to_uniform() {
        // with ε = 1 the controller is irrelevant and the mixture is uniform
        let v = pv("1 + x - 0.5*x^2 + 0.25*x^4", &["x"]);
        let uni = expect_uniform(&v, &[var("x")], &[var("u")], &ex1_dyn(), &ubox11()).unwrap();
        let params = EpsGreedyParams::new(1.0, 0.25, vec![pv("0.3*x", &["x"])]).unwrap();
        let mix = expect_eps_greedy(
            &v,
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &params,
            &ubox11(),
        )
        .unwrap();
        assert!(mix.sub(&uni).max_abs_coeff() < 1e-12, "{mix} vs {uni}");
    }

    #[test]
    fn eps_zero_is_local_average() {
        // ε = 0, ũ0 = 0, δ = 0.25: (1/2δ) ∫_{−δ}^{δ} v(f(x,u)) du
        let v = pv("x", &["x"]);
        let params = EpsGreedyParams::new(0.0, 0.25, vec![Polynomial::zero()]).unwrap();
        let got = expect_eps_greedy(
            &v,
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &params,
            &ubox11(),
        )
        .unwrap();
        // symmetric window around 0 kills the u-term again
        let want = pv("0.99*x - 0.01*x^2", &["x"]);
        assert!(got.sub(&want).max_abs_coeff() < 1e-14, "{got}");
    }

    #[test]
    fn mixture_normalization_is_exact() {
        let params = EpsGreedyParams::new(0.3, 0.25, vec![pv("0.5*x", &["x"])]).unwrap();
        let got = expect_eps_greedy(
            &Polynomial::one(),
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &params,
            &ubox11(),
        )
        .unwrap();
        assert!((got.constant_term() - 1.0).abs() < 1e-15 && got.num_terms() == 1, "{got}");
    }

    #[test]
    fn mixture_is_linear() {
        let v1 = pv("x^2 - x", &["x"]);
        let v2 = pv("1 + x^3", &["x"]);
        let params = EpsGreedyParams::new(0.4, 0.2, vec![pv("0.5*x", &["x"])]).unwrap();
        let sv = [var("x")];
        let iv = [var("u")];
        let e = |v: &Polynomial| {
            expect_eps_greedy(v, &sv, &iv, &ex1_dyn(), &params, &ubox11()).unwrap()
        };
        let lhs = e(&v1.scale(2.0).add(&v2.scale(-3.0)));
        let rhs = e(&v1).scale(2.0).add(&e(&v2).scale(-3.0));
        assert!(lhs.sub(&rhs).max_abs_coeff() < 1e-10);
    }

    #[test]
    fn mixture_matches_quadrature() {
        // random degree-4 v, ũ0 = 0.5x: mixture density is 1/Z on the window
        // overlap and ε/Z elsewhere — integrate piecewise numerically
        let v = pv("0.7 - 0.3*x + 1.1*x^2 + 0.2*x^3 - 0.4*x^4", &["x"]);
        let (eps, delta) = (0.3, 0.2);
        let params = EpsGreedyParams::new(eps, delta, vec![pv("0.5*x", &["x"])]).unwrap();
        let got = expect_eps_greedy(
            &v,
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &params,
            &ubox11(),
        )
        .unwrap();
        let veval = |t: f64| 0.7 - 0.3 * t + 1.1 * t * t + 0.2 * t * t * t - 0.4 * t.powi(4);
        let z = (1.0 - eps) * 2.0 * delta + eps * 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let u0 = 0.5 * x;
            let vf = |u: f64| veval(x + 0.01 * (-x - x * x + u));
            let local = quad_1d(vf, u0 - delta, u0 + delta);
            let global = quad_1d(vf, -1.0, 1.0);
            let want = (1.0 - eps) / z * local + eps / z * global;
            let have = got.eval(&point(&[("x", x)])).unwrap();
            assert!((have - want).abs() < 1e-8, "x={x} have={have} want={want}");
        }
    }

    #[test]
    fn expectation_below_pointwise_max() {
        // E[v(f(x,·))] cannot exceed max_u v(f(x,u)): the bound behind the
        // refinement step's soundness
        let v = pv("1 - x^2 + 0.5*x^4", &["x"]);
        let params = EpsGreedyParams::new(0.3, 0.25, vec![pv("0.5*x", &["x"])]).unwrap();
        let got = expect_eps_greedy(
            &v,
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &params,
            &ubox11(),
        )
        .unwrap();
        let veval = |t: f64| 1.0 - t * t + 0.5 * t.powi(4);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let max_u = (0..=400)
                .map(|k| {
                    let u = -1.0 + 0.005 * k as f64;
                    veval(x + 0.01 * (-x - x * x + u))
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let have = got.eval(&point(&[("x", x)])).unwrap();
            assert!(max_u >= have - 1e-8, "x={x} max={max_u} exp={have}");
        }
    }

    #[test]
    fn substitution_is_closed_loop_composition() {
        // ũ0 = 0.5x: compare against pointwise numeric composition
        let v = pv("1 + x - 0.5*x^2 + 0.25*x^4", &["x"]);
        let got = expect_substitution(
            &v,
            &[var("x")],
            &[var("u")],
            &ex1_dyn(),
            &[pv("0.5*x", &["x"])],
        )
        .unwrap();
        let veval = |t: f64| 1.0 + t - 0.5 * t * t + 0.25 * t.powi(4);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let want = veval(x + 0.01 * (-x - x * x + 0.5 * x));
            let have = got.eval(&point(&[("x", x)])).unwrap();
            assert!((have - want).abs() < 1e-12, "x={x} have={have} want={want}");
        }
    }

    #[test]
    fn rejects_degenerate_params() {
        assert!(EpsGreedyParams::new(0.0, 0.0, vec![]).is_err());
        assert!(EpsGreedyParams::new(1.5, 0.1, vec![]).is_err());
        // δ at half the input range is rejected on validation
        let p = EpsGreedyParams::new(0.5, 1.0, vec![Polynomial::zero()]).unwrap();
        assert!(p.validate_against(&ubox11()).is_err());
    }

    #[test]
    fn two_input_mixture_normalizes() {
        let dynamics = vec![
            pv("0.5*x + 0.1*u1", &["x", "y", "u1", "u2"]),
            pv("0.5*y + 0.1*u2 + 0.05*u1*u2", &["x", "y", "u1", "u2"]),
        ];
        let ubox = BoxSet::new(vec![-1.0, -2.0], vec![1.0, 2.0]).unwrap();
        let params = EpsGreedyParams::new(
            0.4,
            0.3,
            vec![pv("0.2*x", &["x", "y"]), pv("0.1*y", &["x", "y"])],
        )
        .unwrap();
        let got = expect_eps_greedy(
            &Polynomial::one(),
            &[var("x"), var("y")],
            &[var("u1"), var("u2")],
            &dynamics,
            &params,
            &ubox,
        )
        .unwrap();
        assert!((got.constant_term() - 1.0).abs() < 1e-14 && got.num_terms() == 1, "{got}");
    }
}

//! Problem-file IO: JSON schemas for reach-avoid and safety problems,
//! validated domain types, and certificate serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parse::parse_polynomial;
use crate::poly::{var, Var};
use crate::sets::{BoxSet, SublevelSet};
use crate::Polynomial;

/// A validated reach-avoid problem: dynamics, safe set X = {h<0},
/// target T = {g<0}, input box U, and the decay rate λ > 1.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub state_vars: Vec<Var>,
    pub input_vars: Vec<Var>,
    pub dynamics: Vec<Polynomial>,
    pub safe_h: Polynomial,
    pub target_g: Polynomial,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub lambda: f64,
    pub xhat_h: Option<Polynomial>,
}

/// A validated safety problem: domain D = {h≤0}, initial set X_I = {h_I≤0},
/// unsafe set X_U = {h_U≤0}, input box U, and λ ∈ (0,1).
#[derive(Debug, Clone)]
pub struct SafetySpec {
    pub state_vars: Vec<Var>,
    pub input_vars: Vec<Var>,
    pub dynamics: Vec<Polynomial>,
    pub domain_h: Polynomial,
    pub init_hi: Polynomial,
    pub unsafe_hu: Polynomial,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub lambda: f64,
}

/// Degrees, coefficient bounds, and objective mode for one SOS solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveConfig {
    pub deg_v: u32,
    pub deg_multipliers: u32,
    pub deg_controller: u32,
    pub coeff_bound: f64,
    pub objective_mode: ObjectiveMode,
    pub objective_samples: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    ClosedForm,
    SampleSum,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            deg_v: 4,
            deg_multipliers: 8,
            deg_controller: 2,
            coeff_bound: 1000.0,
            objective_mode: ObjectiveMode::ClosedForm,
            objective_samples: 100,
            rng_seed: 0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deg_v < 2 || self.deg_v % 2 != 0 {
            return Err(Error::invariant(
                "deg_v",
                format!("must be an even integer ≥ 2, got {}", self.deg_v),
            ));
        }
        if self.deg_multipliers % 2 != 0 {
            return Err(Error::invariant(
                "deg_multipliers",
                format!("must be even, got {}", self.deg_multipliers),
            ));
        }
        if self.coeff_bound <= 0.0 {
            return Err(Error::invariant("coeff_bound", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSystem {
    state_vars: Vec<String>,
    input_vars: Vec<String>,
    dynamics: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    safe_h: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_g: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain_h: Option<String>,
    #[serde(rename = "init_hI", skip_serializing_if = "Option::is_none")]
    init_hi: Option<String>,
    #[serde(rename = "unsafe_hU", skip_serializing_if = "Option::is_none")]
    unsafe_hu: Option<String>,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    xhat_h: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comment: Option<serde_json::Value>,
}

fn check_names(field: &str, names: &[String]) -> Result<Vec<Var>> {
    if names.is_empty() {
        return Err(Error::invariant(field, "must be non-empty"));
    }
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty() {
            return Err(Error::invariant(field, "empty variable name"));
        }
        if !seen.insert(n.clone()) {
            return Err(Error::invariant(field, format!("duplicate name `{n}`")));
        }
    }
    Ok(names.iter().map(|n| var(n)).collect())
}

struct ParsedCommon {
    state_vars: Vec<Var>,
    input_vars: Vec<Var>,
    dynamics: Vec<Polynomial>,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    lambda: f64,
}

fn parse_common(raw: &RawSystem) -> Result<ParsedCommon> {
    let state_vars = check_names("state_vars", &raw.state_vars)?;
    let input_vars = check_names("input_vars", &raw.input_vars)?;
    if state_vars.iter().any(|v| input_vars.contains(v)) {
        return Err(Error::invariant(
            "input_vars",
            "state and input variable names overlap",
        ));
    }
    if raw.dynamics.len() != state_vars.len() {
        return Err(Error::invariant(
            "dynamics",
            format!(
                "expected {} components, got {}",
                state_vars.len(),
                raw.dynamics.len()
            ),
        ));
    }
    let all_vars: BTreeSet<Var> = state_vars.iter().chain(&input_vars).cloned().collect();
    let dynamics = raw
        .dynamics
        .iter()
        .map(|s| parse_polynomial(s, &all_vars))
        .collect::<Result<Vec<_>>>()?;
    let m = input_vars.len();
    if raw.input_lower.len() != m || raw.input_upper.len() != m {
        return Err(Error::invariant(
            "input_lower",
            "bound vectors must match the input dimension",
        ));
    }
    for (l, u) in raw.input_lower.iter().zip(&raw.input_upper) {
        if l >= u {
            return Err(Error::invariant(
                "input_lower",
                format!("lower bound {l} not below upper bound {u}"),
            ));
        }
    }
    Ok(ParsedCommon {
        state_vars,
        input_vars,
        dynamics,
        input_lower: raw.input_lower.clone(),
        input_upper: raw.input_upper.clone(),
        lambda: raw.lambda,
    })
}

fn require<'a>(field: &str, v: &'a Option<String>) -> Result<&'a str> {
    v.as_deref()
        .ok_or_else(|| Error::invariant(field, "missing required field"))
}

impl SystemSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSystem = serde_json::from_str(text)?;
        let c = parse_common(&raw)?;
        if c.lambda <= 1.0 {
            return Err(Error::invariant(
                "lambda",
                format!("lambda must exceed 1, got {}", c.lambda),
            ));
        }
        let state_set: BTreeSet<Var> = c.state_vars.iter().cloned().collect();
        let safe_h = parse_polynomial(require("safe_h", &raw.safe_h)?, &state_set)?;
        let target_g = parse_polynomial(require("target_g", &raw.target_g)?, &state_set)?;
        let xhat_h = match &raw.xhat_h {
            Some(s) => Some(parse_polynomial(s, &state_set)?),
            None => None,
        };
        let spec = SystemSpec {
            state_vars: c.state_vars,
            input_vars: c.input_vars,
            dynamics: c.dynamics,
            safe_h,
            target_g,
            input_lower: c.input_lower,
            input_upper: c.input_upper,
            lambda: c.lambda,
            xhat_h,
        };
        spec.check_target_in_safe()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn n(&self) -> usize {
        self.state_vars.len()
    }

    pub fn m(&self) -> usize {
        self.input_vars.len()
    }

    pub fn safe_set(&self) -> Result<SublevelSet> {
        SublevelSet::new(self.safe_h.clone(), true, self.state_vars.clone())
    }

    pub fn target_set(&self) -> Result<SublevelSet> {
        SublevelSet::new(self.target_g.clone(), true, self.state_vars.clone())
    }

    pub fn input_box(&self) -> Result<BoxSet> {
        BoxSet::new(self.input_lower.clone(), self.input_upper.clone())
    }

    /// Spot-check T ⊆ X: every sampled point with g < 0 must satisfy h < 0.
    fn check_target_in_safe(&self) -> Result<()> {
        let target = self.target_set()?;
        let h = self.safe_h.evaluator(&self.state_vars)?;
        let pts = target.sample_uniform(10_000, 0)?;
        for p in &pts {
            if h.eval(p) >= 0.0 {
                return Err(Error::invariant(
                    "target_g",
                    format!("target point {p:?} lies outside the safe set"),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let raw = RawSystem {
            state_vars: self.state_vars.iter().map(|v| v.to_string()).collect(),
            input_vars: self.input_vars.iter().map(|v| v.to_string()).collect(),
            dynamics: self.dynamics.iter().map(|p| p.to_string()).collect(),
            safe_h: Some(self.safe_h.to_string()),
            target_g: Some(self.target_g.to_string()),
            domain_h: None,
            init_hi: None,
            unsafe_hu: None,
            input_lower: self.input_lower.clone(),
            input_upper: self.input_upper.clone(),
            lambda: self.lambda,
            xhat_h: self.xhat_h.as_ref().map(|p| p.to_string()),
            comment: None,
        };
        serde_json::to_string_pretty(&raw).expect("serialization cannot fail")
    }
}

impl SafetySpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSystem = serde_json::from_str(text)?;
        let c = parse_common(&raw)?;
        if c.lambda <= 0.0 || c.lambda >= 1.0 {
            return Err(Error::invariant(
                "lambda",
                format!("lambda must lie in (0, 1), got {}", c.lambda),
            ));
        }
        let state_set: BTreeSet<Var> = c.state_vars.iter().cloned().collect();
        let domain_h = parse_polynomial(require("domain_h", &raw.domain_h)?, &state_set)?;
        let init_hi = parse_polynomial(require("init_hI", &raw.init_hi)?, &state_set)?;
        let unsafe_hu = parse_polynomial(require("unsafe_hU", &raw.unsafe_hu)?, &state_set)?;
        let spec = SafetySpec {
            state_vars: c.state_vars,
            input_vars: c.input_vars,
            dynamics: c.dynamics,
            domain_h,
            init_hi,
            unsafe_hu,
            input_lower: c.input_lower,
            input_upper: c.input_upper,
            lambda: c.lambda,
        };
        spec.check_disjoint()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn n(&self) -> usize {
        self.state_vars.len()
    }

    pub fn m(&self) -> usize {
        self.input_vars.len()
    }

    pub fn domain_set(&self) -> Result<SublevelSet> {
        SublevelSet::new(self.domain_h.clone(), false, self.state_vars.clone())
    }

    pub fn init_set(&self) -> Result<SublevelSet> {
        SublevelSet::new(self.init_hi.clone(), false, self.state_vars.clone())
    }

    pub fn unsafe_set(&self) -> Result<SublevelSet> {
        // the unsafe region may be an annulus; box it inside the domain box
        match SublevelSet::new(self.unsafe_hu.clone(), false, self.state_vars.clone()) {
            Ok(s) => Ok(s),
            Err(_) => {
                let dom = self.domain_set()?;
                Ok(SublevelSet::with_box(
                    self.unsafe_hu.clone(),
                    false,
                    self.state_vars.clone(),
                    dom.bounding_box,
                ))
            }
        }
    }

    pub fn input_box(&self) -> Result<BoxSet> {
        BoxSet::new(self.input_lower.clone(), self.input_upper.clone())
    }

    /// Spot-check X_I ∩ X_U = ∅ by sampling the initial set.
    fn check_disjoint(&self) -> Result<()> {
        let init = self.init_set()?;
        let hu = self.unsafe_hu.evaluator(&self.state_vars)?;
        let pts = init.sample_uniform(10_000, 0)?;
        for p in &pts {
            if hu.eval(p) <= 0.0 {
                return Err(Error::invariant(
                    "init_hI",
                    format!("initial point {p:?} lies in the unsafe set"),
                ));
            }
        }
        Ok(())
    }
}

/// Serialized synthesis result: certificate polynomial, multipliers, and the
/// estimated volume ratio γ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub v: String,
    pub lambda: f64,
    pub multipliers: Vec<String>,
    pub status: String,
    pub solver_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controller: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

impl Certificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Parse the stored certificate polynomial over the given state variables.
    pub fn v_poly(&self, state_vars: &[Var]) -> Result<Polynomial> {
        let allowed: BTreeSet<Var> = state_vars.iter().cloned().collect();
        parse_polynomial(&self.v, &allowed)
    }

    pub fn controller_polys(&self, spec: &SystemSpec) -> Result<Option<Vec<Polynomial>>> {
        let allowed: BTreeSet<Var> = spec.state_vars.iter().cloned().collect();
        match &self.controller {
            Some(texts) => Ok(Some(
                texts
                    .iter()
                    .map(|t| parse_polynomial(t, &allowed))
                    .collect::<Result<Vec<_>>>()?,
            )),
            None => Ok(None),
        }
    }
}

/// Substitution map sending each state variable to its dynamics image; used
/// to form v(f(x, u)) by composition.
pub fn dynamics_map(
    state_vars: &[Var],
    dynamics: &[Polynomial],
) -> BTreeMap<Var, Polynomial> {
    state_vars
        .iter()
        .cloned()
        .zip(dynamics.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EX1: &str = r#"{
        "state_vars": ["x"],
        "input_vars": ["u"],
        "dynamics": ["x + 0.01*(-x - x^2 + u)"],
        "safe_h": "x^2 - 1",
        "target_g": "(x - 0.6)^2 - 0.01",
        "input_lower": [-1.0],
        "input_upper": [1.0],
        "lambda": 1.01
    }"#;

    #[test]
    fn loads_one_dim_system() {
        let spec = SystemSpec::from_json(EX1).unwrap();
        assert_eq!(spec.n(), 1);
        assert_eq!(spec.m(), 1);
        assert_eq!(spec.lambda, 1.01);
        let safe = spec.safe_set().unwrap();
        assert!(matches!(&safe.shape, crate::sets::Shape::Ball { radius, .. } if (radius - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_small_lambda() {
        let bad = EX1.replace("1.01", "0.9");
        let err = SystemSpec::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("lambda must exceed 1"), "{err}");
    }

    #[test]
    fn rejects_target_outside_safe() {
        // target ball around 2.0 pokes out of X = (−1, 1)
        let bad = EX1.replace("(x - 0.6)^2 - 0.01", "(x - 2)^2 - 0.01");
        let err = SystemSpec::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("outside the safe set"), "{err}");
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let bad = EX1.replace("[-1.0]", "[-1.0, -1.0]");
        assert!(SystemSpec::from_json(&bad).is_err());
    }

    #[test]
    fn tolerates_comment_field() {
        let with_comment = EX1.replace(
            "\"lambda\": 1.01",
            "\"lambda\": 1.01, \"comment\": \"one-dimensional test system\"",
        );
        assert!(SystemSpec::from_json(&with_comment).is_ok());
    }

    #[test]
    fn round_trips_structurally() {
        let spec = SystemSpec::from_json(EX1).unwrap();
        let once = spec.to_json();
        let again = SystemSpec::from_json(&once).unwrap().to_json();
        assert_eq!(once, again);
        let re = SystemSpec::from_json(&once).unwrap();
        assert!(re.safe_h.sub(&spec.safe_h).max_abs_coeff() < 1e-15);
        assert!(re.dynamics[0].sub(&spec.dynamics[0]).max_abs_coeff() < 1e-15);
    }

    #[test]
    fn safety_spec_checks() {
        let good = r#"{
            "state_vars": ["x", "y"],
            "input_vars": ["u"],
            "dynamics": ["0.9*x", "0.9*y + 0.01*u"],
            "domain_h": "x^2 + y^2 - 9",
            "init_hI": "x^2 + y^2 - 0.25",
            "unsafe_hU": "(x - 2)^2 + y^2 - 0.25",
            "input_lower": [-1.0],
            "input_upper": [1.0],
            "lambda": 0.9
        }"#;
        let spec = SafetySpec::from_json(good).unwrap();
        assert_eq!(spec.n(), 2);
        // overlapping unsafe set must be rejected
        let bad = good.replace("(x - 2)^2", "x^2");
        let err = SafetySpec::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("unsafe"), "{err}");
        // lambda outside (0,1) must be rejected
        let bad2 = good.replace("0.9\n", "1.5\n").replace("\"lambda\": 0.9", "\"lambda\": 1.5");
        assert!(SafetySpec::from_json(&bad2).is_err());
    }

    #[test]
    fn certificate_round_trip() {
        let cert = Certificate {
            v: "1 + -0.5*x^2".into(),
            lambda: 1.01,
            multipliers: vec!["x^2".into()],
            status: "optimal".into(),
            solver_iters: 17,
            gamma: Some(0.42),
            controller: None,
            epsilon: None,
            delta: None,
            objective: Some(1.3),
        };
        let back = Certificate::from_json(&cert.to_json()).unwrap();
        assert_eq!(back.v, cert.v);
        assert_eq!(back.solver_iters, 17);
        assert_eq!(back.gamma, Some(0.42));
    }
}

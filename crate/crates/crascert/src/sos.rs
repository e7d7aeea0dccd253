//! SOS program construction: polynomial templates with scalar decision
//! coefficients, SOS-membership constraints certified by Gram blocks, and
//! compilation to a block-diagonal SDP with linear equalities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::poly::{Monomial, Var};
use crate::Polynomial;

/// A decision variable: a free scalar or an entry of a Gram block.
/// `Gram { i, j }` with i ≤ j stands for the symmetric pair X_ij + X_ji
/// (just X_ii on the diagonal), so linear functionals read as <A, X> with a
/// symmetric A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VRef {
    Scalar(u32),
    Gram { block: u32, i: u16, j: u16 },
}

/// An expression c + Σ aᵢ·varᵢ, affine in the decision variables.
#[derive(Debug, Clone, Default)]
pub struct AffExpr {
    pub c: f64,
    pub terms: BTreeMap<VRef, f64>,
}

impl AffExpr {
    pub fn constant(c: f64) -> Self {
        AffExpr {
            c,
            terms: BTreeMap::new(),
        }
    }

    pub fn var(v: VRef) -> Self {
        AffExpr {
            c: 0.0,
            terms: BTreeMap::from([(v, 1.0)]),
        }
    }

    pub fn add_term(&mut self, v: VRef, a: f64) {
        let e = self.terms.entry(v).or_insert(0.0);
        *e += a;
        if e.abs() < 1e-300 {
            self.terms.remove(&v);
        }
    }

    pub fn add_assign(&mut self, other: &AffExpr, scale: f64) {
        self.c += scale * other.c;
        for (v, a) in &other.terms {
            self.add_term(*v, scale * a);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.c == 0.0 && self.terms.is_empty()
    }

    /// Evaluate at a solved variable assignment.
    pub fn value(&self, sol: &SosSolution) -> f64 {
        self.c + self
            .terms
            .iter()
            .map(|(v, a)| a * sol.var_value(*v))
            .sum::<f64>()
    }
}

/// A polynomial whose coefficients are affine in the decision variables.
#[derive(Debug, Clone, Default)]
pub struct LinearPoly {
    pub terms: BTreeMap<Monomial, AffExpr>,
}

impl LinearPoly {
    pub fn zero() -> Self {
        LinearPoly::default()
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut out = LinearPoly::zero();
        for (m, c) in p.terms() {
            out.entry(m).c += c;
        }
        out
    }

    fn entry(&mut self, m: &Monomial) -> &mut AffExpr {
        self.terms
            .entry(m.clone())
            .or_insert_with(|| AffExpr::constant(0.0))
    }

    pub fn add_assign(&mut self, other: &LinearPoly, scale: f64) {
        for (m, e) in &other.terms {
            self.entry(m).add_assign(e, scale);
        }
        self.prune();
    }

    /// Add `v · p` for a decision variable v and a concrete polynomial p.
    pub fn add_var_times_poly(&mut self, v: VRef, p: &Polynomial) {
        for (m, c) in p.terms() {
            self.entry(m).add_term(v, *c);
        }
    }

    pub fn add_poly(&mut self, p: &Polynomial, scale: f64) {
        for (m, c) in p.terms() {
            self.entry(m).c += scale * c;
        }
        self.prune();
    }

    /// Multiply by a concrete polynomial.
    pub fn mul_poly(&self, p: &Polynomial) -> LinearPoly {
        let mut out = LinearPoly::zero();
        for (m1, e) in &self.terms {
            for (m2, c) in p.terms() {
                out.entry(&m1.mul(m2)).add_assign(e, *c);
            }
        }
        out.prune();
        out
    }

    pub fn scale(&self, k: f64) -> LinearPoly {
        let mut out = self.clone();
        for e in out.terms.values_mut() {
            e.c *= k;
            for a in e.terms.values_mut() {
                *a *= k;
            }
        }
        out.prune();
        out
    }

    fn prune(&mut self) {
        self.terms.retain(|_, e| !e.is_zero());
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        for m in self.terms.keys() {
            for (v, _) in m.powers() {
                out.insert(v.clone());
            }
        }
        out
    }

    /// Evaluate coefficients at a solved assignment, yielding a concrete
    /// polynomial.
    pub fn value(&self, sol: &SosSolution) -> Polynomial {
        Polynomial::from_terms(
            self.terms
                .iter()
                .map(|(m, e)| (m.clone(), e.value(sol)))
                .filter(|(_, c)| c.abs() > 0.0),
        )
    }
}

/// A polynomial template Σ c_k·m_k over a fixed monomial basis, with one
/// scalar decision variable per basis element.
#[derive(Debug, Clone)]
pub struct DecisionPoly {
    pub basis: Vec<Monomial>,
    pub coeff_ids: Vec<u32>,
}

impl DecisionPoly {
    pub fn linear(&self) -> LinearPoly {
        let mut out = LinearPoly::zero();
        for (m, id) in self.basis.iter().zip(&self.coeff_ids) {
            out.entry(m).add_term(VRef::Scalar(*id), 1.0);
        }
        out
    }

    pub fn value(&self, sol: &SosSolution) -> Polynomial {
        Polynomial::from_terms(
            self.basis
                .iter()
                .zip(&self.coeff_ids)
                .map(|(m, id)| (m.clone(), sol.scalars[*id as usize])),
        )
    }
}

/// All monomials over `vars` with total degree ≤ `degree`, in canonical
/// graded-lex order.
pub fn monomial_basis(vars: &[Var], degree: u32) -> Vec<Monomial> {
    fn rec(vars: &[Var], degree: u32, idx: usize, cur: &mut Vec<(Var, u32)>, out: &mut Vec<Monomial>) {
        if idx == vars.len() {
            out.push(Monomial::from_powers(cur.iter().cloned()));
            return;
        }
        for k in 0..=degree {
            if k > 0 {
                cur.push((vars[idx].clone(), k));
            }
            rec(vars, degree - k, idx + 1, cur, out);
            if k > 0 {
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(vars, degree, 0, &mut Vec::new(), &mut out);
    out.sort();
    out
}

/// One equality row Σ aᵢ·varᵢ = rhs of the compiled SDP.
#[derive(Debug, Clone)]
pub struct EqRow {
    pub terms: Vec<(VRef, f64)>,
    pub rhs: f64,
}

/// Record of one SOS constraint, kept for a posteriori residual checks.
#[derive(Debug, Clone)]
pub struct SosRecord {
    pub expr: LinearPoly,
    pub block: u32,
    pub basis: Vec<Monomial>,
}

/// Block-diagonal SDP in decision-variable form: maximize the objective over
/// PSD Gram blocks and box-bounded scalars subject to linear equalities.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub block_dims: Vec<usize>,
    pub scalar_bounds: Vec<(f64, f64)>,
    pub equalities: Vec<EqRow>,
    /// maximize Σ aᵢ·varᵢ
    pub objective: Vec<(VRef, f64)>,
}

impl SdpProblem {
    /// Sparse text dump (one line per equality entry) for debugging and
    /// cross-solver comparison.
    pub fn to_sparse_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "blocks {:?}", self.block_dims);
        let _ = writeln!(out, "scalars {}", self.scalar_bounds.len());
        for (r, eq) in self.equalities.iter().enumerate() {
            for (v, a) in &eq.terms {
                let _ = writeln!(out, "{r} {v:?} {a}");
            }
            let _ = writeln!(out, "{r} rhs {}", eq.rhs);
        }
        for (v, a) in &self.objective {
            let _ = writeln!(out, "obj {v:?} {a}");
        }
        out
    }
}

/// A solved variable assignment: scalar values plus dense Gram matrices.
#[derive(Debug, Clone)]
pub struct SosSolution {
    pub scalars: Vec<f64>,
    /// row-major dim×dim symmetric matrices, one per block
    pub grams: Vec<Vec<f64>>,
    pub block_dims: Vec<usize>,
}

impl SosSolution {
    pub fn var_value(&self, v: VRef) -> f64 {
        match v {
            VRef::Scalar(id) => self.scalars[id as usize],
            VRef::Gram { block, i, j } => {
                let d = self.block_dims[block as usize];
                let g = &self.grams[block as usize];
                let x = g[i as usize * d + j as usize];
                if i == j {
                    x
                } else {
                    x + g[j as usize * d + i as usize]
                }
            }
        }
    }

    /// zᵀGz as a concrete polynomial for one block.
    pub fn gram_poly(&self, block: u32, basis: &[Monomial]) -> Polynomial {
        let d = self.block_dims[block as usize];
        let g = &self.grams[block as usize];
        let mut out = Polynomial::zero();
        for i in 0..d {
            for j in 0..d {
                let c = g[i * d + j];
                if c != 0.0 {
                    out = out.add(&Polynomial::from_terms([(basis[i].mul(&basis[j]), c)]));
                }
            }
        }
        out
    }
}

/// An SOS program under construction.
#[derive(Debug, Clone, Default)]
pub struct SosProgram {
    pub scalar_bounds: Vec<(f64, f64)>,
    pub block_bases: Vec<Vec<Monomial>>,
    pub equalities: Vec<EqRow>,
    pub objective: Vec<(VRef, f64)>,
    pub records: Vec<SosRecord>,
}

impl SosProgram {
    pub fn new() -> Self {
        SosProgram::default()
    }

    pub fn new_scalar(&mut self, lo: f64, hi: f64) -> u32 {
        self.scalar_bounds.push((lo, hi));
        (self.scalar_bounds.len() - 1) as u32
    }

    /// Fresh polynomial template with box-bounded coefficients.
    pub fn new_template(&mut self, vars: &[Var], degree: u32, coeff_bound: f64) -> DecisionPoly {
        let basis = monomial_basis(vars, degree);
        let coeff_ids = basis
            .iter()
            .map(|_| self.new_scalar(-coeff_bound, coeff_bound))
            .collect();
        DecisionPoly { basis, coeff_ids }
    }

    /// Fresh SOS polynomial s(x) = zᵀGz of the given (even) degree,
    /// represented directly by its Gram block: no scalar variables needed.
    pub fn new_sos_poly(&mut self, vars: &[Var], degree: u32) -> (u32, LinearPoly) {
        let basis = monomial_basis(vars, degree.div_ceil(2));
        let block = self.push_block(basis.clone());
        let mut poly = LinearPoly::zero();
        for i in 0..basis.len() {
            for j in i..basis.len() {
                poly.entry(&basis[i].mul(&basis[j])).add_term(
                    VRef::Gram {
                        block,
                        i: i as u16,
                        j: j as u16,
                    },
                    1.0,
                );
            }
        }
        (block, poly)
    }

    /// Fresh raw PSD block of the given dimension, not tied to any SOS
    /// identity. Entries are addressed through `VRef::Gram` and pinned with
    /// `add_equality`; used for epigraph encodings of quadratic objectives.
    pub fn new_psd_block(&mut self, dim: usize) -> u32 {
        self.push_block(vec![Monomial::one(); dim])
    }

    /// Raw linear equality Σ aᵢ·varᵢ = rhs on the decision variables.
    pub fn add_equality(&mut self, terms: Vec<(VRef, f64)>, rhs: f64) {
        self.equalities.push(EqRow { terms, rhs });
    }

    fn push_block(&mut self, basis: Vec<Monomial>) -> u32 {
        self.block_bases.push(basis);
        (self.block_bases.len() - 1) as u32
    }

    /// Constrain `expr ∈ Σ[x]`: introduce a Gram block on the half-degree
    /// basis of expr's support and equate coefficients monomial by monomial.
    pub fn add_sos(&mut self, expr: LinearPoly) -> u32 {
        let vars: Vec<Var> = expr.vars().into_iter().collect();
        let half = expr.max_degree().div_ceil(2);
        let basis = monomial_basis(&vars, half);
        let block = self.push_block(basis.clone());

        // gram-side coefficient of each product monomial
        let mut gram_side: BTreeMap<Monomial, Vec<(VRef, f64)>> = BTreeMap::new();
        for i in 0..basis.len() {
            for j in i..basis.len() {
                gram_side
                    .entry(basis[i].mul(&basis[j]))
                    .or_default()
                    .push((
                        VRef::Gram {
                            block,
                            i: i as u16,
                            j: j as u16,
                        },
                        1.0,
                    ));
            }
        }
        // every product monomial and every expr monomial yields one equality:
        // Σ gram entries − (decision part of expr coeff) = constant part
        let monomials: BTreeSet<Monomial> = gram_side
            .keys()
            .cloned()
            .chain(expr.terms.keys().cloned())
            .collect();
        for m in monomials {
            let mut terms: BTreeMap<VRef, f64> = BTreeMap::new();
            if let Some(gs) = gram_side.get(&m) {
                for (v, a) in gs {
                    *terms.entry(*v).or_insert(0.0) += a;
                }
            }
            let mut rhs = 0.0;
            if let Some(e) = expr.terms.get(&m) {
                rhs = e.c;
                for (v, a) in &e.terms {
                    *terms.entry(*v).or_insert(0.0) -= a;
                }
            }
            self.equalities.push(EqRow {
                terms: terms.into_iter().filter(|(_, a)| *a != 0.0).collect(),
                rhs,
            });
        }
        self.records.push(SosRecord { expr, block, basis });
        block
    }

    pub fn set_objective(&mut self, objective: Vec<(VRef, f64)>) {
        self.objective = objective;
    }

    pub fn compile(&self) -> SdpProblem {
        // Row equilibration: rescaling an equality row leaves the feasible
        // set unchanged but keeps the interior-point iteration conditioned
        // when coefficients span many orders of magnitude. Well-scaled rows
        // are passed through untouched.
        let equalities = self
            .equalities
            .iter()
            .map(|eq| {
                let scale = eq
                    .terms
                    .iter()
                    .map(|(_, a)| a.abs())
                    .fold(eq.rhs.abs(), f64::max);
                if scale.is_finite() && (scale > 1e2 || (scale > 0.0 && scale < 1e-2)) {
                    EqRow {
                        terms: eq.terms.iter().map(|(v, a)| (*v, a / scale)).collect(),
                        rhs: eq.rhs / scale,
                    }
                } else {
                    eq.clone()
                }
            })
            .collect();
        SdpProblem {
            block_dims: self.block_bases.iter().map(|b| b.len()).collect(),
            scalar_bounds: self.scalar_bounds.clone(),
            equalities,
            objective: self.objective.clone(),
        }
    }

    /// Verify every recorded SOS identity against a solved assignment:
    /// max over monomials |expr coeff − zᵀGz coeff| ≤ 1e-6·max(1, scale).
    pub fn verify_residuals(&self, sol: &SosSolution) -> Result<()> {
        for (k, rec) in self.records.iter().enumerate() {
            let lhs = rec.expr.value(sol);
            let rhs = sol.gram_poly(rec.block, &rec.basis);
            let diff = lhs.sub(&rhs);
            let scale = lhs.max_abs_coeff().max(rhs.max_abs_coeff());
            let worst = diff.max_abs_coeff();
            if worst > 1e-6 * scale.max(1.0) {
                return Err(Error::Residual(format!(
                    "SOS identity {k}: coefficient residual {worst:.3e} exceeds \
                     tolerance at scale {scale:.3e}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::var;

    #[test]
    fn basis_sizes_are_binomial() {
        // C(n+d, d): 1 var deg 4 → 5; 2 vars deg 2 → 6; 3 vars deg 8 → 165
        assert_eq!(monomial_basis(&[var("x")], 4).len(), 5);
        assert_eq!(monomial_basis(&[var("x"), var("y")], 2).len(), 6);
        let b3 = monomial_basis(&[var("x"), var("y"), var("z")], 8);
        // independent enumeration: count exponent triples with sum ≤ 8
        let mut count = 0;
        for i in 0..=8u32 {
            for j in 0..=8 - i {
                for _k in 0..=8 - i - j {
                    count += 1;
                }
            }
        }
        assert_eq!(b3.len(), count);
        assert_eq!(b3.len(), 165);
    }

    #[test]
    fn basis_is_sorted_and_distinct() {
        let b = monomial_basis(&[var("x"), var("y")], 3);
        for w in b.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert_eq!(b.len(), 10);
    }

    #[test]
    fn constant_sos_gives_one_by_one_block() {
        let mut prog = SosProgram::new();
        let expr = LinearPoly::from_poly(&Polynomial::one());
        let block = prog.add_sos(expr);
        let sdp = prog.compile();
        assert_eq!(sdp.block_dims, vec![1]);
        // single equality G₁₁ = 1
        assert_eq!(sdp.equalities.len(), 1);
        assert_eq!(sdp.equalities[0].rhs, 1.0);
        assert_eq!(
            sdp.equalities[0].terms,
            vec![(VRef::Gram { block, i: 0, j: 0 }, 1.0)]
        );
    }

    #[test]
    fn one_constraint_on_linear_basis_counts() {
        // SOS over basis {1, x}: one 2×2 block, 3 equalities (1, x, x²)
        let mut prog = SosProgram::new();
        let p = crate::parse::parse_polynomial(
            "x^2 + 2*x + 1",
            &[var("x")].into_iter().collect(),
        )
        .unwrap();
        prog.add_sos(LinearPoly::from_poly(&p));
        let sdp = prog.compile();
        assert_eq!(sdp.block_dims, vec![2]);
        assert_eq!(sdp.equalities.len(), 3);
    }

    #[test]
    fn perfect_square_gram_passes_residual_check() {
        // (x+1)² = zᵀGz with G = [[1,1],[1,1]] on {1, x}
        let mut prog = SosProgram::new();
        let p = crate::parse::parse_polynomial(
            "x^2 + 2*x + 1",
            &[var("x")].into_iter().collect(),
        )
        .unwrap();
        prog.add_sos(LinearPoly::from_poly(&p));
        let sol = SosSolution {
            scalars: vec![],
            grams: vec![vec![1.0, 1.0, 1.0, 1.0]],
            block_dims: vec![2],
        };
        prog.verify_residuals(&sol).unwrap();
        // a perturbed Gram entry must be rejected
        let bad = SosSolution {
            grams: vec![vec![1.0, 1.0, 1.0, 1.01]],
            ..sol
        };
        assert!(matches!(
            prog.verify_residuals(&bad),
            Err(Error::Residual(_))
        ));
    }

    #[test]
    fn template_linearization_round_trips() {
        let mut prog = SosProgram::new();
        let t = prog.new_template(&[var("x")], 4, 1000.0);
        assert_eq!(t.basis.len(), 5);
        let lp = t.linear();
        let sol = SosSolution {
            scalars: vec![1.0, -2.0, 0.5, 0.0, 3.0],
            grams: vec![],
            block_dims: vec![],
        };
        let direct = t.value(&sol);
        let via_linear = lp.value(&sol);
        assert!(direct.sub(&via_linear).max_abs_coeff() < 1e-15);
    }

    #[test]
    fn sos_poly_expands_to_gram_quadratic() {
        let mut prog = SosProgram::new();
        let (block, s) = prog.new_sos_poly(&[var("x")], 2);
        // assign G = [[2, 0.5], [0.5, 1]] on {1, x}: s = 2 + x + x²
        let sol = SosSolution {
            scalars: vec![],
            grams: vec![vec![2.0, 0.5, 0.5, 1.0]],
            block_dims: vec![2],
        };
        let got = s.value(&sol);
        let want = sol.gram_poly(block, &prog.block_bases[block as usize]);
        assert!(got.sub(&want).max_abs_coeff() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn compile_is_deterministic() {
        let build = || {
            let mut prog = SosProgram::new();
            let t = prog.new_template(&[var("x"), var("y")], 2, 100.0);
            let (_b, s) = prog.new_sos_poly(&[var("x"), var("y")], 2);
            let mut expr = t.linear();
            expr.add_assign(&s, -1.0);
            prog.add_sos(expr);
            prog.set_objective(vec![(VRef::Scalar(t.coeff_ids[0]), 1.0)]);
            prog.compile().to_sparse_text()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn multiplier_product_keeps_affine_coefficients() {
        // s(x)·h(x) for h = x² − 1 stays affine in the Gram entries
        let mut prog = SosProgram::new();
        let (_b, s) = prog.new_sos_poly(&[var("x")], 2);
        let h = crate::parse::parse_polynomial("x^2 - 1", &[var("x")].into_iter().collect())
            .unwrap();
        let sh = s.mul_poly(&h);
        let sol = SosSolution {
            scalars: vec![],
            grams: vec![vec![1.0, 0.0, 0.0, 2.0]],
            block_dims: vec![2],
        };
        // s = 1 + 2x², s·h = (1+2x²)(x²−1) = −1 + x² + 2x⁴ − 2x²  = −1 − x² + 2x⁴
        let got = sh.value(&sol);
        let want = crate::parse::parse_polynomial(
            "2*x^4 - x^2 - 1",
            &[var("x")].into_iter().collect(),
        )
        .unwrap();
        assert!(got.sub(&want).max_abs_coeff() < 1e-15, "{got}");
    }
}

//! Sparse multivariate polynomial arithmetic.
//!
//! Polynomials are stored as maps from monomials to coefficients, with a
//! graded-lexicographic term order fixed by the (ascending) variable names.
//! Values are immutable after construction; every operation returns a new
//! polynomial. Terms whose coefficient magnitude falls below `COEFF_EPS`
//! are dropped after arithmetic to bound term growth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Magnitude below which coefficients are discarded (below solver tolerance).
pub const COEFF_EPS: f64 = 1e-14;

/// Scalar coefficient type for [`Poly`].
pub trait Scalar:
    Float + FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
}

/// Interned variable name.
pub type Var = Arc<str>;

/// A power product of variables. Zero exponents are never stored.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial {
    exps: BTreeMap<Var, u32>,
}

impl Monomial {
    pub fn one() -> Self {
        Monomial::default()
    }

    pub fn var(name: &Var) -> Self {
        Monomial::from_powers([(name.clone(), 1)])
    }

    pub fn from_powers(powers: impl IntoIterator<Item = (Var, u32)>) -> Self {
        let mut exps = BTreeMap::new();
        for (v, p) in powers {
            if p > 0 {
                *exps.entry(v).or_insert(0) += p;
            }
        }
        Monomial { exps }
    }

    pub fn degree(&self) -> u32 {
        self.exps.values().sum()
    }

    pub fn degree_in(&self, var: &str) -> u32 {
        self.exps.get(var).copied().unwrap_or(0)
    }

    pub fn contains(&self, var: &str) -> bool {
        self.exps.contains_key(var)
    }

    pub fn is_one(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn powers(&self) -> impl Iterator<Item = (&Var, u32)> {
        self.exps.iter().map(|(v, &p)| (v, p))
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut exps = self.exps.clone();
        for (v, p) in &other.exps {
            *exps.entry(v.clone()).or_insert(0) += p;
        }
        Monomial { exps }
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        match self.degree().cmp(&other.degree()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        // Lexicographic tie-break: the earlier variable name is more
        // significant and a larger exponent on it ranks higher.
        let mut a = self.exps.iter();
        let mut b = other.exps.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ordering::Equal,
                // Fewer leading variables means the power sits on a later
                // name; a term present on an earlier name ranks higher.
                (None, Some(_)) => return Ordering::Less,
                (Some(_), None) => return Ordering::Greater,
                (Some((va, pa)), Some((vb, pb))) => match va.cmp(vb) {
                    Ordering::Less => return Ordering::Greater,
                    Ordering::Greater => return Ordering::Less,
                    Ordering::Equal => match pa.cmp(pb) {
                        Ordering::Equal => continue,
                        ord => return ord,
                    },
                },
            }
        }
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return write!(f, "1");
        }
        let mut first = true;
        for (v, p) in &self.exps {
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if *p == 1 {
                write!(f, "{v}")?;
            } else {
                write!(f, "{v}^{p}")?;
            }
        }
        Ok(())
    }
}

/// Sparse multivariate polynomial with coefficients of type `T`.
#[derive(Clone, PartialEq, Default)]
pub struct Poly<T: Scalar> {
    terms: BTreeMap<Monomial, T>,
}

impl<T: Scalar> Poly<T> {
    pub fn zero() -> Self {
        Poly::default()
    }

    pub fn constant(c: T) -> Self {
        let mut p = Poly::zero();
        p.add_term(Monomial::one(), c);
        p
    }

    pub fn one() -> Self {
        Poly::constant(T::one())
    }

    pub fn var(name: &Var) -> Self {
        let mut p = Poly::zero();
        p.add_term(Monomial::var(name), T::one());
        p
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, T)>) -> Self {
        let mut p = Poly::zero();
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    fn eps() -> T {
        T::from_f64(COEFF_EPS).unwrap()
    }

    fn add_term(&mut self, m: Monomial, c: T) {
        use std::collections::btree_map::Entry;
        match self.terms.entry(m) {
            Entry::Vacant(e) => {
                if c.abs() >= Self::eps() {
                    e.insert(c);
                }
            }
            Entry::Occupied(mut e) => {
                let v = *e.get() + c;
                if v.abs() < Self::eps() {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
        }
    }

    fn cleanup(mut self) -> Self {
        self.terms.retain(|_, c| c.abs() >= Self::eps());
        self
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &T)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> T {
        self.terms.get(m).copied().unwrap_or_else(T::zero)
    }

    pub fn constant_term(&self) -> T {
        self.coeff(&Monomial::one())
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn degree_in(&self, var: &str) -> u32 {
        self.terms.keys().map(|m| m.degree_in(var)).max().unwrap_or(0)
    }

    /// Ordered set of variables appearing with nonzero exponent.
    pub fn vars(&self) -> BTreeSet<Var> {
        let mut s = BTreeSet::new();
        for m in self.terms.keys() {
            for (v, _) in m.powers() {
                s.insert(v.clone());
            }
        }
        s
    }

    pub fn add(&self, other: &Poly<T>) -> Poly<T> {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            let entry = out.terms.entry(m.clone()).or_insert_with(T::zero);
            *entry = *entry + *c;
        }
        out.cleanup()
    }

    pub fn sub(&self, other: &Poly<T>) -> Poly<T> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Poly<T> {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = -*c;
        }
        out
    }

    pub fn scale(&self, k: T) -> Poly<T> {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = *c * k;
        }
        out.cleanup()
    }

    pub fn mul(&self, other: &Poly<T>) -> Poly<T> {
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let m = ma.mul(mb);
                let entry = out.terms.entry(m).or_insert_with(T::zero);
                *entry = *entry + *ca * *cb;
            }
        }
        out.cleanup()
    }

    pub fn mul_monomial(&self, m: &Monomial, k: T) -> Poly<T> {
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            out.terms.insert(ma.mul(m), *ca * k);
        }
        out.cleanup()
    }

    pub fn pow(&self, n: u32) -> Poly<T> {
        let mut out = Poly::one();
        let mut base = self.clone();
        let mut n = n;
        while n > 0 {
            if n & 1 == 1 {
                out = out.mul(&base);
            }
            n >>= 1;
            if n > 0 {
                base = base.mul(&base);
            }
        }
        out
    }

    /// Substitute every variable by its image polynomial. Every variable of
    /// `self` must have an entry; identity images are permitted.
    pub fn compose(&self, images: &BTreeMap<Var, Poly<T>>) -> Result<Poly<T>> {
        for v in self.vars() {
            if !images.contains_key(&v) {
                return Err(Error::MissingSubstitution(v.to_string()));
            }
        }
        // Cache image powers per variable.
        let mut powers: BTreeMap<Var, Vec<Poly<T>>> = BTreeMap::new();
        let mut out = Poly::zero();
        for (m, c) in &self.terms {
            let mut prod = Poly::constant(*c);
            for (v, p) in m.powers() {
                let cache = powers.entry(v.clone()).or_insert_with(|| vec![Poly::one()]);
                while cache.len() <= p as usize {
                    let next = cache.last().unwrap().mul(&images[v]);
                    cache.push(next);
                }
                prod = prod.mul(&cache[p as usize]);
            }
            out = out.add(&prod);
        }
        Ok(out)
    }

    /// Evaluate at a point. Every variable must be assigned.
    pub fn eval(&self, point: &BTreeMap<Var, T>) -> Result<T> {
        let mut acc = T::zero();
        for (m, c) in &self.terms {
            let mut t = *c;
            for (v, p) in m.powers() {
                let x = point
                    .get(v)
                    .copied()
                    .ok_or_else(|| Error::UnassignedVariable(v.to_string()))?;
                t = t * x.powi(p as i32);
            }
            acc = acc + t;
        }
        Ok(acc)
    }

    /// Precompile against an ordered variable slice for fast repeated
    /// evaluation. Errors if a variable of `self` is not in `vars`.
    pub fn evaluator(&self, vars: &[Var]) -> Result<PolyEval<T>> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for (m, c) in &self.terms {
            let mut idx = Vec::new();
            for (v, p) in m.powers() {
                let i = vars
                    .iter()
                    .position(|w| w == v)
                    .ok_or_else(|| Error::UnassignedVariable(v.to_string()))?;
                idx.push((i, p));
            }
            terms.push((idx, *c));
        }
        Ok(PolyEval { terms })
    }

    /// Antiderivative with respect to `var`.
    pub fn antiderivative(&self, var: &Var) -> Poly<T> {
        let mut out = Poly::zero();
        for (m, c) in &self.terms {
            let k = m.degree_in(var);
            let mut powers: Vec<(Var, u32)> =
                m.powers().map(|(v, p)| (v.clone(), p)).collect();
            if k == 0 {
                powers.push((var.clone(), 1));
            } else {
                for e in powers.iter_mut() {
                    if e.0.as_ref() == var.as_ref() {
                        e.1 = k + 1;
                    }
                }
            }
            let coeff = *c / T::from_u32(k + 1).unwrap();
            out.add_term(Monomial::from_powers(powers), coeff);
        }
        out
    }

    /// Definite integral in `var` between polynomial bounds: F(upper) - F(lower),
    /// where F is the antiderivative in `var`. The bounds must not contain `var`.
    pub fn integrate_var(&self, var: &Var, lower: &Poly<T>, upper: &Poly<T>) -> Result<Poly<T>> {
        for b in [lower, upper] {
            if b.degree_in(var) > 0 {
                return Err(Error::BoundContainsVar(var.to_string()));
            }
        }
        let anti = self.antiderivative(var);
        let mut vars_needed: BTreeSet<Var> = anti.vars();
        vars_needed.remove(var);
        let mut upper_map: BTreeMap<Var, Poly<T>> = BTreeMap::new();
        let mut lower_map: BTreeMap<Var, Poly<T>> = BTreeMap::new();
        for v in &vars_needed {
            upper_map.insert(v.clone(), Poly::var(v));
            lower_map.insert(v.clone(), Poly::var(v));
        }
        upper_map.insert(var.clone(), upper.clone());
        lower_map.insert(var.clone(), lower.clone());
        Ok(anti.compose(&upper_map)?.sub(&anti.compose(&lower_map)?))
    }

    /// Max absolute coefficient, 0 for the zero polynomial.
    pub fn max_abs_coeff(&self) -> T {
        self.terms
            .values()
            .fold(T::zero(), |acc, c| acc.max(c.abs()))
    }
}

/// A polynomial compiled against a fixed variable ordering.
#[derive(Clone, Debug)]
pub struct PolyEval<T> {
    terms: Vec<(Vec<(usize, u32)>, T)>,
}

impl<T: Scalar> PolyEval<T> {
    pub fn eval(&self, point: &[T]) -> T {
        let mut acc = T::zero();
        for (idx, c) in &self.terms {
            let mut t = *c;
            for &(i, p) in idx {
                t = t * point[i].powi(p as i32);
            }
            acc = acc + t;
        }
        acc
    }
}

impl<T: Scalar> fmt::Display for Poly<T> {
    /// Canonical rendering: terms in descending graded-lex order,
    /// `c*x^a*y^b` joined by ` + `.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            if m.is_one() {
                write!(f, "{c}")?;
            } else {
                write!(f, "{c}*{m:?}")?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Debug for Poly<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

/// Intern a variable name.
pub fn var(name: &str) -> Var {
    Arc::from(name)
}

/// Build a point map from (name, value) pairs.
pub fn point<T: Scalar>(pairs: &[(&str, T)]) -> BTreeMap<Var, T> {
    pairs.iter().map(|(n, v)| (var(n), *v)).collect()
}

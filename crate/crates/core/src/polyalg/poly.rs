use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use super::monomial::Monomial;
use crate::error::{Error, Result};

/// Default relative prune threshold applied after arithmetic.
pub const DEFAULT_PRUNE_REL: f64 = 1e-14;

/// Sparse multivariate polynomial with `f64` coefficients.
///
/// Terms are kept in graded order (see [`Monomial`]). After every
/// arithmetic operation, terms whose magnitude is at or below
/// `prune_rel * max|coef|` are dropped; exact zeros are never stored.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "PolyJson", into = "PolyJson")]
pub struct MultiPoly {
    num_vars: usize,
    terms: BTreeMap<Monomial, f64>,
    prune_rel: f64,
}

impl MultiPoly {
    pub fn zero(num_vars: usize) -> Self {
        MultiPoly {
            num_vars,
            terms: BTreeMap::new(),
            prune_rel: DEFAULT_PRUNE_REL,
        }
    }

    pub fn constant(num_vars: usize, c: f64) -> Self {
        let mut p = Self::zero(num_vars);
        if c != 0.0 {
            p.terms.insert(Monomial::one(num_vars), c);
        }
        p
    }

    /// The polynomial `x_var`.
    pub fn var(num_vars: usize, var: usize) -> Self {
        assert!(var < num_vars, "variable {var} out of range");
        let mut p = Self::zero(num_vars);
        p.terms.insert(Monomial::var(num_vars, var), 1.0);
        p
    }

    pub fn monomial(num_vars: usize, exps: Vec<u32>, coef: f64) -> Result<Self> {
        Self::from_terms(num_vars, [(exps, coef)])
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs, merging
    /// repeated exponents. Only exact zeros are dropped.
    pub fn from_terms<I>(num_vars: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut p = Self::zero(num_vars);
        for (exps, coef) in terms {
            if exps.len() != num_vars {
                return Err(Error::DimensionMismatch {
                    what: "exponent length",
                    expected: num_vars,
                    got: exps.len(),
                });
            }
            if !coef.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite coefficient {coef}"
                )));
            }
            *p.terms.entry(Monomial::new(exps)).or_insert(0.0) += coef;
        }
        p.terms.retain(|_, c| *c != 0.0);
        Ok(p)
    }

    /// Sets the relative prune threshold used by subsequent arithmetic.
    /// Results inherit the smaller threshold of their operands.
    pub fn with_prune_threshold(mut self, rel: f64) -> Self {
        self.prune_rel = rel.max(0.0);
        self
    }

    pub fn prune_threshold(&self) -> f64 {
        self.prune_rel
    }

    #[inline]
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().next_back().map_or(0, |m| m.degree())
    }

    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn coefficient(&self, exps: &[u32]) -> f64 {
        self.terms
            .get(&Monomial::new(exps.to_vec()))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.terms
            .get(&Monomial::one(self.num_vars))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    fn check_same_vars(&self, other: &MultiPoly) -> Result<()> {
        if self.num_vars != other.num_vars {
            return Err(Error::DimensionMismatch {
                what: "polynomial variable count",
                expected: self.num_vars,
                got: other.num_vars,
            });
        }
        Ok(())
    }

    fn pruned(mut self) -> Self {
        let cut = self.prune_rel * self.max_abs_coefficient();
        self.terms.retain(|_, c| *c != 0.0 && c.abs() > cut);
        self
    }

    pub fn try_add(&self, other: &MultiPoly) -> Result<MultiPoly> {
        self.check_same_vars(other)?;
        let mut out = self.clone();
        out.prune_rel = self.prune_rel.min(other.prune_rel);
        for (m, c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        Ok(out.pruned())
    }

    pub fn try_sub(&self, other: &MultiPoly) -> Result<MultiPoly> {
        self.try_add(&other.scale(-1.0))
    }

    pub fn scale(&self, factor: f64) -> MultiPoly {
        let mut out = self.clone();
        if factor == 0.0 {
            out.terms.clear();
        } else {
            out.terms.values_mut().for_each(|c| *c *= factor);
        }
        out
    }

    /// Product, dropping every term of total degree above `trunc_order`
    /// when one is given.
    pub fn try_mul(&self, other: &MultiPoly, trunc_order: Option<u32>) -> Result<MultiPoly> {
        self.check_same_vars(other)?;
        let limit = trunc_order.unwrap_or(u32::MAX);
        let mut out = MultiPoly::zero(self.num_vars);
        out.prune_rel = self.prune_rel.min(other.prune_rel);
        for (ma, ca) in &self.terms {
            if ma.degree() > limit {
                // Terms are sorted by degree.
                break;
            }
            for (mb, cb) in &other.terms {
                if ma.degree() + mb.degree() > limit {
                    break;
                }
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        Ok(out.pruned())
    }

    pub fn pow(&self, k: u32, trunc_order: Option<u32>) -> MultiPoly {
        let mut acc = MultiPoly::constant(self.num_vars, 1.0).with_prune_threshold(self.prune_rel);
        for _ in 0..k {
            acc = acc.try_mul(self, trunc_order).expect("same variable count");
        }
        acc
    }

    /// Exact formal partial derivative with respect to `var`.
    pub fn partial_derivative(&self, var: usize) -> Result<MultiPoly> {
        if var >= self.num_vars {
            return Err(Error::IndexOutOfRange {
                index: var,
                len: self.num_vars,
            });
        }
        let mut out = MultiPoly::zero(self.num_vars).with_prune_threshold(self.prune_rel);
        for (m, c) in &self.terms {
            let e = m.exps()[var];
            if e == 0 {
                continue;
            }
            let mut exps = m.exps().to_vec();
            exps[var] -= 1;
            *out.terms.entry(Monomial::new(exps)).or_insert(0.0) += c * e as f64;
        }
        Ok(out)
    }

    /// Drops all terms of total degree above `order`.
    pub fn truncate(&self, order: u32) -> MultiPoly {
        let mut out = self.clone();
        out.terms.retain(|m, _| m.degree() <= order);
        out
    }

    /// Keeps only the terms of total degree at least `min_degree`.
    pub fn drop_below_degree(&self, min_degree: u32) -> MultiPoly {
        let mut out = self.clone();
        out.terms.retain(|m, _| m.degree() >= min_degree);
        out
    }

    /// Keeps only the terms of exactly the given degree.
    pub fn homogeneous_part(&self, degree: u32) -> MultiPoly {
        let mut out = self.clone();
        out.terms.retain(|m, _| m.degree() == degree);
        out
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.num_vars {
            return Err(Error::DimensionMismatch {
                what: "evaluation point length",
                expected: self.num_vars,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Sums monomial values in graded term order.
    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        self.check_point(z)?;
        Ok(self.terms.iter().map(|(m, c)| c * m.evaluate(z)).sum())
    }

    /// Nested Horner evaluation: `p = sum_k x_1^k p_k(x_2, ..)` recursively.
    pub fn evaluate_horner(&self, z: &[f64]) -> Result<f64> {
        self.check_point(z)?;
        let terms: Vec<(&[u32], f64)> = self.terms.iter().map(|(m, c)| (m.exps(), *c)).collect();
        Ok(horner(&terms, 0, z))
    }

    /// Substitutes `inner[i]` for variable `i`, truncating at `trunc_order`.
    pub(crate) fn substitute(
        &self,
        inner: &[MultiPoly],
        inner_vars: usize,
        trunc_order: u32,
        powers: &mut PowerCache,
    ) -> MultiPoly {
        let prune = inner
            .iter()
            .fold(self.prune_rel, |p, q| p.min(q.prune_rel));
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, c) in &self.terms {
            let mut term = MultiPoly::constant(inner_vars, *c).with_prune_threshold(0.0);
            for (v, &e) in m.exps().iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let factor = powers.get(inner, v, e, trunc_order);
                term = term.try_mul(factor, Some(trunc_order)).expect("matching vars");
                if term.is_zero() {
                    break;
                }
            }
            for (tm, tc) in term.terms {
                *acc.entry(tm).or_insert(0.0) += tc;
            }
        }
        MultiPoly {
            num_vars: inner_vars,
            terms: acc,
            prune_rel: prune,
        }
        .pruned()
    }
}

/// Memoized truncated powers of the inner components during substitution.
pub(crate) struct PowerCache {
    table: Vec<Vec<MultiPoly>>,
}

impl PowerCache {
    pub(crate) fn new(num_inner: usize) -> Self {
        PowerCache {
            table: vec![Vec::new(); num_inner],
        }
    }

    fn get(&mut self, inner: &[MultiPoly], v: usize, e: u32, trunc: u32) -> &MultiPoly {
        let row = &mut self.table[v];
        if row.is_empty() {
            row.push(inner[v].truncate(trunc).with_prune_threshold(0.0));
        }
        while row.len() < e as usize {
            let next = row
                .last()
                .unwrap()
                .try_mul(&row[0], Some(trunc))
                .expect("matching vars");
            row.push(next);
        }
        &row[e as usize - 1]
    }
}

fn horner(terms: &[(&[u32], f64)], var: usize, z: &[f64]) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    if var == z.len() {
        return terms.iter().map(|(_, c)| c).sum();
    }
    let max_e = terms.iter().map(|(e, _)| e[var]).max().unwrap_or(0);
    let mut acc = 0.0;
    for k in (0..=max_e).rev() {
        let group: Vec<(&[u32], f64)> = terms.iter().filter(|(e, _)| e[var] == k).copied().collect();
        acc = acc * z[var] + horner(&group, var + 1, z);
    }
    acc
}

impl PartialEq for MultiPoly {
    fn eq(&self, other: &Self) -> bool {
        self.num_vars == other.num_vars && self.terms == other.terms
    }
}

impl fmt::Debug for MultiPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MultiPoly[{}]({})", self.num_vars, self)
    }
}

impl fmt::Display for MultiPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (m, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            if m.is_one() {
                write!(f, "{c}")?;
            } else {
                write!(f, "{c}*{m}")?;
            }
        }
        Ok(())
    }
}

// Operator sugar panics on variable-count mismatch; use the `try_*`
// methods where that can happen.
impl Add for &MultiPoly {
    type Output = MultiPoly;
    fn add(self, rhs: &MultiPoly) -> MultiPoly {
        self.try_add(rhs).expect("polynomial variable count mismatch")
    }
}

impl Sub for &MultiPoly {
    type Output = MultiPoly;
    fn sub(self, rhs: &MultiPoly) -> MultiPoly {
        self.try_sub(rhs).expect("polynomial variable count mismatch")
    }
}

impl Mul for &MultiPoly {
    type Output = MultiPoly;
    fn mul(self, rhs: &MultiPoly) -> MultiPoly {
        self.try_mul(rhs, None).expect("polynomial variable count mismatch")
    }
}

impl Mul<f64> for &MultiPoly {
    type Output = MultiPoly;
    fn mul(self, rhs: f64) -> MultiPoly {
        self.scale(rhs)
    }
}

impl Neg for &MultiPoly {
    type Output = MultiPoly;
    fn neg(self) -> MultiPoly {
        self.scale(-1.0)
    }
}

#[derive(Serialize, Deserialize)]
struct TermJson {
    exp: Vec<u32>,
    coef: f64,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct PolyJson {
    num_vars: usize,
    terms: Vec<TermJson>,
}

impl From<MultiPoly> for PolyJson {
    fn from(p: MultiPoly) -> Self {
        PolyJson {
            num_vars: p.num_vars,
            terms: p
                .terms
                .into_iter()
                .map(|(m, coef)| TermJson {
                    exp: m.exps().to_vec(),
                    coef,
                })
                .collect(),
        }
    }
}

impl TryFrom<PolyJson> for MultiPoly {
    type Error = Error;
    fn try_from(j: PolyJson) -> Result<Self> {
        if j.num_vars == 0 {
            return Err(Error::InvalidInput("num_vars must be positive".into()));
        }
        MultiPoly::from_terms(j.num_vars, j.terms.into_iter().map(|t| (t.exp, t.coef)))
    }
}

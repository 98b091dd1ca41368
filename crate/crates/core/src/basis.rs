//! Normalized Legendre basis on a box, exact inner products, and
//! conversions between Legendre coefficients and monomials.
//!
//! Basis elements are tensor products `prod_i Lhat_{k_i}(u_i)` of the 1D
//! normalized Legendre polynomials, truncated by total degree and listed
//! in graded order. All inner products are evaluated exactly from the
//! monomial moments `int_{-1}^{1} u^e du`.

use std::collections::HashMap;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::polyalg::{Monomial, MultiPoly, PolyMap};

/// `int_{-1}^{1} u^e du`.
#[inline]
pub fn monomial_moment(e: u32) -> f64 {
    if e % 2 == 1 {
        0.0
    } else {
        2.0 / (e as f64 + 1.0)
    }
}

/// Monomial coefficients of `Lhat_0 .. Lhat_max` (index `[k][j]` is the
/// coefficient of `x^j` in `Lhat_k`), from the three-term recurrence of
/// the classical polynomials scaled by `sqrt((2k+1)/2)`.
pub fn legendre_coefficients(max_order: u32) -> Vec<Vec<f64>> {
    let n = max_order as usize;
    let mut p: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    p.push(vec![1.0]);
    if n >= 1 {
        p.push(vec![0.0, 1.0]);
    }
    for k in 1..n {
        let kf = k as f64;
        let mut next = vec![0.0; k + 2];
        for (j, c) in p[k].iter().enumerate() {
            next[j + 1] += (2.0 * kf + 1.0) * c / (kf + 1.0);
        }
        for (j, c) in p[k - 1].iter().enumerate() {
            next[j] -= kf * c / (kf + 1.0);
        }
        p.push(next);
    }
    p.into_iter()
        .enumerate()
        .map(|(k, coeffs)| {
            let s = ((2 * k + 1) as f64 / 2.0).sqrt();
            coeffs.into_iter().map(|c| c * s).collect()
        })
        .collect()
}

/// The normalized Legendre polynomial of degree `k` in one variable.
pub fn legendre_1d_normalized(k: u32) -> MultiPoly {
    let coeffs = legendre_coefficients(k).pop().unwrap();
    MultiPoly::from_terms(
        1,
        coeffs
            .into_iter()
            .enumerate()
            .map(|(j, c)| (vec![j as u32], c)),
    )
    .expect("one variable")
}

/// `<u^e, Lhat_k>` on `[-1, 1]` in closed form (zero unless `k <= e` and
/// `e - k` is even):
/// `sqrt((2k+1)/2) * 2^(k+1) e! ((e+k)/2)! / (((e-k)/2)! (e+k+1)!)`.
pub fn legendre_moment(e: u32, k: u32) -> f64 {
    if k > e || (e - k) % 2 == 1 {
        return 0.0;
    }
    let half_sum = (e + k) / 2;
    let half_diff = (e - k) / 2;
    // Accumulate the factorial ratio in log space to stay finite.
    let ln_fact = |n: u32| (1..=n).map(|i| (i as f64).ln()).sum::<f64>();
    let ln_val = (k as f64 + 1.0) * std::f64::consts::LN_2 + ln_fact(e) + ln_fact(half_sum)
        - ln_fact(half_diff)
        - ln_fact(e + k + 1);
    ((2 * k + 1) as f64 / 2.0).sqrt() * ln_val.exp()
}

/// Exact `L2([-1,1]^d)` inner product with unit weight.
pub fn inner_product(p: &MultiPoly, q: &MultiPoly) -> Result<f64> {
    if p.num_vars() != q.num_vars() {
        return Err(Error::DimensionMismatch {
            what: "inner product variable count",
            expected: p.num_vars(),
            got: q.num_vars(),
        });
    }
    let mut acc = 0.0;
    for (ma, ca) in p.terms() {
        for (mb, cb) in q.terms() {
            let mut w = ca * cb;
            for (ea, eb) in ma.exps().iter().zip(mb.exps()) {
                w *= monomial_moment(ea + eb);
                if w == 0.0 {
                    break;
                }
            }
            acc += w;
        }
    }
    Ok(acc)
}

/// Truncated tensor-product basis of normalized Legendre polynomials.
#[derive(Debug, Clone)]
pub struct BasisSpec {
    dim: usize,
    max_order: u32,
    index_list: Vec<Monomial>,
    position: HashMap<Monomial, usize>,
    legendre: Vec<Vec<f64>>,
    // moments[e][k] = <u^e, Lhat_k>
    moments: Vec<Vec<f64>>,
    functions: Vec<MultiPoly>,
}

impl BasisSpec {
    pub fn new(dim: usize, max_order: u32) -> Result<Self> {
        if dim == 0 || max_order == 0 {
            return Err(Error::InvalidInput(format!(
                "basis needs positive dimension and order (got {dim}, {max_order})"
            )));
        }
        let index_list = Monomial::enumerate(dim, max_order);
        let position = index_list
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let legendre = legendre_coefficients(max_order);
        let max_e = 4 * max_order + 16;
        let moments = (0..=max_e)
            .map(|e| (0..=e).map(|k| legendre_moment(e, k)).collect())
            .collect();
        let mut spec = BasisSpec {
            dim,
            max_order,
            index_list,
            position,
            legendre,
            moments,
            functions: Vec::new(),
        };
        spec.functions = spec
            .index_list
            .iter()
            .map(|idx| spec.tensor_product(idx))
            .collect();
        Ok(spec)
    }

    fn tensor_product(&self, idx: &Monomial) -> MultiPoly {
        let mut acc = MultiPoly::constant(self.dim, 1.0).with_prune_threshold(0.0);
        for (var, &k) in idx.exps().iter().enumerate() {
            let factor = MultiPoly::from_terms(
                self.dim,
                self.legendre[k as usize].iter().enumerate().map(|(j, &c)| {
                    let mut e = vec![0; self.dim];
                    e[var] = j as u32;
                    (e, c)
                }),
            )
            .expect("matching dims")
            .with_prune_threshold(0.0);
            acc = &acc * &factor;
        }
        acc.with_prune_threshold(crate::polyalg::DEFAULT_PRUNE_REL)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    /// Number of basis functions, `C(dim + max_order, max_order)`.
    #[inline]
    pub fn len(&self) -> usize {
        self.index_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_list.is_empty()
    }

    pub fn index_list(&self) -> &[Monomial] {
        &self.index_list
    }

    pub fn position(&self, idx: &[u32]) -> Option<usize> {
        self.position.get(&Monomial::new(idx.to_vec())).copied()
    }

    pub fn basis_function(&self, idx: &[u32]) -> Result<&MultiPoly> {
        self.position(idx)
            .map(|i| &self.functions[i])
            .ok_or_else(|| Error::NotInBasis(idx.to_vec()))
    }

    /// Basis function by position in the index list.
    pub fn function(&self, i: usize) -> &MultiPoly {
        &self.functions[i]
    }

    /// `<u^e, Lhat_k>` in one dimension.
    #[inline]
    fn moment_against(&self, e: u32, k: u32) -> f64 {
        if (e + k) % 2 == 1 || k > e {
            return 0.0;
        }
        match self.moments.get(e as usize) {
            Some(row) => row[k as usize],
            None => legendre_moment(e, k),
        }
    }

    fn check_dim(&self, p: &MultiPoly) -> Result<()> {
        if p.num_vars() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "basis dimension",
                expected: self.dim,
                got: p.num_vars(),
            });
        }
        Ok(())
    }

    /// Coefficients `c_j = <p, L_j>` over the whole basis.
    ///
    /// Evaluated monomial by monomial: `<u^e, L_idx>` factors into 1D
    /// moments and vanishes unless `idx_i <= e_i` with equal parity.
    pub fn project(&self, p: &MultiPoly) -> Result<DVector<f64>> {
        self.check_dim(p)?;
        let mut c = DVector::zeros(self.len());
        let mut idx = vec![0u32; self.dim];
        for (m, coef) in p.terms() {
            self.accumulate(m.exps(), coef, 0, 0, &mut idx, &mut c, None);
        }
        Ok(c)
    }

    /// Projection together with the `L2` norm of the part of `p` that the
    /// basis cannot represent (its components on higher-degree tensor
    /// Legendre functions).
    pub fn project_with_residual(&self, p: &MultiPoly) -> Result<(DVector<f64>, f64)> {
        self.check_dim(p)?;
        let mut c = DVector::zeros(self.len());
        let mut idx = vec![0u32; self.dim];
        let mut overflow = HashMap::new();
        for (m, coef) in p.terms() {
            self.accumulate(m.exps(), coef, 0, 0, &mut idx, &mut c, Some(&mut overflow));
        }
        let residual = overflow.values().map(|v| v * v).sum::<f64>().sqrt();
        Ok((c, residual))
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        exps: &[u32],
        weight: f64,
        var: usize,
        degree: u32,
        idx: &mut Vec<u32>,
        out: &mut DVector<f64>,
        mut overflow: Option<&mut HashMap<Vec<u32>, f64>>,
    ) {
        if var == self.dim {
            if degree <= self.max_order {
                let pos = self.position[&Monomial::new(idx.clone())];
                out[pos] += weight;
            } else if let Some(of) = overflow {
                *of.entry(idx.clone()).or_insert(0.0) += weight;
            }
            return;
        }
        let e = exps[var];
        let mut k = e % 2;
        while k <= e {
            if degree + k > self.max_order && overflow.is_none() {
                break;
            }
            let w = self.moment_against(e, k);
            if w != 0.0 {
                idx[var] = k;
                self.accumulate(exps, weight * w, var + 1, degree + k, idx, out, overflow.as_deref_mut());
            }
            k += 2;
        }
        idx[var] = 0;
    }

    /// `sum_j c_j L_j` as a monomial polynomial.
    pub fn legendre_to_monomial(&self, c: &DVector<f64>) -> Result<MultiPoly> {
        if c.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "Legendre coefficient vector",
                expected: self.len(),
                got: c.len(),
            });
        }
        let mut acc: HashMap<&Monomial, f64> = HashMap::new();
        for (j, &cj) in c.iter().enumerate() {
            if cj == 0.0 {
                continue;
            }
            for (m, v) in self.functions[j].terms() {
                *acc.entry(m).or_insert(0.0) += cj * v;
            }
        }
        MultiPoly::from_terms(
            self.dim,
            acc.into_iter().map(|(m, v)| (m.exps().to_vec(), v)),
        )
    }

    /// Exact Legendre coefficients of `p`; fails when `p` has terms the
    /// basis cannot hold.
    pub fn monomial_to_legendre(&self, p: &MultiPoly) -> Result<DVector<f64>> {
        if p.degree() > self.max_order {
            return Err(Error::DegreeExceedsOrder {
                degree: p.degree(),
                max_order: self.max_order,
            });
        }
        self.project(p)
    }

    /// Values of every basis function at the unit-box point `u`.
    pub fn evaluate_all(&self, u: &[f64]) -> Result<DVector<f64>> {
        if u.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "basis evaluation point",
                expected: self.dim,
                got: u.len(),
            });
        }
        let table: Vec<Vec<f64>> = u
            .iter()
            .map(|&x| {
                self.legendre
                    .iter()
                    .map(|coeffs| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c))
                    .collect()
            })
            .collect();
        Ok(DVector::from_iterator(
            self.len(),
            self.index_list.iter().map(|idx| {
                idx.exps()
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| table[i][k as usize])
                    .product::<f64>()
            }),
        ))
    }
}

/// Axis-aligned box mapped affinely onto `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::InvalidInput(format!(
                    "box dimension {i} has bounds [{l}, {u}]"
                )));
            }
        }
        Ok(DomainBox { lower, upper })
    }

    /// Box `[-h_i, h_i]`.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self> {
        Self::new(
            half_widths.iter().map(|h| -h).collect(),
            half_widths.to_vec(),
        )
    }

    pub fn unit(dim: usize) -> Self {
        DomainBox {
            lower: vec![-1.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.lower[i] + self.upper[i])
    }

    pub fn half_width(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] - self.lower[i])
    }

    /// `du_i/dx_i = 2 / (upper_i - lower_i)`.
    pub fn unit_rate(&self, i: usize) -> f64 {
        2.0 / (self.upper[i] - self.lower[i])
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &xi)| (2.0 * xi - (self.upper[i] + self.lower[i])) / (self.upper[i] - self.lower[i]))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &ui)| self.center(i) + self.half_width(i) * ui)
            .collect()
    }

    /// The affine map `u -> x(u)` as polynomials in the unit variables.
    pub fn from_unit_map(&self) -> PolyMap {
        let d = self.dim();
        let components = (0..d)
            .map(|i| {
                let mut e = vec![0; d];
                e[i] = 1;
                MultiPoly::from_terms(d, [(vec![0; d], self.center(i)), (e, self.half_width(i))])
                    .expect("matching dims")
                    .with_prune_threshold(0.0)
            })
            .collect();
        PolyMap::new(d, components).expect("matching dims")
    }

    /// Rewrites `dx/dt = f(x)` in unit variables:
    /// `du_j/dt = (2 / (upper_j - lower_j)) f_j(x(u))`.
    pub fn dynamics_to_unit(&self, f: &PolyMap) -> Result<PolyMap> {
        if f.num_vars_in() != self.dim() || f.dim_out() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "dynamics dimension vs box",
                expected: self.dim(),
                got: f.num_vars_in(),
            });
        }
        let trunc = f.max_degree();
        let composed = f.compose(&self.from_unit_map(), trunc)?;
        let components = composed
            .into_components()
            .into_iter()
            .enumerate()
            .map(|(j, c)| c.scale(self.unit_rate(j)))
            .collect();
        PolyMap::new(self.dim(), components)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn low_order_normalized_legendre() {
        let l0 = legendre_1d_normalized(0);
        assert_relative_eq!(l0.constant_term(), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        let l1 = legendre_1d_normalized(1);
        assert_relative_eq!(l1.coefficient(&[1]), 1.5f64.sqrt(), epsilon = 1e-15);
        let l2 = legendre_1d_normalized(2);
        let s = 2.5f64.sqrt();
        assert_relative_eq!(l2.coefficient(&[2]), s * 1.5, epsilon = 1e-15);
        assert_relative_eq!(l2.coefficient(&[0]), -s * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn inner_product_basics() {
        let one = MultiPoly::constant(1, 1.0);
        let u = MultiPoly::var(1, 0);
        assert_eq!(inner_product(&one, &one).unwrap(), 2.0);
        assert_relative_eq!(inner_product(&u, &u).unwrap(), 2.0 / 3.0);
        assert_eq!(inner_product(&one, &u).unwrap(), 0.0);
        assert!(inner_product(&one, &MultiPoly::constant(2, 1.0)).is_err());
    }

    #[test]
    fn basis_functions_by_index() {
        let spec = BasisSpec::new(2, 2).unwrap();
        assert_eq!(spec.len(), 6);
        assert_eq!(spec.index_list()[0].exps(), &[0, 0]);
        let c = spec.basis_function(&[0, 0]).unwrap();
        assert_relative_eq!(c.constant_term(), 0.5, epsilon = 1e-15);
        let b = spec.basis_function(&[1, 0]).unwrap();
        assert_relative_eq!(b.coefficient(&[1, 0]), 1.5f64.sqrt() / 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(b.len(), 1);
        assert!(matches!(spec.basis_function(&[3, 0]), Err(Error::NotInBasis(_))));
    }

    #[test]
    fn projection_of_basis_is_unit_vector() {
        let spec = BasisSpec::new(3, 2).unwrap();
        for j in 0..spec.len() {
            let c = spec.project(spec.function(j)).unwrap();
            for (i, v) in c.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-13, "{i} {j} {v}");
            }
        }
        assert_eq!(spec.project(&MultiPoly::zero(3)).unwrap().norm(), 0.0);
    }

    #[test]
    fn parity_of_square() {
        let spec = BasisSpec::new(1, 2).unwrap();
        let c = spec
            .monomial_to_legendre(&MultiPoly::monomial(1, vec![2], 1.0).unwrap())
            .unwrap();
        assert_eq!(c[1], 0.0);
        assert!(c[0] != 0.0 && c[2] != 0.0);
        let too_high = MultiPoly::monomial(1, vec![3], 1.0).unwrap();
        assert!(matches!(
            spec.monomial_to_legendre(&too_high),
            Err(Error::DegreeExceedsOrder { .. })
        ));
    }

    #[test]
    fn constant_coefficient_vector() {
        let spec = BasisSpec::new(3, 2).unwrap();
        let mut c = DVector::zeros(spec.len());
        c[0] = 1.0;
        let p = spec.legendre_to_monomial(&c).unwrap();
        assert_eq!(p.len(), 1);
        assert_relative_eq!(p.constant_term(), 0.5f64.powf(1.5), epsilon = 1e-15);
    }

    #[test]
    fn residual_reports_discarded_part() {
        let spec = BasisSpec::new(1, 2).unwrap();
        let cube = MultiPoly::monomial(1, vec![3], 1.0).unwrap();
        let (_, r) = spec.project_with_residual(&cube).unwrap();
        // u^3 = (3/5) u + (2/5) P_3, and ||(2/5) P_3||^2 = (4/25)(2/7).
        assert_relative_eq!(r, (8.0f64 / 175.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn closed_form_moment_matches_expansion() {
        let coeffs = legendre_coefficients(8);
        for k in 0..=8u32 {
            for e in 0..=12u32 {
                let direct: f64 = coeffs[k as usize]
                    .iter()
                    .enumerate()
                    .map(|(j, c)| c * monomial_moment(e + j as u32))
                    .sum();
                assert!((direct - legendre_moment(e, k)).abs() < 1e-13, "e={e} k={k}");
            }
        }
    }

    #[test]
    fn evaluate_all_matches_polynomials() {
        let spec = BasisSpec::new(2, 3).unwrap();
        let u = [0.3, -0.7];
        let v = spec.evaluate_all(&u).unwrap();
        for j in 0..spec.len() {
            assert_relative_eq!(v[j], spec.function(j).evaluate(&u).unwrap(), epsilon = 1e-14);
        }
    }

    #[test]
    fn box_round_trip_and_validation() {
        let b = DomainBox::new(vec![-3.0, 1.0], vec![5.0, 2.0]).unwrap();
        let x = [0.25, 1.9];
        let back = b.from_unit(&b.to_unit(&x));
        for (a, c) in x.iter().zip(&back) {
            assert_relative_eq!(a, c, max_relative = 1e-14);
        }
        assert!(DomainBox::new(vec![1.0], vec![1.0]).is_err());
        assert!(DomainBox::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn unit_dynamics_chain_rule() {
        // dx/dt = -x on [-2, 2]: du/dt = (2/4) * (-(2u)) = -u.
        let f = PolyMap::new(1, vec![MultiPoly::monomial(1, vec![1], -1.0).unwrap()]).unwrap();
        let b = DomainBox::symmetric(&[2.0]).unwrap();
        let g = b.dynamics_to_unit(&f).unwrap();
        assert_relative_eq!(g.component(0).coefficient(&[1]), -1.0);
        // dx/dt = x^2 on [0, 2]: x = 1 + u, du/dt = (1 + u)^2.
        let f = PolyMap::new(1, vec![MultiPoly::monomial(1, vec![2], 1.0).unwrap()]).unwrap();
        let b = DomainBox::new(vec![0.0], vec![2.0]).unwrap();
        let g = b.dynamics_to_unit(&f).unwrap();
        assert_eq!(g.component(0).coefficient(&[0]), 1.0);
        assert_eq!(g.component(0).coefficient(&[1]), 2.0);
        assert_eq!(g.component(0).coefficient(&[2]), 1.0);
    }
}

//! Truncated Koopman operator by Galerkin projection.
//!
//! For dynamics `du/dt = f(u)` on the unit box, the basis evolves as
//! `dL/dt = K L` with `K_ij = <dL_i/dt, L_j>` and
//! `dL_i/dt = sum_k (dL_i/du_k) f_k`. Observables are `g = H L`, so the
//! solution is `g(t) = H exp(K t) L(u0)`, evaluated either through the
//! left eigendecomposition `V K = Lambda V` or directly through the matrix
//! exponential when `K` is defective.

use log::{debug, warn};
use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, DomainBox};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::polyalg::{MultiPoly, PolyMap};

/// Eigenvector condition number above which decomposition is refused.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Relative tolerance on imaginary parts of supposedly real outputs.
pub const IMAGINARY_TOLERANCE: f64 = 1e-8;

type C64 = Complex<f64>;

/// Galerkin matrix together with the per-row norm of what the truncation
/// discarded from `dL_i/dt`.
#[derive(Debug, Clone)]
pub struct KoopmanAssembly {
    pub matrix: DMatrix<f64>,
    pub truncation_residual: Vec<f64>,
}

/// Assembles `K` for `dynamics` expressed in unit-box variables.
pub fn assemble_unit(
    dynamics: &PolyMap,
    spec: &BasisSpec,
    exec: Execution,
) -> Result<KoopmanAssembly> {
    let d = spec.dim();
    if dynamics.num_vars_in() != d || dynamics.dim_out() != d {
        return Err(Error::DimensionMismatch {
            what: "dynamics dimension vs basis",
            expected: d,
            got: dynamics.dim_out(),
        });
    }
    let n = spec.len();
    let rows = par::map_indices(exec, n, |i| -> Result<(Vec<f64>, f64)> {
        let li = spec.function(i);
        let mut rate = MultiPoly::zero(d).with_prune_threshold(0.0);
        for (k, fk) in dynamics.components().iter().enumerate() {
            if fk.is_zero() {
                continue;
            }
            let dli = li.partial_derivative(k)?;
            if dli.is_zero() {
                continue;
            }
            rate = &rate + &dli.try_mul(fk, None)?;
        }
        let (c, residual) = spec.project_with_residual(&rate)?;
        Ok((c.iter().copied().collect(), residual))
    });
    let mut matrix = DMatrix::zeros(n, n);
    let mut truncation_residual = Vec::with_capacity(n);
    for (i, row) in rows.into_iter().enumerate() {
        let (c, r) = row?;
        for (j, v) in c.into_iter().enumerate() {
            matrix[(i, j)] = v;
        }
        truncation_residual.push(r);
    }
    Ok(KoopmanAssembly {
        matrix,
        truncation_residual,
    })
}

/// Assembles `K` for physical dynamics `dx/dt = f(x)` on `domain`,
/// applying the chain-rule rescaling to unit variables first.
pub fn build_koopman_matrix(
    dynamics: &PolyMap,
    spec: &BasisSpec,
    domain: &DomainBox,
    exec: Execution,
) -> Result<KoopmanAssembly> {
    let unit = domain.dynamics_to_unit(dynamics)?;
    assemble_unit(&unit, spec, exec)
}

/// `H_ij = <g_i, L_j>` for observables in unit variables.
pub fn build_observable_matrix(observables: &PolyMap, spec: &BasisSpec) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(observables.dim_out(), spec.len());
    for (i, g) in observables.components().iter().enumerate() {
        let row = spec.monomial_to_legendre(g)?;
        h.row_mut(i).copy_from(&row.transpose());
    }
    Ok(h)
}

/// Left eigendecomposition `V K = Lambda V`.
#[derive(Debug, Clone)]
pub struct Spectral {
    /// Eigenvalues, the diagonal of `Lambda`.
    pub values: DVector<C64>,
    /// Rows are left eigenvectors of `K`.
    pub vectors: DMatrix<C64>,
    pub vectors_inv: DMatrix<C64>,
    /// 2-norm condition number of `V`.
    pub condition: f64,
}

/// Computes `V K = Lambda V` from the complex Schur form of `K^T`.
///
/// Right eigenvectors of `K^T` are left eigenvectors of `K`; they come
/// from back substitution on the triangular factor. Fails when the
/// eigenvector matrix is numerically singular (defective `K`).
pub fn spectral_decompose(k: &DMatrix<f64>) -> Result<Spectral> {
    spectral_decompose_with_limit(k, CONDITION_LIMIT)
}

pub fn spectral_decompose_with_limit(k: &DMatrix<f64>, limit: f64) -> Result<Spectral> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "Koopman matrix squareness",
            expected: n,
            got: k.ncols(),
        });
    }
    let kt: DMatrix<C64> = k.transpose().map(|x| C64::new(x, 0.0));
    let (q, t) = if k.iter().all(|x| *x == 0.0) {
        (DMatrix::identity(n, n), kt)
    } else {
        nalgebra::linalg::Schur::try_new(kt, f64::EPSILON, 200 * n.max(1))
            .ok_or(Error::EigenResidual {
                residual: f64::INFINITY,
                limit: 0.0,
            })?
            .unpack()
    };
    let tnorm = t.iter().fold(0.0f64, |m, z| m.max(z.norm())).max(f64::MIN_POSITIVE);
    let small = f64::EPSILON * tnorm;

    let mut y = DMatrix::<C64>::zeros(n, n);
    for col in 0..n {
        let lambda = t[(col, col)];
        y[(col, col)] = C64::new(1.0, 0.0);
        for j in (0..col).rev() {
            let mut s = C64::new(0.0, 0.0);
            for l in j + 1..=col {
                s += t[(j, l)] * y[(l, col)];
            }
            let mut denom = t[(j, j)] - lambda;
            if denom.norm() < small {
                denom = C64::new(small, 0.0);
            }
            y[(j, col)] = -s / denom;
        }
    }
    let mut x = q * y;
    for mut col in x.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= C64::new(norm, 0.0);
        }
    }
    let values = DVector::from_iterator(n, (0..n).map(|i| t[(i, i)]));
    let vectors = x.transpose();

    let condition = condition_number(&vectors);
    if !(condition <= limit) {
        return Err(Error::IllConditionedEigenbasis { condition, limit });
    }
    let kc: DMatrix<C64> = k.map(|x| C64::new(x, 0.0));
    let lhs = &vectors * &kc;
    let mut rhs = vectors.clone();
    for (i, mut row) in rhs.row_iter_mut().enumerate() {
        row *= values[i];
    }
    let residual = inf_norm_c(&(lhs - rhs));
    let knorm = inf_norm(k);
    if residual > 1e-8 * knorm.max(f64::MIN_POSITIVE) {
        return Err(Error::EigenResidual {
            residual,
            limit: 1e-8 * knorm,
        });
    }
    let vectors_inv = vectors
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditionedEigenbasis {
            condition: f64::INFINITY,
            limit,
        })?;
    Ok(Spectral {
        values,
        vectors,
        vectors_inv,
        condition,
    })
}

/// 2-norm condition number of a complex matrix, through the singular
/// values of its real embedding `[[Re, -Im], [Im, Re]]`.
pub fn condition_number(m: &DMatrix<C64>) -> f64 {
    let (r, c) = m.shape();
    let mut real = DMatrix::<f64>::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let z = m[(i, j)];
            real[(i, j)] = z.re;
            real[(i + r, j + c)] = z.re;
            real[(i, j + c)] = -z.im;
            real[(i + r, j)] = z.im;
        }
    }
    condition_number_real(real)
}

/// 2-norm condition number of a real matrix; infinite when singular or
/// when the SVD fails to converge.
pub fn condition_number_real(m: DMatrix<f64>) -> f64 {
    if m.iter().any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    let cap = 1000 * (m.nrows() + m.ncols()).max(1);
    let Some(svd) = nalgebra::linalg::SVD::try_new(m, false, false, f64::EPSILON, cap) else {
        return f64::INFINITY;
    };
    let sv = svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

pub(crate) fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn inf_norm_c(m: &DMatrix<C64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// How `exp(K t)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagator {
    /// Eigendecomposition when well conditioned, matrix exponential
    /// otherwise.
    #[default]
    Auto,
    Spectral,
    MatrixExponential,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KoopmanOptions {
    pub propagator: Propagator,
    /// `Auto` only trusts the eigenbasis below this condition number.
    pub auto_condition_limit: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for KoopmanOptions {
    fn default() -> Self {
        KoopmanOptions {
            propagator: Propagator::Auto,
            auto_condition_limit: 1e4,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanDiagnostics {
    pub basis_size: usize,
    pub max_order: u32,
    pub max_truncation_residual: f64,
    pub truncation_residual: Vec<f64>,
    pub eigen_condition: Option<f64>,
    pub spectral_failure: Option<String>,
    /// Propagator actually in use.
    pub propagator: Propagator,
}

/// Truncated Koopman operator of a polynomial system on a box.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    spec: BasisSpec,
    domain: DomainBox,
    dynamics: PolyMap,
    koopman: DMatrix<f64>,
    observables: DMatrix<f64>,
    spectral: Option<Spectral>,
    diagnostics: KoopmanDiagnostics,
}

impl KoopmanModel {
    /// Builds the model for physical dynamics on `domain`, with identity
    /// observables on every state variable.
    pub fn build(
        dynamics: &PolyMap,
        spec: BasisSpec,
        domain: DomainBox,
        options: &KoopmanOptions,
    ) -> Result<Self> {
        let unit = domain.dynamics_to_unit(dynamics)?;
        let assembly = assemble_unit(&unit, &spec, options.execution)?;
        let identity = PolyMap::identity(spec.dim());
        let observables = build_observable_matrix(&identity, &spec)?;
        let max_res = assembly
            .truncation_residual
            .iter()
            .map(|r| r.abs())
            .fold(0.0, f64::max);
        debug!(
            "Koopman matrix {}x{}, max truncation residual {:.3e}",
            spec.len(),
            spec.len(),
            max_res
        );

        let (spectral, failure, propagator) = match options.propagator {
            Propagator::MatrixExponential => (None, None, Propagator::MatrixExponential),
            Propagator::Spectral => {
                let s = spectral_decompose(&assembly.matrix)?;
                (Some(s), None, Propagator::Spectral)
            }
            Propagator::Auto => match spectral_decompose(&assembly.matrix) {
                Ok(s) if s.condition <= options.auto_condition_limit => {
                    (Some(s), None, Propagator::Spectral)
                }
                Ok(s) => {
                    let msg = format!(
                        "eigenvector condition {:.3e} above auto limit {:.1e}",
                        s.condition, options.auto_condition_limit
                    );
                    debug!("{msg}; using matrix exponential");
                    (Some(s), Some(msg), Propagator::MatrixExponential)
                }
                Err(e) => {
                    debug!("spectral decomposition rejected ({e}); using matrix exponential");
                    (None, Some(e.to_string()), Propagator::MatrixExponential)
                }
            },
        };
        let diagnostics = KoopmanDiagnostics {
            basis_size: spec.len(),
            max_order: spec.max_order(),
            max_truncation_residual: max_res,
            truncation_residual: assembly.truncation_residual,
            eigen_condition: spectral.as_ref().map(|s| s.condition),
            spectral_failure: failure,
            propagator,
        };
        Ok(KoopmanModel {
            spec,
            domain,
            dynamics: unit,
            koopman: assembly.matrix,
            observables,
            spectral,
            diagnostics,
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    /// Dynamics in unit variables.
    pub fn unit_dynamics(&self) -> &PolyMap {
        &self.dynamics
    }

    pub fn koopman_matrix(&self) -> &DMatrix<f64> {
        &self.koopman
    }

    pub fn observable_matrix(&self) -> &DMatrix<f64> {
        &self.observables
    }

    pub fn spectral(&self) -> Option<&Spectral> {
        self.spectral.as_ref()
    }

    pub fn diagnostics(&self) -> &KoopmanDiagnostics {
        &self.diagnostics
    }

    /// Rows of `Re(H exp(K t))` for the selected observables: the
    /// Legendre coefficients of each observable at time `t` as a function
    /// of the initial condition.
    pub fn coefficient_rows(&self, t: f64, rows: &[usize]) -> Result<DMatrix<f64>> {
        for &r in rows {
            if r >= self.observables.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: self.observables.nrows(),
                });
            }
        }
        let h = self.observables.select_rows(rows);
        match self.diagnostics.propagator {
            Propagator::MatrixExponential | Propagator::Auto => {
                let e = (&self.koopman * t).exp();
                Ok(h * e)
            }
            Propagator::Spectral => {
                let s = self.spectral.as_ref().expect("spectral data present");
                let hc: DMatrix<C64> = h.map(|x| C64::new(x, 0.0));
                let mut right = s.vectors.clone();
                for (i, mut row) in right.row_iter_mut().enumerate() {
                    row *= (s.values[i] * t).exp();
                }
                let full = hc * &s.vectors_inv * right;
                let mut out = DMatrix::zeros(full.nrows(), full.ncols());
                for (i, row) in full.row_iter().enumerate() {
                    let re_norm = row.iter().map(|z| z.re * z.re).sum::<f64>().sqrt();
                    let im = row.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
                    let limit = IMAGINARY_TOLERANCE * re_norm.max(f64::MIN_POSITIVE);
                    if im > limit {
                        return Err(Error::ImaginaryResidual { residual: im, limit });
                    }
                    for (j, z) in row.iter().enumerate() {
                        out[(i, j)] = z.re;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Propagates the physical state `x0` for time `t`.
    pub fn propagate(&self, x0: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.spec.dim();
        if x0.len() != d {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                expected: d,
                got: x0.len(),
            });
        }
        let u0 = self.domain.to_unit(x0);
        if u0.iter().any(|u| u.abs() > 1.0) {
            warn!("initial condition lies outside the Koopman domain box; accuracy degrades");
        }
        let basis = self.spec.evaluate_all(&u0)?;
        let rows: Vec<usize> = (0..d).collect();
        let coeffs = self.coefficient_rows(t, &rows)?;
        let u = coeffs * basis;
        Ok(self.domain.from_unit(u.as_slice()))
    }

    /// Polynomial map from unit initial conditions to the unit values of
    /// the selected state rows at time `tf`.
    pub fn transition_map(&self, tf: f64, rows: &[usize]) -> Result<PolyMap> {
        let coeffs = self.coefficient_rows(tf, rows)?;
        let components = coeffs
            .row_iter()
            .map(|r| self.spec.legendre_to_monomial(&r.transpose()))
            .collect::<Result<Vec<_>>>()?;
        PolyMap::new(self.spec.dim(), components)
    }
}

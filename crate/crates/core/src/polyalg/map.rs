use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::poly::{MultiPoly, PowerCache};
use crate::error::{Error, Result};

/// Ordered list of polynomials over one shared set of input variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapJson", into = "MapJson")]
pub struct PolyMap {
    num_vars: usize,
    components: Vec<MultiPoly>,
}

impl PolyMap {
    pub fn new(num_vars: usize, components: Vec<MultiPoly>) -> Result<Self> {
        if num_vars == 0 {
            return Err(Error::InvalidInput("a map needs at least one input".into()));
        }
        for c in &components {
            if c.num_vars() != num_vars {
                return Err(Error::DimensionMismatch {
                    what: "map component variable count",
                    expected: num_vars,
                    got: c.num_vars(),
                });
            }
        }
        Ok(PolyMap {
            num_vars,
            components,
        })
    }

    pub fn identity(num_vars: usize) -> Self {
        PolyMap {
            num_vars,
            components: (0..num_vars).map(|i| MultiPoly::var(num_vars, i)).collect(),
        }
    }

    /// Affine map `x -> A x + b`.
    pub fn affine(matrix: &DMatrix<f64>, offset: &[f64]) -> Result<Self> {
        if offset.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch {
                what: "affine offset length",
                expected: matrix.nrows(),
                got: offset.len(),
            });
        }
        let n = matrix.ncols();
        let components = (0..matrix.nrows())
            .map(|i| {
                let mut terms = vec![(vec![0; n], offset[i])];
                for j in 0..n {
                    let mut e = vec![0; n];
                    e[j] = 1;
                    terms.push((e, matrix[(i, j)]));
                }
                MultiPoly::from_terms(n, terms)
            })
            .collect::<Result<Vec<_>>>()?;
        PolyMap::new(n, components)
    }

    #[inline]
    pub fn num_vars_in(&self) -> usize {
        self.num_vars
    }

    #[inline]
    pub fn dim_out(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[MultiPoly] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &MultiPoly {
        &self.components[i]
    }

    pub fn into_components(self) -> Vec<MultiPoly> {
        self.components
    }

    pub fn max_degree(&self) -> u32 {
        self.components.iter().map(|c| c.degree()).max().unwrap_or(0)
    }

    /// True when every component has a zero constant term.
    pub fn is_origin_preserving(&self) -> bool {
        self.components.iter().all(|c| c.constant_term() == 0.0)
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.evaluate(z)).collect()
    }

    pub fn truncate(&self, order: u32) -> PolyMap {
        PolyMap {
            num_vars: self.num_vars,
            components: self.components.iter().map(|c| c.truncate(order)).collect(),
        }
    }

    pub fn constant_part(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim_out(),
            self.components.iter().map(|c| c.constant_term()),
        )
    }

    /// Jacobian at the origin, `dim_out x num_vars_in`.
    pub fn linear_part(&self) -> DMatrix<f64> {
        let n = self.num_vars;
        let mut m = DMatrix::zeros(self.dim_out(), n);
        let mut e = vec![0u32; n];
        for (i, c) in self.components.iter().enumerate() {
            for j in 0..n {
                e[j] = 1;
                m[(i, j)] = c.coefficient(&e);
                e[j] = 0;
            }
        }
        m
    }

    /// Keeps only the terms of degree two and higher.
    pub fn nonlinear_part(&self) -> PolyMap {
        PolyMap {
            num_vars: self.num_vars,
            components: self
                .components
                .iter()
                .map(|c| c.drop_below_degree(2))
                .collect(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Result<PolyMap> {
        let components = rows
            .iter()
            .map(|&r| {
                self.components.get(r).cloned().ok_or(Error::IndexOutOfRange {
                    index: r,
                    len: self.dim_out(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PolyMap::new(self.num_vars, components)
    }

    /// Stacks the components of `other` below those of `self`.
    pub fn stack(&self, other: &PolyMap) -> Result<PolyMap> {
        if other.num_vars != self.num_vars {
            return Err(Error::DimensionMismatch {
                what: "stacked map input count",
                expected: self.num_vars,
                got: other.num_vars,
            });
        }
        let mut components = self.components.clone();
        components.extend(other.components.iter().cloned());
        PolyMap::new(self.num_vars, components)
    }

    /// `self ∘ inner`, truncated at `trunc_order` total degree.
    pub fn compose(&self, inner: &PolyMap, trunc_order: u32) -> Result<PolyMap> {
        if self.num_vars != inner.dim_out() {
            return Err(Error::DimensionMismatch {
                what: "composition inner output count",
                expected: self.num_vars,
                got: inner.dim_out(),
            });
        }
        let mut cache = PowerCache::new(inner.dim_out());
        let components = self
            .components
            .iter()
            .map(|c| c.substitute(&inner.components, inner.num_vars, trunc_order, &mut cache))
            .collect();
        PolyMap::new(inner.num_vars, components)
    }

    /// Applies a linear map to the outputs: `rows = A * self`.
    pub fn left_multiply(&self, matrix: &DMatrix<f64>) -> Result<PolyMap> {
        if matrix.ncols() != self.dim_out() {
            return Err(Error::DimensionMismatch {
                what: "left factor columns",
                expected: self.dim_out(),
                got: matrix.ncols(),
            });
        }
        let components = (0..matrix.nrows())
            .map(|i| {
                let mut acc = MultiPoly::zero(self.num_vars)
                    .with_prune_threshold(self.prune_threshold());
                for (j, c) in self.components.iter().enumerate() {
                    let a = matrix[(i, j)];
                    if a != 0.0 {
                        acc = &acc + &c.scale(a);
                    }
                }
                acc
            })
            .collect();
        PolyMap::new(self.num_vars, components)
    }

    fn prune_threshold(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.prune_threshold())
            .fold(super::poly::DEFAULT_PRUNE_REL, f64::min)
    }

    pub fn sub(&self, other: &PolyMap) -> Result<PolyMap> {
        if self.num_vars != other.num_vars || self.dim_out() != other.dim_out() {
            return Err(Error::DimensionMismatch {
                what: "map shape",
                expected: self.dim_out(),
                got: other.dim_out(),
            });
        }
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.try_sub(b))
            .collect::<Result<Vec<_>>>()?;
        PolyMap::new(self.num_vars, components)
    }

    /// Largest coefficient magnitude over all components.
    pub fn max_abs_coefficient(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.max_abs_coefficient())
            .fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct MapJson {
    num_vars: usize,
    components: Vec<MultiPoly>,
}

impl From<PolyMap> for MapJson {
    fn from(m: PolyMap) -> Self {
        MapJson {
            num_vars: m.num_vars,
            components: m.components,
        }
    }
}

impl TryFrom<MapJson> for PolyMap {
    type Error = Error;
    fn try_from(j: MapJson) -> Result<Self> {
        PolyMap::new(j.num_vars, j.components)
    }
}

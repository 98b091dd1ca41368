//! Polynomial map inversion and costate extraction.
//!
//! The transition map sends `(x0, lambda0)` to `x_f`. Stacking it with the
//! identity on `x0` gives a square map whose inverse, evaluated at
//! `(x_f, x0)`, returns the initial costates.

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::DomainBox;
use crate::error::{Error, Result};
use crate::koopman::{condition_number_real, KoopmanModel};
use crate::polyalg::{MultiPoly, PolyMap};

/// Linear-part condition number above which inversion is refused.
pub const CONDITION_LIMIT: f64 = 1e12;

/// `[x_f rows; x0]` over inputs `(x0, lambda0)`.
pub fn build_tpbvp_map(transition: &PolyMap, m: usize) -> Result<PolyMap> {
    if transition.dim_out() != m {
        return Err(Error::DimensionMismatch {
            what: "transition output rows",
            expected: m,
            got: transition.dim_out(),
        });
    }
    if transition.num_vars_in() != 2 * m {
        return Err(Error::DimensionMismatch {
            what: "transition input variables",
            expected: 2 * m,
            got: transition.num_vars_in(),
        });
    }
    // exact zero threshold: the map algebra below spans many decades
    let ids = (0..m)
        .map(|i| MultiPoly::var(2 * m, i).with_prune_threshold(0.0))
        .collect();
    let transition = PolyMap::new(
        2 * m,
        transition
            .components()
            .iter()
            .map(|p| p.clone().with_prune_threshold(0.0))
            .collect(),
    )?;
    transition.stack(&PolyMap::new(2 * m, ids)?)
}

/// Inverse of `map` truncated at `trunc_order`, together with the
/// condition number of its linear part.
pub fn invert_map_with_condition(map: &PolyMap, trunc_order: u32) -> Result<(PolyMap, f64)> {
    let n = map.num_vars_in();
    if map.dim_out() != n {
        return Err(Error::NonSquareMap {
            inputs: n,
            outputs: map.dim_out(),
        });
    }
    if trunc_order == 0 {
        return Err(Error::InvalidInput("truncation order must be positive".into()));
    }
    let shift = map.constant_part();
    let linear = map.linear_part();
    let condition = condition_number_real(linear.clone());
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::SingularLinearPart { condition });
    }
    let linv = linear
        .clone()
        .try_inverse()
        .ok_or(Error::SingularLinearPart { condition })?;
    let nonlinear = map.nonlinear_part();
    let eta = PolyMap::identity(n);

    let mut w = eta.left_multiply(&linv)?;
    if nonlinear.max_abs_coefficient() > 0.0 {
        for _ in 1..trunc_order {
            let nw = nonlinear.compose(&w, trunc_order)?;
            w = eta.sub(&nw)?.left_multiply(&linv)?.truncate(trunc_order);
        }
    }
    if shift.iter().all(|c| *c == 0.0) {
        return Ok((w, condition));
    }
    let minus_shift: Vec<f64> = shift.iter().map(|c| -c).collect();
    let unshift = PolyMap::affine(&DMatrix::identity(n, n), &minus_shift)?;
    Ok((w.compose(&unshift, trunc_order)?, condition))
}

/// Inverse of `map` truncated at `trunc_order`.
pub fn invert_map(map: &PolyMap, trunc_order: u32) -> Result<PolyMap> {
    invert_map_with_condition(map, trunc_order).map(|(w, _)| w)
}

/// Largest coefficient of `inverse ∘ forward - identity` up to `trunc_order`.
pub fn inversion_residual(forward: &PolyMap, inverse: &PolyMap, trunc_order: u32) -> Result<f64> {
    let round = inverse.compose(forward, trunc_order)?;
    Ok(round
        .sub(&PolyMap::identity(forward.num_vars_in()))?
        .max_abs_coefficient())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TpbvpMap {
    /// Inputs `(x0, lambda0)`, outputs `(x_f, x0)`, unit variables.
    pub forward: PolyMap,
    /// Inputs `(x_f, x0)`, outputs `(lambda0, x0)`, unit variables.
    pub inverse: PolyMap,
    pub trunc_order: u32,
    pub state_box: DomainBox,
    pub costate_box: DomainBox,
    pub linear_condition: f64,
    pub inversion_residual: f64,
}

impl TpbvpMap {
    /// Builds and inverts the map of an augmented model at `tf`.
    pub fn from_model(model: &KoopmanModel, tf: f64, trunc_order: u32) -> Result<Self> {
        let dim = model.spec().dim();
        if !dim.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "augmented dimension {dim} is odd"
            )));
        }
        let m = dim / 2;
        let rows: Vec<usize> = (0..m).collect();
        let transition = model.transition_map(tf, &rows)?;
        let domain = model.domain();
        let state_box = DomainBox::new(domain.lower()[..m].to_vec(), domain.upper()[..m].to_vec())?;
        let costate_box =
            DomainBox::new(domain.lower()[m..].to_vec(), domain.upper()[m..].to_vec())?;
        Self::from_transition(&transition, trunc_order, state_box, costate_box)
    }

    pub fn from_transition(
        transition: &PolyMap,
        trunc_order: u32,
        state_box: DomainBox,
        costate_box: DomainBox,
    ) -> Result<Self> {
        let m = transition.dim_out();
        if state_box.dim() != m || costate_box.dim() != m {
            return Err(Error::DimensionMismatch {
                what: "state and costate box dimensions",
                expected: m,
                got: state_box.dim().max(costate_box.dim()),
            });
        }
        let forward = build_tpbvp_map(transition, m)?.truncate(trunc_order);
        let (raw, linear_condition) = invert_map_with_condition(&forward, trunc_order)?;
        let inversion_residual = inversion_residual(&forward, &raw, trunc_order)?;
        debug!(
            "map inversion: linear condition {linear_condition:.3e}, residual {inversion_residual:.3e}"
        );
        let order: Vec<usize> = (m..2 * m).chain(0..m).collect();
        let inverse = raw.select(&order)?;
        Ok(TpbvpMap {
            forward,
            inverse,
            trunc_order,
            state_box,
            costate_box,
            linear_condition,
            inversion_residual,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    /// Initial costates steering `x0` to `xf`, both in the units of the
    /// state box.
    pub fn solve_costates(&self, x0: &[f64], xf: &[f64]) -> Result<Vec<f64>> {
        let m = self.state_dim();
        for (what, x) in [("initial state", x0), ("final state", xf)] {
            if x.len() != m {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: m,
                    got: x.len(),
                });
            }
        }
        let u0 = self.state_box.to_unit(x0);
        let uf = self.state_box.to_unit(xf);
        for (name, u, x) in [("x0", &u0, x0), ("xf", &uf, xf)] {
            for (i, ui) in u.iter().enumerate() {
                if ui.abs() > 2.0 {
                    return Err(Error::OutsideDomain {
                        name: format!("{name}[{i}]"),
                        value: x[i],
                        half_width: self.state_box.half_width(i),
                    });
                }
                if ui.abs() > 1.0 {
                    warn!("{name}[{i}] = {} lies outside the state box", x[i]);
                }
            }
        }
        let mut input = uf;
        input.extend_from_slice(&u0);
        let out = self.inverse.evaluate(&input)?;
        let lam_u = &out[..m];
        if lam_u.iter().any(|l| l.abs() > 1.0) {
            warn!("costate solution lies outside the costate box; the map is extrapolating");
        }
        Ok(self.costate_box.from_unit(lam_u))
    }

    /// Final state predicted by the forward map for `(x0, lambda0)`.
    pub fn predict_final_state(&self, x0: &[f64], lambda0: &[f64]) -> Result<Vec<f64>> {
        let mut input = self.state_box.to_unit(x0);
        input.extend(self.costate_box.to_unit(lambda0));
        let out = self.forward.evaluate(&input)?;
        Ok(self.state_box.from_unit(&out[..self.state_dim()]))
    }
}

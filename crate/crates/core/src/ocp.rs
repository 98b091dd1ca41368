//! Energy-optimal augmented dynamics.
//!
//! With acceleration control `tau * alpha` and cost `1/2 int tau^2 dt`,
//! minimizing the Hamiltonian gives the control `-lambda_v`, and the state
//! and costate equations close into one polynomial system over
//! `(r, v, lambda_r, lambda_v)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyalg::{MultiPoly, PolyMap};

/// Layout tags written next to serialized augmented systems.
pub const LAYOUT_ORDER: [&str; 4] = ["r", "v", "lr", "lv"];

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    n_pos: usize,
    accel: PolyMap,
    dynamics: PolyMap,
}

#[derive(Serialize, Deserialize)]
struct Layout {
    n_pos: usize,
    order: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AugmentedJson {
    layout: Layout,
    accel: PolyMap,
    dynamics: PolyMap,
}

/// Builds the augmented system for accelerations `f_v(r, v)`.
pub fn augment_energy_optimal(f_v: &PolyMap, n_pos: usize) -> Result<AugmentedSystem> {
    let m = 2 * n_pos;
    if n_pos == 0 {
        return Err(Error::InvalidInput("n_pos must be positive".into()));
    }
    if f_v.dim_out() != n_pos {
        return Err(Error::DimensionMismatch {
            what: "acceleration components",
            expected: n_pos,
            got: f_v.dim_out(),
        });
    }
    if f_v.num_vars_in() != m {
        return Err(Error::DimensionMismatch {
            what: "acceleration variables",
            expected: m,
            got: f_v.num_vars_in(),
        });
    }
    let nv = 2 * m;
    let prune = f_v
        .components()
        .iter()
        .map(|p| p.prune_threshold())
        .fold(f64::INFINITY, f64::min)
        .min(crate::polyalg::DEFAULT_PRUNE_REL);
    let lift = |p: &MultiPoly| -> Result<MultiPoly> {
        let terms = p.terms().map(|(mono, c)| {
            let mut e = mono.exps().to_vec();
            e.resize(nv, 0);
            (e, c)
        });
        Ok(MultiPoly::from_terms(nv, terms)?.with_prune_threshold(prune))
    };
    let var = |i: usize| MultiPoly::var(nv, i).with_prune_threshold(prune);

    let lr = |i: usize| m + i;
    let lv = |i: usize| m + n_pos + i;

    let mut rows = Vec::with_capacity(nv);
    for i in 0..n_pos {
        rows.push(var(n_pos + i));
    }
    for i in 0..n_pos {
        rows.push(lift(f_v.component(i))?.try_sub(&var(lv(i)))?);
    }
    // lambda_r' = -(df/dr)^T lambda_v, lambda_v' = -lambda_r - (df/dv)^T lambda_v
    for j in 0..m {
        let mut acc = if j < n_pos {
            MultiPoly::zero(nv).with_prune_threshold(prune)
        } else {
            var(lr(j - n_pos)).scale(-1.0)
        };
        for i in 0..n_pos {
            let d = f_v.component(i).partial_derivative(j)?;
            if d.is_zero() {
                continue;
            }
            let term = lift(&d)?.try_mul(&var(lv(i)), None)?;
            acc = acc.try_sub(&term)?;
        }
        rows.push(acc);
    }
    Ok(AugmentedSystem {
        n_pos,
        accel: f_v.clone(),
        dynamics: PolyMap::new(nv, rows)?,
    })
}

impl AugmentedSystem {
    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    /// State dimension `m = 2 n_pos`.
    pub fn state_dim(&self) -> usize {
        2 * self.n_pos
    }

    pub fn dim(&self) -> usize {
        4 * self.n_pos
    }

    pub fn dynamics(&self) -> &PolyMap {
        &self.dynamics
    }

    /// Uncontrolled accelerations the system was built from.
    pub fn accelerations(&self) -> &PolyMap {
        &self.accel
    }

    /// Control Hamiltonian `lambda_r.v + lambda_v.f - |lambda_v|^2 / 2`,
    /// the optimal-control value of `tau^2/2 + lambda_r.v + lambda_v.(f + tau alpha)`.
    pub fn hamiltonian(&self, z: &[f64]) -> Result<f64> {
        self.check_len(z.len())?;
        let n = self.n_pos;
        let m = 2 * n;
        let f = self.accel.evaluate(&z[..m])?;
        let mut h = 0.0;
        for i in 0..n {
            let lrv = z[m + i];
            let lvv = z[m + n + i];
            h += lrv * z[n + i] + lvv * f[i] - 0.5 * lvv * lvv;
        }
        Ok(h)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "augmented state",
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        let doc = AugmentedJson {
            layout: Layout {
                n_pos: self.n_pos,
                order: LAYOUT_ORDER.iter().map(|s| s.to_string()).collect(),
            },
            accel: self.accel.clone(),
            dynamics: self.dynamics.clone(),
        };
        Ok(serde_json::to_value(doc)?)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let doc: AugmentedJson = serde_json::from_value(value)?;
        if doc.layout.order != LAYOUT_ORDER {
            return Err(Error::InvalidInput(format!(
                "unsupported variable order {:?}",
                doc.layout.order
            )));
        }
        let rebuilt = augment_energy_optimal(&doc.accel, doc.layout.n_pos)?;
        if rebuilt.dynamics != doc.dynamics {
            return Err(Error::InvalidInput(
                "dynamics do not match the stored accelerations".into(),
            ));
        }
        Ok(rebuilt)
    }
}

/// Thrust samples derived from costate histories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub t: f64,
    pub thrust: Vec<f64>,
    pub magnitude: f64,
}

/// Optimal control `-lambda_v` at each sample of an augmented trajectory.
pub fn control_history(times: &[f64], states: &[Vec<f64>], n_pos: usize) -> Result<Vec<ControlSample>> {
    if times.len() != states.len() {
        return Err(Error::DimensionMismatch {
            what: "trajectory samples",
            expected: times.len(),
            got: states.len(),
        });
    }
    times
        .iter()
        .zip(states)
        .map(|(&t, z)| {
            if z.len() != 4 * n_pos {
                return Err(Error::DimensionMismatch {
                    what: "augmented state",
                    expected: 4 * n_pos,
                    got: z.len(),
                });
            }
            let thrust: Vec<f64> = z[3 * n_pos..].iter().map(|l| -l).collect();
            let magnitude = thrust.iter().map(|u| u * u).sum::<f64>().sqrt();
            Ok(ControlSample { t, thrust, magnitude })
        })
        .collect()
}

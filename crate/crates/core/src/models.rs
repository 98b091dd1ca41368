//! Polynomial dynamics: the Duffing oscillator and Clohessy-Wiltshire
//! relative motion with the gravitational potential expanded to an
//! arbitrary Legendre order.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyalg::{MultiPoly, PolyMap};

/// Standard Earth gravitational parameter, m^3/s^2.
pub const EARTH_MU: f64 = 3.986004418e14;

type Q = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuffingParams {
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "one")]
    pub k: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn one() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    0.001
}

impl Default for DuffingParams {
    fn default() -> Self {
        DuffingParams {
            a: 1.0,
            mass: 1.0,
            k: 1.0,
            eps: 0.001,
        }
    }
}

impl DuffingParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.mass, self.k, self.eps].iter().all(|v| v.is_finite());
        if !finite || self.mass <= 0.0 || self.k <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "Duffing parameters need finite values with mass > 0 and k > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Energy `p^2/(2M) + k q^2/2 + k a^2 eps q^4/4`.
    pub fn energy(&self, q: f64, p: f64) -> f64 {
        p * p / (2.0 * self.mass) + 0.5 * self.k * q * q + 0.25 * self.k * self.a * self.a * self.eps * q.powi(4)
    }
}

/// `q' = p/M`, `p' = -k q - k a^2 eps q^3` over `(q, p)`.
pub fn duffing_dynamics(params: &DuffingParams) -> Result<PolyMap> {
    params.validate()?;
    let q = MultiPoly::from_terms(2, [(vec![0, 1], 1.0 / params.mass)])?;
    let p = MultiPoly::from_terms(
        2,
        [
            (vec![1, 0], -params.k),
            (vec![3, 0], -params.k * params.a * params.a * params.eps),
        ],
    )?;
    PolyMap::new(2, vec![q.with_prune_threshold(0.0), p.with_prune_threshold(0.0)])
}

/// Acceleration of `q` as a function of `(q, v)` with `v = q'`.
pub fn duffing_acceleration(params: &DuffingParams) -> Result<PolyMap> {
    params.validate()?;
    let m = params.mass;
    let f = MultiPoly::from_terms(
        2,
        [
            (vec![1, 0], -params.k / m),
            (vec![3, 0], -params.k * params.a * params.a * params.eps / m),
        ],
    )?;
    PolyMap::new(2, vec![f.with_prune_threshold(0.0)])
}

/// Rational Legendre polynomial coefficients, index = power.
fn legendre_rational(k: u32) -> Vec<Q> {
    let mut prev = vec![Q::from_integer(1)];
    if k == 0 {
        return prev;
    }
    let mut cur = vec![Q::from_integer(0), Q::from_integer(1)];
    for j in 2..=k as i128 {
        let mut next = vec![Q::from_integer(0); j as usize + 1];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += *c * Q::new(2 * j - 1, j);
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= *c * Q::new(j - 1, j);
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// One term `coef * n^n_pow * a^a_pow * x^x_pow * rho^(2 rho2_pow)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhoTerm {
    pub coef: Ratio<i64>,
    pub x_pow: u32,
    pub rho2_pow: u32,
    pub n_pow: u32,
    pub a_pow: i32,
}

/// The potential term of order `k` written in `x` and even powers of `rho`.
pub fn potential_rho_form(k: u32) -> Result<Vec<RhoTerm>> {
    let coeffs = legendre_rational(k);
    let mut out = Vec::new();
    for (j, c) in coeffs.iter().enumerate().rev() {
        if *c.numer() == 0 {
            continue;
        }
        let rem = k - j as u32;
        if !rem.is_multiple_of(2) {
            return Err(Error::OddRadiusPower(rem));
        }
        let sign = if j % 2 == 1 { -1 } else { 1 };
        let c = *c * Q::from_integer(sign);
        out.push(RhoTerm {
            coef: Ratio::new(*c.numer() as i64, *c.denom() as i64),
            x_pow: j as u32,
            rho2_pow: rem / 2,
            n_pow: 2,
            a_pow: 2 - k as i32,
        });
    }
    Ok(out)
}

/// Potential rows as printed in the reference table, `k = 0..=5`.
pub fn printed_potential_table() -> Vec<(u32, Vec<RhoTerm>)> {
    let t = |n: i64, d: i64, x_pow, rho2_pow, n_pow, a_pow| RhoTerm {
        coef: Ratio::new(n, d),
        x_pow,
        rho2_pow,
        n_pow,
        a_pow,
    };
    vec![
        (0, vec![t(1, 1, 0, 0, 2, 2)]),
        (1, vec![t(-1, 1, 1, 0, 2, 1)]),
        (2, vec![t(3, 2, 2, 0, 2, 0), t(-1, 2, 0, 1, 0, 2)]),
        (3, vec![t(-5, 2, 3, 0, 2, -1), t(3, 2, 1, 1, 2, -1)]),
        (4, vec![t(35, 8, 4, 0, 2, -2), t(-30, 8, 2, 1, 2, -2), t(3, 1, 0, 2, 2, -2)]),
        (
            5,
            vec![t(-63, 8, 5, 0, 2, -3), t(70, 8, 3, 1, 2, -3), t(-15, 8, 1, 2, 2, -3)],
        ),
    ]
}

/// Orders at which the printed table disagrees with the generating formula.
pub fn potential_table_discrepancies() -> Result<Vec<u32>> {
    let mut bad = Vec::new();
    for (k, printed) in printed_potential_table() {
        if potential_rho_form(k)? != printed {
            bad.push(k);
        }
    }
    Ok(bad)
}

/// Rational coefficients of the normalized potential term over `(x, y, z)`.
fn potential_rational(k: u32) -> Result<BTreeMap<[u32; 3], Q>> {
    let mut out: BTreeMap<[u32; 3], Q> = BTreeMap::new();
    for term in potential_rho_form(k)? {
        let coef = Q::new(*term.coef.numer() as i128, *term.coef.denom() as i128);
        // (x^2 + y^2 + z^2)^p by the multinomial theorem
        let p = term.rho2_pow;
        for i in 0..=p {
            for j in 0..=p - i {
                let l = p - i - j;
                let multi = factorial(p) / (factorial(i) * factorial(j) * factorial(l));
                let e = [term.x_pow + 2 * i, 2 * j, 2 * l];
                *out.entry(e).or_insert_with(|| Q::from_integer(0)) += coef * Q::from_integer(multi);
            }
        }
    }
    out.retain(|_, c| *c.numer() != 0);
    Ok(out)
}

fn factorial(n: u32) -> i128 {
    (1..=n as i128).product()
}

/// Potential term of order `k` over `(x, y, z)` in the units of `config`.
pub fn potential_polynomial(k: u32, config: &CwConfig) -> Result<MultiPoly> {
    let factor = if config.normalized {
        1.0
    } else {
        let n = config.mean_motion();
        n * n * config.a.powi(2 - k as i32)
    };
    let terms = potential_rational(k)?
        .into_iter()
        .map(|(e, c)| (e.to_vec(), factor * (*c.numer() as f64) / (*c.denom() as f64)))
        .collect::<Vec<_>>();
    Ok(MultiPoly::from_terms(3, terms)?.with_prune_threshold(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwConfig {
    /// Reference orbit semi-major axis, m.
    pub a: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    pub k_max: u32,
    #[serde(default)]
    pub planar: bool,
    /// Lengths in units of `a`, time in units of `1/n`.
    #[serde(default = "yes")]
    pub normalized: bool,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_mu() -> f64 {
    EARTH_MU
}

fn yes() -> bool {
    true
}

fn default_scale() -> f64 {
    0.05
}

impl CwConfig {
    pub fn new(a: f64, k_max: u32) -> Self {
        CwConfig {
            a,
            mu: EARTH_MU,
            k_max,
            planar: false,
            normalized: true,
            scale: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::InvalidInput(format!("semi-major axis {} must be positive", self.a)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidInput(format!("mu {} must be positive", self.mu)));
        }
        if self.k_max < 2 {
            return Err(Error::InvalidInput(format!("k_max {} must be at least 2", self.k_max)));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::InvalidInput(format!("scale {} must lie in (0, 1]", self.scale)));
        }
        Ok(())
    }

    /// Mean motion `sqrt(mu / a^3)`, rad/s.
    pub fn mean_motion(&self) -> f64 {
        (self.mu / self.a.powi(3)).sqrt()
    }

    pub fn n_pos(&self) -> usize {
        if self.planar {
            2
        } else {
            3
        }
    }

    /// Length of one model unit, m.
    pub fn length_unit(&self) -> f64 {
        if self.normalized {
            self.a * self.scale
        } else {
            self.scale
        }
    }

    /// Duration of one model time unit, s.
    pub fn time_unit(&self) -> f64 {
        if self.normalized {
            1.0 / self.mean_motion()
        } else {
            1.0
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != 2 * self.n_pos() {
            return Err(Error::DimensionMismatch {
                what: "CW state",
                expected: 2 * self.n_pos(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// SI state to model units.
    pub fn scale_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let (l, t, n) = (self.length_unit(), self.time_unit(), self.n_pos());
        Ok(x.iter()
            .enumerate()
            .map(|(i, v)| if i < n { v / l } else { v * t / l })
            .collect())
    }

    pub fn unscale_state(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(u)?;
        let (l, t, n) = (self.length_unit(), self.time_unit(), self.n_pos());
        Ok(u.iter()
            .enumerate()
            .map(|(i, v)| if i < n { v * l } else { v * l / t })
            .collect())
    }

    /// SI costates `(lambda_r, lambda_v)` to model units.
    ///
    /// The control equals `-lambda_v`, so `lambda_v` scales like an
    /// acceleration and `lambda_r` like its time derivative.
    pub fn scale_costates(&self, lam: &[f64]) -> Result<Vec<f64>> {
        self.check_state(lam)?;
        let (l, t, n) = (self.length_unit(), self.time_unit(), self.n_pos());
        Ok(lam
            .iter()
            .enumerate()
            .map(|(i, v)| if i < n { v * t.powi(3) / l } else { v * t * t / l })
            .collect())
    }

    pub fn unscale_costates(&self, lam: &[f64]) -> Result<Vec<f64>> {
        self.check_state(lam)?;
        let (l, t, n) = (self.length_unit(), self.time_unit(), self.n_pos());
        Ok(lam
            .iter()
            .enumerate()
            .map(|(i, v)| if i < n { v * l / t.powi(3) } else { v * l / (t * t) })
            .collect())
    }

    pub fn scale_time(&self, t: f64) -> f64 {
        t / self.time_unit()
    }

    pub fn unscale_time(&self, tau: f64) -> f64 {
        tau * self.time_unit()
    }
}

/// Lagrangian over `(q, q')` with `n_pos` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Lagrangian {
    pub poly: MultiPoly,
    pub n_pos: usize,
}

impl Lagrangian {
    pub fn new(poly: MultiPoly, n_pos: usize) -> Result<Self> {
        if poly.num_vars() != 2 * n_pos {
            return Err(Error::DimensionMismatch {
                what: "Lagrangian variables",
                expected: 2 * n_pos,
                got: poly.num_vars(),
            });
        }
        Ok(Lagrangian { poly, n_pos })
    }

    fn check_velocity_hessian(&self) -> Result<()> {
        let n = self.n_pos;
        for i in 0..n {
            let di = self.poly.partial_derivative(n + i)?;
            for j in 0..n {
                let h = di.partial_derivative(n + j)?;
                let want = if i == j { 1.0 } else { 0.0 };
                let constant = h.degree() == 0 && (h.constant_term() - want).abs() <= 1e-14;
                if !constant {
                    return Err(Error::NonIdentityVelocityHessian);
                }
            }
        }
        Ok(())
    }

    /// Energy function `sum q'_i dL/dq'_i - L`.
    pub fn energy_function(&self) -> Result<MultiPoly> {
        let n = self.n_pos;
        let mut e = self.poly.scale(-1.0);
        for i in 0..n {
            let p = self.poly.partial_derivative(n + i)?;
            let qd = MultiPoly::var(2 * n, n + i);
            e = e.try_add(&p.try_mul(&qd, None)?)?;
        }
        Ok(e)
    }
}

/// Accelerations `q''_i = dL/dq_i - sum_j (d^2 L / dq'_i dq_j) q'_j`.
pub fn euler_lagrange(lagrangian: &Lagrangian) -> Result<PolyMap> {
    lagrangian.check_velocity_hessian()?;
    let n = lagrangian.n_pos;
    let l = &lagrangian.poly;
    let rows = (0..n)
        .map(|i| {
            let mut acc = l.partial_derivative(i)?;
            let p = l.partial_derivative(n + i)?;
            for j in 0..n {
                let mixed = p.partial_derivative(j)?;
                if mixed.is_zero() {
                    continue;
                }
                let qd = MultiPoly::var(2 * n, n + j);
                acc = acc.try_sub(&mixed.try_mul(&qd, None)?)?;
            }
            Ok(acc.with_prune_threshold(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    PolyMap::new(2 * n, rows)
}

/// CW Lagrangian over `(x, y, z, x', y', z')`, or `(x, y, x', y')` when
/// planar, before the extra scale factor.
pub fn cw_lagrangian(config: &CwConfig) -> Result<Lagrangian> {
    config.validate()?;
    let (n, a) = if config.normalized {
        (1.0, 1.0)
    } else {
        (config.mean_motion(), config.a)
    };
    let n2 = n * n;
    // variables: x y z xd yd zd
    let kinetic = [
        ([0, 0, 0, 2, 0, 0], 0.5),
        ([0, 0, 0, 0, 2, 0], 0.5),
        ([0, 0, 0, 0, 0, 2], 0.5),
        ([1, 0, 0, 0, 1, 0], n),
        ([0, 1, 0, 1, 0, 0], -n),
        ([0, 0, 0, 0, 1, 0], n * a),
        ([0, 2, 0, 0, 0, 0], 0.5 * n2),
        ([2, 0, 0, 0, 0, 0], 0.5 * n2),
        ([1, 0, 0, 0, 0, 0], n2 * a),
        ([0, 0, 0, 0, 0, 0], 0.5 * n2 * a * a),
    ];
    let mut l = MultiPoly::from_terms(6, kinetic.iter().map(|(e, c)| (e.to_vec(), *c)))?
        .with_prune_threshold(0.0);
    for k in 0..=config.k_max {
        let q = potential_polynomial(k, config)?;
        let lifted = MultiPoly::from_terms(
            6,
            q.terms().map(|(m, c)| {
                let mut e = m.exps().to_vec();
                e.resize(6, 0);
                (e, c)
            }),
        )?
        .with_prune_threshold(0.0);
        l = l.try_add(&lifted)?;
    }
    if !config.planar {
        return Lagrangian::new(l, 3);
    }
    let planar = MultiPoly::from_terms(
        4,
        l.terms().filter_map(|(m, c)| {
            let e = m.exps();
            (e[2] == 0 && e[5] == 0).then(|| (vec![e[0], e[1], e[3], e[4]], c))
        }),
    )?
    .with_prune_threshold(0.0);
    Lagrangian::new(planar, 2)
}

/// CW accelerations in model units: the Euler-Lagrange output with all
/// positions and velocities divided by the scale factor.
pub fn cw_dynamics(config: &CwConfig) -> Result<PolyMap> {
    let unscaled = euler_lagrange(&cw_lagrangian(config)?)?;
    let s = config.scale;
    let nv = unscaled.num_vars_in();
    let rows = unscaled
        .components()
        .iter()
        .map(|p| {
            let terms: Vec<_> = p
                .terms()
                .map(|(m, c)| (m.exps().to_vec(), c * s.powi(m.degree() as i32 - 1)))
                .collect();
            Ok(MultiPoly::from_terms(nv, terms)?.with_prune_threshold(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    PolyMap::new(nv, rows)
}

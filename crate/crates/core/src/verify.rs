//! Truth sources: adaptive Runge-Kutta integration, the linear STM costate
//! formula, a shooting solver, and trajectory metrics.

use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::condition_number_real;
use crate::ocp::AugmentedSystem;
use crate::polyalg::PolyMap;

/// Coefficient and sparse `(variable, power)` factors of one term.
type Term = (f64, Vec<(usize, u32)>);

/// Polynomial vector field flattened for repeated evaluation.
#[derive(Debug, Clone)]
pub struct CompiledField {
    num_vars: usize,
    max_exp: Vec<u32>,
    rows: Vec<Vec<Term>>,
}

impl CompiledField {
    pub fn new(map: &PolyMap) -> Self {
        let num_vars = map.num_vars_in();
        let mut max_exp = vec![0u32; num_vars];
        let rows = map
            .components()
            .iter()
            .map(|p| {
                p.terms()
                    .map(|(m, c)| {
                        let factors: Vec<(usize, u32)> = m
                            .exps()
                            .iter()
                            .enumerate()
                            .filter(|(_, e)| **e > 0)
                            .map(|(i, e)| {
                                max_exp[i] = max_exp[i].max(*e);
                                (i, *e)
                            })
                            .collect();
                        (c, factors)
                    })
                    .collect()
            })
            .collect();
        CompiledField {
            num_vars,
            max_exp,
            rows,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn dim_out(&self) -> usize {
        self.rows.len()
    }

    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        let powers: Vec<Vec<f64>> = z
            .iter()
            .zip(&self.max_exp)
            .map(|(x, &m)| {
                let mut p = Vec::with_capacity(m as usize + 1);
                let mut acc = 1.0;
                p.push(acc);
                for _ in 0..m {
                    acc *= x;
                    p.push(acc);
                }
                p
            })
            .collect();
        for (o, row) in out.iter_mut().zip(&self.rows) {
            let mut s = 0.0;
            for (c, factors) in row {
                let mut t = *c;
                for &(i, e) in factors {
                    t *= powers[i][e as usize];
                }
                s += t;
            }
            *o = s;
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-10,
            atol: 1e-14,
            max_steps: 2_000_000,
        }
    }
}

/// Sampled solution of an ODE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(names: Vec<String>, times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::DimensionMismatch {
                what: "trajectory samples",
                expected: times.len(),
                got: states.len(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("trajectory times must increase strictly".into()));
        }
        for s in &states {
            if s.len() != names.len() {
                return Err(Error::DimensionMismatch {
                    what: "trajectory columns",
                    expected: names.len(),
                    got: s.len(),
                });
            }
        }
        Ok(Trajectory { names, times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.states.last().map(|s| s.as_slice())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }

    /// Applies `f` to every state row.
    pub fn map_states<F>(&self, names: Vec<String>, f: F) -> Result<Trajectory>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>>,
    {
        let states = self.states.iter().map(|s| f(s)).collect::<Result<Vec<_>>>()?;
        Trajectory::new(names, self.times.clone(), states)
    }

    pub fn map_times(mut self, f: impl Fn(f64) -> f64) -> Trajectory {
        for t in &mut self.times {
            *t = f(*t);
        }
        self
    }

    /// CSV with header `t,<names>`; numbers in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (t, s) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t}");
            for v in s {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Dormand-Prince 5(4) with dense output, sampled at `times`
/// (`times[0]` is the initial time).
pub fn integrate_fn<F>(f: F, x0: &[f64], times: &[f64], opts: &IntegratorOptions) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if times.is_empty() {
        return Ok(Vec::new());
    }
    if times.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::InvalidInput("sample times must be non-decreasing".into()));
    }
    let n = x0.len();
    let t_end = *times.last().unwrap();
    let mut out = Vec::with_capacity(times.len());
    let mut next = 0;
    let mut t = times[0];
    let mut y = x0.to_vec();
    while next < times.len() && times[next] <= t {
        out.push(y.clone());
        next += 1;
    }
    if next == times.len() {
        return Ok(out);
    }

    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    const D: [f64; 7] = [
        -12715105075.0 / 11282082432.0,
        0.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];

    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    f(t, &y, &mut k[0]);
    let span = t_end - t;
    let mut h = {
        let scale: f64 = y
            .iter()
            .zip(&k[0])
            .map(|(yi, fi)| {
                let sc = opts.atol + opts.rtol * yi.abs();
                (fi / sc).powi(2)
            })
            .sum::<f64>()
            / n.max(1) as f64;
        let guess = if scale > 0.0 { 0.01 / scale.sqrt() } else { span * 1e-3 };
        guess.min(span).max(span * 1e-12)
    };
    let mut steps = 0usize;
    let mut fac_old = 1e-4f64;
    while t < t_end {
        if steps >= opts.max_steps {
            return Err(Error::TooManySteps(steps));
        }
        steps += 1;
        if t + h > t_end {
            h = t_end - t;
        }
        if h <= 1e-14 * t.abs().max(span) {
            return Err(Error::StepSizeUnderflow { t });
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                tmp[i] = y[i] + h * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            f(t + C[s] * h, &tmp, &mut tail[0]);
            if s == 6 {
                y1.copy_from_slice(&tmp);
            }
        }
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += E[s] * k[s][i];
            }
            let sc = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
            err += (h * e / sc).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            h *= 0.1;
            continue;
        }
        if err <= 1.0 {
            // dense output on [t, t + h]
            let t_new = t + h;
            while next < times.len() && times[next] <= t_new {
                let theta = (times[next] - t) / h;
                let th1 = 1.0 - theta;
                let sample = (0..n)
                    .map(|i| {
                        let rc2 = y1[i] - y[i];
                        let rc3 = h * k[0][i] - rc2;
                        let rc4 = rc2 - h * k[6][i] - rc3;
                        let rc5 = h * (0..7).map(|s| D[s] * k[s][i]).sum::<f64>();
                        y[i] + theta * (rc2 + th1 * (rc3 + theta * (rc4 + th1 * rc5)))
                    })
                    .collect();
                out.push(sample);
                next += 1;
            }
            t = t_new;
            y.copy_from_slice(&y1);
            let (first, rest) = k.split_at_mut(1);
            first[0].copy_from_slice(&rest[5]);
            // PI step-size control
            let fac = (err.max(1e-10).powf(0.17) * fac_old.powf(-0.04) / 0.9).clamp(0.1, 5.0);
            fac_old = err.max(1e-4);
            h /= fac;
        } else {
            h /= (err.powf(0.2) / 0.9).min(5.0);
        }
    }
    while out.len() < times.len() {
        out.push(y.clone());
    }
    debug!("integration used {steps} steps");
    Ok(out)
}

/// Integrates a polynomial field, sampling at `times`.
pub fn integrate(
    system: &PolyMap,
    x0: &[f64],
    times: &[f64],
    opts: &IntegratorOptions,
) -> Result<Vec<Vec<f64>>> {
    if system.dim_out() != system.num_vars_in() {
        return Err(Error::NonSquareMap {
            inputs: system.num_vars_in(),
            outputs: system.dim_out(),
        });
    }
    if x0.len() != system.num_vars_in() {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: system.num_vars_in(),
            got: x0.len(),
        });
    }
    let field = CompiledField::new(system);
    integrate_fn(|_, z, out| field.eval_into(z, out), x0, times, opts)
}

/// `n + 1` evenly spaced times on `[0, tf]`.
pub fn uniform_times(tf: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| tf * i as f64 / n as f64).collect()
}

/// State at `tf` only.
pub fn propagate_to(system: &PolyMap, x0: &[f64], tf: f64, opts: &IntegratorOptions) -> Result<Vec<f64>> {
    let mut s = integrate(system, x0, &[0.0, tf], opts)?;
    Ok(s.pop().expect("two samples"))
}

/// `lambda0 = Phi12^-1 (xf - Phi11 x0)` with `Phi = exp(A tf)`.
pub fn stm_costate_oracle(a: &DMatrix<f64>, x0: &[f64], xf: &[f64], tf: f64) -> Result<Vec<f64>> {
    let dim = a.nrows();
    if a.ncols() != dim || !dim.is_multiple_of(2) {
        return Err(Error::DimensionMismatch {
            what: "augmented system matrix",
            expected: dim,
            got: a.ncols(),
        });
    }
    let m = dim / 2;
    if x0.len() != m || xf.len() != m {
        return Err(Error::DimensionMismatch {
            what: "boundary state",
            expected: m,
            got: x0.len().min(xf.len()),
        });
    }
    if !(tf > 0.0) {
        return Err(Error::InvalidInput(format!("time of flight {tf} must be positive")));
    }
    let phi = (a * tf).exp();
    let phi11 = phi.view((0, 0), (m, m)).into_owned();
    let phi12 = phi.view((0, m), (m, m)).into_owned();
    let condition = condition_number_real(phi12.clone());
    if !(condition <= 1e12) {
        return Err(Error::SingularLinearPart { condition });
    }
    let rhs = DVector::from_column_slice(xf) - phi11 * DVector::from_column_slice(x0);
    let lam = phi12
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularLinearPart { condition })?;
    Ok(lam.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShootingOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub fd_rel_step: f64,
    pub integrator: IntegratorOptions,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions {
            tol: 1e-9,
            max_iterations: 50,
            max_halvings: 20,
            fd_rel_step: 1e-6,
            integrator: IntegratorOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShootingResult {
    pub lambda0: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Terminal state of the augmented system from `(x0, lambda0)`.
pub fn shoot(
    field: &CompiledField,
    x0: &[f64],
    lambda0: &[f64],
    tf: f64,
    opts: &IntegratorOptions,
) -> Result<Vec<f64>> {
    let mut z0 = x0.to_vec();
    z0.extend_from_slice(lambda0);
    let mut s = integrate_fn(|_, z, out| field.eval_into(z, out), &z0, &[0.0, tf], opts)?;
    Ok(s.pop().expect("two samples"))
}

/// Damped Newton on `x(tf; x0, lambda0) - xf` with a central-difference
/// Jacobian.
pub fn shooting_oracle(
    system: &AugmentedSystem,
    x0: &[f64],
    xf: &[f64],
    tf: f64,
    guess: &[f64],
    opts: &ShootingOptions,
) -> Result<ShootingResult> {
    let m = system.state_dim();
    for (what, v) in [("initial state", x0), ("final state", xf), ("costate guess", guess)] {
        if v.len() != m {
            return Err(Error::DimensionMismatch {
                what,
                expected: m,
                got: v.len(),
            });
        }
    }
    let field = CompiledField::new(system.dynamics());
    let residual = |lam: &[f64]| -> Result<DVector<f64>> {
        let z = shoot(&field, x0, lam, tf, &opts.integrator)?;
        Ok(DVector::from_iterator(m, (0..m).map(|i| z[i] - xf[i])))
    };
    let mut lam = DVector::from_column_slice(guess);
    let mut r = residual(lam.as_slice())?;
    let mut rnorm = r.norm();
    for iter in 0..opts.max_iterations {
        if rnorm <= opts.tol {
            return Ok(ShootingResult {
                lambda0: lam.iter().copied().collect(),
                residual: rnorm,
                iterations: iter,
            });
        }
        let floor = lam.amax().max(1e-6);
        let mut jac = DMatrix::zeros(m, m);
        for j in 0..m {
            let step = opts.fd_rel_step * lam[j].abs().max(floor);
            let mut lp = lam.clone();
            lp[j] += step;
            let mut lm = lam.clone();
            lm[j] -= step;
            let col = (residual(lp.as_slice())? - residual(lm.as_slice())?) / (2.0 * step);
            jac.set_column(j, &col);
        }
        let delta = jac
            .clone()
            .lu()
            .solve(&(-&r))
            .ok_or(Error::SingularLinearPart {
                condition: condition_number_real(jac),
            })?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial = &lam + &delta * alpha;
            if let Ok(rt) = residual(trial.as_slice()) {
                let tn = rt.norm();
                if tn < rnorm {
                    lam = trial;
                    r = rt;
                    rnorm = tn;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        debug!("shooting iteration {iter}: residual {rnorm:.3e}");
        if !accepted {
            if rnorm <= opts.tol * 10.0 {
                break;
            }
            return Err(Error::LineSearchFailed { residual: rnorm });
        }
    }
    if rnorm <= opts.tol {
        return Ok(ShootingResult {
            lambda0: lam.iter().copied().collect(),
            residual: rnorm,
            iterations: opts.max_iterations,
        });
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
        residual: rnorm,
    })
}

/// `(1/tf) sqrt(int_0^tf x_j^2 dt)` for each column `j`, by the trapezoid rule.
pub fn control_effort(traj: &Trajectory, tf: f64, columns: &[usize]) -> Result<Vec<f64>> {
    let (Some(&start), Some(&end)) = (traj.times.first(), traj.times.last()) else {
        return Err(Error::SpanMismatch { start: 0.0, end: 0.0, tf });
    };
    let tol = 1e-9 * tf.abs().max(1.0);
    if start.abs() > tol || (end - tf).abs() > tol || !(tf > 0.0) {
        return Err(Error::SpanMismatch { start, end, tf });
    }
    columns
        .iter()
        .map(|&j| {
            if j >= traj.names.len() {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: traj.names.len(),
                });
            }
            let mut integral = 0.0;
            for w in 0..traj.len() - 1 {
                let dt = traj.times[w + 1] - traj.times[w];
                let a = traj.states[w][j];
                let b = traj.states[w + 1][j];
                integral += 0.5 * dt * (a * a + b * b);
            }
            Ok(integral.sqrt() / tf)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalError {
    pub absolute: f64,
    /// Absolute error over the initial separation `|x0 - xf|`.
    pub relative: f64,
}

pub fn terminal_error(final_state: &[f64], x0: &[f64], xf: &[f64]) -> Result<TerminalError> {
    let m = xf.len();
    if final_state.len() < m || x0.len() != m {
        return Err(Error::DimensionMismatch {
            what: "terminal state",
            expected: m,
            got: final_state.len().min(x0.len()),
        });
    }
    let absolute = (0..m).map(|i| (final_state[i] - xf[i]).powi(2)).sum::<f64>().sqrt();
    let sep = (0..m).map(|i| (x0[i] - xf[i]).powi(2)).sum::<f64>().sqrt();
    let relative = if sep > 0.0 { absolute / sep } else if absolute == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(TerminalError { absolute, relative })
}

/// Relative error per component, measured against
/// `max(|ref_i|, floor_rel * max_j |ref_j|)` so that components that are
/// negligible relative to the vector do not dominate.
pub fn significant_relative_errors(value: &[f64], reference: &[f64], floor_rel: f64) -> Vec<f64> {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    value
        .iter()
        .zip(reference)
        .map(|(v, r)| {
            let den = r.abs().max(floor_rel * scale);
            if den > 0.0 {
                (v - r).abs() / den
            } else {
                (v - r).abs()
            }
        })
        .collect()
}

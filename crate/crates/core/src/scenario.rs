//! Scenario files and the end-to-end pipeline: model, augmentation,
//! Koopman operator, transition map, inversion, costates, and truth
//! integration.
//!
//! Scenario inputs are SI (meters, seconds). Each model works internally
//! in its own units; conversions happen at the boundary.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, DomainBox};
use crate::error::{Error, Result, Stage, StageExt};
use crate::koopman::{KoopmanDiagnostics, KoopmanModel, KoopmanOptions, Propagator};
use crate::mapinv::TpbvpMap;
use crate::models::{cw_dynamics, duffing_acceleration, CwConfig, DuffingParams};
use crate::ocp::{augment_energy_optimal, AugmentedSystem};
use crate::par::{self, Execution};
use crate::verify::{
    control_effort, integrate, shooting_oracle, stm_costate_oracle, terminal_error,
    uniform_times, IntegratorOptions, ShootingOptions, TerminalError, Trajectory,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ModelSpec {
    Duffing(DuffingParams),
    Cw(CwConfig),
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Duffing(_) => "duffing".into(),
            ModelSpec::Cw(c) => format!("cw-k{}", c.k_max),
        }
    }

    pub fn n_pos(&self) -> usize {
        match self {
            ModelSpec::Duffing(_) => 1,
            ModelSpec::Cw(c) => c.n_pos(),
        }
    }

    /// Ordering used to pick the truth model in comparisons.
    fn fidelity(&self) -> u32 {
        match self {
            ModelSpec::Duffing(p) => u32::from(p.eps != 0.0),
            ModelSpec::Cw(c) => c.k_max,
        }
    }

    pub fn prepare(&self) -> Result<PreparedModel> {
        let accel = match self {
            ModelSpec::Duffing(p) => duffing_acceleration(p)?,
            ModelSpec::Cw(c) => cw_dynamics(c)?,
        };
        let aug = augment_energy_optimal(&accel, self.n_pos())?;
        Ok(PreparedModel {
            spec: self.clone(),
            aug,
        })
    }
}

/// A model with its augmented dynamics and unit conversions.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    spec: ModelSpec,
    aug: AugmentedSystem,
}

impl PreparedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn augmented(&self) -> &AugmentedSystem {
        &self.aug
    }

    pub fn state_dim(&self) -> usize {
        self.aug.state_dim()
    }

    fn check(&self, what: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.state_dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    pub fn state_to_model(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check("state", x)?;
        match &self.spec {
            ModelSpec::Duffing(p) => Ok(vec![x[0], x[1] / p.mass]),
            ModelSpec::Cw(c) => c.scale_state(x),
        }
    }

    pub fn state_from_model(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check("state", u)?;
        match &self.spec {
            ModelSpec::Duffing(p) => Ok(vec![u[0], u[1] * p.mass]),
            ModelSpec::Cw(c) => c.unscale_state(u),
        }
    }

    pub fn costates_to_model(&self, lam: &[f64]) -> Result<Vec<f64>> {
        self.check("costate", lam)?;
        match &self.spec {
            ModelSpec::Duffing(p) => Ok(vec![lam[0], lam[1] * p.mass]),
            ModelSpec::Cw(c) => c.scale_costates(lam),
        }
    }

    pub fn costates_from_model(&self, lam: &[f64]) -> Result<Vec<f64>> {
        self.check("costate", lam)?;
        match &self.spec {
            ModelSpec::Duffing(p) => Ok(vec![lam[0], lam[1] / p.mass]),
            ModelSpec::Cw(c) => c.unscale_costates(lam),
        }
    }

    pub fn time_to_model(&self, t: f64) -> f64 {
        match &self.spec {
            ModelSpec::Duffing(_) => t,
            ModelSpec::Cw(c) => c.scale_time(t),
        }
    }

    pub fn time_from_model(&self, t: f64) -> f64 {
        match &self.spec {
            ModelSpec::Duffing(_) => t,
            ModelSpec::Cw(c) => c.unscale_time(t),
        }
    }

    pub fn state_names(&self) -> Vec<String> {
        let names: &[&str] = match &self.spec {
            ModelSpec::Duffing(_) => &["q", "p"],
            ModelSpec::Cw(c) if c.planar => &["x", "y", "vx", "vy"],
            ModelSpec::Cw(_) => &["x", "y", "z", "vx", "vy", "vz"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// State names followed by costate names (`l` prefix).
    pub fn column_names(&self) -> Vec<String> {
        let s = self.state_names();
        let mut out = s.clone();
        out.extend(s.iter().map(|n| format!("l{n}")));
        out
    }

    /// Jacobian of the augmented dynamics at the origin.
    pub fn linear_matrix(&self) -> DMatrix<f64> {
        self.aug.dynamics().linear_part()
    }

    /// Augmented model-unit trajectory converted to SI.
    pub fn trajectory_to_si(&self, times: &[f64], states: &[Vec<f64>]) -> Result<Trajectory> {
        let m = self.state_dim();
        let si = states
            .iter()
            .map(|z| {
                let mut row = self.state_from_model(&z[..m])?;
                row.extend(self.costates_from_model(&z[m..])?);
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let t = times.iter().map(|t| self.time_from_model(*t)).collect();
        Trajectory::new(self.column_names(), t, si)
    }

    /// Position error norm in SI between two SI states.
    pub fn position_error(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.spec.n_pos();
        (0..n).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    Koopman,
    StmOracle,
    Shooting,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "koopman" => Ok(SolverKind::Koopman),
            "stm-oracle" | "stm" => Ok(SolverKind::StmOracle),
            "shooting" => Ok(SolverKind::Shooting),
            other => Err(Error::InvalidInput(format!(
                "unknown solver {other:?} (expected koopman, stm-oracle or shooting)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_order")]
    pub max_order: u32,
    /// Map inversion order, defaults to `max_order`.
    #[serde(default)]
    pub trunc_order: Option<u32>,
    #[serde(default)]
    pub propagator: Propagator,
}

fn default_order() -> u32 {
    3
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            max_order: default_order(),
            trunc_order: None,
            propagator: Propagator::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxRule {
    /// Extents of the linearized-optimal trajectory times `margin`.
    #[default]
    Trajectory,
    /// Trajectory extents for states, `costate_factor` times the linear
    /// costate magnitude for costates.
    LinearCostate,
}

/// Half-widths are SI; missing groups come from `rule`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default)]
    pub rule: BoxRule,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_costate_factor")]
    pub costate_factor: f64,
    #[serde(default)]
    pub position_half_widths: Option<Vec<f64>>,
    #[serde(default)]
    pub velocity_half_widths: Option<Vec<f64>>,
    /// `(lambda_r, lambda_v)` half-widths.
    #[serde(default)]
    pub costate_half_widths: Option<Vec<f64>>,
}

fn default_margin() -> f64 {
    1.5
}

fn default_costate_factor() -> f64 {
    10.0
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            rule: BoxRule::default(),
            margin: default_margin(),
            costate_factor: default_costate_factor(),
            position_half_widths: None,
            velocity_half_widths: None,
            costate_half_widths: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CircleVelocity {
    /// `vy0 = -n x0`: the tangential speed difference of a circular orbit
    /// of radius `a + x0`.
    #[default]
    Tangential,
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleSpec {
    pub radius: f64,
    pub count: usize,
    #[serde(default)]
    pub velocity: CircleVelocity,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Explicit initial states, SI.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub circle: Option<CircleSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub tf: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub model_b: ModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub domain: DomainConfig,
    pub x0: Vec<f64>,
    /// Defaults to the origin.
    #[serde(default)]
    pub xf: Option<Vec<f64>>,
    pub tf: f64,
    #[serde(default)]
    pub solver: SolverKind,
    /// Output intervals; trajectories have `samples + 1` rows.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub compare: Option<CompareSpec>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub integrator: Option<IntegratorOptions>,
    #[serde(default)]
    pub output: Option<String>,
}

fn default_samples() -> usize {
    400
}

impl Scenario {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn xf(&self) -> Vec<f64> {
        self.xf.clone().unwrap_or_else(|| vec![0.0; self.x0.len()])
    }

    pub fn trunc_order(&self) -> u32 {
        self.basis.trunc_order.unwrap_or(self.basis.max_order)
    }

    fn integrator(&self) -> IntegratorOptions {
        self.integrator.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        match &self.model {
            ModelSpec::Duffing(p) => p.validate()?,
            ModelSpec::Cw(c) => c.validate()?,
        }
        let m = 2 * self.model.n_pos();
        let check_state = |what: &'static str, v: &[f64]| -> Result<()> {
            if v.len() != m {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: m,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        check_state("x0", &self.x0)?;
        check_state("xf", &self.xf())?;
        if !(self.tf > 0.0 && self.tf.is_finite()) {
            return bad(format!("tf {} must be positive", self.tf));
        }
        if self.solver == SolverKind::Koopman && self.basis.max_order < 2 {
            return bad("max_order must be at least 2 for a controlled solve".into());
        }
        if self.trunc_order() == 0 {
            return bad("trunc_order must be positive".into());
        }
        if self.samples < 2 {
            return bad("samples must be at least 2".into());
        }
        let d = &self.domain;
        if !(d.margin > 0.0) || !(d.costate_factor > 0.0) {
            return bad("domain margin and costate_factor must be positive".into());
        }
        let n = self.model.n_pos();
        for (what, v, len) in [
            ("position_half_widths", &d.position_half_widths, n),
            ("velocity_half_widths", &d.velocity_half_widths, n),
            ("costate_half_widths", &d.costate_half_widths, m),
        ] {
            if let Some(v) = v {
                if v.len() != len {
                    return Err(Error::DimensionMismatch {
                        what,
                        expected: len,
                        got: v.len(),
                    });
                }
                if v.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                    return bad(format!("{what} must be positive"));
                }
            }
        }
        if let Some(g) = &self.grid {
            for p in &g.points {
                check_state("grid point", p)?;
            }
            if let Some(c) = &g.circle {
                if !matches!(self.model, ModelSpec::Cw(_)) {
                    return bad("circle grids need a cw model".into());
                }
                if !(c.radius > 0.0 && c.radius.is_finite()) {
                    return bad("circle radius must be positive".into());
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.tf.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return bad("sweep times must be positive".into());
            }
            if s.tf.windows(2).any(|w| !(w[1] > w[0])) {
                return bad("sweep times must increase".into());
            }
        }
        if let Some(c) = &self.compare {
            if c.model_b.n_pos() != self.model.n_pos() {
                return bad("compared models must share the state layout".into());
            }
            match &c.model_b {
                ModelSpec::Duffing(p) => p.validate()?,
                ModelSpec::Cw(cfg) => cfg.validate()?,
            }
        }
        Ok(())
    }

    /// Initial states of the grid block, SI.
    pub fn grid_points(&self) -> Vec<Vec<f64>> {
        let Some(g) = &self.grid else {
            return Vec::new();
        };
        let mut pts = g.points.clone();
        if let (Some(c), ModelSpec::Cw(cfg)) = (&g.circle, &self.model) {
            let n = cfg.mean_motion();
            for i in 0..c.count {
                let th = 2.0 * std::f64::consts::PI * i as f64 / c.count as f64;
                let (x, y) = (c.radius * th.cos(), c.radius * th.sin());
                let vy = match c.velocity {
                    CircleVelocity::Tangential => -n * x,
                    CircleVelocity::Zero => 0.0,
                };
                let mut s = vec![0.0; 2 * cfg.n_pos()];
                s[0] = x;
                s[1] = y;
                s[cfg.n_pos() + 1] = vy;
                pts.push(s);
            }
        }
        pts
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub model_ms: f64,
    pub oracle_ms: f64,
    pub koopman_ms: f64,
    pub inversion_ms: f64,
    pub costates_ms: f64,
    pub verification_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanSummary {
    pub basis_size: usize,
    pub max_order: u32,
    pub trunc_order: u32,
    pub max_truncation_residual: f64,
    pub eigen_condition: Option<f64>,
    pub propagator: Propagator,
    pub spectral_failure: Option<String>,
    pub inversion_residual: f64,
    pub linear_condition: f64,
    /// Model-unit half-widths of the box, `(x, lambda)` order.
    pub half_widths: Vec<f64>,
}

impl KoopmanSummary {
    fn new(d: &KoopmanDiagnostics, map: &TpbvpMap) -> Self {
        let mut half_widths: Vec<f64> = (0..map.state_box.dim()).map(|i| map.state_box.half_width(i)).collect();
        half_widths.extend((0..map.costate_box.dim()).map(|i| map.costate_box.half_width(i)));
        KoopmanSummary {
            basis_size: d.basis_size,
            max_order: d.max_order,
            trunc_order: map.trunc_order,
            max_truncation_residual: d.max_truncation_residual,
            eigen_condition: d.eigen_condition,
            propagator: d.propagator,
            spectral_failure: d.spectral_failure.clone(),
            inversion_residual: map.inversion_residual,
            linear_condition: map.linear_condition,
            half_widths,
        }
    }
}

/// Result of one boundary-value solve. Physical values are SI; `_model`
/// fields are in model units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub scenario: String,
    pub model: String,
    pub solver: SolverKind,
    pub x0: Vec<f64>,
    pub xf: Vec<f64>,
    pub tf: f64,
    pub lambda0: Vec<f64>,
    pub lambda0_model: Vec<f64>,
    /// Closed-form costates of the linearized model.
    pub lambda0_linear: Vec<f64>,
    pub terminal_state: Vec<f64>,
    pub terminal_error: TerminalError,
    pub terminal_error_model: f64,
    pub terminal_position_error: f64,
    pub control_effort: Vec<f64>,
    pub koopman: Option<KoopmanSummary>,
    pub map_cached: bool,
    pub timings: Timings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub report: SolveReport,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointFailure {
    pub index: usize,
    pub x0: Vec<f64>,
    pub stage: Option<Stage>,
    pub error: String,
}

pub type PointResult = std::result::Result<SolveOutcome, PointFailure>;

type CachedMap = Arc<(TpbvpMap, KoopmanDiagnostics)>;

/// Pipeline runner holding the inverted-map cache.
#[derive(Default)]
pub struct Session {
    cache: Mutex<HashMap<String, Vec<CachedMap>>>,
    pub seed: Option<u64>,
}

struct Point {
    x0_si: Vec<f64>,
    xf_si: Vec<f64>,
    x0: Vec<f64>,
    xf: Vec<f64>,
    linear: Vec<f64>,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cached_maps(&self) -> usize {
        self.cache.lock().map(|c| c.values().map(Vec::len).sum()).unwrap_or(0)
    }

    pub fn solve(&self, sc: &Scenario) -> Result<SolveOutcome> {
        let model = sc.model.prepare().stage(Stage::Model)?;
        let mut out = self.solve_points(sc, &model, &[(sc.x0.clone(), sc.xf())], sc.tf)?;
        out.pop().expect("one point")
    }

    /// One solve per grid point, sharing a single inverted map.
    pub fn grid(&self, sc: &Scenario) -> Result<Vec<PointResult>> {
        let pts = sc.grid_points();
        if pts.is_empty() {
            return Ok(Vec::new());
        }
        let model = sc.model.prepare().stage(Stage::Model)?;
        let xf = sc.xf();
        let bcs: Vec<_> = pts.into_iter().map(|p| (p, xf.clone())).collect();
        Ok(batch(&bcs, self.solve_points(sc, &model, &bcs, sc.tf)?))
    }

    /// One solve per time of flight.
    pub fn sweep(&self, sc: &Scenario) -> Result<SweepOutcome> {
        let spec = sc
            .sweep
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("scenario has no sweep block".into()))?;
        let model = sc.model.prepare().stage(Stage::Model)?;
        let bc = vec![(sc.x0.clone(), sc.xf())];
        let mut results = Vec::with_capacity(spec.tf.len());
        for &tf in &spec.tf {
            let r = self.solve_points(sc, &model, &bc, tf)?;
            results.extend(batch(&bc, r));
        }
        let efforts: Vec<Option<Vec<f64>>> = results
            .iter()
            .map(|r| r.as_ref().ok().map(|o| o.report.control_effort.clone()))
            .collect();
        let monotone = efforts.iter().all(|e| e.is_some())
            && efforts.windows(2).all(|w| {
                let (a, b) = (w[0].as_ref().unwrap(), w[1].as_ref().unwrap());
                a.iter().zip(b).all(|(x, y)| y <= x)
            });
        Ok(SweepOutcome {
            tf: spec.tf.clone(),
            results,
            monotone_effort: monotone,
        })
    }

    /// Uncontrolled divergence between two models and cross-model
    /// controlled errors under the higher-fidelity model.
    pub fn compare(&self, sc: &Scenario) -> Result<CompareReport> {
        let spec_b = sc
            .compare
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("scenario has no compare block".into()))?
            .model_b
            .clone();
        let a = sc.model.prepare().stage(Stage::Model)?;
        let b = spec_b.prepare().stage(Stage::Model)?;
        let truth = if b.spec.fidelity() >= a.spec.fidelity() { &b } else { &a };
        let opts = sc.integrator();
        let m = a.state_dim();

        let times_si = uniform_times(sc.tf, sc.samples);
        let drift = |pm: &PreparedModel| -> Result<Vec<Vec<f64>>> {
            let mut z0 = pm.state_to_model(&sc.x0)?;
            z0.extend(vec![0.0; m]);
            let times: Vec<f64> = times_si.iter().map(|t| pm.time_to_model(*t)).collect();
            integrate(pm.aug.dynamics(), &z0, &times, &opts)?
                .iter()
                .map(|z| pm.state_from_model(&z[..m]))
                .collect()
        };
        let (da, db) = (drift(&a).stage(Stage::Verification)?, drift(&b).stage(Stage::Verification)?);
        let divergence: Vec<f64> = da.iter().zip(&db).map(|(p, q)| a.position_error(p, q)).collect();
        let half = divergence.len() / 2;
        let early = divergence[..half.max(1)].iter().cloned().fold(0.0, f64::max);
        let late = divergence[half..].iter().cloned().fold(0.0, f64::max);

        let mut controlled = Vec::new();
        for pm in [&a, &b] {
            let sub = Scenario {
                model: pm.spec.clone(),
                grid: None,
                sweep: None,
                compare: None,
                ..sc.clone()
            };
            let entry = self
                .solve_points(&sub, pm, &[(sc.x0.clone(), sc.xf())], sc.tf)
                .and_then(|mut v| v.pop().expect("one point"))
                .and_then(|o| {
                let lam = o.report.lambda0;
                let end = truth_terminal(truth, &sc.x0, &lam, sc.tf, &opts).stage(Stage::Verification)?;
                Ok(ControlledComparison {
                    model: pm.spec.label(),
                    lambda0: Some(lam),
                    own_model_position_error: Some(o.report.terminal_position_error),
                    truth_position_error: Some(truth.position_error(&end, &sc.xf())),
                    truth_terminal_error: Some(terminal_error(&end, &sc.x0, &sc.xf())?),
                    truth_terminal_state: Some(end),
                    error: None,
                })
            });
            controlled.push(entry.unwrap_or_else(|e| {
                warn!("controlled solve under {} failed: {e}", pm.spec.label());
                ControlledComparison {
                    model: pm.spec.label(),
                    lambda0: None,
                    own_model_position_error: None,
                    truth_terminal_state: None,
                    truth_position_error: None,
                    truth_terminal_error: None,
                    error: Some(e.to_string()),
                }
            }));
        }
        Ok(CompareReport {
            model_a: sc.model.clone(),
            model_b: spec_b,
            truth: truth.spec.label(),
            times: times_si,
            divergence: divergence.clone(),
            divergence_final: *divergence.last().unwrap_or(&0.0),
            divergence_max: early.max(late),
            divergence_growing: late > early,
            controlled,
        })
    }

    /// Koopman model of the augmented system for the scenario's box.
    pub fn build_koopman(&self, sc: &Scenario) -> Result<KoopmanBuild> {
        let model = sc.model.prepare().stage(Stage::Model)?;
        let tfm = model.time_to_model(sc.tf);
        let pts = prepare_points(&model, &[(sc.x0.clone(), sc.xf())], tfm)?;
        let domain = domain_box(sc, &model, &pts, tfm).stage(Stage::Koopman)?;
        let spec = BasisSpec::new(2 * model.state_dim(), sc.basis.max_order).stage(Stage::Koopman)?;
        let opts = KoopmanOptions {
            propagator: sc.basis.propagator,
            execution: sc.execution,
            ..Default::default()
        };
        let km = KoopmanModel::build(model.aug.dynamics(), spec, domain, &opts).stage(Stage::Koopman)?;
        Ok(KoopmanBuild {
            model: km,
            augmented: model.aug,
        })
    }

    fn map_for(
        &self,
        sc: &Scenario,
        model: &PreparedModel,
        domain: DomainBox,
        tfm: f64,
    ) -> Result<(CachedMap, bool, f64, f64)> {
        let key = serde_json::to_string(&(
            &model.spec,
            sc.basis.max_order,
            sc.trunc_order(),
            sc.basis.propagator,
            tfm.to_bits(),
        ))?;
        if let Some(hit) = self
            .cache
            .lock()
            .expect("cache lock")
            .get(&key)
            .and_then(|maps| maps.iter().find(|m| reusable(&m.0, &domain)))
        {
            return Ok((hit.clone(), true, 0.0, 0.0));
        }
        let t = Instant::now();
        let spec = BasisSpec::new(2 * model.state_dim(), sc.basis.max_order).stage(Stage::Koopman)?;
        let opts = KoopmanOptions {
            propagator: sc.basis.propagator,
            execution: sc.execution,
            ..Default::default()
        };
        let km = KoopmanModel::build(model.aug.dynamics(), spec, domain, &opts).stage(Stage::Koopman)?;
        let koopman_ms = ms(t);
        let t = Instant::now();
        let map = TpbvpMap::from_model(&km, tfm, sc.trunc_order()).stage(Stage::Inversion)?;
        let inversion_ms = ms(t);
        info!(
            "built map: basis {}, truncation residual {:.2e}, inversion residual {:.2e}",
            km.diagnostics().basis_size,
            km.diagnostics().max_truncation_residual,
            map.inversion_residual
        );
        let entry = Arc::new((map, km.diagnostics().clone()));
        self.cache.lock().expect("cache lock").entry(key).or_default().push(entry.clone());
        Ok((entry, false, koopman_ms, inversion_ms))
    }

    fn solve_points(
        &self,
        sc: &Scenario,
        model: &PreparedModel,
        bcs: &[(Vec<f64>, Vec<f64>)],
        tf_si: f64,
    ) -> Result<Vec<Result<SolveOutcome>>> {
        let t = Instant::now();
        let tfm = model.time_to_model(tf_si);
        let pts = prepare_points(model, bcs, tfm)?;
        let oracle_ms = ms(t);

        let shared = if sc.solver == SolverKind::Koopman {
            let domain = domain_box(sc, model, &pts, tfm).stage(Stage::Koopman)?;
            Some(self.map_for(sc, model, domain, tfm)?)
        } else {
            None
        };

        let run = |i: usize| -> Result<SolveOutcome> {
            let p = &pts[i];
            let timings = Timings {
                oracle_ms,
                koopman_ms: shared.as_ref().map_or(0.0, |s| s.2),
                inversion_ms: shared.as_ref().map_or(0.0, |s| s.3),
                ..Default::default()
            };
            solve_point(sc, model, p, tf_si, tfm, shared.as_ref().map(|s| (&s.0, s.1)), timings, self.seed)
        };
        Ok(par::map_indices(sc.execution, pts.len(), run))
    }
}

fn batch(bcs: &[(Vec<f64>, Vec<f64>)], results: Vec<Result<SolveOutcome>>) -> Vec<PointResult> {
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| {
                warn!("point {i} failed: {e}");
                PointFailure {
                    index: i,
                    x0: bcs[i].0.clone(),
                    stage: e.stage(),
                    error: e.to_string(),
                }
            })
        })
        .collect()
}

/// A cached map serves a request when its box covers the required box
/// without being more than `REUSE_SLACK` times wider in any direction.
const REUSE_SLACK: f64 = 4.0;

fn reusable(map: &TpbvpMap, need: &DomainBox) -> bool {
    let m = map.state_box.dim();
    (0..need.dim()).all(|i| {
        let have = if i < m { &map.state_box } else { &map.costate_box };
        let j = if i < m { i } else { i - m };
        have.lower()[j] <= need.lower()[i]
            && have.upper()[j] >= need.upper()[i]
            && have.half_width(j) <= REUSE_SLACK * need.half_width(i)
    })
}

fn prepare_points(model: &PreparedModel, bcs: &[(Vec<f64>, Vec<f64>)], tfm: f64) -> Result<Vec<Point>> {
    let a = model.linear_matrix();
    bcs.iter()
        .map(|(x0_si, xf_si)| {
            let x0 = model.state_to_model(x0_si).stage(Stage::Model)?;
            let xf = model.state_to_model(xf_si).stage(Stage::Model)?;
            let linear = stm_costate_oracle(&a, &x0, &xf, tfm).stage(Stage::Costates)?;
            Ok(Point {
                x0_si: x0_si.clone(),
                xf_si: xf_si.clone(),
                x0,
                xf,
                linear,
            })
        })
        .collect()
}

/// Box in model units covering all points.
fn domain_box(sc: &Scenario, model: &PreparedModel, pts: &[Point], tfm: f64) -> Result<DomainBox> {
    let m = model.state_dim();
    let n = m / 2;
    let d = &sc.domain;
    let mut ext = vec![0.0f64; 2 * m];
    let times = uniform_times(tfm, 400);
    for p in pts {
        let mut z0 = p.x0.clone();
        z0.extend(&p.linear);
        for (j, v) in z0.iter().chain(&p.xf).enumerate() {
            ext[j % (2 * m)] = ext[j % (2 * m)].max(v.abs());
        }
        match integrate(model.aug.dynamics(), &z0, &times, &sc.integrator()) {
            Ok(traj) => {
                for z in traj {
                    for (e, v) in ext.iter_mut().zip(&z) {
                        *e = e.max(v.abs());
                    }
                }
            }
            Err(e) => warn!("linearized trajectory failed ({e}); box uses boundary values only"),
        }
    }
    let mut hw: Vec<f64> = ext.iter().map(|e| e * d.margin).collect();
    if d.rule == BoxRule::LinearCostate {
        let lin: Vec<f64> = (0..m)
            .map(|i| pts.iter().fold(0.0f64, |a, p| a.max(p.linear[i].abs())))
            .collect();
        let lmax = lin.iter().cloned().fold(0.0, f64::max);
        for i in 0..m {
            hw[m + i] = (d.costate_factor * lin[i]).max(0.1 * lmax);
        }
    }
    for g in 0..4 {
        let group = &mut hw[g * n..(g + 1) * n];
        let gmax = group.iter().cloned().fold(0.0, f64::max);
        for h in group.iter_mut() {
            *h = if gmax > 0.0 { h.max(0.05 * gmax) } else { 1.0 };
        }
    }
    // SI overrides, converted with the (positive, diagonal) unit maps
    if d.position_half_widths.is_some() || d.velocity_half_widths.is_some() {
        let mut si = vec![1.0; m];
        if let Some(p) = &d.position_half_widths {
            si[..n].copy_from_slice(p);
        }
        if let Some(v) = &d.velocity_half_widths {
            si[n..].copy_from_slice(v);
        }
        let conv = model.state_to_model(&si)?;
        for i in 0..n {
            if d.position_half_widths.is_some() {
                hw[i] = conv[i].abs();
            }
            if d.velocity_half_widths.is_some() {
                hw[n + i] = conv[n + i].abs();
            }
        }
    }
    if let Some(c) = &d.costate_half_widths {
        let conv = model.costates_to_model(c)?;
        for i in 0..m {
            hw[m + i] = conv[i].abs();
        }
    }
    DomainBox::symmetric(&hw)
}

fn truth_terminal(truth: &PreparedModel, x0_si: &[f64], lam_si: &[f64], tf_si: f64, opts: &IntegratorOptions) -> Result<Vec<f64>> {
    let mut z0 = truth.state_to_model(x0_si)?;
    z0.extend(truth.costates_to_model(lam_si)?);
    let tfm = truth.time_to_model(tf_si);
    let z = crate::verify::propagate_to(truth.aug.dynamics(), &z0, tfm, opts)?;
    truth.state_from_model(&z[..truth.state_dim()])
}

#[allow(clippy::too_many_arguments)]
fn solve_point(
    sc: &Scenario,
    model: &PreparedModel,
    p: &Point,
    tf_si: f64,
    tfm: f64,
    map: Option<(&CachedMap, bool)>,
    mut timings: Timings,
    seed: Option<u64>,
) -> Result<SolveOutcome> {
    let m = model.state_dim();
    let opts = sc.integrator();
    let t = Instant::now();
    let (lam, koopman) = match sc.solver {
        SolverKind::Koopman => {
            let (entry, _) = map.expect("koopman solver has a map");
            let lam = entry.0.solve_costates(&p.x0, &p.xf).stage(Stage::Costates)?;
            (lam, Some(KoopmanSummary::new(&entry.1, &entry.0)))
        }
        SolverKind::StmOracle => (p.linear.clone(), None),
        SolverKind::Shooting => {
            let so = ShootingOptions {
                integrator: opts,
                ..Default::default()
            };
            let r = shooting_oracle(&model.aug, &p.x0, &p.xf, tfm, &p.linear, &so).stage(Stage::Costates)?;
            (r.lambda0, None)
        }
    };
    timings.costates_ms = ms(t);

    let t = Instant::now();
    let mut z0 = p.x0.clone();
    z0.extend(&lam);
    let times = uniform_times(tfm, sc.samples);
    let states = integrate(model.aug.dynamics(), &z0, &times, &opts).stage(Stage::Verification)?;
    let last = states.last().expect("samples").clone();
    let traj = model.trajectory_to_si(&times, &states).stage(Stage::Verification)?;
    let terminal_si = traj.last().expect("samples")[..m].to_vec();
    let effort_cols: Vec<usize> = (m..2 * m).collect();
    let traj = traj.map_times(|t| if (t - tf_si).abs() <= 1e-9 * tf_si { tf_si } else { t });
    let effort = control_effort(&traj, tf_si, &effort_cols).stage(Stage::Verification)?;
    let err_model = (0..m).map(|i| (last[i] - p.xf[i]).powi(2)).sum::<f64>().sqrt();
    timings.verification_ms = ms(t);

    let report = SolveReport {
        scenario: sc.name.clone(),
        model: model.spec.label(),
        solver: sc.solver,
        x0: p.x0_si.clone(),
        xf: p.xf_si.clone(),
        tf: tf_si,
        lambda0: model.costates_from_model(&lam)?,
        lambda0_model: lam,
        lambda0_linear: model.costates_from_model(&p.linear)?,
        terminal_error: terminal_error(&terminal_si, &p.x0_si, &p.xf_si)?,
        terminal_position_error: model.position_error(&terminal_si, &p.xf_si),
        terminal_state: terminal_si,
        terminal_error_model: err_model,
        control_effort: effort,
        koopman,
        map_cached: map.is_some_and(|(_, hit)| hit),
        timings,
        seed,
    };
    Ok(SolveOutcome {
        report,
        trajectory: traj,
    })
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub tf: Vec<f64>,
    pub results: Vec<PointResult>,
    pub monotone_effort: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlledComparison {
    pub model: String,
    pub lambda0: Option<Vec<f64>>,
    pub own_model_position_error: Option<f64>,
    pub truth_terminal_state: Option<Vec<f64>>,
    pub truth_position_error: Option<f64>,
    pub truth_terminal_error: Option<TerminalError>,
    /// Set when the controlled solve or its truth integration failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub model_a: ModelSpec,
    pub model_b: ModelSpec,
    pub truth: String,
    #[serde(skip)]
    pub times: Vec<f64>,
    #[serde(skip)]
    pub divergence: Vec<f64>,
    pub divergence_final: f64,
    pub divergence_max: f64,
    pub divergence_growing: bool,
    pub controlled: Vec<ControlledComparison>,
}

pub struct KoopmanBuild {
    pub model: KoopmanModel,
    pub augmented: AugmentedSystem,
}

impl KoopmanBuild {
    /// Matrices as row-major arrays with the basis exponents as header.
    pub fn to_json(&self) -> serde_json::Value {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        let km = &self.model;
        let eig = km.spectral().map(|s| {
            s.values.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>()
        });
        serde_json::json!({
            "basis": km.spec().index_list().iter().map(|m| m.exps().to_vec()).collect::<Vec<_>>(),
            "domain": km.domain(),
            "K": rows(km.koopman_matrix()),
            "H": rows(km.observable_matrix()),
            "eigenvalues": eig,
            "diagnostics": km.diagnostics(),
        })
    }
}

/// Summary CSV of solve reports, one row each.
pub fn summary_csv(rows: &[PointResult]) -> String {
    let mut out = String::from(
        "index,status,x0,lambda0,terminal_abs,terminal_rel,terminal_position,effort,map_cached,error\n",
    );
    let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    for (i, r) in rows.iter().enumerate() {
        match r {
            Ok(o) => {
                let rep = &o.report;
                out.push_str(&format!(
                    "{i},ok,{},{},{},{},{},{},{},\n",
                    join(&rep.x0),
                    join(&rep.lambda0),
                    rep.terminal_error.absolute,
                    rep.terminal_error.relative,
                    rep.terminal_position_error,
                    join(&rep.control_effort),
                    rep.map_cached
                ));
            }
            Err(f) => {
                out.push_str(&format!(
                    "{i},failed,{},,,,,,,{}\n",
                    join(&f.x0),
                    f.error.replace([',', '\n'], ";")
                ));
            }
        }
    }
    out
}

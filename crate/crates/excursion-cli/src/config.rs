//! Run configuration: a TOML document carrying the correlation model, the
//! command parameters, and optional output settings. Command line flags
//! override the document; everything is validated here, before dispatch, so
//! bad configs fail fast with the offending key named.

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use excursion::nalgebra::Vector2;
use excursion::{CorrelationModel, SolverOptions, Window};
use serde::Deserialize;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::path::{Path, PathBuf};

/// Parsed TOML run configuration. Every section is optional so that
/// commands with built-in defaults can run without any file at all.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    /// Optional echo of the subcommand; checked against the one invoked.
    pub command: Option<String>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub output: OutputSpec,
    /// Command parameters, deserialized against the invoked subcommand's
    /// schema in [`command_params`].
    pub params: Option<toml::Value>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// Reads and parses the config file; no file means an empty document.
pub fn load(path: Option<&Path>) -> Result<Document> {
    let Some(path) = path else {
        return Ok(Document::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Deserializes the `[params]` table for one command; a missing table acts
/// as empty so commands with full defaults work without one.
pub fn command_params<T: serde::de::DeserializeOwned>(doc: &Document) -> Result<T> {
    let value = doc
        .params
        .clone()
        .unwrap_or_else(|| toml::Value::Table(toml::map::Map::new()));
    value
        .try_into()
        .map_err(|e| anyhow!("invalid [params]: {e}"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// "gaussian" or "scaled-gaussian".
    pub kind: String,
    /// Correlation length, for "scaled-gaussian" only.
    pub ell: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: "gaussian".to_string(),
            ell: None,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<CorrelationModel> {
        match self.kind.as_str() {
            "gaussian" => {
                if self.ell.is_some() {
                    bail!("key \"model.ell\" only applies to kind \"scaled-gaussian\"");
                }
                Ok(CorrelationModel::gaussian())
            }
            "scaled-gaussian" => {
                let ell = self
                    .ell
                    .ok_or_else(|| anyhow!("missing key \"model.ell\" for kind \"scaled-gaussian\""))?;
                CorrelationModel::scaled_gaussian(ell)
                    .map_err(|e| anyhow!("key \"model.ell\": {e}"))
            }
            other => bail!(
                "unknown \"model.kind\" {other:?}; expected \"gaussian\" or \"scaled-gaussian\""
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Output settings from the file; each is individually overridable on the
/// command line.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
    pub seed: Option<u64>,
}

/// Overrides for the engines' internal accuracy settings.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub cdf_rel_tol: Option<f64>,
    pub cdf_abs_tol: Option<f64>,
    pub refine_grid: Option<bool>,
}

impl Tolerances {
    pub fn solver_options(&self) -> Result<SolverOptions> {
        let mut opts = SolverOptions::default();
        if let Some(t) = self.cdf_rel_tol {
            if !(t > 0.0 && t.is_finite()) {
                bail!("key \"tolerances.cdf_rel_tol\" must be positive and finite, got {t}");
            }
            opts.cdf_rel_tol = t;
        }
        if let Some(t) = self.cdf_abs_tol {
            if !(t > 0.0 && t.is_finite()) {
                bail!("key \"tolerances.cdf_abs_tol\" must be positive and finite, got {t}");
            }
            opts.cdf_abs_tol = t;
        }
        if let Some(r) = self.refine_grid {
            opts.refine_grid = r;
        }
        Ok(opts)
    }
}

/// A parameter that sweeps: either one value or a list, producing one record
/// per value (cross products when several parameters sweep).
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum Sweep {
    One(f64),
    Many(Vec<f64>),
}

impl Sweep {
    pub fn values(&self, key: &str) -> Result<Vec<f64>> {
        let values = match self {
            Sweep::One(x) => vec![*x],
            Sweep::Many(xs) => xs.clone(),
        };
        if values.is_empty() {
            bail!("key {key:?} must not be an empty list");
        }
        if let Some(bad) = values.iter().find(|x| !x.is_finite()) {
            bail!("key {key:?} must be finite, got {bad}");
        }
        Ok(values)
    }
}

fn require_finite(key: &str, x: f64) -> Result<()> {
    if !x.is_finite() {
        bail!("key {key:?} must be finite, got {x}");
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capacity2Params {
    pub u: Sweep,
    pub l1: Sweep,
    pub l2: Sweep,
    pub phi_tilde: f64,
    pub m: usize,
    pub theta_quad_order: usize,
}

impl Capacity2Params {
    pub fn validate(&self) -> Result<()> {
        self.u.values("params.u")?;
        for (key, sweep) in [("params.l1", &self.l1), ("params.l2", &self.l2)] {
            if sweep.values(key)?.iter().any(|&l| l < 0.0) {
                bail!("key {key:?} must be nonnegative");
            }
        }
        if !(self.phi_tilde > 0.0 && self.phi_tilde <= FRAC_PI_2) {
            bail!(
                "key \"params.phi_tilde\" must lie in (0, pi/2], got {}",
                self.phi_tilde
            );
        }
        if self.m < 2 {
            bail!("key \"params.m\" must be at least 2, got {}", self.m);
        }
        if self.theta_quad_order == 0 {
            bail!("key \"params.theta_quad_order\" must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitykParams {
    pub u: Sweep,
    /// Optional echo of the segment count; checked against the lists.
    pub k: Option<usize>,
    pub angles: Vec<f64>,
    pub lengths: Vec<f64>,
    pub n: usize,
    pub t_quad_order: usize,
}

impl CapacitykParams {
    pub fn validate(&self) -> Result<()> {
        self.u.values("params.u")?;
        if self.angles.is_empty() {
            bail!("key \"params.angles\" must not be empty");
        }
        if self.angles.len() != self.lengths.len() {
            bail!(
                "key \"params.lengths\" has {} entries but \"params.angles\" has {}",
                self.lengths.len(),
                self.angles.len()
            );
        }
        if let Some(k) = self.k {
            if k != self.angles.len() {
                bail!(
                    "key \"params.k\" is {k} but \"params.angles\" lists {} segments",
                    self.angles.len()
                );
            }
        }
        for &a in &self.angles {
            require_finite("params.angles", a)?;
        }
        if self.lengths.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            bail!("key \"params.lengths\" must be nonnegative and finite");
        }
        if self.n < 2 {
            bail!("key \"params.n\" must be at least 2, got {}", self.n);
        }
        if self.t_quad_order == 0 {
            bail!("key \"params.t_quad_order\" must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    /// "disc" or "rect".
    pub kind: String,
    pub center: Option<[f64; 2]>,
    pub radius: Option<f64>,
    pub min: Option<[f64; 2]>,
    pub max: Option<[f64; 2]>,
}

impl WindowSpec {
    pub fn build(&self, key: &str) -> Result<Window> {
        match self.kind.as_str() {
            "disc" => {
                if self.min.is_some() || self.max.is_some() {
                    bail!("key {key:?}: \"min\"/\"max\" only apply to kind \"rect\"");
                }
                let c = self
                    .center
                    .ok_or_else(|| anyhow!("key {key:?}: missing \"center\" for a disc"))?;
                let r = self
                    .radius
                    .ok_or_else(|| anyhow!("key {key:?}: missing \"radius\" for a disc"))?;
                Window::disc(Vector2::new(c[0], c[1]), r).map_err(|e| anyhow!("key {key:?}: {e}"))
            }
            "rect" => {
                if self.center.is_some() || self.radius.is_some() {
                    bail!("key {key:?}: \"center\"/\"radius\" only apply to kind \"disc\"");
                }
                let lo = self
                    .min
                    .ok_or_else(|| anyhow!("key {key:?}: missing \"min\" for a rect"))?;
                let hi = self
                    .max
                    .ok_or_else(|| anyhow!("key {key:?}: missing \"max\" for a rect"))?;
                Window::rect(Vector2::new(lo[0], lo[1]), Vector2::new(hi[0], hi[1]))
                    .map_err(|e| anyhow!("key {key:?}: {e}"))
            }
            other => bail!("key {key:?}: unknown window kind {other:?}"),
        }
    }

    /// Compact input echo for the record, such as disc(0,0,r=1).
    pub fn echo(&self) -> String {
        match (self.kind.as_str(), self.center, self.radius, self.min, self.max) {
            ("disc", Some(c), Some(r), _, _) => format!("disc({},{},r={r})", c[0], c[1]),
            ("rect", _, _, Some(lo), Some(hi)) => {
                format!("rect({},{},{},{})", lo[0], lo[1], hi[0], hi[1])
            }
            _ => self.kind.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondMomentParams {
    pub u: Sweep,
    pub window1: WindowSpec,
    pub window2: WindowSpec,
    pub pairs: usize,
    pub s_order: usize,
    pub t_order: usize,
}

impl SecondMomentParams {
    pub fn validate(&self) -> Result<(Window, Window)> {
        self.u.values("params.u")?;
        let b1 = self.window1.build("params.window1")?;
        let b2 = self.window2.build("params.window2")?;
        if self.pairs < 100 {
            bail!("key \"params.pairs\" must be at least 100, got {}", self.pairs);
        }
        for (key, order) in [("params.s_order", self.s_order), ("params.t_order", self.t_order)] {
            if order < 2 {
                bail!("key {key:?} must be at least 2, got {order}");
            }
        }
        Ok((b1, b2))
    }
}

fn default_engine() -> String {
    "capacity2".to_string()
}

fn default_level() -> Sweep {
    Sweep::One(1.0)
}

fn one() -> f64 {
    1.0
}

fn quarter_pi() -> f64 {
    FRAC_PI_4
}

fn right_angle_star() -> Vec<f64> {
    vec![0.0, FRAC_PI_2]
}

fn unit_lengths() -> Vec<f64> {
    vec![1.0, 1.0]
}

fn grid_24() -> usize {
    24
}

fn order_40() -> usize {
    40
}

fn default_step() -> f64 {
    0.01
}

fn mc_samples() -> usize {
    20_000
}

/// Engine-vs-oracle validation run. Every parameter has a default so the
/// command works with no config at all.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McValidateParams {
    /// "capacity2" or "capacityk".
    #[serde(default = "default_engine")]
    pub engine: String,
    #[serde(default = "default_level")]
    pub u: Sweep,
    #[serde(default = "one")]
    pub l1: f64,
    #[serde(default = "one")]
    pub l2: f64,
    #[serde(default = "quarter_pi")]
    pub phi_tilde: f64,
    #[serde(default = "grid_24")]
    pub m: usize,
    #[serde(default = "order_40")]
    pub theta_quad_order: usize,
    #[serde(default = "right_angle_star")]
    pub angles: Vec<f64>,
    #[serde(default = "unit_lengths")]
    pub lengths: Vec<f64>,
    #[serde(default = "grid_24")]
    pub n: usize,
    #[serde(default = "order_40")]
    pub t_quad_order: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "mc_samples")]
    pub n_samples: usize,
}

impl McValidateParams {
    pub fn validate(&self) -> Result<()> {
        match self.engine.as_str() {
            "capacity2" => {
                if !(self.phi_tilde > 0.0 && self.phi_tilde <= FRAC_PI_2) {
                    bail!(
                        "key \"params.phi_tilde\" must lie in (0, pi/2], got {}",
                        self.phi_tilde
                    );
                }
                if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
                    bail!("keys \"params.l1\"/\"params.l2\" must be nonnegative");
                }
                if self.m < 2 {
                    bail!("key \"params.m\" must be at least 2, got {}", self.m);
                }
            }
            "capacityk" => {
                if self.angles.is_empty() || self.angles.len() != self.lengths.len() {
                    bail!("keys \"params.angles\"/\"params.lengths\" must be matching nonempty lists");
                }
                if self.n < 2 {
                    bail!("key \"params.n\" must be at least 2, got {}", self.n);
                }
            }
            other => bail!(
                "key \"params.engine\": unknown engine {other:?}; expected \"capacity2\" or \"capacityk\""
            ),
        }
        self.u.values("params.u")?;
        validate_sampling("params", self.step, self.n_samples)?;
        Ok(())
    }
}

fn rice_samples() -> usize {
    10_000
}

fn chord_length() -> f64 {
    20.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiceCheckParams {
    pub u: Sweep,
    #[serde(default = "chord_length")]
    pub length: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "rice_samples")]
    pub n_samples: usize,
}

impl RiceCheckParams {
    pub fn validate(&self) -> Result<()> {
        self.u.values("params.u")?;
        if !(self.length > 0.0 && self.length.is_finite()) {
            bail!("key \"params.length\" must be positive, got {}", self.length);
        }
        validate_sampling("params", self.step, self.n_samples)?;
        let points = (self.length / self.step).ceil() as usize + 1;
        if points > excursion::montecarlo::POINT_BUDGET {
            bail!(
                "keys \"params.length\"/\"params.step\" discretize to {points} points, over the {} budget",
                excursion::montecarlo::POINT_BUDGET
            );
        }
        Ok(())
    }
}

fn validate_sampling(section: &str, step: f64, n_samples: usize) -> Result<()> {
    if !(step > 0.0 && step <= excursion::montecarlo::MAX_STEP) {
        bail!(
            "key \"{section}.step\" must lie in (0, {}], got {step}",
            excursion::montecarlo::MAX_STEP
        );
    }
    if n_samples < excursion::montecarlo::MIN_SAMPLES {
        bail!(
            "key \"{section}.n_samples\" must be at least {}, got {n_samples}",
            excursion::montecarlo::MIN_SAMPLES
        );
    }
    Ok(())
}

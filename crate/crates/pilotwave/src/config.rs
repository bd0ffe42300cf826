//! Scenario configuration: INI-style sectioned `key = value` text.
//!
//! Parsing is strict: unknown sections or keys, malformed values, and
//! out-of-range parameters are all reported together, each with its line
//! number. Every parameter has a documented default, so a minimal file
//! only names the scenario:
//!
//! ```text
//! [run]
//! scenario = relax
//! ```
//!
//! Configurations re-emit in a canonical form (fixed section and key
//! order, floats at full precision); parsing the canonical form
//! reproduces the configuration exactly. The configuration hash stamped
//! into output files covers the canonical form minus the keys that do not
//! affect results (`workers`, `out`).

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

use crate::output::fmt_f64;

/// One configuration problem, with the line it came from when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// All problems found in a configuration, reported together.
#[derive(Debug, Clone, Error)]
pub struct ConfigErrors {
    pub violations: Vec<Violation>,
}

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} configuration error(s):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Relax,
    Measure,
    Signal,
    SternGerlach,
    BohmInstability,
    Subquantum,
    Cosmo,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Relax => "relax",
            Scenario::Measure => "measure",
            Scenario::Signal => "signal",
            Scenario::SternGerlach => "sterngerlach",
            Scenario::BohmInstability => "bohm-instability",
            Scenario::Subquantum => "subq",
            Scenario::Cosmo => "cosmo",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relax" => Some(Scenario::Relax),
            "measure" => Some(Scenario::Measure),
            "signal" => Some(Scenario::Signal),
            "sterngerlach" => Some(Scenario::SternGerlach),
            "bohm-instability" => Some(Scenario::BohmInstability),
            "subq" => Some(Scenario::Subquantum),
            "cosmo" => Some(Scenario::Cosmo),
            _ => None,
        }
    }

    pub fn all() -> [Scenario; 7] {
        [
            Scenario::Relax,
            Scenario::Measure,
            Scenario::Signal,
            Scenario::SternGerlach,
            Scenario::BohmInstability,
            Scenario::Subquantum,
            Scenario::Cosmo,
        ]
    }
}

/// Initial ensemble density for configuration-space experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum Rho0 {
    /// Born density of the run's own state: equilibrium.
    Born,
    /// Born density of a single eigenmode, e.g. `born-mode:1,1`.
    BornMode(Vec<i32>),
    /// Uniform patch `uniform:lo1,hi1[,lo2,hi2]`.
    Uniform(Vec<(f64, f64)>),
}

impl Rho0 {
    fn render(&self) -> String {
        match self {
            Rho0::Born => "born".into(),
            Rho0::BornMode(modes) => {
                let parts: Vec<String> = modes.iter().map(|m| m.to_string()).collect();
                format!("born-mode:{}", parts.join(","))
            }
            Rho0::Uniform(ranges) => {
                let parts: Vec<String> = ranges
                    .iter()
                    .flat_map(|(a, b)| [fmt_f64(*a), fmt_f64(*b)])
                    .collect();
                format!("uniform:{}", parts.join(","))
            }
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        if s == "born" {
            return Ok(Rho0::Born);
        }
        if let Some(rest) = s.strip_prefix("born-mode:") {
            let modes: Result<Vec<i32>, _> = rest.split(',').map(|p| p.trim().parse()).collect();
            return modes
                .map(Rho0::BornMode)
                .map_err(|_| format!("bad mode list in '{s}'"));
        }
        if let Some(rest) = s.strip_prefix("uniform:") {
            let nums: Result<Vec<f64>, _> = rest.split(',').map(|p| p.trim().parse()).collect();
            let nums = nums.map_err(|_| format!("bad number in '{s}'"))?;
            if nums.is_empty() || nums.len() % 2 != 0 {
                return Err(format!("'{s}' needs lo,hi pairs"));
            }
            let ranges: Vec<(f64, f64)> = nums.chunks(2).map(|c| (c[0], c[1])).collect();
            if ranges.iter().any(|(a, b)| !(b > a)) {
                return Err(format!("'{s}' has an empty range"));
            }
            return Ok(Rho0::Uniform(ranges));
        }
        Err(format!(
            "unknown density '{s}' (expected born, born-mode:..., or uniform:...)"
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxParams {
    pub dimension: usize,
    pub length: f64,
    pub modes_per_axis: usize,
    pub rho0: Rho0,
    pub n_traj: usize,
    pub cells: usize,
    pub t_end: f64,
    pub n_times: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for RelaxParams {
    fn default() -> Self {
        RelaxParams {
            dimension: 2,
            length: std::f64::consts::PI,
            modes_per_axis: 4,
            rho0: Rho0::BornMode(vec![1, 1]),
            n_traj: 100_000,
            cells: 32,
            t_end: 8.0 * std::f64::consts::PI,
            n_times: 10,
            rtol: 1e-6,
            atol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservableKind {
    Position,
    Momentum,
    KineticEnergy,
}

impl ObservableKind {
    fn name(&self) -> &'static str {
        match self {
            ObservableKind::Position => "position",
            ObservableKind::Momentum => "momentum",
            ObservableKind::KineticEnergy => "kinetic-energy",
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        Ok(match s {
            "position" => ObservableKind::Position,
            "momentum" => ObservableKind::Momentum,
            "kinetic-energy" => ObservableKind::KineticEnergy,
            _ => return Err(format!("unknown observable '{s}'")),
        })
    }
}

/// Initial joint density of a pointer experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasureRho {
    /// `|psi0(x)|^2 |g0(y)|^2`.
    Equilibrium,
    /// Uniform patch `patch:xlo,xhi,ylo,yhi`.
    Patch { x: (f64, f64), y: (f64, f64) },
}

impl MeasureRho {
    fn render(&self) -> String {
        match self {
            MeasureRho::Equilibrium => "equilibrium".into(),
            MeasureRho::Patch { x, y } => format!(
                "patch:{},{},{},{}",
                fmt_f64(x.0),
                fmt_f64(x.1),
                fmt_f64(y.0),
                fmt_f64(y.1)
            ),
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        if s == "equilibrium" {
            return Ok(MeasureRho::Equilibrium);
        }
        if let Some(rest) = s.strip_prefix("patch:") {
            let nums: Result<Vec<f64>, _> = rest.split(',').map(|p| p.trim().parse()).collect();
            let nums = nums.map_err(|_| format!("bad number in '{s}'"))?;
            if nums.len() != 4 || !(nums[1] > nums[0]) || !(nums[3] > nums[2]) {
                return Err(format!("'{s}' needs xlo,xhi,ylo,yhi with hi > lo"));
            }
            return Ok(MeasureRho::Patch {
                x: (nums[0], nums[1]),
                y: (nums[2], nums[3]),
            });
        }
        Err(format!("unknown density '{s}' (expected equilibrium or patch:...)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureParams {
    pub observable: ObservableKind,
    pub momentum: i32,
    pub weight_plus: f64,
    pub sigma: f64,
    pub coupling: f64,
    pub duration: f64,
    pub n_trials: usize,
    pub rho0: MeasureRho,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for MeasureParams {
    fn default() -> Self {
        MeasureParams {
            observable: ObservableKind::Momentum,
            momentum: 2,
            weight_plus: 0.64,
            sigma: 0.1,
            coupling: 1.0,
            duration: 1.0,
            n_trials: 10_000,
            rho0: MeasureRho::Equilibrium,
            rtol: 1e-7,
            atol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalRho {
    Equilibrium,
    /// Ground-Born at A times uniform on the lower half of B's box.
    NoneqProduct,
}

impl SignalRho {
    fn name(&self) -> &'static str {
        match self {
            SignalRho::Equilibrium => "equilibrium",
            SignalRho::NoneqProduct => "noneq-product",
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        Ok(match s {
            "equilibrium" => SignalRho::Equilibrium,
            "noneq-product" => SignalRho::NoneqProduct,
            _ => return Err(format!("unknown density '{s}'")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalParams {
    pub width_a: f64,
    pub width_b: f64,
    pub width_b_post: f64,
    pub t_switch: f64,
    pub t_probe: f64,
    pub cells_a: usize,
    pub n_traj: usize,
    pub rho0: SignalRho,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        SignalParams {
            width_a: std::f64::consts::PI,
            width_b: std::f64::consts::PI,
            width_b_post: 2.0 * std::f64::consts::PI,
            t_switch: std::f64::consts::PI,
            t_probe: std::f64::consts::PI + 1.2,
            cells_a: 32,
            n_traj: 100_000,
            rho0: SignalRho::Equilibrium,
            rtol: 1e-6,
            atol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SternGerlachParams {
    pub weight_up: f64,
    pub width: f64,
    pub kick: f64,
    pub t_end: f64,
    pub n_traj: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for SternGerlachParams {
    fn default() -> Self {
        SternGerlachParams {
            weight_up: 0.3,
            width: 1.0,
            kick: 2.0,
            t_end: 4.0,
            n_traj: 10_000,
            rtol: 1e-7,
            atol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BohmParams {
    pub length: f64,
    pub modes_per_axis: usize,
    pub delta: f64,
    pub periods: f64,
    pub n_bohm: usize,
    pub n_relax: usize,
    pub cells: usize,
    pub n_times: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for BohmParams {
    fn default() -> Self {
        BohmParams {
            length: std::f64::consts::PI,
            modes_per_axis: 4,
            delta: 0.1,
            periods: 10.0,
            n_bohm: 400,
            n_relax: 100_000,
            cells: 32,
            n_times: 10,
            rtol: 1e-6,
            atol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubquantumParams {
    pub sigma: f64,
    pub noneq_width: f64,
    pub coupling: f64,
    pub duration: f64,
    pub n_trials: usize,
}

impl Default for SubquantumParams {
    fn default() -> Self {
        SubquantumParams {
            sigma: 100.0,
            noneq_width: 1.0,
            coupling: 1.0,
            duration: 1.0,
            n_trials: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpansionSpec {
    Static,
    DeSitter { hubble: f64, a0: f64 },
    PowerLaw { t0: f64, p: f64, a0: f64 },
}

impl ExpansionSpec {
    fn render(&self) -> String {
        match self {
            ExpansionSpec::Static => "static".into(),
            ExpansionSpec::DeSitter { hubble, a0 } => {
                format!("desitter:{},{}", fmt_f64(*hubble), fmt_f64(*a0))
            }
            ExpansionSpec::PowerLaw { t0, p, a0 } => {
                format!("powerlaw:{},{},{}", fmt_f64(*t0), fmt_f64(*p), fmt_f64(*a0))
            }
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        if s == "static" {
            return Ok(ExpansionSpec::Static);
        }
        if let Some(rest) = s.strip_prefix("desitter:") {
            let nums: Result<Vec<f64>, _> = rest.split(',').map(|p| p.trim().parse()).collect();
            let nums = nums.map_err(|_| format!("bad number in '{s}'"))?;
            return match nums.as_slice() {
                [h] if *h > 0.0 => Ok(ExpansionSpec::DeSitter { hubble: *h, a0: 1.0 }),
                [h, a0] if *h > 0.0 && *a0 > 0.0 => {
                    Ok(ExpansionSpec::DeSitter { hubble: *h, a0: *a0 })
                }
                _ => Err(format!("'{s}' needs desitter:H[,a0] with positive values")),
            };
        }
        if let Some(rest) = s.strip_prefix("powerlaw:") {
            let nums: Result<Vec<f64>, _> = rest.split(',').map(|p| p.trim().parse()).collect();
            let nums = nums.map_err(|_| format!("bad number in '{s}'"))?;
            return match nums.as_slice() {
                [t0, p] if *t0 > 0.0 => Ok(ExpansionSpec::PowerLaw { t0: *t0, p: *p, a0: 1.0 }),
                [t0, p, a0] if *t0 > 0.0 && *a0 > 0.0 => {
                    Ok(ExpansionSpec::PowerLaw { t0: *t0, p: *p, a0: *a0 })
                }
                _ => Err(format!("'{s}' needs powerlaw:t0,p[,a0]")),
            };
        }
        Err(format!("unknown expansion '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CosmoRho {
    /// Born density of the mode itself: equilibrium.
    Born,
    /// Born density of the two-dimensional ground level.
    GroundBorn,
    /// Uniform square patch of the given half-width, centred at the origin.
    Patch { half_width: f64 },
}

impl CosmoRho {
    fn render(&self) -> String {
        match self {
            CosmoRho::Born => "born".into(),
            CosmoRho::GroundBorn => "ground-born".into(),
            CosmoRho::Patch { half_width } => format!("patch:{}", fmt_f64(*half_width)),
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        if s == "born" {
            return Ok(CosmoRho::Born);
        }
        if s == "ground-born" {
            return Ok(CosmoRho::GroundBorn);
        }
        if let Some(rest) = s.strip_prefix("patch:") {
            let hw: f64 = rest
                .trim()
                .parse()
                .map_err(|_| format!("bad number in '{s}'"))?;
            if !(hw > 0.0) {
                return Err(format!("patch half-width must be positive in '{s}'"));
            }
            return Ok(CosmoRho::Patch { half_width: hw });
        }
        Err(format!("unknown density '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosmoParams {
    pub expansion: ExpansionSpec,
    pub wavenumber: f64,
    pub n_lev: usize,
    pub levels_per_axis: usize,
    pub rho0: CosmoRho,
    pub n_traj: usize,
    pub cells: usize,
    /// Coarse-grid half-width; 0 selects it from the truncation.
    pub half_width: f64,
    pub t_end: f64,
    pub n_times: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for CosmoParams {
    fn default() -> Self {
        CosmoParams {
            expansion: ExpansionSpec::Static,
            wavenumber: 1.0,
            n_lev: 24,
            levels_per_axis: 3,
            rho0: CosmoRho::GroundBorn,
            n_traj: 20_000,
            cells: 32,
            half_width: 0.0,
            t_end: 6.0 * std::f64::consts::PI,
            n_times: 10,
            rtol: 1e-6,
            atol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Relax(RelaxParams),
    Measure(MeasureParams),
    Signal(SignalParams),
    SternGerlach(SternGerlachParams),
    Bohm(BohmParams),
    Subquantum(SubquantumParams),
    Cosmo(CosmoParams),
}

impl Params {
    pub fn default_for(scenario: Scenario) -> Self {
        match scenario {
            Scenario::Relax => Params::Relax(RelaxParams::default()),
            Scenario::Measure => Params::Measure(MeasureParams::default()),
            Scenario::Signal => Params::Signal(SignalParams::default()),
            Scenario::SternGerlach => Params::SternGerlach(SternGerlachParams::default()),
            Scenario::BohmInstability => Params::Bohm(BohmParams::default()),
            Scenario::Subquantum => Params::Subquantum(SubquantumParams::default()),
            Scenario::Cosmo => Params::Cosmo(CosmoParams::default()),
        }
    }
}

/// A fully validated scenario configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: Option<String>,
    pub params: Params,
}

impl ScenarioConfig {
    pub fn defaults(scenario: Scenario) -> Self {
        ScenarioConfig {
            scenario,
            seed: 0,
            workers: 1,
            out_dir: None,
            params: Params::default_for(scenario),
        }
    }

    /// Canonical text form; `parse_config` of this reproduces the
    /// configuration exactly.
    pub fn emit_canonical(&self) -> String {
        self.emit(true)
    }

    /// Hex-encoded SHA-256 of the canonical form minus the keys that do
    /// not affect results (`workers`, `out`).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.emit(false).as_bytes());
        let digest = hasher.finalize();
        let mut out = String::new();
        for b in digest.iter().take(8) {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn emit(&self, volatile: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "scenario = {}", self.scenario.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        if volatile {
            let _ = writeln!(s, "workers = {}", self.workers);
            if let Some(dir) = &self.out_dir {
                let _ = writeln!(s, "out = {dir}");
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[{}]", self.scenario.name());
        let kv = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.params {
            Params::Relax(p) => {
                kv(&mut s, "dimension", p.dimension.to_string());
                kv(&mut s, "length", fmt_f64(p.length));
                kv(&mut s, "modes_per_axis", p.modes_per_axis.to_string());
                kv(&mut s, "rho0", p.rho0.render());
                kv(&mut s, "n_traj", p.n_traj.to_string());
                kv(&mut s, "cells", p.cells.to_string());
                kv(&mut s, "t_end", fmt_f64(p.t_end));
                kv(&mut s, "n_times", p.n_times.to_string());
                kv(&mut s, "rtol", fmt_f64(p.rtol));
                kv(&mut s, "atol", fmt_f64(p.atol));
            }
            Params::Measure(p) => {
                kv(&mut s, "observable", p.observable.name().to_string());
                kv(&mut s, "momentum", p.momentum.to_string());
                kv(&mut s, "weight_plus", fmt_f64(p.weight_plus));
                kv(&mut s, "sigma", fmt_f64(p.sigma));
                kv(&mut s, "coupling", fmt_f64(p.coupling));
                kv(&mut s, "duration", fmt_f64(p.duration));
                kv(&mut s, "n_trials", p.n_trials.to_string());
                kv(&mut s, "rho0", p.rho0.render());
                kv(&mut s, "rtol", fmt_f64(p.rtol));
                kv(&mut s, "atol", fmt_f64(p.atol));
            }
            Params::Signal(p) => {
                kv(&mut s, "width_a", fmt_f64(p.width_a));
                kv(&mut s, "width_b", fmt_f64(p.width_b));
                kv(&mut s, "width_b_post", fmt_f64(p.width_b_post));
                kv(&mut s, "t_switch", fmt_f64(p.t_switch));
                kv(&mut s, "t_probe", fmt_f64(p.t_probe));
                kv(&mut s, "cells_a", p.cells_a.to_string());
                kv(&mut s, "n_traj", p.n_traj.to_string());
                kv(&mut s, "rho0", p.rho0.name().to_string());
                kv(&mut s, "rtol", fmt_f64(p.rtol));
                kv(&mut s, "atol", fmt_f64(p.atol));
            }
            Params::SternGerlach(p) => {
                kv(&mut s, "weight_up", fmt_f64(p.weight_up));
                kv(&mut s, "width", fmt_f64(p.width));
                kv(&mut s, "kick", fmt_f64(p.kick));
                kv(&mut s, "t_end", fmt_f64(p.t_end));
                kv(&mut s, "n_traj", p.n_traj.to_string());
                kv(&mut s, "rtol", fmt_f64(p.rtol));
                kv(&mut s, "atol", fmt_f64(p.atol));
            }
            Params::Bohm(p) => {
                kv(&mut s, "length", fmt_f64(p.length));
                kv(&mut s, "modes_per_axis", p.modes_per_axis.to_string());
                kv(&mut s, "delta", fmt_f64(p.delta));
                kv(&mut s, "periods", fmt_f64(p.periods));
                kv(&mut s, "n_bohm", p.n_bohm.to_string());
                kv(&mut s, "n_relax", p.n_relax.to_string());
                kv(&mut s, "cells", p.cells.to_string());
                kv(&mut s, "n_times", p.n_times.to_string());
                kv(&mut s, "rtol", fmt_f64(p.rtol));
                kv(&mut s, "atol", fmt_f64(p.atol));
            }
            Params::Subquantum(p) => {
                kv(&mut s, "sigma", fmt_f64(p.sigma));
                kv(&mut s, "noneq_width", fmt_f64(p.noneq_width));
                kv(&mut s, "coupling", fmt_f64(p.coupling));
                kv(&mut s, "duration", fmt_f64(p.duration));
                kv(&mut s, "n_trials", p.n_trials.to_string());
            }
            Params::Cosmo(p) => {
                kv(&mut s, "expansion", p.expansion.render());
                kv(&mut s, "wavenumber", fmt_f64(p.wavenumber));
                kv(&mut s, "n_lev", p.n_lev.to_string());
                kv(&mut s, "levels_per_axis", p.levels_per_axis.to_string());
                kv(&mut s, "rho0", p.rho0.render());
                kv(&mut s, "n_traj", p.n_traj.to_string());
                kv(&mut s, "cells", p.cells.to_string());
                kv(&mut s, "half_width", fmt_f64(p.half_width));
                kv(&mut s, "t_end", fmt_f64(p.t_end));
                kv(&mut s, "n_times", p.n_times.to_string());
                kv(&mut s, "rtol", fmt_f64(p.rtol));
                kv(&mut s, "atol", fmt_f64(p.atol));
            }
        }
        s
    }
}

/// Raw `key = (value, line)` map of one section.
struct Section {
    entries: BTreeMap<String, (String, usize)>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }
}

struct Reader<'a> {
    section: Section,
    name: String,
    violations: &'a mut Vec<Violation>,
}

impl<'a> Reader<'a> {
    fn violation(&mut self, line: usize, message: String) {
        self.violations.push(Violation {
            line: Some(line),
            message,
        });
    }

    fn take_parsed<T, F>(&mut self, key: &str, default: T, parse: F) -> T
    where
        F: FnOnce(&str) -> Result<T, String>,
    {
        match self.section.take(key) {
            None => default,
            Some((value, line)) => match parse(&value) {
                Ok(v) => v,
                Err(msg) => {
                    self.violation(line, format!("key '{key}': {msg}"));
                    default
                }
            },
        }
    }

    fn take_f64(&mut self, key: &str, default: f64, min: f64, max: f64) -> f64 {
        self.take_parsed(key, default, |s| {
            let v: f64 = s
                .parse()
                .map_err(|_| format!("expected a number, got '{s}'"))?;
            if v < min || v > max || !v.is_finite() {
                return Err(format!("{v} outside [{min}, {max}]"));
            }
            Ok(v)
        })
    }

    fn take_usize(&mut self, key: &str, default: usize, min: usize, max: usize) -> usize {
        self.take_parsed(key, default, |s| {
            let v: usize = s
                .parse()
                .map_err(|_| format!("expected a nonnegative integer, got '{s}'"))?;
            if v < min || v > max {
                return Err(format!("{v} outside [{min}, {max}]"));
            }
            Ok(v)
        })
    }

    fn take_i32(&mut self, key: &str, default: i32, min: i32, max: i32) -> i32 {
        self.take_parsed(key, default, |s| {
            let v: i32 = s
                .parse()
                .map_err(|_| format!("expected an integer, got '{s}'"))?;
            if v < min || v > max {
                return Err(format!("{v} outside [{min}, {max}]"));
            }
            Ok(v)
        })
    }

    fn finish(mut self) {
        let name = self.name.clone();
        for (key, (_, line)) in std::mem::take(&mut self.section.entries) {
            self.violation(line, format!("unknown key '{key}' in section [{name}]"));
        }
    }
}

/// Parse and validate a configuration, reporting every violation at once.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigErrors> {
    let mut violations = Vec::new();
    let mut sections: Vec<(String, usize, Section)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            sections.push((
                name.trim().to_string(),
                line_no,
                Section {
                    entries: BTreeMap::new(),
                },
            ));
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) => {
                let key = key.trim().to_string();
                let value = value.trim().to_string();
                match sections.last_mut() {
                    Some((_, _, section)) => {
                        if section
                            .entries
                            .insert(key.clone(), (value, line_no))
                            .is_some()
                        {
                            violations.push(Violation {
                                line: Some(line_no),
                                message: format!("duplicate key '{key}'"),
                            });
                        }
                    }
                    None => violations.push(Violation {
                        line: Some(line_no),
                        message: "key-value pair before any [section]".into(),
                    }),
                }
            }
            None => violations.push(Violation {
                line: Some(line_no),
                message: format!("expected 'key = value' or '[section]', got '{line}'"),
            }),
        }
    }

    let mut run = None;
    let mut scenario_sections: Vec<(String, usize, Section)> = Vec::new();
    for (name, line, section) in sections {
        if name == "run" {
            if run.is_some() {
                violations.push(Violation {
                    line: Some(line),
                    message: "duplicate [run] section".into(),
                });
            }
            run = Some(section);
        } else if Scenario::from_name(&name).is_some() {
            scenario_sections.push((name, line, section));
        } else {
            violations.push(Violation {
                line: Some(line),
                message: format!("unknown section [{name}]"),
            });
        }
    }

    let mut run = match run {
        Some(r) => r,
        None => {
            violations.push(Violation {
                line: None,
                message: "missing [run] section".into(),
            });
            return Err(ConfigErrors { violations });
        }
    };

    let scenario = match run.take("scenario") {
        Some((value, line)) => match Scenario::from_name(&value) {
            Some(s) => Some(s),
            None => {
                violations.push(Violation {
                    line: Some(line),
                    message: format!("unknown scenario '{value}'"),
                });
                None
            }
        },
        None => {
            violations.push(Violation {
                line: None,
                message: "missing 'scenario' in [run]".into(),
            });
            None
        }
    };

    let mut reader = Reader {
        section: run,
        name: "run".into(),
        violations: &mut violations,
    };
    let seed = reader.take_parsed("seed", 0u64, |s| {
        s.parse().map_err(|_| format!("expected a 64-bit seed, got '{s}'"))
    });
    let workers = reader.take_usize("workers", 1, 1, 512);
    let out_dir = reader.take_parsed("out", None, |s| Ok(Some(s.to_string())));
    reader.finish();

    let Some(scenario) = scenario else {
        return Err(ConfigErrors { violations });
    };

    // Only the active scenario's section is allowed.
    let mut own_section = None;
    for (name, line, section) in scenario_sections {
        if name == scenario.name() {
            own_section = Some(section);
        } else {
            violations.push(Violation {
                line: Some(line),
                message: format!(
                    "section [{name}] does not belong to scenario '{}'",
                    scenario.name()
                ),
            });
        }
    }
    let section = own_section.unwrap_or(Section {
        entries: BTreeMap::new(),
    });
    let mut reader = Reader {
        section,
        name: scenario.name().into(),
        violations: &mut violations,
    };

    let params = match scenario {
        Scenario::Relax => {
            let d = RelaxParams::default();
            let p = RelaxParams {
                dimension: reader.take_usize("dimension", d.dimension, 1, 2),
                length: reader.take_f64("length", d.length, 1e-6, 1e6),
                modes_per_axis: reader.take_usize("modes_per_axis", d.modes_per_axis, 1, 8),
                rho0: reader.take_parsed("rho0", d.rho0, Rho0::parse),
                n_traj: reader.take_usize("n_traj", d.n_traj, 1, 20_000_000),
                cells: reader.take_usize("cells", d.cells, 2, 256),
                t_end: reader.take_f64("t_end", d.t_end, 1e-9, 1e6),
                n_times: reader.take_usize("n_times", d.n_times, 2, 512),
                rtol: reader.take_f64("rtol", d.rtol, 1e-13, 1e-2),
                atol: reader.take_f64("atol", d.atol, 1e-15, 1e-2),
            };
            Params::Relax(p)
        }
        Scenario::Measure => {
            let d = MeasureParams::default();
            let p = MeasureParams {
                observable: reader.take_parsed("observable", d.observable, ObservableKind::parse),
                momentum: reader.take_i32("momentum", d.momentum, 1, 16),
                weight_plus: reader.take_f64("weight_plus", d.weight_plus, 1e-6, 1.0 - 1e-6),
                sigma: reader.take_f64("sigma", d.sigma, 1e-9, 1e6),
                coupling: reader.take_f64("coupling", d.coupling, 1e-9, 1e6),
                duration: reader.take_f64("duration", d.duration, 1e-9, 1e6),
                n_trials: reader.take_usize("n_trials", d.n_trials, 1, 10_000_000),
                rho0: reader.take_parsed("rho0", d.rho0, MeasureRho::parse),
                rtol: reader.take_f64("rtol", d.rtol, 1e-13, 1e-2),
                atol: reader.take_f64("atol", d.atol, 1e-15, 1e-2),
            };
            Params::Measure(p)
        }
        Scenario::Signal => {
            let d = SignalParams::default();
            let p = SignalParams {
                width_a: reader.take_f64("width_a", d.width_a, 1e-6, 1e6),
                width_b: reader.take_f64("width_b", d.width_b, 1e-6, 1e6),
                width_b_post: reader.take_f64("width_b_post", d.width_b_post, 1e-6, 1e6),
                t_switch: reader.take_f64("t_switch", d.t_switch, 0.0, 1e6),
                t_probe: reader.take_f64("t_probe", d.t_probe, 1e-9, 1e6),
                cells_a: reader.take_usize("cells_a", d.cells_a, 2, 256),
                n_traj: reader.take_usize("n_traj", d.n_traj, 1, 20_000_000),
                rho0: reader.take_parsed("rho0", d.rho0, SignalRho::parse),
                rtol: reader.take_f64("rtol", d.rtol, 1e-13, 1e-2),
                atol: reader.take_f64("atol", d.atol, 1e-15, 1e-2),
            };
            if p.width_b_post < p.width_b {
                reader.violations.push(Violation {
                    line: None,
                    message: format!(
                        "width_b_post ({}) must be at least width_b ({})",
                        p.width_b_post, p.width_b
                    ),
                });
            }
            if p.t_probe <= p.t_switch {
                reader.violations.push(Violation {
                    line: None,
                    message: format!(
                        "t_probe ({}) must exceed t_switch ({})",
                        p.t_probe, p.t_switch
                    ),
                });
            }
            Params::Signal(p)
        }
        Scenario::SternGerlach => {
            let d = SternGerlachParams::default();
            Params::SternGerlach(SternGerlachParams {
                weight_up: reader.take_f64("weight_up", d.weight_up, 0.0, 1.0),
                width: reader.take_f64("width", d.width, 1e-9, 1e6),
                kick: reader.take_f64("kick", d.kick, 1e-9, 1e6),
                t_end: reader.take_f64("t_end", d.t_end, 1e-9, 1e6),
                n_traj: reader.take_usize("n_traj", d.n_traj, 1, 10_000_000),
                rtol: reader.take_f64("rtol", d.rtol, 1e-13, 1e-2),
                atol: reader.take_f64("atol", d.atol, 1e-15, 1e-2),
            })
        }
        Scenario::BohmInstability => {
            let d = BohmParams::default();
            Params::Bohm(BohmParams {
                length: reader.take_f64("length", d.length, 1e-6, 1e6),
                modes_per_axis: reader.take_usize("modes_per_axis", d.modes_per_axis, 1, 8),
                delta: reader.take_f64("delta", d.delta, 0.0, 1e3),
                periods: reader.take_f64("periods", d.periods, 1e-3, 1e3),
                n_bohm: reader.take_usize("n_bohm", d.n_bohm, 1, 1_000_000),
                n_relax: reader.take_usize("n_relax", d.n_relax, 1, 20_000_000),
                cells: reader.take_usize("cells", d.cells, 2, 256),
                n_times: reader.take_usize("n_times", d.n_times, 2, 512),
                rtol: reader.take_f64("rtol", d.rtol, 1e-13, 1e-2),
                atol: reader.take_f64("atol", d.atol, 1e-15, 1e-2),
            })
        }
        Scenario::Subquantum => {
            let d = SubquantumParams::default();
            let p = SubquantumParams {
                sigma: reader.take_f64("sigma", d.sigma, 1e-9, 1e9),
                noneq_width: reader.take_f64("noneq_width", d.noneq_width, 1e-12, 1e9),
                coupling: reader.take_f64("coupling", d.coupling, 1e-9, 1e6),
                duration: reader.take_f64("duration", d.duration, 1e-9, 1e6),
                n_trials: reader.take_usize("n_trials", d.n_trials, 1, 10_000_000),
            };
            if p.noneq_width > p.sigma {
                reader.violations.push(Violation {
                    line: None,
                    message: format!(
                        "noneq_width ({}) must not exceed sigma ({})",
                        p.noneq_width, p.sigma
                    ),
                });
            }
            Params::Subquantum(p)
        }
        Scenario::Cosmo => {
            let d = CosmoParams::default();
            Params::Cosmo(CosmoParams {
                expansion: reader.take_parsed("expansion", d.expansion, ExpansionSpec::parse),
                wavenumber: reader.take_f64("wavenumber", d.wavenumber, 1e-9, 1e6),
                n_lev: reader.take_usize("n_lev", d.n_lev, 4, 128),
                levels_per_axis: reader.take_usize("levels_per_axis", d.levels_per_axis, 1, 8),
                rho0: reader.take_parsed("rho0", d.rho0, CosmoRho::parse),
                n_traj: reader.take_usize("n_traj", d.n_traj, 1, 20_000_000),
                cells: reader.take_usize("cells", d.cells, 2, 256),
                half_width: reader.take_f64("half_width", d.half_width, 0.0, 1e6),
                t_end: reader.take_f64("t_end", d.t_end, 1e-9, 1e6),
                n_times: reader.take_usize("n_times", d.n_times, 2, 512),
                rtol: reader.take_f64("rtol", d.rtol, 1e-13, 1e-2),
                atol: reader.take_f64("atol", d.atol, 1e-15, 1e-2),
            })
        }
    };
    reader.finish();

    if violations.is_empty() {
        Ok(ScenarioConfig {
            scenario,
            seed,
            workers,
            out_dir,
            params,
        })
    } else {
        Err(ConfigErrors { violations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let config = parse_config("[run]\nscenario = relax\n").unwrap();
        assert_eq!(config.scenario, Scenario::Relax);
        assert_eq!(config.seed, 0);
        assert_eq!(config.workers, 1);
        assert_eq!(config.params, Params::Relax(RelaxParams::default()));
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let text = "[run]\nscenario = relax\n\n[relax]\ncolour = blue\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.violations.len(), 1);
        assert_eq!(err.violations[0].line, Some(5));
        assert!(err.violations[0].message.contains("colour"));
    }

    #[test]
    fn all_violations_are_collected() {
        let text = "[run]\nscenario = relax\nworkers = -2\n\n[relax]\ncells = 1\nrtol = banana\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.violations.len(), 3, "{err}");
    }

    #[test]
    fn cross_field_rules_are_enforced() {
        let text = "[run]\nscenario = signal\n\n[signal]\nwidth_b_post = 1.0\nt_probe = 0.5\nt_switch = 2.0\n";
        let err = parse_config(text).unwrap_err();
        assert!(err.violations.iter().any(|v| v.message.contains("width_b_post")));
        assert!(err.violations.iter().any(|v| v.message.contains("t_probe")));
    }

    #[test]
    fn foreign_sections_are_rejected() {
        let text = "[run]\nscenario = relax\n\n[cosmo]\nwavenumber = 2.0\n";
        let err = parse_config(text).unwrap_err();
        assert!(err.violations[0].message.contains("does not belong"));
    }

    #[test]
    fn hash_ignores_workers_and_out_dir() {
        let mut a = ScenarioConfig::defaults(Scenario::Relax);
        let mut b = a.clone();
        b.workers = 8;
        b.out_dir = Some("/tmp/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        a.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    fn arb_scenario() -> impl Strategy<Value = Scenario> {
        prop::sample::select(Scenario::all().to_vec())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn canonical_emission_round_trips(
            scenario in arb_scenario(),
            seed in any::<u64>(),
            workers in 1usize..16,
            n in 1usize..100000,
            tol_exp in -12i32..-3,
        ) {
            let mut config = ScenarioConfig::defaults(scenario);
            config.seed = seed;
            config.workers = workers;
            let rtol = 10f64.powi(tol_exp);
            match &mut config.params {
                Params::Relax(p) => { p.n_traj = n; p.rtol = rtol; }
                Params::Measure(p) => { p.n_trials = n; p.rtol = rtol; }
                Params::Signal(p) => { p.n_traj = n; p.rtol = rtol; }
                Params::SternGerlach(p) => { p.n_traj = n; p.rtol = rtol; }
                Params::Bohm(p) => { p.n_bohm = n; p.rtol = rtol; }
                Params::Subquantum(p) => { p.n_trials = n; }
                Params::Cosmo(p) => { p.n_traj = n; p.rtol = rtol; }
            }
            let text = config.emit_canonical();
            let parsed = parse_config(&text).expect("canonical text parses");
            prop_assert_eq!(parsed, config);
        }
    }
}

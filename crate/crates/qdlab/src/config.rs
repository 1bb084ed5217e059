//! Experiment configuration: versioned JSON schema, validation with
//! pointers to offending keys, and resolution to problems and domains.

use serde::{Deserialize, Serialize};

use crate::builtins;
use crate::geometry::Domain;
use crate::problem::ControlProblem;
use crate::tables::TableSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    pub experiments: Vec<ExperimentEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExperimentEntry {
    Preset {
        preset: String,
        #[serde(default)]
        name: Option<String>,
    },
    Custom(Box<ExperimentSpec>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub domain: Option<DomainSpec>,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Value,
    ValueSup,
    DerivativeFd,
    DerivativeQuasi,
    SecondDerivativeQuasi,
    ConvergenceProbe,
    ExitGap,
    BarrierSupermartingale,
    MomentBounds,
    DerivativeBounds,
    NormalDerivative,
    OracleSolve,
    OracleUniqueness,
    MuCheck,
    AssumptionCheck,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSpec {
    Builtin { builtin: String },
    Table { table: Box<TableSpec> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainSpec {
    Ball { center: Vec<f64>, radius: f64 },
    Ellipsoid { center: Vec<f64>, semi_axes: Vec<f64> },
    Box { center: Vec<f64>, half_widths: Vec<f64> },
}

/// Free-form numeric parameters; every kind documents which ones it reads.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub x0: Option<Vec<f64>>,
    pub xi: Option<Vec<f64>>,
    pub n_paths: Option<usize>,
    pub dt0: Option<f64>,
    pub dt_boundary_factor: Option<f64>,
    pub horizon: Option<f64>,
    pub xi_cap: Option<f64>,
    pub eps: Option<f64>,
    pub eps_list: Option<Vec<f64>>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub k1: Option<f64>,
    pub h: Option<f64>,
    pub tol: Option<f64>,
    pub n_inits: Option<usize>,
    pub policy: Option<usize>,
    pub n_seeds: Option<usize>,
    pub psi_ladder: Option<Vec<f64>>,
    pub provider: Option<String>,
    pub directions: Option<Vec<Vec<f64>>>,
    /// Export a single-path trace CSV (value experiments).
    pub trace: Option<bool>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, String> {
        let cfg: ConfigFile =
            serde_json::from_str(text).map_err(|e| format!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != CONFIG_VERSION {
            return Err(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            ));
        }
        if self.experiments.is_empty() {
            return Err("experiments: must be nonempty".into());
        }
        for (i, entry) in self.experiments.iter().enumerate() {
            match entry {
                ExperimentEntry::Preset { preset, .. } => {
                    if !builtins::experiment_catalog()
                        .iter()
                        .any(|(name, _)| name == preset)
                    {
                        return Err(format!(
                            "experiments[{i}].preset: unknown preset '{preset}'"
                        ));
                    }
                }
                ExperimentEntry::Custom(spec) => {
                    spec.validate()
                        .map_err(|e| format!("experiments[{i}].{e}"))?;
                }
            }
        }
        Ok(())
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("name: must be nonempty".into());
        }
        match &self.problem {
            ProblemSpec::Builtin { builtin } => {
                if builtins::problem_by_name(builtin).is_none() {
                    return Err(format!("problem.builtin: unknown problem '{builtin}'"));
                }
            }
            ProblemSpec::Table { table } => {
                table.validate().map_err(|e| format!("problem.{e}"))?;
            }
        }
        if let Some(d) = &self.domain {
            d.validate().map_err(|e| format!("domain.{e}"))?;
        }
        let p = &self.params;
        let positive = |name: &str, v: Option<f64>| -> Result<(), String> {
            match v {
                Some(x) if !(x > 0.0) => Err(format!("params.{name}: must be positive")),
                _ => Ok(()),
            }
        };
        positive("dt0", p.dt0)?;
        positive("dt_boundary_factor", p.dt_boundary_factor)?;
        positive("horizon", p.horizon)?;
        positive("xi_cap", p.xi_cap)?;
        positive("h", p.h)?;
        positive("tol", p.tol)?;
        positive("k1", p.k1)?;
        if let (Some(delta), Some(lambda)) = (p.delta, p.lambda) {
            crate::geometry::Levels::new(delta, lambda)
                .map_err(|e| format!("params.delta/lambda: {e}"))?;
        }
        if let Some(n) = p.n_paths {
            if n == 0 {
                return Err("params.n_paths: must be positive".into());
            }
        }
        if let Some(list) = &p.eps_list {
            if list.is_empty() {
                return Err("params.eps_list: must be nonempty".into());
            }
        }
        Ok(())
    }

    pub fn resolve_problem(&self) -> Result<ControlProblem, String> {
        match &self.problem {
            ProblemSpec::Builtin { builtin } => builtins::problem_by_name(builtin)
                .ok_or_else(|| format!("unknown problem '{builtin}'")),
            ProblemSpec::Table { table } => table
                .as_ref()
                .clone()
                .into_problem(self.name.clone())
                .map_err(|e| format!("problem.{e}")),
        }
    }

    pub fn resolve_domain(&self) -> Result<Domain, String> {
        match (&self.domain, &self.problem) {
            (Some(spec), _) => Ok(spec.build()),
            (None, ProblemSpec::Builtin { builtin }) => Ok(builtins::default_domain(builtin)),
            (None, ProblemSpec::Table { .. }) => {
                Err("domain: required for tabulated problems".into())
            }
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            DomainSpec::Ball { center, radius } => {
                if center.is_empty() {
                    return Err("center: must be nonempty".into());
                }
                if !(*radius > 0.0) {
                    return Err("radius: must be positive".into());
                }
            }
            DomainSpec::Ellipsoid { center, semi_axes } => {
                if center.len() != semi_axes.len() {
                    return Err("semi_axes: length must match center".into());
                }
                if semi_axes.iter().any(|a| !(*a > 0.0)) {
                    return Err("semi_axes: must be positive".into());
                }
            }
            DomainSpec::Box { center, half_widths } => {
                if center.len() != half_widths.len() {
                    return Err("half_widths: length must match center".into());
                }
                if half_widths.iter().any(|a| !(*a > 0.0)) {
                    return Err("half_widths: must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Domain {
        match self {
            DomainSpec::Ball { center, radius } => Domain::ball(center, *radius),
            DomainSpec::Ellipsoid { center, semi_axes } => Domain::ellipsoid(center, semi_axes),
            DomainSpec::Box { center, half_widths } => Domain::smoothed_box(center, half_widths),
        }
    }
}

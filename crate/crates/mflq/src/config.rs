//! Experiment configuration files.
//!
//! A config is a TOML document:
//!
//! ```toml
//! system = "dean2017"          # builtin name, or an inline [system] table
//! algorithm = "mflq_v2"
//! horizon = 200000
//! seeds = { start = 0, count = 10 }   # or an explicit list [0, 1, 2]
//! xi = 0.0                     # optional
//! explore_period = 10          # optional, exploration period of mflq_v1
//! action_cov = 1.0             # optional, scalar (times I) or row list
//! initial_policy_scale = 200.0 # optional
//! burn_in = 50                 # optional
//! output = "results/dean"      # optional
//! ```
//!
//! An inline system gives `a` and `b` as row lists; `m`, `n`, `w` and
//! `action_cov` may be row lists or scalars (multiples of the identity) and
//! default to 1.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mflq_core::env::LqSystem;
use mflq_core::linalg::SymMatrix;
use mflq_core::mflq::{Variant, DEFAULT_BURN_IN, DEFAULT_V1_PERIOD};
use mflq_core::baselines::DEFAULT_INITIAL_SCALE;
use nalgebra::DMatrix;
use serde::Deserialize;
use toml::{Spanned, Value};

use crate::error::ConfigError;

/// Builtin systems shipped with the crate, as `(name, definition)`.
pub const BUILTIN_SYSTEMS: &[(&str, &str)] = &[
    ("dean2017", include_str!("../data/dean2017.toml")),
    ("lewis-power", include_str!("../data/lewis-power.toml")),
    ("scalar", include_str!("../data/scalar.toml")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    MflqV1,
    MflqV2,
    MflqV3,
    Lspi,
    Rlsvi,
    ModelBased,
    /// The optimal controller, run for reference.
    Oracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::MflqV1,
        Algorithm::MflqV2,
        Algorithm::MflqV3,
        Algorithm::Lspi,
        Algorithm::Rlsvi,
        Algorithm::ModelBased,
        Algorithm::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MflqV1 => "mflq_v1",
            Algorithm::MflqV2 => "mflq_v2",
            Algorithm::MflqV3 => "mflq_v3",
            Algorithm::Lspi => "lspi",
            Algorithm::Rlsvi => "rlsvi",
            Algorithm::ModelBased => "model_based",
            Algorithm::Oracle => "oracle",
        }
    }

    /// Exploration schedule the algorithm follows. Everything except MFLQ v1
    /// and v3 uses the per-phase schedule of v2.
    pub fn schedule_variant(self) -> Variant {
        match self {
            Algorithm::MflqV1 => Variant::V1,
            Algorithm::MflqV3 => Variant::V3,
            _ => Variant::V2,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                format!("unknown algorithm `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// A resolved system with its default exploration covariance.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub name: String,
    pub sys: LqSystem,
    pub default_action_cov: SymMatrix,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub algorithm: Algorithm,
    pub horizon: usize,
    pub xi: f64,
    pub explore_period: usize,
    pub seeds: Vec<u64>,
    pub action_cov: SymMatrix,
    pub initial_policy_scale: f64,
    pub burn_in: usize,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for everything but the system, algorithm, horizon and seeds.
    pub fn new(system: SystemSpec, algorithm: Algorithm, horizon: usize, seeds: Vec<u64>) -> Self {
        let action_cov = system.default_action_cov.clone();
        Self {
            system,
            algorithm,
            horizon,
            xi: 0.0,
            explore_period: DEFAULT_V1_PERIOD,
            seeds,
            action_cov,
            initial_policy_scale: DEFAULT_INITIAL_SCALE,
            burn_in: DEFAULT_BURN_IN,
            output: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Spanned<Value>,
    algorithm: Spanned<String>,
    horizon: Spanned<i64>,
    xi: Option<Spanned<f64>>,
    explore_period: Option<Spanned<i64>>,
    seeds: Spanned<Value>,
    action_cov: Option<Spanned<Value>>,
    initial_policy_scale: Option<Spanned<f64>>,
    burn_in: Option<Spanned<i64>>,
    output: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    name: Option<String>,
    a: Spanned<Value>,
    b: Spanned<Value>,
    m: Option<Spanned<Value>>,
    n: Option<Spanned<Value>>,
    w: Option<Spanned<Value>>,
    action_cov: Option<Spanned<Value>>,
}

/// Second pass over a config whose `system` is a table, so its fields keep
/// their positions.
#[derive(Deserialize)]
struct InlineSystem {
    system: RawSystem,
}

/// Maps byte offsets to 1-based line numbers.
struct Source<'a> {
    origin: &'a str,
    text: &'a str,
}

impl Source<'_> {
    fn line(&self, span: &Range<usize>) -> usize {
        let end = span.start.min(self.text.len());
        self.text[..end].bytes().filter(|&b| b == b'\n').count() + 1
    }

    fn column(&self, span: &Range<usize>) -> usize {
        let end = span.start.min(self.text.len());
        end - self.text[..end].rfind('\n').map_or(0, |i| i + 1) + 1
    }

    fn parse_error(&self, err: toml::de::Error) -> ConfigError {
        let (line, column) = err
            .span()
            .map_or((None, None), |s| (Some(self.line(&s)), Some(self.column(&s))));
        ConfigError::Parse {
            origin: self.origin.to_string(),
            line,
            column,
            message: err.message().trim().to_string(),
        }
    }

    fn invalid(&self, field: &str, span: &Range<usize>, reason: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            origin: self.origin.to_string(),
            field: field.to_string(),
            line: Some(self.line(span)),
            reason: reason.into(),
        }
    }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn matrix(src: &Source<'_>, field: &str, v: &Spanned<Value>) -> Result<DMatrix<f64>, ConfigError> {
    let span = v.span();
    let rows = v
        .get_ref()
        .as_array()
        .ok_or_else(|| src.invalid(field, &span, "expected a list of rows"))?;
    if rows.is_empty() {
        return Err(src.invalid(field, &span, "matrix has no rows"));
    }
    let mut data = Vec::new();
    let mut width = None;
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| src.invalid(field, &span, format!("row {} is not a list", i + 1)))?;
        match width {
            None if row.is_empty() => return Err(src.invalid(field, &span, "matrix has no columns")),
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(src.invalid(
                    field,
                    &span,
                    format!("row {} has {} entries, expected {w}", i + 1, row.len()),
                ))
            }
            _ => {}
        }
        for x in row {
            data.push(number(x).ok_or_else(|| {
                src.invalid(field, &span, format!("row {} holds a non-numeric entry", i + 1))
            })?);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), width.unwrap_or(0), &data))
}

/// Scalar (times the identity) or a square row list.
fn sym_or_scalar(
    src: &Source<'_>,
    field: &str,
    v: Option<&Spanned<Value>>,
    dim: usize,
) -> Result<SymMatrix, ConfigError> {
    let Some(v) = v else {
        return Ok(SymMatrix::identity(dim));
    };
    let span = v.span();
    let m = match number(v.get_ref()) {
        Some(x) => DMatrix::identity(dim, dim) * x,
        None => matrix(src, field, v)?,
    };
    if m.nrows() != dim || m.ncols() != dim {
        return Err(src.invalid(
            field,
            &span,
            format!("expected a {dim}x{dim} matrix, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(src.invalid(field, &span, "matrix is not symmetric"));
    }
    SymMatrix::new(m).map_err(|e| src.invalid(field, &span, e.to_string()))
}

fn build_system(
    src: &Source<'_>,
    prefix: &str,
    raw: &RawSystem,
    whole: &Range<usize>,
) -> Result<SystemSpec, ConfigError> {
    let f = |name: &str| format!("{prefix}{name}");
    let a = matrix(src, &f("a"), &raw.a)?;
    let b = matrix(src, &f("b"), &raw.b)?;
    if a.nrows() != a.ncols() {
        return Err(src.invalid(&f("a"), &raw.a.span(), "A must be square"));
    }
    if b.nrows() != a.nrows() {
        return Err(src.invalid(
            &f("b"),
            &raw.b.span(),
            format!("B has {} rows, A has {}", b.nrows(), a.nrows()),
        ));
    }
    let (n, d) = (a.nrows(), b.ncols());
    let m = sym_or_scalar(src, &f("m"), raw.m.as_ref(), n)?;
    let nn = sym_or_scalar(src, &f("n"), raw.n.as_ref(), d)?;
    let w = sym_or_scalar(src, &f("w"), raw.w.as_ref(), n)?;
    let cov = sym_or_scalar(src, &f("action_cov"), raw.action_cov.as_ref(), d)?;
    let sys = LqSystem::new(a, b, m, nn, w)
        .map_err(|e| src.invalid(prefix.trim_end_matches('.'), whole, e.to_string()))?;
    Ok(SystemSpec {
        name: raw.name.clone().unwrap_or_else(|| "inline".to_string()),
        sys,
        default_action_cov: cov,
    })
}

/// Parses a standalone system definition (the format of the bundled files).
pub fn parse_system(text: &str, origin: &str) -> Result<SystemSpec, ConfigError> {
    let src = Source { origin, text };
    let raw: RawSystem = toml::from_str(text).map_err(|e| src.parse_error(e))?;
    build_system(&src, "", &raw, &(0..0))
}

/// Looks up a bundled system by name.
pub fn builtin_system(name: &str) -> Result<SystemSpec, ConfigError> {
    let (_, text) = BUILTIN_SYSTEMS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ConfigError::UnknownSystem(name.to_string()))?;
    parse_system(text, &format!("builtin:{name}"))
}

fn non_negative(src: &Source<'_>, field: &str, v: &Spanned<i64>) -> Result<usize, ConfigError> {
    usize::try_from(*v.get_ref()).map_err(|_| src.invalid(field, &v.span(), "must be non-negative"))
}

fn seeds(src: &Source<'_>, v: &Spanned<Value>) -> Result<Vec<u64>, ConfigError> {
    let span = v.span();
    let as_seed = |x: &Value| {
        x.as_integer()
            .and_then(|i| u64::try_from(i).ok())
            .ok_or_else(|| src.invalid("seeds", &span, "seeds must be non-negative integers"))
    };
    let out = match v.get_ref() {
        Value::Array(xs) => xs.iter().map(as_seed).collect::<Result<Vec<_>, _>>()?,
        Value::Table(t) => {
            for k in t.keys() {
                if k != "start" && k != "count" {
                    return Err(src.invalid("seeds", &span, format!("unknown key `{k}`")));
                }
            }
            let start = t.get("start").map(as_seed).transpose()?.unwrap_or(0);
            let count = t
                .get("count")
                .map(as_seed)
                .transpose()?
                .ok_or_else(|| src.invalid("seeds", &span, "missing `count`"))?;
            (start..start + count).collect()
        }
        _ => return Err(src.invalid("seeds", &span, "expected a list or {start, count}")),
    };
    if out.is_empty() {
        return Err(src.invalid("seeds", &span, "at least one seed is required"));
    }
    Ok(out)
}

/// Parses and validates a config document. `origin` names it in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let src = Source { origin, text };
    let raw: RawConfig = toml::from_str(text).map_err(|e| src.parse_error(e))?;

    let system = match raw.system.get_ref() {
        Value::String(name) => builtin_system(name).map_err(|e| match e {
            ConfigError::UnknownSystem(_) => src.invalid("system", &raw.system.span(), e.to_string()),
            other => other,
        })?,
        Value::Table(_) => {
            let inline: InlineSystem = toml::from_str(text).map_err(|e| src.parse_error(e))?;
            build_system(&src, "system.", &inline.system, &raw.system.span())?
        }
        _ => {
            return Err(src.invalid(
                "system",
                &raw.system.span(),
                "expected a builtin name or a table",
            ))
        }
    };

    let algorithm = raw
        .algorithm
        .get_ref()
        .parse::<Algorithm>()
        .map_err(|e| src.invalid("algorithm", &raw.algorithm.span(), e))?;
    let horizon = non_negative(&src, "horizon", &raw.horizon)?;
    if horizon < 64 {
        return Err(src.invalid("horizon", &raw.horizon.span(), "must be at least 64"));
    }
    let xi = match &raw.xi {
        None => 0.0,
        Some(x) => {
            let v = *x.get_ref();
            if !(0.0..0.25).contains(&v) {
                return Err(src.invalid("xi", &x.span(), "must lie in [0, 0.25)"));
            }
            v
        }
    };
    let explore_period = match &raw.explore_period {
        None => DEFAULT_V1_PERIOD,
        Some(p) => {
            let v = non_negative(&src, "explore_period", p)?;
            if v == 0 {
                return Err(src.invalid("explore_period", &p.span(), "must be at least 1"));
            }
            v
        }
    };
    let seeds = seeds(&src, &raw.seeds)?;
    let action_cov = match &raw.action_cov {
        None => system.default_action_cov.clone(),
        Some(v) => {
            let c = sym_or_scalar(&src, "action_cov", Some(v), system.sys.action_dim())?;
            if !c.is_positive_definite() {
                return Err(src.invalid("action_cov", &v.span(), "must be positive definite"));
            }
            c
        }
    };
    let initial_policy_scale = match &raw.initial_policy_scale {
        None => DEFAULT_INITIAL_SCALE,
        Some(s) => {
            let v = *s.get_ref();
            if !(v > 0.0 && v.is_finite()) {
                return Err(src.invalid("initial_policy_scale", &s.span(), "must be positive"));
            }
            v
        }
    };
    let burn_in = match &raw.burn_in {
        None => DEFAULT_BURN_IN,
        Some(b) => non_negative(&src, "burn_in", b)?,
    };
    Ok(ExperimentConfig {
        system,
        algorithm,
        horizon,
        xi,
        explore_period,
        seeds,
        action_cov,
        initial_policy_scale,
        burn_in,
        output: raw.output.map(PathBuf::from),
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, &path.display().to_string())
}

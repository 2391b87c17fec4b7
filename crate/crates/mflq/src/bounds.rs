//! Table of mixing, block and boundedness constants for one closed loop.

use std::path::Path;
use std::str::FromStr;

use mflq_core::baselines::initial_policy;
use mflq_core::env::policy_value;
use mflq_core::linalg::spectral_radius;
use mflq_core::theory::{beta_mixing_bound, partial_sum_bound, state_bounds, MixingBoundSpec};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::HarnessError;

/// Lags listed in the table.
pub const LAGS: [u32; 7] = [1, 2, 5, 10, 20, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicySource {
    /// The conservative starting controller.
    Initial,
    Optimal,
}

impl FromStr for PolicySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "initial" => Ok(PolicySource::Initial),
            "optimal" => Ok(PolicySource::Optimal),
            _ => Err(format!("unknown policy source `{s}` (expected initial or optimal)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub quantity: String,
    pub value: f64,
}

/// Constants for the closed loop of the chosen policy. `alpha` defaults to
/// `(1 + ρ) / 2`; sums are over `cfg.horizon` steps.
pub fn bounds_table(
    cfg: &ExperimentConfig,
    source: PolicySource,
    alpha: Option<f64>,
    delta: f64,
) -> Result<Vec<BoundRow>, HarnessError> {
    let sys = &cfg.system.sys;
    let policy = match source {
        PolicySource::Initial => initial_policy(sys, cfg.initial_policy_scale)?,
        PolicySource::Optimal => sys.optimal_controller()?.0,
    };
    let gamma = sys.closed_loop(&policy);
    let rho = spectral_radius(&gamma);
    let alpha = alpha.unwrap_or(0.5 * (1.0 + rho));
    let spec = MixingBoundSpec::new(gamma, alpha)?;
    let (b, s_bound) = partial_sum_bound(cfg.horizon, spec.rate(), spec.beta_bar(), delta)?;
    let c1 = policy_value(sys, &policy)?.h.0.spectral_norm();
    let (c_x, c_a) = state_bounds(3.0 * c1, sys.state_dim(), cfg.horizon, delta)?;
    let mut rows = vec![
        ("spectral_radius".to_string(), rho),
        ("alpha".to_string(), alpha),
        ("resolvent_norm".to_string(), spec.resolvent_norm()),
        ("mixing_covariance_trace".to_string(), spec.mixing_covariance().trace()),
        ("beta_bar".to_string(), spec.beta_bar()),
    ];
    for k in LAGS {
        rows.push((format!("beta_{k}"), beta_mixing_bound(&spec, k)));
    }
    rows.extend([
        ("rate".to_string(), spec.rate()),
        ("block_length".to_string(), b as f64),
        ("partial_sum_bound".to_string(), s_bound),
        ("value_norm".to_string(), c1),
        ("c_h".to_string(), 3.0 * c1),
        ("c_x".to_string(), c_x),
        ("c_a".to_string(), c_a),
    ]);
    Ok(rows
        .into_iter()
        .map(|(quantity, value)| BoundRow { quantity, value })
        .collect())
}

pub fn write_bounds(rows: &[BoundRow], path: &Path) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{builtin_system, Algorithm};

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::new(builtin_system("dean2017").unwrap(), Algorithm::MflqV2, 50_000, vec![0])
    }

    fn value(rows: &[BoundRow], q: &str) -> f64 {
        rows.iter().find(|r| r.quantity == q).unwrap().value
    }

    #[test]
    fn initial_policy_table_is_finite() {
        let rows = bounds_table(&cfg(), PolicySource::Initial, None, 0.05).unwrap();
        assert!(rows.iter().all(|r| r.value.is_finite()));
        assert!(value(&rows, "spectral_radius") < value(&rows, "alpha"));
    }

    #[test]
    fn bounds_grow_as_alpha_nears_one() {
        let mut prev = 0.0;
        for a in [0.6, 0.8, 0.9, 0.99] {
            let rows = bounds_table(&cfg(), PolicySource::Optimal, Some(a), 0.05).unwrap();
            let s = value(&rows, "partial_sum_bound");
            assert!(s > prev);
            prev = s;
        }
        assert!(bounds_table(&cfg(), PolicySource::Optimal, Some(1.0), 0.05).is_err());
    }
}

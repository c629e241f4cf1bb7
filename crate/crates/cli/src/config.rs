//! Experiment configuration: one JSON file per run.

use std::path::PathBuf;

use fastslow_core::coefficients::BUILTIN_MODELS;
use fastslow_core::malliavin::{BoundId, MomentSelection, MIN_R_NODES};
use fastslow_core::metrics::{CltOptions, EtaRule, BOOTSTRAP_RESAMPLES, DEFAULT_ZETA};
use fastslow_core::sde::ScaleRegime;
use fastslow_core::{builtin, CoefficientSet};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::Command;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in model name; exclusive with `expressions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expressions: Option<Expressions>,
    pub regime: RegimeConfig,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub io: IoConfig,
}

/// Coefficient strings over `x`, `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expressions {
    pub c: String,
    pub sigma: String,
    pub f: String,
    pub tau: String,
}

/// `ε` as a number or a list; `η` either listed (one value, or one per `ε`)
/// or given by a rule. Neither means `η = ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    #[serde(deserialize_with = "one_or_many")]
    pub epsilon: Vec<f64>,
    #[serde(default, deserialize_with = "opt_one_or_many", skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_rule: Option<EtaRule>,
    pub gamma: Gamma,
    pub horizon: f64,
}

/// `γ`, written as a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gamma(pub f64);

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Gamma(v)),
            Raw::Text(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => Ok(Gamma(f64::INFINITY)),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("gamma must be a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl From<OneOrMany> for Vec<f64> {
    fn from(v: OneOrMany) -> Self {
        match v {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(xs) => xs,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    OneOrMany::deserialize(d).map(Into::into)
}

fn opt_one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
    Option::<OneOrMany>::deserialize(d).map(|o| o.map(Into::into))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub x0: f64,
    pub y0: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self { x0: 1.0, y0: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Simulation step; `η/20` of each regime when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub n_paths: usize,
    /// Number of derivative times for the functionals.
    pub r_grid: usize,
    /// CLT evaluation times; `{T/4, T/2, T}` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<f64>>,
    pub homogenization: HomogenizationGrid,
    pub assumptions: AssumptionGrid,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dt: None,
            n_paths: 1000,
            r_grid: 16,
            checkpoints: None,
            homogenization: HomogenizationGrid::default(),
            assumptions: AssumptionGrid::default(),
        }
    }
}

/// Tabulation of `c̄`, `q̄` and the corrector. The x-range defaults to `x0 ± 4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizationGrid {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_range: Option<(f64, f64)>,
    pub nx: usize,
    pub ny: usize,
}

impl Default for HomogenizationGrid {
    fn default() -> Self {
        let o = CltOptions::around(0.0);
        Self {
            x_range: None,
            nx: o.nx,
            ny: o.ny,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Default for AssumptionGrid {
    fn default() -> Self {
        Self {
            x_range: (-3.0, 3.0),
            y_range: (-4.0, 4.0),
            nx: 61,
            ny: 81,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Moment orders.
    pub p: Vec<u32>,
    pub zeta: f64,
    pub bootstrap: usize,
    /// Exponential rate of the envelopes; `K_hat` at `p = 1` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    pub c1: f64,
    pub c2: f64,
    pub moments: MomentSelection,
    /// Paths per regime for the H-norm and contraction means.
    pub functional_paths: usize,
    /// Bounds whose verdict sets the sweep exit status; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gated_bounds: Option<Vec<BoundId>>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            p: vec![2],
            zeta: DEFAULT_ZETA,
            bootstrap: BOOTSTRAP_RESAMPLES,
            k: None,
            c1: 1.0,
            c2: 1.0,
            moments: MomentSelection::default(),
            functional_paths: 32,
            gated_bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Rejected configuration, reported as a usage error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn reject<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> Result<CoefficientSet<f64>, ConfigError> {
        match (&self.model, &self.expressions) {
            (Some(name), None) => builtin(name).ok_or_else(|| {
                ConfigError(format!("unknown model {name:?}; built-in models: {}", BUILTIN_MODELS.join(", ")))
            }),
            (None, Some(e)) => CoefficientSet::from_expressions("expressions", &e.c, &e.sigma, &e.f, &e.tau)
                .map_err(|e| ConfigError(e.to_string())),
            (Some(_), Some(_)) => reject("give either \"model\" or \"expressions\", not both"),
            (None, None) => reject("missing \"model\" or \"expressions\""),
        }
    }

    /// One regime per `ε`, in the listed order.
    pub fn regimes(&self) -> Result<Vec<ScaleRegime<f64>>, ConfigError> {
        let r = &self.regime;
        if r.epsilon.is_empty() {
            return reject("regime.epsilon is empty");
        }
        let etas: Vec<f64> = match (&r.eta, &r.eta_rule) {
            (Some(_), Some(_)) => return reject("give either regime.eta or regime.eta_rule, not both"),
            (Some(v), None) if v.len() == 1 => vec![v[0]; r.epsilon.len()],
            (Some(v), None) if v.len() == r.epsilon.len() => v.clone(),
            (Some(v), None) => {
                return reject(format!("regime.eta has {} values for {} epsilons", v.len(), r.epsilon.len()))
            }
            (None, rule) => {
                let rule = rule.unwrap_or(EtaRule::Equal);
                r.epsilon.iter().map(|&e| rule.eta(e)).collect()
            }
        };
        r.epsilon
            .iter()
            .zip(etas)
            .map(|(&e, h)| {
                ScaleRegime::new(e, h, r.gamma.0, r.horizon)
                    .map_err(|err| ConfigError(format!("regime eps={e}, eta={h}: {err}")))
            })
            .collect()
    }

    /// Configured checkpoints or `{T/4, T/2, T}`.
    pub fn checkpoints(&self) -> Vec<f64> {
        let t = self.regime.horizon;
        self.grid.checkpoints.clone().unwrap_or_else(|| vec![0.25 * t, 0.5 * t, t])
    }

    /// Largest step not above `grid.dt` (default `η/20`) that puts the
    /// horizon and every checkpoint on a grid node.
    pub fn aligned_dt(&self, regime: &ScaleRegime<f64>) -> Result<f64, ConfigError> {
        let t = regime.horizon;
        let dt = self.grid.dt.unwrap_or_else(|| regime.max_dt());
        let n0 = ((t / dt) - 1e-9).ceil().max(1.0) as u64;
        let fractions: Vec<f64> = self.checkpoints().iter().map(|c| c / t).collect();
        (n0..n0.saturating_mul(64))
            .find(|&n| {
                fractions.iter().all(|f| {
                    let k = f * n as f64;
                    (k - k.round()).abs() <= 1e-9 * n as f64
                })
            })
            .map(|n| t / n as f64)
            .ok_or_else(|| ConfigError(format!("checkpoints {:?} do not fit a common time grid on [0, {t}]", self.checkpoints())))
    }

    pub fn clt_options(&self) -> CltOptions {
        let h = &self.grid.homogenization;
        let x0 = self.initial.x0;
        CltOptions {
            x_range: h.x_range.unwrap_or((x0 - 4.0, x0 + 4.0)),
            nx: h.nx,
            ny: h.ny,
            bootstrap: self.analysis.bootstrap,
        }
    }

    /// Checks every numeric constraint used by any command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model()?;
        let regimes = self.regimes()?;
        let g = &self.grid;
        if let Some(dt) = g.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return reject(format!("grid.dt must be positive, got {dt}"));
            }
            for r in &regimes {
                if r.time_grid(Some(dt)).is_err() {
                    return reject(format!(
                        "grid.dt={dt} violates the stability rule dt <= eta/20 = {} at eps={}, eta={}",
                        r.max_dt(),
                        r.epsilon,
                        r.eta
                    ));
                }
            }
        }
        if g.n_paths < 2 {
            return reject("grid.n_paths must be at least 2");
        }
        if g.r_grid < MIN_R_NODES {
            return reject(format!("grid.r_grid must be at least {MIN_R_NODES}"));
        }
        let t = self.regime.horizon;
        let cps = self.checkpoints();
        if cps.is_empty() {
            return reject("grid.checkpoints is empty");
        }
        if let Some(bad) = cps.iter().find(|&&c| !(c > 0.0 && c <= t)) {
            return reject(format!("checkpoint {bad} outside (0, T={t}]"));
        }
        for r in &regimes {
            self.aligned_dt(r)?;
        }
        let h = &g.homogenization;
        if h.nx < 2 || h.ny < 64 {
            return reject("grid.homogenization needs nx >= 2 and ny >= 64");
        }
        if let Some((lo, hi)) = h.x_range {
            if !(lo < hi) {
                return reject("grid.homogenization.x_range is empty");
            }
        }
        let a = &g.assumptions;
        if !(a.x_range.0 < a.x_range.1) || !(a.y_range.0 < a.y_range.1) || a.nx < 2 || a.ny < 2 {
            return reject("grid.assumptions needs non-empty ranges and nx, ny >= 2");
        }
        let an = &self.analysis;
        if an.p.is_empty() || an.p.contains(&0) {
            return reject("analysis.p must list moment orders >= 1");
        }
        if !(an.zeta > 0.0 && an.zeta < 0.5) {
            return reject("analysis.zeta must lie in (0, 1/2)");
        }
        if an.bootstrap < 2 {
            return reject("analysis.bootstrap must be at least 2");
        }
        if an.functional_paths < 2 {
            return reject("analysis.functional_paths must be at least 2");
        }
        if let Some(k) = an.k {
            if !(k > 0.0) || !k.is_finite() {
                return reject("analysis.k must be positive");
            }
        }
        if !(an.c1 >= 0.0 && an.c2 >= 0.0) {
            return reject("analysis.c1 and analysis.c2 must be non-negative");
        }
        if ![self.initial.x0, self.initial.y0].iter().all(|v| v.is_finite()) {
            return reject("initial state must be finite");
        }
        Ok(())
    }

    /// Constraints specific to one command.
    pub fn validate_for(&self, command: Command) -> Result<(), ConfigError> {
        let eps = &self.regime.epsilon;
        let decreasing = eps.windows(2).all(|w| w[1] < w[0]);
        match command {
            Command::MalliavinSweep => {
                if !decreasing {
                    return reject("malliavin-sweep needs strictly decreasing epsilons");
                }
                if self.analysis.p.iter().any(|&p| p > 2) {
                    return reject("malliavin-sweep supports p in {1, 2}");
                }
            }
            Command::RateSweep => {
                if eps.len() < 3 || !decreasing {
                    return reject("rate-sweep needs at least three strictly decreasing epsilons");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model": "affine_oracle", "regime": {"epsilon": 0.1, "gamma": "inf", "horizon": 1}}"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.regime.epsilon, vec![0.1]);
        assert_eq!(c.regime.gamma.0, f64::INFINITY);
        assert_eq!(c.checkpoints(), vec![0.25, 0.5, 1.0]);
        assert_eq!(c.regimes().unwrap()[0].eta, 0.1);
        assert_eq!(c.clt_options().x_range, (-3.0, 5.0));
    }

    #[test]
    fn aligned_step_hits_every_checkpoint() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.regime.epsilon = vec![0.16];
        let r = c.regimes().unwrap()[0];
        let dt = c.aligned_dt(&r).unwrap();
        assert!(dt <= 0.008);
        assert_eq!(1.0 / dt, 128.0);
        c.grid.checkpoints = Some(vec![1.0 / 3.0, 1.0]);
        assert_eq!((1.0 / c.aligned_dt(&r).unwrap()).round(), 126.0);
    }

    #[test]
    fn gamma_text_round_trips() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert!(c.to_json().contains("\"inf\""));
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn eta_list_broadcasts() {
        let c = ExperimentConfig::from_json(
            r#"{"model": "affine_oracle", "regime": {"epsilon": [0.2, 0.1], "eta": 0.05, "gamma": 1, "horizon": 1}}"#,
        )
        .unwrap();
        assert!(c.regimes().unwrap().iter().all(|r| r.eta == 0.05));
    }
}

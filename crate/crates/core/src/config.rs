//! Run and benchmark configuration: JSON documents plus flag overrides.
//!
//! Every field has a default and every default is written back into
//! `run.json`, so a saved run can be replayed from that file alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::PhantomKind;
use crate::error::{Result, SegError};
use crate::fidelity::{FidelityModel, MeanEstimator, ModelConfig};
use crate::iglim::IglimConfig;
use crate::solver::{SolverConfig, StopRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IglimSettings {
    pub lambda: f64,
    pub alpha: f64,
    /// Denoising sweeps `M`.
    pub rounds: usize,
}

impl Default for IglimSettings {
    fn default() -> Self {
        let d = IglimConfig::default();
        IglimSettings {
            lambda: d.lambda,
            alpha: d.alpha,
            rounds: d.denoise_rounds,
        }
    }
}

impl IglimSettings {
    pub fn to_config(&self, phases: usize) -> IglimConfig {
        IglimConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            denoise_rounds: self.rounds,
            phases,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub model: FidelityModel,
    pub phases: usize,
    pub lambdas: Vec<f64>,
    pub mu: f64,
    pub tau: f64,
    pub sigma: f64,
    pub p: f64,
    pub lvf_radius: usize,
    pub mean_estimator: MeanEstimator,
    pub iglim: IglimSettings,
    /// Append CIELAB channels to RGB input.
    pub lift: bool,
    pub seed: u64,
    pub max_iters: usize,
    pub stop_rule: StopRule,
    /// Write measured seconds into `energy.csv` (otherwise zeros).
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        let model = ModelConfig::default();
        RunConfig {
            input: None,
            output: None,
            model: model.kind,
            phases: 2,
            lambdas: model.lambdas,
            mu: solver.mu,
            tau: solver.tau,
            sigma: model.sigma,
            p: model.lvf_weight,
            lvf_radius: model.lvf_radius,
            mean_estimator: model.mean_estimator,
            iglim: IglimSettings::default(),
            lift: false,
            seed: 0,
            max_iters: solver.max_iters,
            stop_rule: solver.stop_rule,
            timing: false,
        }
    }
}

impl RunConfig {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            mu: self.mu,
            tau: self.tau,
            max_iters: self.max_iters,
            stop_rule: self.stop_rule,
            model: ModelConfig {
                kind: self.model,
                lambdas: self.lambdas.clone(),
                sigma: self.sigma,
                lvf_radius: self.lvf_radius,
                lvf_weight: self.p,
                mean_estimator: self.mean_estimator,
            },
        }
    }

    pub fn iglim_config(&self) -> IglimConfig {
        self.iglim.to_config(self.phases)
    }

    pub fn validate(&self) -> Result<()> {
        self.iglim_config().validate()?;
        self.solver_config().validate(self.phases)
    }

    pub fn input_path(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| SegError::Config("no input image given (use --input or \"input\")".into()))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| SegError::Config("no output directory given (use --output or \"output\")".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub output: Option<PathBuf>,
    pub phantoms: Vec<PhantomKind>,
    pub size: usize,
    pub variances: Vec<f64>,
    pub p_values: Vec<f64>,
    pub mu: f64,
    pub tau: f64,
    pub lvf_radius: usize,
    pub mean_estimator: MeanEstimator,
    pub iglim: IglimSettings,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        BenchConfig {
            output: None,
            phantoms: vec![PhantomKind::Shapes3Rgb],
            size: 128,
            variances: vec![0.0, 50.0, 300.0, 500.0],
            p_values: vec![0.0, 0.1],
            mu: 1.0,
            tau: 0.25,
            lvf_radius: model.lvf_radius,
            mean_estimator: model.mean_estimator,
            iglim: IglimSettings::default(),
            seed: 0,
            max_iters: 500,
        }
    }
}

impl BenchConfig {
    pub fn solver_config(&self, p: f64) -> SolverConfig {
        SolverConfig {
            mu: self.mu,
            tau: self.tau,
            max_iters: self.max_iters,
            stop_rule: StopRule::NoPixelChange,
            model: ModelConfig {
                lvf_weight: p,
                lvf_radius: self.lvf_radius,
                mean_estimator: self.mean_estimator,
                ..ModelConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantoms.is_empty() || self.variances.is_empty() || self.p_values.is_empty() {
            return Err(SegError::Config("bench grid needs at least one phantom, variance and p".into()));
        }
        if self.size < crate::bench::MIN_PHANTOM_SIZE {
            return Err(SegError::Config(format!(
                "phantom size must be >= {}, got {}",
                crate::bench::MIN_PHANTOM_SIZE,
                self.size
            )));
        }
        if let Some(v) = self.variances.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(SegError::Config(format!("noise variance must be >= 0, got {v}")));
        }
        for kind in &self.phantoms {
            self.iglim.to_config(kind.phases()).validate()?;
            for &p in &self.p_values {
                self.solver_config(p).validate(kind.phases())?;
            }
        }
        Ok(())
    }
}

/// Reads a JSON document; a saved `run.json` is accepted through its `config` member.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SegError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| SegError::Config(format!("malformed config {}: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("config").filter(|v| v.is_object()) {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| SegError::Config(format!("invalid config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(BenchConfig::default().validate().is_ok());
    }

    #[test]
    fn run_json_wrapper_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let cfg = RunConfig {
            phases: 4,
            mu: 3.0,
            ..Default::default()
        };
        let doc = serde_json::json!({ "config": cfg, "iterations": 7, "decay_guaranteed": true });
        std::fs::write(&path, doc.to_string()).unwrap();
        assert_eq!(read_json::<RunConfig>(&path).unwrap(), cfg);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        for text in ["{ not json", r#"{"mu": "big"}"#, r#"{"muu": 1.0}"#] {
            std::fs::write(&path, text).unwrap();
            assert!(matches!(read_json::<RunConfig>(&path), Err(SegError::Config(_))), "{text}");
        }
        let cfg = RunConfig { tau: -1.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(SegError::Config(_))));
        let cfg = RunConfig { phases: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
        let bench = BenchConfig { variances: vec![-1.0], ..Default::default() };
        assert!(bench.validate().is_err());
    }
}

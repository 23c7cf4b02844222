//! Experiment configuration: JSON file, defaults and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use qsr_core::diffusion::TrainConfig;
use qsr_core::model::ModelConfig;
use qsr_core::phantom::PhantomConfig;
use qsr_core::shps::SamplerConfig;

use crate::error::CliError;

/// Acquisition scheme: a HAR shell of `n_target` electrostatic directions of
/// which `n_in` are observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub n_target: usize,
    pub n_in: usize,
    pub bval: f64,
    pub seed: u64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            n_target: 60,
            n_in: 6,
            bval: 1000.0,
            seed: 1,
        }
    }
}

impl SchemeConfig {
    /// ASR scale `N_target / N_in`.
    pub fn scale(&self) -> f64 {
        self.n_target as f64 / self.n_in as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub slices: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: SplitConfig,
    pub val: SplitConfig,
    pub test: SplitConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: SplitConfig { slices: 128, seed: 11 },
            val: SplitConfig { slices: 2, seed: 33 },
            test: SplitConfig { slices: 16, seed: 22 },
        }
    }
}

impl DatasetConfig {
    pub fn splits(&self) -> [(&'static str, &SplitConfig); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Bookkeeping of a training run that does not affect the updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Replace `model.signal_norm` by one fitted to the training set.
    pub fit_signal_norm: bool,
    /// Validation loss every this many iterations (0 disables).
    pub val_every: usize,
    pub val_mask_ratio: f64,
    pub val_seed: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            fit_signal_norm: true,
            val_every: 100,
            val_mask_ratio: 0.9,
            val_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lambda_oc: Vec<f64>,
    pub lambda_scc: Vec<f64>,
    /// Validation slices scored per grid point.
    pub slices: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lambda_oc: vec![0.0, 0.25, 0.5, 0.75],
            lambda_scc: vec![0.0, 0.25, 0.5, 0.75],
            slices: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub scheme: SchemeConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub monitor: MonitorConfig,
    pub sampler: SamplerConfig,
    pub gridsearch: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            phantom: PhantomConfig::default(),
            scheme: SchemeConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig {
                dim: 64,
                depth: 4,
                heads: 4,
                patch: 8,
                attention: qsr_core::model::AttentionLayout::Axial,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                optimizer: qsr_core::diffusion::OptimizerConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                ..TrainConfig::default()
            },
            monitor: MonitorConfig::default(),
            sampler: SamplerConfig {
                steps: 20,
                jacobian: qsr_core::shps::JacobianMode::Fast,
                weights: qsr_core::shps::GuidanceWeights {
                    lambda_oc: 0.5,
                    lambda_scc: 0.5,
                },
                ..SamplerConfig::default()
            },
            gridsearch: GridConfig::default(),
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Reads `path` (if any) over the defaults, then applies `key=value`
    /// overrides. Values parse as JSON, falling back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("default config serialises");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut value, file);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not of the form a.b=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, v)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.scheme;
        if s.n_in == 0 || s.n_in >= s.n_target {
            return Err(invalid(
                "scheme.n_in",
                format!("ASR scale N_target/N_in must exceed 1, got {}/{}", s.n_target, s.n_in),
            ));
        }
        if !(s.bval > 0.0 && s.bval.is_finite()) {
            return Err(invalid("scheme.bval", format!("{} must be positive", s.bval)));
        }
        let p = &self.phantom;
        if p.height == 0 || p.width == 0 {
            return Err(invalid("phantom", "height and width must be positive"));
        }
        if ![p.d_par, p.d_perp, p.d_iso].iter().all(|d| *d > 0.0 && d.is_finite()) || !(p.sigma >= 0.0) {
            return Err(invalid("phantom", "diffusivities must be positive and sigma non-negative"));
        }
        for (name, split) in self.dataset.splits() {
            if split.slices == 0 {
                return Err(invalid(&format!("dataset.{name}.slices"), "must be positive"));
            }
        }
        self.model.validate().map_err(|e| invalid("model", e))?;
        if p.height % self.model.patch != 0 || p.width % self.model.patch != 0 {
            return Err(invalid(
                "model.patch",
                format!("{} does not divide the {}x{} phantom", self.model.patch, p.height, p.width),
            ));
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        if self.train.schedule.timesteps != self.model.timesteps {
            return Err(invalid(
                "train.schedule.timesteps",
                format!("{} differs from model.timesteps {}", self.train.schedule.timesteps, self.model.timesteps),
            ));
        }
        if self.sampler.steps > self.model.timesteps {
            return Err(invalid("sampler.steps", format!("exceeds {} timesteps", self.model.timesteps)));
        }
        self.sampler.validate().map_err(|e| invalid("sampler", e))?;
        let m = &self.monitor;
        if !(m.val_mask_ratio > 0.0 && m.val_mask_ratio < 1.0) {
            return Err(invalid("monitor.val_mask_ratio", "must lie in (0, 1)"));
        }
        let g = &self.gridsearch;
        if g.lambda_oc.is_empty() || g.lambda_scc.is_empty() {
            return Err(invalid("gridsearch", "grids must be non-empty"));
        }
        if g.lambda_oc.iter().chain(&g.lambda_scc).any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(invalid("gridsearch", "weights must be finite and non-negative"));
        }
        if g.slices == 0 || g.slices > self.dataset.val.slices {
            return Err(invalid("gridsearch.slices", format!("must lie in [1, {}]", self.dataset.val.slices)));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config(format!("empty override key in {key:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let cfg = ExperimentConfig::load(None, &["model.dim=32".into(), "sampler.weights.lambda_oc=0".into()]).unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.sampler.weights.lambda_oc, 0.0);
        let cfg = ExperimentConfig::load(None, &["output_dir=elsewhere".into()]).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::load(None, &["model.dimm=3".into()]).unwrap_err();
        assert!(e.to_string().contains("model"), "{e}");
        let e = ExperimentConfig::load(None, &["train.iterations=\"many\"".into()]).unwrap_err();
        assert!(e.to_string().contains("train.iterations"), "{e}");
        let e = ExperimentConfig::load(None, &["scheme.n_in=80".into()]).unwrap_err();
        assert!(e.to_string().contains("scheme.n_in"), "{e}");
        assert!(ExperimentConfig::load(None, &["model.dim".into()]).is_err());
    }
}

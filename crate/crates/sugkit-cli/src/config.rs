//! Run configuration: one declarative TOML file, every key overridable by a
//! CLI flag of the same name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sugkit::error::{CoreError, Result};
use sugkit::grpo::{GrpoConfig, Sampler};
use sugkit::QabsParams;

/// All tunables under their published names (`K`, `G`, `R_min`, ...), plus
/// artifact paths, the master seed, and the training-loop knobs that have no
/// published name (those stay snake_case).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Candidate slots in the assembled context.
    pub m: usize,
    /// Hot-word slots in the assembled context.
    pub n: usize,
    /// Suggestion count / reward head size.
    #[serde(rename = "K")]
    pub k: usize,
    /// Group size for policy training.
    #[serde(rename = "G")]
    pub g: usize,
    /// Ratio clip half-width.
    pub eps: f64,
    /// Advantage denominator smoothing.
    pub delta: f64,
    pub lambda_gap: f64,
    pub lambda_hit: f64,
    pub lambda_rank: f64,
    pub lambda_fmt: f64,
    pub lambda_miss: f64,
    pub lambda_order: f64,
    /// Score gate for accelerated decoding.
    pub tau: f64,
    /// Saturation multiplier for accelerated decoding.
    pub alpha: f64,
    /// Fail-safe minimum result count.
    #[serde(rename = "R_min")]
    pub r_min: usize,
    /// Score window length.
    #[serde(rename = "K_win")]
    pub k_win: usize,
    /// Decode step budget.
    #[serde(rename = "T")]
    pub t: usize,
    /// Per-beam expansion width.
    #[serde(rename = "K_search")]
    pub k_search: usize,
    /// Policy-training learning rate.
    pub lr: f64,
    /// KL coefficient; only 0 is supported.
    pub beta: f64,
    /// Master seed; all randomness flows from it through named substreams.
    pub seed: u64,
    pub sampler: Sampler,
    /// Mining window length in days.
    pub window: u32,
    /// Scorer context length in tokens.
    pub order: usize,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    /// Policy-training optimisation steps.
    pub steps: usize,
    /// Instances per policy-training step.
    pub batch_size: usize,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            m: 10,
            n: 10,
            k: 12,
            g: 16,
            eps: 0.1,
            delta: 1e-4,
            lambda_gap: 1.0,
            lambda_hit: 1.0,
            lambda_rank: 2.0,
            lambda_fmt: 4.0,
            lambda_miss: 1.0,
            lambda_order: 1.5,
            tau: -15.0,
            alpha: 1.8,
            r_min: 4,
            k_win: 15,
            t: 15,
            k_search: 12,
            lr: 2e-6,
            beta: 0.0,
            seed: 0,
            sampler: Sampler::Beam,
            window: 7,
            order: 5,
            sft_epochs: 10,
            sft_lr: 1.0,
            steps: 50,
            batch_size: 8,
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub logs: PathBuf,
    pub index: PathBuf,
    pub checkpoint: PathBuf,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub fixtures: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            logs: "logs.jsonl".into(),
            index: "index.json".into(),
            checkpoint: "model.json".into(),
            train_data: "train.jsonl".into(),
            eval_data: "eval.jsonl".into(),
            fixtures: "fixtures.jsonl".into(),
            reports: "reports".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Checks every downstream module's parameter invariants up front so a
    /// bad file fails before any artifact is touched.
    pub fn validate(&self) -> Result<()> {
        self.grpo().validate()?;
        self.qabs().validate()?;
        if self.window == 0 {
            return Err(CoreError::Config("window must be at least 1 day".into()));
        }
        if self.order == 0 {
            return Err(CoreError::Config("order must be at least 1".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.sft_epochs == 0 {
            return Err(CoreError::Config(
                "steps, batch_size and sft_epochs must all be at least 1".into(),
            ));
        }
        if !(self.sft_lr > 0.0) || !(self.lr > 0.0) {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            g: self.g,
            k: self.k,
            eps: self.eps,
            delta: self.delta,
            beta: self.beta,
            lambda_gap: self.lambda_gap,
            lambda_hit: self.lambda_hit,
            lambda_rank: self.lambda_rank,
            lambda_fmt: self.lambda_fmt,
            lambda_miss: self.lambda_miss,
            lambda_order: self.lambda_order,
            lr: self.lr,
            t: self.t,
            sampler: self.sampler,
        }
    }

    pub fn qabs(&self) -> QabsParams {
        QabsParams {
            k: self.k,
            t: self.t,
            tau: self.tau,
            alpha: self.alpha,
            r_min: self.r_min,
            k_search: self.k_search,
            k_win: self.k_win,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");

        let mut cfg = RunConfig::default();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);

        cfg.k = 6;
        cfg.tau = -9.5;
        cfg.sampler = Sampler::Random;
        cfg.paths.index = "/data/idx.json".into();
        cfg.save(&path).unwrap();
        let reloaded = RunConfig::load(&path).unwrap();
        assert_eq!(reloaded, cfg);

        reloaded.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), reloaded);
    }

    #[test]
    fn published_key_names_are_used() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        RunConfig::default().save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["K = ", "G = ", "R_min = ", "K_win = ", "T = ", "K_search = "] {
            assert!(text.contains(key), "missing {key:?} in:\n{text}");
        }

        let sparse: RunConfig = toml::from_str("K = 4\nT = 9\n").unwrap();
        assert_eq!(sparse.k, 4);
        assert_eq!(sparse.t, 9);
        assert_eq!(sparse.g, 16);

        assert!(toml::from_str::<RunConfig>("k = 4\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.beta = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.g = cfg.k;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.window = 0;
        assert!(cfg.validate().is_err());
    }
}

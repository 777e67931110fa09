//! TOML experiment configuration.
//!
//! Every knob the harness passes downstream lives here. Unknown keys are
//! rejected at every level, and [`ExperimentConfig::hash`] fingerprints the
//! parsed values (not the file text) so reformatting a config does not
//! invalidate artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierConfig, KStarMode};
use crate::diffusion::{build_schedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, TrainRegime};
use crate::synth::{NoiseParams, StyleMix, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper_latency: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_cap: Option<usize>,
}

impl TaskConfig {
    /// The task's built-in defaults with any overrides applied.
    pub fn spec(&self) -> Result<TaskSpec> {
        let mut t = TaskSpec::new(self.kind);
        if let Some(v) = self.v_max {
            t.limits.v_max = v;
        }
        if let Some(v) = self.theta_max {
            t.limits.theta_max = v;
        }
        if let Some(v) = self.gripper_latency {
            t.limits.gripper_latency = v;
        }
        if let Some(v) = self.grasp_radius {
            t.grasp_radius = v;
        }
        if let Some(v) = self.goal_radius {
            t.goal_radius = v;
        }
        if let Some(v) = self.episode_cap {
            t.episode_cap = v;
        }
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub robot_demos: usize,
    pub human_demos: usize,
    /// Held-out demos per embodiment for curves and accuracy.
    pub validation_demos: usize,
    pub style_mix: StyleMix,
    pub noise: NoiseParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            robot_demos: 5,
            human_demos: 100,
            validation_demos: 20,
            style_mix: StyleMix::default(),
            noise: NoiseParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    pub mode: KStarMode,
    /// Keep every n-th curve point in the annotation file.
    pub curve_stride: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            mode: KStarMode::PerChunk,
            curve_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub regimes: Vec<TrainRegime>,
    /// Prediction horizon S.
    pub horizon: usize,
    pub action_horizon: usize,
    pub inference_steps: usize,
    pub train: PolicyConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            regimes: TrainRegime::ALL.to_vec(),
            horizon: 8,
            action_horizon: 8,
            inference_steps: 20,
            train: PolicyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_rollouts: usize,
    /// Training seeds; each gets its own classifier, annotation and policies.
    pub seeds: Vec<u64>,
    /// Adds a DemoDiffusion row (NAIVE early, ROBOT late).
    pub demodiffusion: bool,
    pub demodiffusion_split: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 20,
            seeds: vec![0, 1, 2],
            demodiffusion: false,
            demodiffusion_split: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Noise levels for the overlap curves; empty means every step.
    pub ks: Vec<usize>,
    /// Diagnostic KL threshold in nats.
    pub epsilon: f64,
    /// Compute curves on the held-out split instead of the training split.
    pub heldout: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            ks: vec![0, 1, 2, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
            epsilon: 0.05,
            heldout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub annotation: AnnotationConfig,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.task.spec()?;
        self.data.style_mix.validate()?;
        build_schedule(self.schedule)?;
        let positive = [
            ("data.robot_demos", self.data.robot_demos),
            ("data.human_demos", self.data.human_demos),
            ("data.validation_demos", self.data.validation_demos),
            ("classifier.steps", self.classifier.steps),
            ("classifier.batch", self.classifier.batch),
            ("classifier.n_draws", self.classifier.n_draws),
            ("annotation.curve_stride", self.annotation.curve_stride),
            ("policy.horizon", self.policy.horizon),
            ("policy.action_horizon", self.policy.action_horizon),
            ("policy.inference_steps", self.policy.inference_steps),
            ("policy.steps", self.policy.train.steps),
            ("policy.batch", self.policy.train.batch),
            ("eval.n_rollouts", self.eval.n_rollouts),
            ("eval.seeds", self.eval.seeds.len()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.policy.action_horizon > self.policy.horizon {
            return Err(Error::Config(
                "policy.action_horizon cannot exceed policy.horizon".into(),
            ));
        }
        if self.policy.inference_steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "policy.inference_steps {} exceeds schedule.steps {}",
                self.policy.inference_steps, self.schedule.steps
            )));
        }
        if self.policy.regimes.is_empty() {
            return Err(Error::Config("policy.regimes is empty".into()));
        }
        let mut seen = self.policy.regimes.clone();
        seen.sort_by_key(|r| r.name());
        seen.dedup();
        if seen.len() != self.policy.regimes.len() {
            return Err(Error::Config("policy.regimes lists a regime twice".into()));
        }
        let mut seeds = self.eval.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.eval.seeds.len() {
            return Err(Error::Config("eval.seeds lists a seed twice".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.demodiffusion_split) {
            return Err(Error::Config("eval.demodiffusion_split must be in [0, 1]".into()));
        }
        if self.eval.demodiffusion
            && !(self.policy.regimes.contains(&TrainRegime::Naive)
                && self.policy.regimes.contains(&TrainRegime::Robot))
        {
            return Err(Error::Config(
                "eval.demodiffusion needs both NAIVE and ROBOT in policy.regimes".into(),
            ));
        }
        if let Some(k) = self.analysis.ks.iter().find(|&&k| k > self.schedule.steps) {
            return Err(Error::Config(format!("analysis.ks contains {k} > K")));
        }
        if !(self.analysis.epsilon > 0.0) {
            return Err(Error::Config("analysis.epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        let text = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn analysis_ks(&self) -> Vec<usize> {
        if self.analysis.ks.is_empty() {
            (0..=self.schedule.steps).collect()
        } else {
            self.analysis.ks.clone()
        }
    }
}

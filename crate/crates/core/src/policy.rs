//! Conditional diffusion policies trained under the four data regimes.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::KStarAnnotation;
use crate::diffusion::{
    conditioned_width, ddpm_sample, ddpm_sample_with, forward_noise, ActionChunk, Denoiser,
    NetDenoiser, NoiseSchedule, PosteriorVariance, ScheduleParams,
};
use crate::error::{Error, Result};
use crate::numeric::checkpoint::{load_net, save_net};
use crate::numeric::{Activation, AdamConfig, AdamState, Ema, FeedForwardNet, SeededRng};
use crate::synth::{Chunk, ChunkPolicy, DemoDataset, Normalizer, ACTION_DIM, STATE_DIM};
use crate::train::{apply_update, check_loss, InputBatch, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    Robot,
    Naive,
    Filtered,
    #[serde(rename = "xdiffusion")]
    XDiffusion,
}

impl TrainRegime {
    pub const ALL: [TrainRegime; 4] = [
        TrainRegime::Robot,
        TrainRegime::Naive,
        TrainRegime::Filtered,
        TrainRegime::XDiffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainRegime::Robot => "robot",
            TrainRegime::Naive => "naive",
            TrainRegime::Filtered => "filtered",
            TrainRegime::XDiffusion => "xdiffusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

impl std::fmt::Display for TrainRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub human_sample_frac: f64,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    /// Parameter EMA; off unless set.
    pub ema_decay: Option<f64>,
    pub lr_schedule: LrSchedule,
    /// Robot validation loss is recorded every this many steps (0 = never).
    pub val_every: usize,
    pub sampler_variance: PosteriorVariance,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch: 64,
            lr: 1e-3,
            human_sample_frac: 0.5,
            hidden: 128,
            depth: 3,
            activation: Activation::Silu,
            ema_decay: None,
            lr_schedule: LrSchedule::Constant,
            val_every: 0,
            sampler_variance: PosteriorVariance::PosteriorBeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub net: FeedForwardNet,
    pub normalizer: Normalizer,
    pub regime: TrainRegime,
    pub horizon: usize,
    pub schedule: ScheduleParams,
    pub seed: u64,
    /// Reverse-process noise used at inference.
    pub variance: PosteriorVariance,
}

/// Structured-text companion of a policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySidecar {
    pub regime: TrainRegime,
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub normalizer: Normalizer,
    pub schedule: ScheduleParams,
    pub seed: u64,
    #[serde(default)]
    pub variance: PosteriorVariance,
    #[serde(default)]
    pub meta: Option<serde_json::Value>,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

impl PolicyModel {
    pub fn chunk_len(&self) -> usize {
        self.horizon * ACTION_DIM
    }

    pub fn sidecar(&self) -> PolicySidecar {
        PolicySidecar {
            regime: self.regime,
            horizon: self.horizon,
            action_dim: ACTION_DIM,
            state_dim: STATE_DIM,
            normalizer: self.normalizer.clone(),
            schedule: self.schedule,
            seed: self.seed,
            variance: self.variance,
            meta: None,
        }
    }

    /// Writes the checkpoint and its `.json` sidecar (with optional metadata).
    pub fn save(&self, path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
        save_net(&self.net, path)?;
        let mut side = self.sidecar();
        side.meta = meta;
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        let sp = sidecar_path(path);
        std::fs::write(&sp, text).map_err(|e| Error::io(sp, e))
    }

    pub fn load(path: &Path) -> Result<(Self, PolicySidecar)> {
        let net = load_net(path)?;
        let sp = sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: PolicySidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: sp.clone(),
            record: 0,
            reason: e.to_string(),
        })?;
        let want = conditioned_width(side.horizon * side.action_dim, side.state_dim);
        if side.action_dim != ACTION_DIM
            || side.state_dim != STATE_DIM
            || net.input_width() != want
            || net.output_width() != side.horizon * side.action_dim
        {
            return Err(Error::Checkpoint(format!(
                "{} does not match its sidecar dimensions",
                path.display()
            )));
        }
        let model = PolicyModel {
            net,
            normalizer: side.normalizer.clone(),
            regime: side.regime,
            horizon: side.horizon,
            schedule: side.schedule,
            seed: side.seed,
            variance: side.variance,
        };
        Ok((model, side))
    }
}

/// Sample bookkeeping across a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounters {
    pub robot: u64,
    pub human_drawn: u64,
    /// Human samples whose loss weight was nonzero.
    pub human_passed: u64,
}

impl SampleCounters {
    pub fn total(&self) -> u64 {
        self.robot + self.human_drawn
    }

    /// Fraction of all samples that were human and contributed.
    pub fn effective_human_fraction(&self) -> f64 {
        self.human_passed as f64 / self.total().max(1) as f64
    }

    pub fn human_pass_rate(&self) -> f64 {
        self.human_passed as f64 / self.human_drawn.max(1) as f64
    }

    /// Mean number of contributing samples per batch.
    pub fn effective_batch(&self, steps: usize) -> f64 {
        (self.robot + self.human_passed) as f64 / steps.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct PolicyTraining {
    pub model: PolicyModel,
    pub loss_trace: Vec<f64>,
    /// `(step, loss)` on the robot validation set.
    pub val_trace: Vec<(usize, f64)>,
    pub counters: SampleCounters,
}

/// Inputs a regime may need.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub robot: &'a DemoDataset,
    pub human: Option<&'a DemoDataset>,
    pub annotation: Option<&'a KStarAnnotation>,
    /// Robot chunks for the validation-loss trace.
    pub validation: Option<&'a DemoDataset>,
}

struct HumanPool {
    chunks: Vec<Chunk>,
    k_star: Vec<usize>,
}

fn human_pool(
    regime: TrainRegime,
    inputs: &TrainInputs,
    horizon: usize,
    kmax: usize,
) -> Result<Option<HumanPool>> {
    if regime == TrainRegime::Robot {
        return Ok(None);
    }
    let d_h = inputs
        .human
        .ok_or_else(|| Error::Config(format!("{regime} needs a human dataset")))?;
    if d_h.normalizer()? != inputs.robot.normalizer()? {
        return Err(Error::Config("robot and human datasets use different normalizers".into()));
    }
    let mut chunks = d_h.chunks(horizon)?;
    let mut k_star = vec![0; chunks.len()];
    match regime {
        TrainRegime::Filtered => chunks.retain(|c| c.feasible),
        TrainRegime::XDiffusion => {
            let ann = inputs.annotation.ok_or_else(|| {
                Error::Config("XDIFFUSION needs a k* annotation of the human dataset".into())
            })?;
            if ann.steps != kmax {
                return Err(Error::Config(format!(
                    "annotation was made for K={}, schedule has K={kmax}",
                    ann.steps
                )));
            }
            let table = ann.table();
            for (c, ks) in chunks.iter().zip(&mut k_star) {
                *ks = *table.get(c.traj).and_then(|r| r.get(c.index)).ok_or_else(|| {
                    Error::Config(format!(
                        "annotation has no entry for trajectory {} chunk {}",
                        c.traj, c.index
                    ))
                })?;
            }
        }
        _ => {}
    }
    if chunks.is_empty() {
        return Err(Error::Config(format!("{regime} has no usable human chunks")));
    }
    k_star.truncate(chunks.len());
    Ok(Some(HumanPool { chunks, k_star }))
}

struct ValSet {
    rows: Vec<(usize, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl ValSet {
    fn new(ds: &DemoDataset, horizon: usize, kmax: usize, seed: u64) -> Result<Self> {
        let chunks = ds.chunks(horizon)?;
        let mut rng = SeededRng::with_stream(seed, 0x7661_6c00);
        let n = chunks.len().min(256);
        let rows = (0..n)
            .map(|i| {
                let c = &chunks[(i * chunks.len()) / n];
                let k = 1 + rng.index(kmax);
                let eps = rng.normal_vec(c.actions.len());
                (k, c.actions.clone(), c.state.clone(), eps)
            })
            .collect();
        Ok(Self { rows })
    }

    fn loss(&self, net: &FeedForwardNet, schedule: &NoiseSchedule) -> Result<f64> {
        let mut total = 0.0;
        for (k, a0, s, eps) in &self.rows {
            let noisy = forward_noise(schedule, a0, *k, eps)?;
            let pred = NetDenoiser(net).predict_eps(*k, &noisy, s)?;
            total += pred.iter().zip(eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
        }
        Ok(total / self.rows.len().max(1) as f64)
    }
}

/// Trains an ε-prediction policy. Each sample is human with probability
/// `human_sample_frac` (never for ROBOT), `k ~ U{1..K}`; XDIFFUSION zeroes the
/// loss of human samples with `k < k*`. The batch loss is divided by the full
/// batch size whether or not samples were masked.
pub fn train_policy(
    regime: TrainRegime,
    inputs: TrainInputs,
    schedule: &NoiseSchedule,
    cfg: &PolicyConfig,
    horizon: usize,
    seed: u64,
) -> Result<PolicyTraining> {
    if !(0.0..=1.0).contains(&cfg.human_sample_frac) {
        return Err(Error::Config(format!(
            "human_sample_frac must be in [0, 1], got {}",
            cfg.human_sample_frac
        )));
    }
    if cfg.batch == 0 || horizon == 0 {
        return Err(Error::Config("batch and horizon must be positive".into()));
    }
    let kmax = schedule.steps();
    let normalizer = inputs.robot.normalizer()?.clone();
    let robot = inputs.robot.chunks(horizon)?;
    if robot.is_empty() {
        return Err(Error::Config("robot dataset is empty".into()));
    }
    let human = human_pool(regime, &inputs, horizon, kmax)?;
    let frac = if human.is_some() {
        cfg.human_sample_frac
    } else {
        0.0
    };
    let val = match inputs.validation {
        Some(v) if cfg.val_every > 0 => Some(ValSet::new(v, horizon, kmax, seed)?),
        _ => None,
    };

    let mut rng = SeededRng::new(seed);
    let chunk_len = horizon * ACTION_DIM;
    let width = conditioned_width(chunk_len, STATE_DIM);
    let hidden = vec![cfg.hidden; cfg.depth];
    let mut net = FeedForwardNet::mlp(width, &hidden, chunk_len, cfg.activation, &mut rng);
    let mut adam = AdamState::for_net(&net, AdamConfig::default());
    let mut ema = cfg.ema_decay.map(|d| Ema::new(&net, d));
    let mut counters = SampleCounters::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut val_trace = Vec::new();
    let mut batch = InputBatch::new(cfg.batch, chunk_len, STATE_DIM);
    let mut eps = Array2::<f64>::zeros((cfg.batch, chunk_len));
    let mut weight = vec![0.0; cfg.batch];
    let inv_b = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        if let Some(v) = &val {
            if step % cfg.val_every == 0 {
                val_trace.push((step, v.loss(&net, schedule)?));
            }
        }
        for i in 0..cfg.batch {
            let from_human = rng.uniform() < frac;
            let (c, k_star) = match (&human, from_human) {
                (Some(h), true) => {
                    let j = rng.index(h.chunks.len());
                    (&h.chunks[j], Some(h.k_star[j]))
                }
                _ => (&robot[rng.index(robot.len())], None),
            };
            let k = 1 + rng.index(kmax);
            let mut e = eps.row_mut(i);
            let e = e.as_slice_mut().expect("standard layout");
            rng.fill_normal(e);
            let noisy = forward_noise(schedule, &c.actions, k, e)?;
            batch.set(i, k, &noisy, &c.state);
            weight[i] = match k_star {
                None => {
                    counters.robot += 1;
                    1.0
                }
                Some(ks) => {
                    counters.human_drawn += 1;
                    if k >= ks {
                        counters.human_passed += 1;
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
        let (mut diff, cache) = net.forward_train(batch.x.view())?;
        diff -= &eps;
        let mut loss = 0.0;
        for (i, mut row) in diff.rows_mut().into_iter().enumerate() {
            let w = weight[i];
            let sq: f64 = row.iter().map(|d| d * d).sum();
            loss += w * sq;
            row.mapv_inplace(|d| 2.0 * w * d * inv_b);
        }
        loss *= inv_b;
        trace.push(loss);
        check_loss(step, loss, &trace)?;
        let mut grads = net.backward_batch(&cache, diff.view())?;
        let lr = cfg.lr_schedule.at(cfg.lr, step, cfg.steps);
        apply_update(&mut net, &mut adam, &mut grads, lr)?;
        if let Some(e) = &mut ema {
            e.update(&net);
        }
    }
    let net = match ema {
        Some(e) => e.into_net(),
        None => net,
    };
    if let Some(v) = &val {
        val_trace.push((cfg.steps, v.loss(&net, schedule)?));
    }
    Ok(PolicyTraining {
        model: PolicyModel {
            net,
            normalizer,
            regime,
            horizon,
            schedule: schedule.params(),
            seed,
            variance: cfg.sampler_variance,
        },
        loss_trace: trace,
        val_trace,
        counters,
    })
}

fn finish_chunk(policy: &PolicyModel, normalized: &[f64]) -> Result<ActionChunk> {
    let mut raw = policy.normalizer.denormalize_actions(normalized);
    for row in raw.chunks_mut(ACTION_DIM) {
        row[3] = row[3].clamp(0.0, 1.0);
    }
    ActionChunk::new(policy.horizon, ACTION_DIM, raw)
}

/// Samples a normalized chunk, de-normalizes it and clamps the gripper to [0, 1].
pub fn infer_action(
    policy: &PolicyModel,
    schedule: &NoiseSchedule,
    state: &[f64],
    inference_steps: usize,
    rng: &mut SeededRng,
) -> Result<ActionChunk> {
    check_state(state)?;
    let s = policy.normalizer.normalize_state(state);
    let out = ddpm_sample(
        &NetDenoiser(&policy.net),
        schedule,
        &s,
        policy.chunk_len(),
        inference_steps,
        policy.variance,
        rng,
    )?;
    finish_chunk(policy, &out)
}

fn check_state(state: &[f64]) -> Result<()> {
    if state.len() != STATE_DIM {
        return Err(Error::Shape {
            expected: STATE_DIM,
            got: state.len(),
        });
    }
    Ok(())
}

/// Number of reverse updates handed to the human policy.
pub fn human_steps(split: f64, inference_steps: usize) -> usize {
    ((split * inference_steps as f64).ceil() as usize).min(inference_steps)
}

/// Runs the first `ceil(split * n)` reverse updates with `human` and the rest
/// with `robot`.
pub fn demodiffusion_sample(
    human: &PolicyModel,
    robot: &PolicyModel,
    schedule: &NoiseSchedule,
    state: &[f64],
    inference_steps: usize,
    split: f64,
    rng: &mut SeededRng,
) -> Result<ActionChunk> {
    if !(0.0..=1.0).contains(&split) {
        return Err(Error::Config(format!("split must be in [0, 1], got {split}")));
    }
    if human.horizon != robot.horizon || human.net.input_width() != robot.net.input_width() {
        return Err(Error::Shape {
            expected: robot.net.input_width(),
            got: human.net.input_width(),
        });
    }
    if human.normalizer != robot.normalizer {
        return Err(Error::Config("policies use different normalizers".into()));
    }
    check_state(state)?;
    let s = robot.normalizer.normalize_state(state);
    let n_h = human_steps(split, inference_steps);
    let out = ddpm_sample_with(
        schedule,
        robot.chunk_len(),
        inference_steps,
        robot.variance,
        rng,
        |i, k, x| {
            let net = if i < n_h { &human.net } else { &robot.net };
            NetDenoiser(net).predict_eps(k, x, &s)
        },
    )?;
    finish_chunk(robot, &out)
}

/// A trained policy as a closed-loop chunk sampler.
pub struct PolicySampler<'a> {
    pub policy: &'a PolicyModel,
    /// Set for DemoDiffusion: `(human policy, split)`.
    pub human: Option<(&'a PolicyModel, f64)>,
    pub schedule: &'a NoiseSchedule,
    pub inference_steps: usize,
    pub rng: SeededRng,
}

impl ChunkPolicy for PolicySampler<'_> {
    fn predict(&mut self, state: &[f64]) -> Result<ActionChunk> {
        match self.human {
            None => infer_action(
                self.policy,
                self.schedule,
                state,
                self.inference_steps,
                &mut self.rng,
            ),
            Some((h, split)) => demodiffusion_sample(
                h,
                self.policy,
                self.schedule,
                state,
                self.inference_steps,
                split,
                &mut self.rng,
            ),
        }
    }
}

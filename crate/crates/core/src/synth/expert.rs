//! Scripted demonstrators: the constraint-respecting robot expert and the
//! three human execution styles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{DemoDataset, Embodiment, Split, Trajectory};
use super::env::{contact_point, initial_world, unpack_state, ChunkPolicy, Dynamics, Outcome, World};
use super::oracle::feasibility_oracle;
use super::task::{TaskKind, TaskSpec, ACTION_DIM};
use crate::diffusion::ActionChunk;
use crate::error::{Error, Result};
use crate::numeric::SeededRng;
use crate::par;

const RETRY_BUDGET: usize = 16;
/// Scripted robot speed as a fraction of `v_max`.
const ROBOT_SPEED: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    TopDown,
    SideGrasp,
    FastSweep,
    ScriptedRobot,
}

impl Style {
    /// Whether demos in this style respect the robot limits by construction.
    pub fn robot_feasible(self) -> bool {
        matches!(self, Style::TopDown | Style::ScriptedRobot)
    }
}

/// Retargeting noise applied to human demos.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Half-width of the uniform per-step position jitter.
    pub position_jitter: f64,
    /// Half-width of the uniform per-step orientation jitter (radians).
    pub angle_jitter: f64,
    /// Open readings fall in `[gn/2, gn]`, closed in `[1 - gn, 1 - gn/2]`.
    pub gripper_noise: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            position_jitter: 0.006,
            angle_jitter: 0.02,
            gripper_noise: 0.12,
        }
    }
}

/// Fraction of human demos drawn per style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleMix(pub BTreeMap<Style, f64>);

impl StyleMix {
    pub fn new(entries: &[(Style, f64)]) -> Self {
        Self(entries.iter().copied().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("style mix is empty".into()));
        }
        if self.0.contains_key(&Style::ScriptedRobot) {
            return Err(Error::Config("scripted_robot is not a human style".into()));
        }
        if self.0.values().any(|&f| !(f >= 0.0)) {
            return Err(Error::Config("style fractions must be nonnegative".into()));
        }
        let total: f64 = self.0.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("style fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Probability mass on robot-feasible styles.
    pub fn feasible_mass(&self) -> f64 {
        self.0
            .iter()
            .filter(|(s, _)| s.robot_feasible())
            .map(|(_, f)| f)
            .sum()
    }

    fn draw(&self, rng: &mut SeededRng) -> Style {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut last = Style::TopDown;
        for (&s, &f) in &self.0 {
            acc += f;
            last = s;
            if u < acc {
                return s;
            }
        }
        last
    }
}

impl Default for StyleMix {
    fn default() -> Self {
        Self::new(&[
            (Style::TopDown, 0.5),
            (Style::SideGrasp, 0.3),
            (Style::FastSweep, 0.2),
        ])
    }
}

/// Per-demo execution parameters drawn from a style.
#[derive(Debug, Clone, Copy)]
pub struct Execution {
    pub style: Style,
    pub approach_speed: f64,
    pub transport_speed: f64,
    pub approach_theta: f64,
    /// Wrist angle at closure; differs from `approach_theta` only for side grasps.
    pub grasp_theta: f64,
    /// In-place rotation steps from `approach_theta` to `grasp_theta`.
    pub wrist_steps: usize,
    pub hold_steps: usize,
    pub noise: Option<NoiseParams>,
}

impl Execution {
    pub fn robot(task: &TaskSpec, approach_theta: f64) -> Self {
        let v = ROBOT_SPEED * task.limits.v_max;
        Self {
            style: Style::ScriptedRobot,
            approach_speed: v,
            transport_speed: v,
            approach_theta,
            grasp_theta: approach_theta,
            wrist_steps: 0,
            hold_steps: 1,
            noise: None,
        }
    }

    pub fn draw(style: Style, task: &TaskSpec, noise: &NoiseParams, rng: &mut SeededRng) -> Self {
        let v_max = task.limits.v_max;
        if style == Style::ScriptedRobot {
            let theta = rng.uniform_range(-0.15, 0.15);
            return Self::robot(task, theta);
        }
        // Largest nominal speed that stays under v_max once jitter is added.
        let safe = (0.95 * v_max - 2.0 * std::f64::consts::SQRT_2 * noise.position_jitter)
            .max(0.1 * v_max);
        let approach_speed = (rng.uniform_range(0.25, 0.45) * v_max).min(safe);
        let normal = (rng.uniform_range(0.25, 0.45) * v_max).min(safe);
        let approach_theta = rng.uniform_range(-0.2, 0.2);
        let (transport_speed, grasp_theta, wrist_steps) = match style {
            Style::TopDown => (normal, approach_theta, 0),
            // The hand arrives like a top-down grasp, then turns the wrist sideways.
            Style::SideGrasp => (normal, rng.uniform_range(1.1, 1.4), 3),
            // Careful approach, then a flick toward the goal.
            Style::FastSweep => (rng.uniform_range(1.6, 2.2) * v_max, approach_theta, 0),
            Style::ScriptedRobot => unreachable!(),
        };
        Self {
            style,
            approach_speed,
            transport_speed,
            approach_theta,
            grasp_theta,
            wrist_steps,
            hold_steps: 1 + rng.index(3),
            noise: Some(*noise),
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

struct Emitter<'a> {
    exec: &'a Execution,
    rng: &'a mut SeededRng,
    out: Vec<Vec<f64>>,
}

impl Emitter<'_> {
    fn push(&mut self, x: f64, y: f64, theta: f64, closed: bool) {
        let (mut x, mut y, mut theta) = (x, y, theta);
        let g = match self.exec.noise {
            Some(n) => {
                x += self.rng.uniform_range(-n.position_jitter, n.position_jitter);
                y += self.rng.uniform_range(-n.position_jitter, n.position_jitter);
                theta += self.rng.uniform_range(-n.angle_jitter, n.angle_jitter);
                let r = self.rng.uniform_range(0.5 * n.gripper_noise, n.gripper_noise);
                if closed {
                    1.0 - r
                } else {
                    r
                }
            }
            None => {
                if closed {
                    1.0
                } else {
                    0.0
                }
            }
        };
        self.out
            .push(vec![x.clamp(0.0, 1.0), y.clamp(0.0, 1.0), theta, g]);
    }
}

/// Plans target proprioceptions from `state` through release.
pub fn plan_from_state(
    task: &TaskSpec,
    state: &[f64],
    exec: &Execution,
    rng: &mut SeededRng,
) -> Vec<Vec<f64>> {
    let (q, object, angle, goal) = unpack_state(state);
    let mut em = Emitter {
        exec,
        rng,
        out: Vec::new(),
    };
    let holding = q[3] >= 0.5;
    let (grasp_pos, grasp_theta) = if holding {
        ([q[0], q[1]], q[2])
    } else {
        let c = contact_point(task, object, goal);
        let d = ((c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2)).sqrt();
        let mut theta = q[2];
        // Already at the contact point: only the wrist is left to turn.
        if d > 1e-9 {
            let n = ((d / exec.approach_speed).ceil() as usize).max(1);
            for i in 1..=n {
                let t = i as f64 / n as f64;
                em.push(
                    lerp(q[0], c[0], t),
                    lerp(q[1], c[1], t),
                    lerp(q[2], exec.approach_theta, t),
                    false,
                );
            }
            theta = exec.approach_theta;
        }
        for i in 1..=exec.wrist_steps {
            let t = i as f64 / exec.wrist_steps as f64;
            em.push(c[0], c[1], lerp(theta, exec.grasp_theta, t), false);
        }
        for _ in 0..=exec.hold_steps {
            em.push(c[0], c[1], exec.grasp_theta, true);
        }
        (c, exec.grasp_theta)
    };

    let offset = [object[0] - grasp_pos[0], object[1] - grasp_pos[1]];
    let target = [goal[0] - offset[0], goal[1] - offset[1]];
    let end_theta = match task.kind {
        TaskKind::Reorient => grasp_theta - angle,
        _ => grasp_theta,
    };
    let d = ((target[0] - grasp_pos[0]).powi(2) + (target[1] - grasp_pos[1]).powi(2)).sqrt();
    let m = ((d / exec.transport_speed).ceil() as usize).max(1);
    for j in 1..=m {
        let t = j as f64 / m as f64;
        em.push(
            lerp(grasp_pos[0], target[0], t),
            lerp(grasp_pos[1], target[1], t),
            lerp(grasp_theta, end_theta, t),
            true,
        );
    }
    em.push(target[0], target[1], end_theta, false);
    em.out
}

/// Runs `actions` through the world, recording the visited states.
fn record(world: &mut World, actions: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut states = vec![world.state()];
    let mut taken = Vec::with_capacity(actions.len());
    for a in actions {
        if world.is_done() {
            break;
        }
        world.step(&a);
        taken.push(a);
        states.push(world.state());
    }
    (states, taken)
}

fn demo(
    task: &TaskSpec,
    embodiment: Embodiment,
    style: Style,
    noise: &NoiseParams,
    rng: &mut SeededRng,
) -> (Trajectory, Option<Outcome>) {
    let seed = rng.next_u64();
    let dynamics = match embodiment {
        Embodiment::Robot => Dynamics::Robot,
        Embodiment::Human => Dynamics::Human,
    };
    let mut world = initial_world(task, dynamics, &mut SeededRng::new(seed));
    let exec = Execution::draw(style, task, noise, rng);
    let plan = plan_from_state(task, &world.state(), &exec, rng);
    let (states, actions) = record(&mut world, plan);
    let mut traj = Trajectory {
        embodiment,
        style,
        seed,
        states,
        actions,
        feasible: false,
    };
    traj.feasible = feasibility_oracle(&traj, task);
    (traj, world.outcome)
}

fn generate(
    task: &TaskSpec,
    n: usize,
    seed: u64,
    embodiment: Embodiment,
    pick_style: impl Fn(&mut SeededRng) -> Style + Sync,
    noise: &NoiseParams,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Config("need at least one demonstration".into()));
    }
    task.validate()?;
    let stream_base = match embodiment {
        Embodiment::Robot => 0,
        Embodiment::Human => 1u64 << 32,
    };
    let results = par::map_range(n, |i| {
        let mut rng = SeededRng::with_stream(seed, stream_base + i as u64);
        let style = pick_style(&mut rng);
        let mut last_reason = String::new();
        for _ in 0..RETRY_BUDGET {
            let (traj, outcome) = demo(task, embodiment, style, noise, &mut rng);
            let ok_outcome = outcome == Some(Outcome::Success);
            let ok_feasible = embodiment == Embodiment::Human || traj.feasible;
            if ok_outcome && ok_feasible {
                return Ok(traj);
            }
            last_reason = format!(
                "demo {i} ({style:?}) ended with {outcome:?}, feasible={}",
                traj.feasible
            );
        }
        Err(Error::Generation {
            seed,
            reason: last_reason,
        })
    });
    results.into_iter().collect()
}

/// Scripted, limit-respecting robot demonstrations.
pub fn generate_robot_demos(task: &TaskSpec, n: usize, seed: u64) -> Result<DemoDataset> {
    let trajs = generate(
        task,
        n,
        seed,
        Embodiment::Robot,
        |_| Style::ScriptedRobot,
        &NoiseParams::default(),
    )?;
    Ok(DemoDataset::new(*task, trajs, Split::Train))
}

/// Human demonstrations with styles drawn from `mix` and retargeting jitter.
pub fn generate_human_demos(
    task: &TaskSpec,
    n: usize,
    mix: &StyleMix,
    noise: &NoiseParams,
    seed: u64,
) -> Result<DemoDataset> {
    mix.validate()?;
    let trajs = generate(task, n, seed, Embodiment::Human, |rng| mix.draw(rng), noise)?;
    Ok(DemoDataset::new(*task, trajs, Split::Train))
}

/// Closed-loop execution of a style's planner; the robot style is the expert.
pub struct ScriptedPolicy {
    pub task: TaskSpec,
    pub exec: Execution,
    pub horizon: usize,
    rng: SeededRng,
}

impl ScriptedPolicy {
    pub fn expert(task: &TaskSpec, horizon: usize) -> Self {
        Self {
            task: *task,
            exec: Execution::robot(task, 0.0),
            horizon,
            rng: SeededRng::new(0),
        }
    }

    pub fn with_style(task: &TaskSpec, style: Style, horizon: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let exec = Execution::draw(style, task, &NoiseParams::default(), &mut rng);
        Self {
            task: *task,
            exec,
            horizon,
            rng,
        }
    }
}

impl ChunkPolicy for ScriptedPolicy {
    fn predict(&mut self, state: &[f64]) -> Result<ActionChunk> {
        let mut plan = plan_from_state(&self.task, state, &self.exec, &mut self.rng);
        let last = plan.last().cloned().unwrap_or_else(|| state[..ACTION_DIM].to_vec());
        plan.resize(self.horizon.max(plan.len()), last);
        plan.truncate(self.horizon);
        ActionChunk::from_rows(&plan)
    }
}

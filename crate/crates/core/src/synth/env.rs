//! Planar manipulation world and closed-loop rollouts.
//!
//! Commands are target proprioceptions `(x, y, theta, g)`. Under robot
//! dynamics the world clips displacements to `v_max`, ignores gripper toggles
//! that come too soon, and fails any grasp made with a clipped step, an
//! out-of-window approach angle, or too far from the contact point. Every
//! such correction counts as one infeasible-action event.

use serde::{Deserialize, Serialize};

use super::task::{TaskKind, TaskSpec, ACTION_DIM, STATE_DIM};
use crate::diffusion::ActionChunk;
use crate::error::Result;
use crate::numeric::SeededRng;

const CLOSED: f64 = 0.5;
const SPEED_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Enforces the robot limits.
    Robot,
    /// Executes commands verbatim (retargeted human motion).
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    GraspFailed,
    Misplaced,
    Timeout,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Grip {
    offset: [f64; 2],
    theta0: f64,
    angle0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub task: TaskSpec,
    pub dynamics: Dynamics,
    /// `(x, y, theta, g)`.
    pub proprio: [f64; 4],
    pub object: [f64; 2],
    pub object_angle: f64,
    pub goal: [f64; 2],
    grip: Option<Grip>,
    last_toggle: Option<usize>,
    pub t: usize,
    pub infeasible_events: usize,
    pub outcome: Option<Outcome>,
    /// Why the episode ended badly, when the world knows.
    pub note: Option<String>,
}

/// Fresh initial condition drawn from the task's randomization ranges.
pub fn initial_world(task: &TaskSpec, dynamics: Dynamics, rng: &mut SeededRng) -> World {
    let ee = task.ee_start.sample(rng);
    let object = task.object_start.sample(rng);
    let goal = task.goal_center.sample(rng);
    let object_angle = rng.uniform_range(task.object_angle[0], task.object_angle[1]);
    World {
        task: *task,
        dynamics,
        proprio: [ee[0], ee[1], 0.0, 0.0],
        object,
        object_angle,
        goal,
        grip: None,
        last_toggle: None,
        t: 0,
        infeasible_events: 0,
        outcome: None,
        note: None,
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl World {
    pub fn state(&self) -> Vec<f64> {
        let [x, y, th, g] = self.proprio;
        vec![
            x,
            y,
            th,
            g,
            self.object[0],
            self.object[1],
            self.object_angle,
            self.goal[0] - self.object[0],
            self.goal[1] - self.object[1],
        ]
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn holding(&self) -> bool {
        self.grip.is_some()
    }

    /// Where the end effector must be when the gripper closes.
    pub fn contact_point(&self) -> [f64; 2] {
        contact_point(&self.task, self.object, self.goal)
    }

    pub fn step(&mut self, action: &[f64]) {
        if self.is_done() {
            return;
        }
        if action.len() != ACTION_DIM || action.iter().any(|v| !v.is_finite()) {
            self.outcome = Some(Outcome::NonFinite);
            return;
        }
        let robot = self.dynamics == Dynamics::Robot;
        let v_max = self.task.limits.v_max;

        let mut d = [action[0] - self.proprio[0], action[1] - self.proprio[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let mut clipped = false;
        if robot && n > v_max * (1.0 + SPEED_SLACK) {
            d = [d[0] * v_max / n, d[1] * v_max / n];
            clipped = true;
            self.infeasible_events += 1;
        }
        let pos = if clipped {
            [
                (self.proprio[0] + d[0]).clamp(0.0, 1.0),
                (self.proprio[1] + d[1]).clamp(0.0, 1.0),
            ]
        } else {
            [action[0].clamp(0.0, 1.0), action[1].clamp(0.0, 1.0)]
        };
        let theta = action[2];
        let mut g = action[3].clamp(0.0, 1.0);

        let was_closed = self.proprio[3] >= CLOSED;
        let mut toggled = (g >= CLOSED) != was_closed;
        if toggled && robot {
            if let Some(last) = self.last_toggle {
                if self.t - last < self.task.limits.gripper_latency {
                    self.infeasible_events += 1;
                    g = self.proprio[3];
                    toggled = false;
                }
            }
        }
        if toggled {
            self.last_toggle = Some(self.t);
        }

        self.proprio = [pos[0], pos[1], theta, g];
        self.t += 1;

        if toggled && g >= CLOSED {
            let mut ok = true;
            if robot && theta.abs() > self.task.limits.theta_max {
                self.infeasible_events += 1;
                ok = false;
            }
            if robot && clipped {
                ok = false;
            }
            let miss = dist(pos, self.contact_point());
            if miss > self.task.grasp_radius {
                ok = false;
            }
            if ok {
                self.grip = Some(Grip {
                    offset: [self.object[0] - pos[0], self.object[1] - pos[1]],
                    theta0: theta,
                    angle0: self.object_angle,
                });
            } else {
                self.note = Some(format!(
                    "grasp failed: miss {miss:.3}, theta {theta:.3}, clipped {clipped}"
                ));
                self.outcome = Some(Outcome::GraspFailed);
                return;
            }
        } else if let Some(grip) = self.grip {
            self.object = [pos[0] + grip.offset[0], pos[1] + grip.offset[1]];
            if self.task.kind == TaskKind::Reorient {
                self.object_angle = grip.angle0 + (theta - grip.theta0);
            }
            if toggled {
                self.grip = None;
                self.outcome = Some(if self.placed() {
                    Outcome::Success
                } else {
                    Outcome::Misplaced
                });
                return;
            }
        }
        if self.t >= self.task.episode_cap {
            self.outcome = Some(Outcome::Timeout);
        }
    }

    fn placed(&self) -> bool {
        let in_goal = dist(self.object, self.goal) <= self.task.goal_radius;
        let upright = self.task.kind != TaskKind::Reorient
            || self.object_angle.abs() <= self.task.upright_tol;
        in_goal && upright
    }
}

pub fn contact_point(task: &TaskSpec, object: [f64; 2], goal: [f64; 2]) -> [f64; 2] {
    if task.push_offset == 0.0 {
        return object;
    }
    let d = [goal[0] - object[0], goal[1] - object[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
    [
        object[0] - task.push_offset * d[0] / n,
        object[1] - task.push_offset * d[1] / n,
    ]
}

/// Decodes `[x, y, theta, g, ox, oy, angle, gdx, gdy]` back into world fields.
pub(crate) fn unpack_state(state: &[f64]) -> ([f64; 4], [f64; 2], f64, [f64; 2]) {
    debug_assert_eq!(state.len(), STATE_DIM);
    let proprio = [state[0], state[1], state[2], state[3]];
    let object = [state[4], state[5]];
    let goal = [state[4] + state[7], state[5] + state[8]];
    (proprio, object, state[6], goal)
}

/// Maps a raw state to an action chunk.
pub trait ChunkPolicy {
    fn predict(&mut self, state: &[f64]) -> Result<ActionChunk>;
}

impl<F> ChunkPolicy for F
where
    F: FnMut(&[f64]) -> Result<ActionChunk>,
{
    fn predict(&mut self, state: &[f64]) -> Result<ActionChunk> {
        self(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub success: bool,
    pub steps: usize,
    pub infeasible_events: usize,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Closed-loop episode executing the first `action_horizon` actions of each chunk.
pub fn env_rollout<P: ChunkPolicy + ?Sized>(
    task: &TaskSpec,
    policy: &mut P,
    seed: u64,
    action_horizon: usize,
) -> RolloutOutcome {
    let mut rng = SeededRng::new(seed);
    let mut world = initial_world(task, Dynamics::Robot, &mut rng);
    let horizon = action_horizon.max(1);
    let mut diagnostic = None;
    while !world.is_done() {
        match policy.predict(&world.state()) {
            Ok(chunk) => {
                for a in chunk.rows().take(horizon) {
                    world.step(a);
                    if world.is_done() {
                        break;
                    }
                }
                if world.outcome == Some(Outcome::NonFinite) {
                    diagnostic = Some(format!("non-finite action at step {}", world.t));
                }
            }
            Err(e) => {
                world.outcome = Some(Outcome::NonFinite);
                diagnostic = Some(format!("policy error at step {}: {e}", world.t));
            }
        }
    }
    let outcome = world.outcome.expect("loop exits when done");
    let diagnostic = diagnostic.or(world.note);
    RolloutOutcome {
        success: outcome == Outcome::Success,
        steps: world.t,
        infeasible_events: world.infeasible_events,
        outcome,
        diagnostic,
    }
}

/// Replays a fixed action list open-loop from the world drawn with `seed`.
pub fn replay(task: &TaskSpec, dynamics: Dynamics, seed: u64, actions: &[Vec<f64>]) -> World {
    let mut rng = SeededRng::new(seed);
    let mut world = initial_world(task, dynamics, &mut rng);
    for a in actions {
        world.step(a);
        if world.is_done() {
            break;
        }
    }
    world
}

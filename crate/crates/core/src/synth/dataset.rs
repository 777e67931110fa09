use serde::{Deserialize, Serialize};

use super::expert::Style;
use super::task::{TaskSpec, ACTION_DIM, STATE_DIM};
use crate::diffusion::ActionChunk;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embodiment {
    Human,
    Robot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub embodiment: Embodiment,
    pub style: Style,
    /// Seed of the initial condition; replaying from it reproduces the world.
    pub seed: u64,
    #[serde(serialize_with = "crate::fmt::nested_f64_17")]
    pub states: Vec<Vec<f64>>,
    /// `actions[t]` is the proprioception of `states[t + 1]`.
    #[serde(serialize_with = "crate::fmt::nested_f64_17")]
    pub actions: Vec<Vec<f64>>,
    pub feasible: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Stride-1 chunks of `horizon` actions, tail padded with the last action.
    pub fn chunks(&self, horizon: usize) -> Vec<ActionChunk> {
        let n = self.actions.len();
        (0..n)
            .map(|t| {
                let mut data = Vec::with_capacity(horizon * ACTION_DIM);
                for i in 0..horizon {
                    data.extend_from_slice(&self.actions[(t + i).min(n - 1)]);
                }
                ActionChunk {
                    horizon,
                    dim: ACTION_DIM,
                    data,
                }
            })
            .collect()
    }
}

/// Per-dimension affine normalizer fit on robot data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    #[serde(serialize_with = "crate::fmt::vec_f64_17")]
    pub action_mean: Vec<f64>,
    #[serde(serialize_with = "crate::fmt::vec_f64_17")]
    pub action_std: Vec<f64>,
    #[serde(serialize_with = "crate::fmt::vec_f64_17")]
    pub state_mean: Vec<f64>,
    #[serde(serialize_with = "crate::fmt::vec_f64_17")]
    pub state_std: Vec<f64>,
}

/// Dimensions with less spread than this are scaled by it instead.
pub const STD_FLOOR: f64 = 1e-2;

fn moments(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = rows.collect();
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

impl Normalizer {
    /// Fits on the robot trajectories of `ds` (its states and actions).
    pub fn fit_robot(ds: &DemoDataset) -> Result<Self> {
        let robot: Vec<&Trajectory> = ds
            .trajectories
            .iter()
            .filter(|t| t.embodiment == Embodiment::Robot)
            .collect();
        if robot.is_empty() {
            return Err(Error::Config("normalizer needs robot trajectories".into()));
        }
        let (action_mean, action_std) = moments(
            robot.iter().flat_map(|t| t.actions.iter().cloned()),
            ACTION_DIM,
        );
        let (state_mean, state_std) = moments(
            robot.iter().flat_map(|t| t.states.iter().cloned()),
            STATE_DIM,
        );
        Ok(Self {
            action_mean,
            action_std,
            state_mean,
            state_std,
        })
    }

    pub fn identity() -> Self {
        Self {
            action_mean: vec![0.0; ACTION_DIM],
            action_std: vec![1.0; ACTION_DIM],
            state_mean: vec![0.0; STATE_DIM],
            state_std: vec![1.0; STATE_DIM],
        }
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((v, m), sd)| (v - m) / sd)
            .collect()
    }

    /// Normalizes a flattened chunk row by row.
    pub fn normalize_actions(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = i % ACTION_DIM;
                (v - self.action_mean[d]) / self.action_std[d]
            })
            .collect()
    }

    pub fn denormalize_actions(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = i % ACTION_DIM;
                v * self.action_std[d] + self.action_mean[d]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub task: TaskSpec,
    pub trajectories: Vec<Trajectory>,
    pub normalizer: Option<Normalizer>,
    pub split: Split,
}

/// One normalized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub traj: usize,
    pub index: usize,
    pub embodiment: Embodiment,
    pub style: Style,
    pub feasible: bool,
    pub state: Vec<f64>,
    pub actions: Vec<f64>,
    /// Current proprioception in action coordinates.
    pub anchor: Vec<f64>,
}

impl DemoDataset {
    pub fn new(task: TaskSpec, trajectories: Vec<Trajectory>, split: Split) -> Self {
        Self {
            task,
            trajectories,
            normalizer: None,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn feasible_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.feasible).count()
    }

    pub fn normalizer(&self) -> Result<&Normalizer> {
        self.normalizer
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no normalizer attached".into()))
    }

    /// All stride-1 chunks, normalized with the attached statistics.
    pub fn chunks(&self, horizon: usize) -> Result<Vec<Chunk>> {
        let norm = self.normalizer()?;
        let mut out = Vec::new();
        for (ti, t) in self.trajectories.iter().enumerate() {
            for (ci, c) in t.chunks(horizon).into_iter().enumerate() {
                out.push(Chunk {
                    traj: ti,
                    index: ci,
                    embodiment: t.embodiment,
                    style: t.style,
                    feasible: t.feasible,
                    state: norm.normalize_state(&t.states[ci]),
                    actions: norm.normalize_actions(&c.data),
                    anchor: norm.normalize_actions(&t.states[ci][..ACTION_DIM]),
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::expert::{generate_human_demos, generate_robot_demos, NoiseParams, StyleMix};
    use crate::synth::task::TaskKind;

    #[test]
    fn action_is_next_proprioception() {
        let task = TaskSpec::new(TaskKind::PickPlace);
        let r = generate_robot_demos(&task, 4, 1).unwrap();
        let h = generate_human_demos(&task, 6, &StyleMix::default(), &NoiseParams::default(), 1)
            .unwrap();
        for t in r.trajectories.iter().chain(&h.trajectories) {
            assert_eq!(t.states.len(), t.actions.len() + 1);
            for (i, a) in t.actions.iter().enumerate() {
                assert_eq!(&t.states[i + 1][..ACTION_DIM], &a[..]);
            }
        }
    }

    #[test]
    fn chunking_stride_and_padding() {
        let task = TaskSpec::new(TaskKind::PickPlace);
        let r = generate_robot_demos(&task, 2, 5).unwrap();
        let t = &r.trajectories[0];
        let chunks = t.chunks(8);
        assert_eq!(chunks.len(), t.actions.len());
        let firsts: Vec<Vec<f64>> = chunks.iter().map(|c| c.row(0).to_vec()).collect();
        assert_eq!(firsts, t.actions);
        let last = chunks.last().unwrap();
        assert!(last.rows().all(|r| r == &t.actions.last().unwrap()[..]));
    }

    #[test]
    fn normalizer_standardizes_robot_actions() {
        let task = TaskSpec::new(TaskKind::PickPlace);
        let mut r = generate_robot_demos(&task, 10, 2).unwrap();
        let norm = Normalizer::fit_robot(&r).unwrap();
        r.normalizer = Some(norm.clone());
        let rows: Vec<f64> = r
            .trajectories
            .iter()
            .flat_map(|t| t.actions.iter().flat_map(|a| norm.normalize_actions(a)))
            .collect();
        let n = rows.len() / ACTION_DIM;
        for d in [0, 1, 3] {
            let m: f64 = (0..n).map(|i| rows[i * ACTION_DIM + d]).sum::<f64>() / n as f64;
            assert!(m.abs() < 1e-9, "dim {d} mean {m}");
        }
        let flat = vec![0.3, 0.7, 0.1, 1.0];
        let back = norm.denormalize_actions(&norm.normalize_actions(&flat));
        for (a, b) in back.iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

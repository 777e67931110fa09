//! Synthetic 2D manipulation benchmark with human and robot embodiments.

pub mod dataset;
pub mod env;
pub mod expert;
pub mod io;
pub mod oracle;
pub mod task;

pub use dataset::{Chunk, DemoDataset, Embodiment, Normalizer, Split, Trajectory};
pub use env::{env_rollout, replay, ChunkPolicy, Dynamics, Outcome, RolloutOutcome, World};
pub use expert::{
    generate_human_demos, generate_robot_demos, NoiseParams, ScriptedPolicy, Style, StyleMix,
};
pub use io::{load_dataset, save_dataset};
pub use oracle::feasibility_oracle;
pub use task::{TaskKind, TaskSpec, ACTION_DIM, STATE_DIM};

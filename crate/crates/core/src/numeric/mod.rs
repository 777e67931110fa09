//! Deterministic numeric substrate: random streams, dense feedforward nets
//! with analytic gradients, and the Adam optimizer.

pub mod checkpoint;
pub mod net;
pub mod optim;
pub mod rng;

pub use net::{sigmoid, Activation, FeedForwardNet, ForwardCache, Gradients, Layer};
pub use optim::{AdamConfig, AdamState, Ema};
pub use rng::{normal_sample, SeededRng};

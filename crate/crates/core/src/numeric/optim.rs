use serde::{Deserialize, Serialize};

use super::net::{FeedForwardNet, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    /// Allocates zeroed moments shaped like `shapes` (one length per parameter buffer).
    pub fn new(shapes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_net(net: &FeedForwardNet, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Self::new(&shapes, config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moment_shapes(&self) -> Vec<usize> {
        self.first.iter().map(|m| m.len()).collect()
    }

    /// One update over matching parameter and gradient buffers.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (t, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != self.first[t].len() || g.len() != p.len() {
                return Err(Error::Shape {
                    expected: self.first[t].len(),
                    got: g.len(),
                });
            }
            if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::non_finite(
                    "adam gradient",
                    format!("tensor {t} element {i} = {v} at step {}", self.step + 1),
                ));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (t, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[t];
            let v = &mut self.second[t];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut FeedForwardNet, grads: &Gradients, lr: f64) -> Result<()> {
        self.step(net.param_slices_mut(), grads.slices(), lr)
    }
}

/// Exponential moving average of network parameters:
/// `shadow <- decay * shadow + (1 - decay) * params`.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: FeedForwardNet,
}

impl Ema {
    pub fn new(net: &FeedForwardNet, decay: f64) -> Self {
        Self {
            decay,
            shadow: net.clone(),
        }
    }

    pub fn update(&mut self, net: &FeedForwardNet) {
        let d = self.decay;
        for (s, p) in self.shadow.param_slices_mut().into_iter().zip(net.param_slices()) {
            for (sv, &pv) in s.iter_mut().zip(p) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
    }

    pub fn into_net(self) -> FeedForwardNet {
        self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_like() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&[1], cfg);
        let mut p = [1.0];
        let g = [0.3];
        st.step(vec![&mut p[..]], vec![&g[..]], 1e-3).unwrap();
        // m_hat = g, v_hat = g^2  =>  delta = lr * g / (|g| + eps)
        let expected = 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8);
        assert_eq!(p[0], expected);
        assert!(((1.0 - p[0]) - 1e-3).abs() < 1e-10);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(&[3], AdamConfig::default());
        let mut p = [1.0, -2.0, 3.0];
        st.step(vec![&mut p[..]], vec![&[0.0; 3][..]], 0.1).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn non_finite_gradient_fails() {
        let mut st = AdamState::new(&[2], AdamConfig::default());
        let mut p = [0.0, 0.0];
        let err = st
            .step(vec![&mut p[..]], vec![&[1.0, f64::NAN][..]], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("element 1"), "{err}");
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut st = AdamState::new(&[1], AdamConfig::default());
        let mut p = [0.0];
        assert!(st.step(vec![&mut p[..]], vec![&[1.0][..]], 0.0).is_err());
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let mut rng = crate::numeric::SeededRng::new(1);
        let net = FeedForwardNet::mlp(4, &[5], 2, crate::numeric::Activation::Tanh, &mut rng);
        let st = AdamState::for_net(&net, AdamConfig::default());
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        assert_eq!(st.moment_shapes(), shapes);
    }

    #[test]
    fn ema_tracks_params() {
        let mut rng = crate::numeric::SeededRng::new(1);
        let net = FeedForwardNet::mlp(2, &[], 1, crate::numeric::Activation::Identity, &mut rng);
        let mut ema = Ema::new(&net, 0.5);
        let mut moved = net.clone();
        for s in moved.param_slices_mut() {
            s.iter_mut().for_each(|v| *v += 2.0);
        }
        ema.update(&moved);
        let shadow = ema.into_net();
        for (s, p) in shadow.param_slices().iter().zip(net.param_slices()) {
            for (a, b) in s.iter().zip(p) {
                assert!((a - (b + 1.0)).abs() < 1e-12);
            }
        }
    }
}

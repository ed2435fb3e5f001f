use serde::{Deserialize, Serialize};

use super::params::NetParams;

pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    RmsProp { decay: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::RmsProp {
            decay: 0.99,
            eps: 1e-8,
        }
    }
}

/// Apply one update from the accumulated gradients. Frozen groups are skipped.
pub fn optimizer_step(p: &mut NetParams, lr: f64, kind: OptimizerKind) {
    match kind {
        OptimizerKind::Sgd => p.update_trainable(|v, g, _| {
            for (x, gx) in v.iter_mut().zip(g) {
                *x -= lr * gx;
            }
        }),
        OptimizerKind::RmsProp { decay, eps } => p.update_trainable(|v, g, s| {
            for ((x, gx), sx) in v.iter_mut().zip(g).zip(s.iter_mut()) {
                *sx = decay * *sx + (1.0 - decay) * gx * gx;
                if *gx != 0.0 {
                    *x -= lr * gx / (sx.sqrt() + eps);
                }
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn scalar_rmsprop_matches_hand_update() {
        let mut p = NetParams::new();
        let id = p.add("w", "g", Tensor::vector(vec![0.5])).unwrap();
        p.accumulate(id, &Tensor::vector(vec![1.0])).unwrap();
        optimizer_step(&mut p, 0.01, OptimizerKind::default());
        // v = 0.01 * 1, step = 0.01 / (0.1 + 1e-8)
        let expect = 0.5 - 0.01 / (0.01f64.sqrt() + 1e-8);
        assert!((p.value(id).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_zero_gradient_are_untouched() {
        let mut p = NetParams::new();
        let a = p.add("a", "dec", Tensor::vector(vec![0.3, -0.2])).unwrap();
        let b = p.add("b", "enc", Tensor::vector(vec![1.25])).unwrap();
        p.freeze("dec");
        p.accumulate(a, &Tensor::vector(vec![5.0, -1.0])).unwrap();
        let before = p.group_bytes("dec");
        for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
            optimizer_step(&mut p, 0.1, kind);
        }
        assert_eq!(p.group_bytes("dec"), before);
        assert_eq!(p.value(b).data(), &[1.25]);
    }
}

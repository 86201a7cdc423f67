use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// `v ← μv + g`, `p ← p − ηv`, where `g` includes the weight-decay term.
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    /// Bias-corrected Adam.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::SgdMomentum {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerKind::SgdMomentum { lr, .. } | OptimizerKind::Adam { lr, .. } => *lr,
        }
    }

    fn set_lr(&mut self, value: f64) {
        match self {
            OptimizerKind::SgdMomentum { lr, .. } | OptimizerKind::Adam { lr, .. } => *lr = value,
        }
    }
}

/// Moment buffers for one parameter list; shapes are fixed at construction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new<'a>(kind: OptimizerKind, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => first.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            first,
            second,
            step: 0,
        }
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.kind.set_lr(lr);
    }

    /// Apply one update in place. `grads[i]` is the flat gradient of `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer parameter list",
                &[self.first.len()],
                &[params.len(), grads.len()],
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::shape(
                    format!("optimizer buffer {i}"),
                    &[self.first[i].len()],
                    &[p.len(), g.len()],
                ));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(self.first.iter_mut()) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        let grad = gv + weight_decay * *pv;
                        *vv = momentum * *vv + grad;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.iter())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor> {
        vec![
            Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
            Tensor::new(vec![2], vec![4.0, 0.0]).unwrap(),
        ]
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        for kind in [OptimizerKind::adam(0.0), OptimizerKind::sgd(0.0, 0.9, 0.0)] {
            let mut p = params();
            let before = p.clone();
            let mut st = OptimizerState::new(kind, &p);
            let g = [vec![0.3, -1.0, 2.0], vec![1.0, 1.0]];
            st.step(&mut p, &[&g[0], &g[1]]).unwrap();
            assert_eq!(p, before);
            assert_eq!(st.steps_taken(), 1);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let mut st = OptimizerState::new(OptimizerKind::adam(0.1), &p);
        let g = [vec![1.0; 3], vec![1.0; 2]];
        st.step(&mut p, &[&g[0], &g[1]]).unwrap();
        for (a, b) in p.iter().zip(&before) {
            for (x, y) in a.data().iter().zip(b.data()) {
                // m̂ = 1, v̂ = 1, step = 0.1 / (1 + 1e-8)
                assert!((y - x - 0.1).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn momentum_free_sgd_is_plain_sgd() {
        let mut p = params();
        let before = p.clone();
        let mut st = OptimizerState::new(OptimizerKind::sgd(0.5, 0.0, 0.0), &p);
        let g = [vec![1.0, 2.0, -1.0], vec![0.0, 4.0]];
        for _ in 0..3 {
            st.step(&mut p, &[&g[0], &g[1]]).unwrap();
        }
        for ((a, b), gv) in p.iter().zip(&before).zip(&g) {
            for ((x, y), gg) in a.data().iter().zip(b.data()).zip(gv) {
                assert_eq!(*x, y - 3.0 * 0.5 * gg);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = params();
        let mut st = OptimizerState::new(OptimizerKind::adam(0.1), &p);
        let g = [vec![1.0; 2], vec![1.0; 2]];
        assert!(st.step(&mut p, &[&g[0], &g[1]]).is_err());
        assert!(st.step(&mut p, &[&g[1]]).is_err());
        assert_eq!(st.steps_taken(), 0);
    }
}

//! Plain gradient steps and Adam over a fixed set of parameter slots.

use std::fmt;

use crate::error::{Error, Result};
use crate::nets::{Grads, ParamSet};
use crate::tensor::Tensor;

pub const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64 },
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => f.write_str("sgd"),
            OptimizerKind::Adam { .. } => f.write_str("adam"),
        }
    }
}

/// Whether a step climbs or descends the objective whose gradient it gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    slots: Vec<usize>,
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
    steps: u64,
}

impl Optimizer {
    /// Covers the trainable members of `slots`.
    pub fn new(kind: OptimizerKind, slots: &[usize], params: &ParamSet<f32>) -> Self {
        let slots: Vec<usize> = slots.iter().copied().filter(|&s| params.is_trainable(s)).collect();
        let zeros = |s: &usize| Tensor::zeros(params.get(*s).shape());
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (slots.iter().map(zeros).collect(), slots.iter().map(zeros).collect()),
        };
        Self {
            kind,
            slots,
            first,
            second,
            steps: 0,
        }
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment estimates (empty for sgd).
    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, steps: u64, first: Vec<Tensor<f32>>, second: Vec<Tensor<f32>>) -> Result<()> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(Error::Format("optimizer moment count mismatch".into()));
        }
        for (have, new) in self.first.iter().zip(&first).chain(self.second.iter().zip(&second)) {
            if have.shape() != new.shape() {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
        }
        self.steps = steps;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update. Slots without a gradient are treated as having
    /// a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Grads<f32>, lr: f64, direction: Direction) {
        self.steps += 1;
        let sign: f32 = match direction {
            Direction::Ascend => -1.0,
            Direction::Descend => 1.0,
        };
        let lr = lr as f32;
        match self.kind {
            OptimizerKind::Sgd => {
                for &slot in &self.slots {
                    let Some(g) = grads.get(slot) else { continue };
                    let p = params.get_mut(slot).data_mut();
                    for (p, &g) in p.iter_mut().zip(g.data()) {
                        *p -= lr * (sign * g);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2 } => {
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                let c1 = 1.0 - (beta1.powi(self.steps as i32)) as f32;
                let c2 = 1.0 - (beta2.powi(self.steps as i32)) as f32;
                for (i, &slot) in self.slots.iter().enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let p = params.get_mut(slot).data_mut();
                    let g = grads.get(slot).map(|g| g.data());
                    for k in 0..p.len() {
                        let gk = g.map_or(0.0, |g| sign * g[k]);
                        m[k] = b1 * m[k] + (1.0 - b1) * gk;
                        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        p[k] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(&[1], vec![v]), true);
        p
    }

    fn grad_of(p: &ParamSet<f32>, g: f32) -> Grads<f32> {
        let mut grads = Grads::all(p);
        grads.entry(0, &[1]).data_mut()[0] = g;
        grads
    }

    #[test]
    fn sgd_signs() {
        let mut p = one_param(1.0);
        let g = grad_of(&p, 2.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &[0], &p);
        opt.step(&mut p, &g, 0.1, Direction::Descend);
        assert!((p.get(0).data()[0] - 0.8).abs() < 1e-7);
        opt.step(&mut p, &g, 0.1, Direction::Ascend);
        assert!((p.get(0).data()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one_param(0.0);
        let g = grad_of(&p, 3.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: 0.5, beta2: 0.999 }, &[0], &p);
        opt.step(&mut p, &g, 0.01, Direction::Descend);
        assert!((p.get(0).data()[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut p = one_param(0.123);
        let before = p.clone();
        let g = grad_of(&p, 5.0);
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam { beta1: 0.5, beta2: 0.999 }] {
            let mut opt = Optimizer::new(kind, &[0], &p);
            opt.step(&mut p, &g, 0.0, Direction::Ascend);
            assert_eq!(p, before);
        }
    }
}

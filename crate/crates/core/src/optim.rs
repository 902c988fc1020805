//! Adam with bias correction over a list of parameter groups.

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter group {group} at element {index}")]
    NonFiniteGradient { group: usize, index: usize },
    #[error("group {group}: parameter shape {param:?} vs gradient {grad:?}")]
    ShapeMismatch {
        group: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("expected {expected} parameter groups, got {found}")]
    GroupCount { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(group_sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `lrs[i]` is the learning rate of group `i`; `None` marks a
    /// frozen group whose parameters and moments stay untouched. The step
    /// count advances even when every gradient is zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lrs: &[Option<f32>]) -> Result<(), OptimError> {
        let groups = self.m.len();
        for n in [params.len(), grads.len(), lrs.len()] {
            if n != groups {
                return Err(OptimError::GroupCount {
                    expected: groups,
                    found: n,
                });
            }
        }
        for (group, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[group].len() {
                return Err(OptimError::ShapeMismatch {
                    group,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if lrs[group].is_some() {
                if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteGradient { group, index });
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (group, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(lr) = lrs[group] else { continue };
            let (m, v) = (&mut self.m[group], &mut self.v[group]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let m_new = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gi;
                let v_new = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr as f64 * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

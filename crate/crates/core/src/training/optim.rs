//! Adam (decoupled weight decay) and LAMB.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    #[default]
    Lamb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

pub const TRUST_RATIO_MAX: f64 = 10.0;

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Bias-corrected Adam direction plus decoupled decay, `m^/(sqrt(v^)+eps) + wd*w`,
/// after updating the moments with `grad` at step `t` (1-based).
fn adam_direction(param: &Tensor, grad: &Tensor, state: &mut Moments, t: u64, hp: &OptimHyper, wd: f64) -> Vec<f64> {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    param
        .data()
        .iter()
        .zip(grad.data())
        .enumerate()
        .map(|(i, (&w, &g))| {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps) + wd * w
        })
        .collect()
}

fn check(param: &Tensor, grad: &Tensor, state: &Moments, t: u64) -> Result<()> {
    if t == 0 {
        return Err(invalid("optimizer steps are counted from 1"));
    }
    if grad.shape() != param.shape() || state.m.shape() != param.shape() {
        return Err(shape_err(
            "optimizer",
            format!(
                "param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                state.m.shape()
            ),
        ));
    }
    Ok(())
}

/// One Adam step with decoupled weight decay `wd`.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut Moments,
    t: u64,
    lr: f64,
    hp: &OptimHyper,
    wd: f64,
) -> Result<()> {
    check(param, grad, state, t)?;
    let dir = adam_direction(param, grad, state, t, hp, wd);
    for (w, d) in param.data_mut().iter_mut().zip(dir) {
        *w -= lr * d;
    }
    Ok(())
}

/// `||w|| / ||update||` clamped to `[0, TRUST_RATIO_MAX]`; 1 when either norm is zero.
pub fn trust_ratio(weight_norm: f64, update_norm: f64) -> f64 {
    if weight_norm == 0.0 || update_norm == 0.0 {
        1.0
    } else {
        (weight_norm / update_norm).clamp(0.0, TRUST_RATIO_MAX)
    }
}

/// One LAMB step on a single tensor (one "layer"). Returns the trust ratio used.
pub fn lamb_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut Moments,
    t: u64,
    lr: f64,
    hp: &OptimHyper,
    wd: f64,
) -> Result<f64> {
    check(param, grad, state, t)?;
    let dir = adam_direction(param, grad, state, t, hp, wd);
    let w_norm = param.data().iter().map(|w| w * w).sum::<f64>().sqrt();
    let u_norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let ratio = trust_ratio(w_norm, u_norm);
    for (w, d) in param.data_mut().iter_mut().zip(dir) {
        *w -= lr * ratio * d;
    }
    Ok(ratio)
}

/// Optimizer over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub hyper: OptimHyper,
    /// Number of completed steps.
    pub step: u64,
    /// Indexed by parameter id; `None` for buffers.
    pub state: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: OptimHyper, store: &ParamStore) -> Self {
        let state = store
            .iter()
            .map(|(_, p)| p.kind.trainable().then(|| Moments::zeros(p.value.shape())))
            .collect();
        Optimizer {
            kind,
            hyper,
            step: 0,
            state,
        }
    }

    /// Applies `grads` (indexed by parameter id). Parameters without a
    /// gradient are left untouched, moments included. Decay applies only to
    /// parameters whose kind decays.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.state.len() != store.len() {
            return Err(invalid(format!(
                "optimizer holds {} states and got {} gradients for {} parameters",
                self.state.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (Some(g), Some(state)) = (&grads[id.index()], self.state[id.index()].as_mut()) else {
                continue;
            };
            let wd = if store.get(id).kind.decays() {
                self.hyper.weight_decay
            } else {
                0.0
            };
            let p = store.value_mut(id);
            match self.kind {
                OptimizerKind::Adam => adam_step(p, g, state, self.step, lr, &self.hyper, wd)?,
                OptimizerKind::Lamb => {
                    lamb_step(p, g, state, self.step, lr, &self.hyper, wd)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(wd: f64) -> OptimHyper {
        OptimHyper {
            weight_decay: wd,
            ..OptimHyper::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let w0 = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        let mut w = w0.clone();
        let mut s = Moments::zeros(&[3]);
        for t in 1..=5 {
            adam_step(&mut w, &g, &mut s, t, 0.1, &hp(0.0), 0.0).unwrap();
            lamb_step(&mut w, &g, &mut s, t, 0.1, &hp(0.0), 0.0).unwrap();
        }
        assert_eq!(w, w0);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut w = Tensor::zeros(vec![2]);
        let g = Tensor::new(vec![2], vec![300.0, -0.7]).unwrap();
        let mut s = Moments::zeros(&[2]);
        adam_step(&mut w, &g, &mut s, 1, 0.01, &hp(0.0), 0.0).unwrap();
        assert!((w.data()[0] + 0.01).abs() < 1e-9);
        assert!((w.data()[1] - 0.01).abs() < 1e-9);
    }

    /// Scalar Adam written out directly.
    fn adam_oracle(mut w: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * (mh / (vh.sqrt() + eps) + wd * w);
        }
        w
    }

    #[test]
    fn adam_trace_matches_scalar_recurrence() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.4];
        let mut w = Tensor::new(vec![1], vec![0.8]).unwrap();
        let mut s = Moments::zeros(&[1]);
        for (k, &g) in grads.iter().enumerate() {
            let g = Tensor::new(vec![1], vec![g]).unwrap();
            adam_step(&mut w, &g, &mut s, k as u64 + 1, 0.05, &hp(0.1), 0.1).unwrap();
        }
        assert!((w.data()[0] - adam_oracle(0.8, &grads, 0.05, 0.1)).abs() < 1e-14);
    }

    /// LAMB over a two-element layer, computed element by element.
    fn lamb_oracle(mut w: [f64; 2], grads: &[[f64; 2]], lr: f64, wd: f64) -> [f64; 2] {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            let mut u = [0.0; 2];
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                u[i] = (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + eps) + wd * w[i];
            }
            let wn = (w[0] * w[0] + w[1] * w[1]).sqrt();
            let un = (u[0] * u[0] + u[1] * u[1]).sqrt();
            let r = if wn > 0.0 && un > 0.0 { (wn / un).min(10.0) } else { 1.0 };
            for i in 0..2 {
                w[i] -= lr * r * u[i];
            }
        }
        w
    }

    #[test]
    fn lamb_trace_matches_layer_recurrence() {
        let grads = [[0.3, -0.1], [-1.2, 0.4], [0.05, 0.0], [2.0, -3.0], [-0.4, 0.2]];
        let mut w = Tensor::new(vec![2], vec![0.8, -0.3]).unwrap();
        let mut s = Moments::zeros(&[2]);
        for (k, g) in grads.iter().enumerate() {
            let g = Tensor::new(vec![2], g.to_vec()).unwrap();
            lamb_step(&mut w, &g, &mut s, k as u64 + 1, 0.01, &hp(0.04), 0.04).unwrap();
        }
        let expect = lamb_oracle([0.8, -0.3], &grads, 0.01, 0.04);
        assert!((w.data()[0] - expect[0]).abs() < 1e-14);
        assert!((w.data()[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn trust_ratio_rules() {
        assert_eq!(trust_ratio(2.5, 2.5), 1.0);
        assert_eq!(trust_ratio(0.0, 3.0), 1.0);
        assert_eq!(trust_ratio(3.0, 0.0), 1.0);
        assert_eq!(trust_ratio(100.0, 1.0), TRUST_RATIO_MAX);
        assert_eq!(trust_ratio(1.0, 4.0), 0.25);
    }

    #[test]
    fn lamb_decay_enters_the_trust_ratio() {
        // With a zero gradient the update is pure decay: u = wd*w, so the
        // ratio ||w||/||u|| = 1/wd clamps to 10 and w shrinks by lr*10*wd.
        let mut w = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut s = Moments::zeros(&[2]);
        let r = lamb_step(&mut w, &Tensor::zeros(vec![2]), &mut s, 1, 0.1, &hp(0.04), 0.04).unwrap();
        assert_eq!(r, 10.0);
        assert!((w.data()[0] - 3.0 * (1.0 - 0.1 * 10.0 * 0.04)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_state() {
        let mut w = Tensor::zeros(vec![2]);
        let mut s = Moments::zeros(&[3]);
        assert!(adam_step(&mut w, &Tensor::zeros(vec![2]), &mut s, 1, 0.1, &hp(0.0), 0.0).is_err());
        let mut s = Moments::zeros(&[2]);
        assert!(lamb_step(&mut w, &Tensor::zeros(vec![2]), &mut s, 0, 0.1, &hp(0.0), 0.0).is_err());
    }
}

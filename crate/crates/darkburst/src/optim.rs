//! Adam updates over a named parameter store.
//!
//! All arithmetic runs in f64, but parameters and both moment buffers
//! are snapped to f32-representable values after every step. That is
//! the precision checkpoints store, so a save and load anywhere in a
//! run resumes bit-identically.

use crate::error::{Error, Result};
use crate::nets::NetParams;
use crate::tensor::{GradMap, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Rounds through f32 and back.
pub(crate) fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// First and second moment buffers, aligned with the parameter
/// store's iteration order.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &NetParams) -> AdamState {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamState { step: 0, m, v }
    }

    /// Rebuilds state loaded from a checkpoint; buffer lengths must
    /// match the parameter store.
    pub fn from_parts(
        params: &NetParams,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<AdamState> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::data("optimizer state does not match parameter count"));
        }
        for ((name, t), (mb, vb)) in params.iter().zip(m.iter().zip(v.iter())) {
            if mb.len() != t.numel() || vb.len() != t.numel() {
                return Err(Error::data(format!(
                    "optimizer state for {name} has the wrong length"
                )));
            }
        }
        Ok(AdamState { step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam step. Parameters with no gradient entry
/// (untouched or frozen) see a zero gradient; with zero moments they
/// stay exactly in place.
pub fn adam_step(
    params: &mut NetParams,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let buffers: Vec<Vec<f64>> =
        params.iter().map(|(_, t)| grads.grad(t).data().to_vec()).collect();
    adam_step_buffers(params, &buffers, state, lr)
}

/// Same update from raw gradient buffers aligned with the store's
/// iteration order. Training uses this after averaging gradients over
/// a batch of independent backward passes.
pub fn adam_step_buffers(
    params: &mut NetParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::data("optimizer state does not match parameter count"));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let tensor = params.get(name)?;
        let g = &grads[i];
        if g.len() != tensor.data().len() {
            return Err(Error::shape(format!("gradient buffer {i} does not match {name}")));
        }
        let old = tensor.data().to_vec();
        let shape = tensor.shape().to_vec();
        let mut new = Vec::with_capacity(old.len());
        for (j, (&p, &gj)) in old.iter().zip(g.iter()).enumerate() {
            let m = snap_f32(ADAM_BETA1 * state.m[i][j] + (1.0 - ADAM_BETA1) * gj);
            let v = snap_f32(ADAM_BETA2 * state.v[i][j] + (1.0 - ADAM_BETA2) * gj * gj);
            state.m[i][j] = m;
            state.v[i][j] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            new.push(snap_f32(p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)));
        }
        params.set(name, Tensor::variable(&shape, new)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, ArchConfig};
    use crate::tensor::backward;

    fn small_config() -> ArchConfig {
        ArchConfig {
            base_filters: 1,
            encoder_levels: 2,
            residual_blocks: 0,
            use_coarse_to_fine: false,
            use_residual: false,
            use_se: false,
            se_reduction: 1,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut params = init_params(&small_config(), 1).unwrap();
        let mut state = AdamState::new(&params);
        let bias = params.get("fine.enc0.c0.b").unwrap().clone();
        let before = bias.data().to_vec();
        let loss = bias.scale(0.5).sum();
        let grads = backward(&loss).unwrap();
        adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
        let after = params.get("fine.enc0.c0.b").unwrap().data().to_vec();
        for (b, a) in before.iter().zip(after.iter()) {
            // m_hat / (sqrt(v_hat) + eps) = g / (|g| + eps) on the
            // first step, so the move is the learning rate times the
            // gradient's sign, up to eps and the f32 snap.
            assert!((a - (b - 1e-2)).abs() < 1e-6, "moved {b} -> {a}");
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut params = init_params(&small_config(), 1).unwrap();
        let mut state = AdamState::new(&params);
        let b0 = params.get("fine.enc0.c0.b").unwrap().clone();
        let b1 = params.get("fine.enc0.c1.b").unwrap().clone();
        let loss = b0.sum().add(&b1.sum()).unwrap();
        let grads = backward(&loss).unwrap();
        adam_step(&mut params, &grads, &mut state, 3e-3).unwrap();
        assert_eq!(
            params.get("fine.enc0.c0.b").unwrap().data(),
            params.get("fine.enc0.c1.b").unwrap().data(),
        );
    }

    #[test]
    fn zero_gradient_from_fresh_state_changes_nothing() {
        let mut params = init_params(&small_config(), 2).unwrap();
        let mut state = AdamState::new(&params);
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        // The loss touches one bias only; everything else sees a zero
        // gradient and zero moments, and must stay exactly in place.
        let bias = params.get("fine.head.b").unwrap().clone();
        let loss = bias.sum();
        let grads = backward(&loss).unwrap();
        adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
        for ((name, t), old) in params.iter().zip(before.iter()) {
            if name == "fine.head.b" {
                assert_ne!(t.data(), old.as_slice());
            } else {
                assert_eq!(t.data(), old.as_slice(), "{name} moved without a gradient");
            }
        }
    }

    #[test]
    fn moments_decay_once_the_gradient_goes_quiet() {
        let mut params = init_params(&small_config(), 3).unwrap();
        let mut state = AdamState::new(&params);
        let bias = params.get("fine.head.b").unwrap().clone();
        let loss = bias.scale(2.0).sum();
        let grads = backward(&loss).unwrap();
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        let (m1, v1) = {
            let (m, v) = state.moments();
            let i = moment_index(&params, "fine.head.b");
            (m[i].clone(), v[i].clone())
        };
        assert!(m1.iter().all(|&x| x != 0.0));

        let other = params.get("fine.enc0.c0.b").unwrap().clone();
        let quiet = backward(&other.sum()).unwrap();
        adam_step(&mut params, &quiet, &mut state, 1e-3).unwrap();
        let (m, v) = state.moments();
        let i = moment_index(&params, "fine.head.b");
        for j in 0..m1.len() {
            assert_eq!(m[i][j], snap_f32(ADAM_BETA1 * m1[j]));
            assert_eq!(v[i][j], snap_f32(ADAM_BETA2 * v1[j]));
        }
    }

    fn moment_index(params: &NetParams, name: &str) -> usize {
        params.iter().position(|(n, _)| n == name).unwrap()
    }

    #[test]
    fn state_and_parameters_stay_f32_representable() {
        let mut params = init_params(&small_config(), 4).unwrap();
        let mut state = AdamState::new(&params);
        for round in 0..3 {
            let w = params.get("fine.enc1.c0.w").unwrap().clone();
            let loss = w.mul(&w).unwrap().sum().scale(0.5 + round as f64);
            let grads = backward(&loss).unwrap();
            adam_step(&mut params, &grads, &mut state, 2e-3).unwrap();
        }
        for (name, t) in params.iter() {
            for &v in t.data() {
                assert_eq!(v, snap_f32(v), "{name} drifted off the f32 grid");
            }
        }
        let (ms, vs) = state.moments();
        for buf in ms.iter().chain(vs.iter()) {
            for &v in buf {
                assert_eq!(v, snap_f32(v));
            }
        }
    }

    #[test]
    fn frozen_parameters_hold_still_under_training() {
        let config = ArchConfig { use_coarse_to_fine: true, ..small_config() };
        let mut params = init_params(&config, 5).unwrap();
        let frozen = params.with_frozen_prefix("coarse.");
        let x = crate::tensor::testutil::spread_tensor(9, &[1, 4, 4, 4], 0.0, 1.0);
        let coarse = crate::nets::coarse_forward(&frozen, &x.detach()).unwrap();
        let up = x.detach().bilinear_resize(2.0).unwrap();
        let t = crate::nets::build_fine_input(&up, &coarse).unwrap();
        let out = crate::nets::fine_forward(&frozen, &t).unwrap();
        let target = Tensor::full(out.shape(), 0.25).unwrap();
        let loss = crate::loss::l1_loss(&out, &target).unwrap();
        let grads = backward(&loss).unwrap();

        let mut state = AdamState::new(&params);
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
        let mut fine_moved = false;
        for ((name, t), old) in params.iter().zip(before.iter()) {
            if name.starts_with("coarse.") {
                assert_eq!(t.data(), old.as_slice(), "{name} moved while frozen");
            } else if t.data() != old.as_slice() {
                fine_moved = true;
            }
        }
        assert!(fine_moved);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let params = init_params(&small_config(), 6).unwrap();
        let err = AdamState::from_parts(&params, 0, vec![vec![0.0]], vec![vec![0.0]]);
        assert!(err.is_err());
        let m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel() + 1]).collect();
        let v = m.clone();
        assert!(AdamState::from_parts(&params, 0, m, v).is_err());
        let good_m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let good_v = good_m.clone();
        assert!(AdamState::from_parts(&params, 3, good_m, good_v).is_ok());
    }
}

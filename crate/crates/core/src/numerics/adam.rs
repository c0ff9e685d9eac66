use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::math;
use crate::{Error, Result};

/// Adam hyperparameters. Defaults: lr 0.001, betas (0.9, 0.98), eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.98, epsilon: 1e-8 }
    }
}

/// Moment estimates for every parameter of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| alloc::vec![0.0; p.value.len()]).collect();
        Self { config, first_moment: zeros.clone(), second_moment: zeros, step_count: 0 }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Parameters
/// without a gradient are treated as having a zero gradient. Padding rows
/// are held at zero.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match parameter store"));
    }
    for (id, g) in grads.params() {
        if g.len() != store.value(id).len() {
            return Err(Error::invalid(alloc::format!(
                "gradient for {} has {} values, parameter has {}",
                store.get(id).name,
                g.len(),
                store.value(id).len()
            )));
        }
    }
    state.step_count += 1;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - math::powi(beta1, t);
    let bc2 = 1.0 - math::powi(beta2, t);
    for i in 0..store.len() {
        let id = super::ParamId(i);
        let param = store.get_mut(id);
        if !param.trainable {
            continue;
        }
        let Some(g) = grads.param(id) else {
            // zero gradient: moments decay, update uses decayed moments
            let m = &mut state.first_moment[i];
            let v = &mut state.second_moment[i];
            let x = param.value.data_mut();
            for j in 0..x.len() {
                m[j] *= beta1;
                v[j] *= beta2;
                x[j] -= lr * (m[j] / bc1) / (math::sqrt(v[j] / bc2) + epsilon);
            }
            continue;
        };
        let cols = param.value.cols();
        let zero_rows = param.zero_rows.clone();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let x = param.value.data_mut();
        for j in 0..x.len() {
            let gj = if zero_rows.contains(&(j / cols)) { 0.0 } else { g[j] };
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            x[j] -= lr * (m[j] / bc1) / (math::sqrt(v[j] / bc2) + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamId, Tensor};
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn single(value: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([value.len()], value).unwrap());
        s
    }

    fn grads(g: Vec<f64>) -> Gradients {
        let mut m = BTreeMap::new();
        m.insert(ParamId(0), g);
        Gradients::from_params(m)
    }

    #[test]
    fn zero_gradient_leaves_everything_in_place() {
        let mut store = single(vec![0.5, -1.5]);
        let mut state = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &grads(vec![0.0, 0.0]), &mut state).unwrap();
        assert_eq!(store.value(ParamId(0)).data(), &[0.5, -1.5]);
        assert!(state.first_moment[0].iter().chain(&state.second_moment[0]).all(|&x| x == 0.0));
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = single(vec![1.0]);
        let mut state = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &grads(vec![1.0]), &mut state).unwrap();
        let moved = 1.0 - store.value(ParamId(0)).data()[0];
        assert!((moved - 0.001).abs() < 1e-10, "{moved}");
    }

    // Frozen reference from an independent NumPy script of textbook Adam
    // (lr=0.001, b1=0.9, b2=0.98, eps=1e-8), two steps with the same grads.
    #[test]
    fn two_steps_match_scripted_reference() {
        let mut store = single(vec![0.5, -1.25, 2.0]);
        let mut state = AdamState::new(&store, AdamConfig::default());
        let g = vec![0.3, -0.7, 1.9];
        adam_step(&mut store, &grads(g.clone()), &mut state).unwrap();
        adam_step(&mut store, &grads(g), &mut state).unwrap();
        let expect = ADAM_TWO_STEP_REFERENCE;
        for (a, b) in store.value(ParamId(0)).data().iter().zip(expect) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    const ADAM_TWO_STEP_REFERENCE: [f64; 3] = [0.49800000006666667, -1.2480000000285716, 1.9980000000105265];

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let init = vec![0.123456789, -9.87654321, 1e-300];
        let mut store = single(init.clone());
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        let mut state = AdamState::new(&store, cfg);
        for _ in 0..3 {
            adam_step(&mut store, &grads(vec![0.4, -2.0, 7.0]), &mut state).unwrap();
        }
        for (a, b) in store.value(ParamId(0)).data().iter().zip(&init) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = single(vec![1.0, 2.0]);
        let mut state = AdamState::new(&store, AdamConfig::default());
        assert!(adam_step(&mut store, &grads(vec![1.0]), &mut state).is_err());
    }

    #[test]
    fn padding_rows_stay_zero() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(1);
        let id = store.add_embedding("emb", 3, 2, 0.1, &mut rng);
        let mut state = AdamState::new(&store, AdamConfig::default());
        let mut m = BTreeMap::new();
        m.insert(id, vec![1.0; 6]);
        adam_step(&mut store, &Gradients::from_params(m), &mut state).unwrap();
        assert_eq!(store.value(id).row(0), &[0.0, 0.0]);
    }
}

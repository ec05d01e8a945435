use std::collections::{BTreeMap, HashMap};

use crate::model::ParamStore;
use crate::numerics::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: i32,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient in
/// `grads`. Frozen rows are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step);
    for (name, g) in grads {
        let frozen = params.frozen_rows(name).to_vec();
        let Some(p) = params.get_mut(name) else { continue };
        let row = p.shape().last().copied().unwrap_or(1).max(1);
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            if frozen.contains(&(i / row)) {
                continue;
            }
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(values));
        p
    }

    fn grad(values: Vec<f64>) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::vector(values))])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(vec![1.0, 1.0, 1.0]);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(vec![0.5, -3.0, 1e-3]), &mut s, 0.01);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] - 1.01).abs() < 1e-6);
        assert!((w[2] - 0.99).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_does_not_move() {
        let mut p = store(vec![0.3, -0.7]);
        let mut s = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut p, &grad(vec![0.0, 0.0]), &mut s, 0.1);
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.3, -0.7]);
    }

    #[test]
    fn quadratic_bowl() {
        let mut p = store(vec![3.0]);
        let mut s = AdamState::new();
        let mut steps = 0;
        while p.get("w").unwrap().data()[0].abs() >= 1e-3 {
            let x = p.get("w").unwrap().data()[0];
            adam_step(&mut p, &grad(vec![2.0 * x]), &mut s, 1e-2);
            steps += 1;
            assert!(steps <= 5000, "did not converge");
        }
    }

    #[test]
    fn frozen_rows_stay_put() {
        let mut p = ParamStore::new();
        p.insert("emb", Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        p.freeze_rows("emb", vec![0]);
        let g = BTreeMap::from([("emb".to_string(), Tensor::filled(&[2, 2], 1.0))]);
        adam_step(&mut p, &g, &mut AdamState::new(), 0.1);
        let t = p.get("emb").unwrap();
        assert_eq!(t.row(0), &[0.0, 0.0]);
        assert!(t.row(1).iter().all(|&v| v < 1.0));
    }
}

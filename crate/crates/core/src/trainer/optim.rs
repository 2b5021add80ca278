use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus a per-tensor step count. A tensor's count
/// only advances on steps where it received a gradient, so bias correction
/// stays consistent for robot-specific tensors that train one step in K.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array> = store.iter().map(|(_, p)| Array::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total`.
pub fn cosine_lr(s: usize, base_lr: f64, warmup: usize, total: usize) -> f64 {
    if s < warmup {
        return base_lr * s as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = ((s - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Decoupled weight decay followed by a bias-corrected Adam update, applied
/// only to tensors present in `grads`. Returns the tensors that moved.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Vec<ParamId> {
    let mut touched: Vec<(ParamId, &Array)> = grads.param_grads().collect();
    touched.sort_by_key(|(id, _)| id.index());
    let AdamHyper { beta1, beta2, eps } = hyper;
    for &(id, g) in &touched {
        let i = id.index();
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let param = store.get_mut(id);
        let decay = if param.decay { lr * weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((x, &gk), mk), vk) in param.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *x -= decay * *x;
            *mk = beta1 * *mk + (1.0 - beta1) * gk;
            *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
            let mhat = *mk / c1;
            let vhat = *vk / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    touched.into_iter().map(|(id, _)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn store_with(value: f64, decay: bool) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Array::from_vec(vec![value]), decay);
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: ParamId, coef: f64) -> Gradients {
        let mut g = Graph::new();
        let w = g.param(store, id);
        let y = g.scale(w, coef);
        let l = g.sum_all(y);
        g.backward(l).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 1e-3, 60, 2000), 0.0);
        assert!((cosine_lr(60, 1e-3, 60, 2000) - 1e-3).abs() < 1e-18);
        assert!((cosine_lr(30, 1e-3, 60, 2000) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(2000, 1e-3, 60, 2000).abs() < 1e-12);
        let mid = cosine_lr(60 + 970, 1e-3, 60, 2000);
        assert!((mid - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = store_with(1.5, true);
        let mut st = AdamState::new(&s);
        let g = grads_for(&s, id, 0.0);
        adamw_step(&mut s, &mut st, &g, 1e-3, 0.0, AdamHyper::default());
        assert_eq!(s.get(id).value.data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(0.0, true);
        let mut st = AdamState::new(&s);
        let g = grads_for(&s, id, 1.0);
        adamw_step(&mut s, &mut st, &g, 1e-3, 0.0, AdamHyper::default());
        // mhat = 1, vhat = 1, update = lr / (1 + eps)
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((s.get(id).value.data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn decay_exempt_tensors_ignore_decay() {
        for (decay, expect_change) in [(false, false), (true, true)] {
            let (mut s, id) = store_with(2.0, decay);
            let mut st = AdamState::new(&s);
            let g = grads_for(&s, id, 0.0);
            adamw_step(&mut s, &mut st, &g, 0.1, 0.5, AdamHyper::default());
            let v = s.get(id).value.data()[0];
            assert_eq!(v != 2.0, expect_change);
            if decay {
                assert!((v - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn untouched_tensors_keep_state() {
        let mut s = ParamStore::new();
        let a = s.add("a", Array::from_vec(vec![1.0]), true);
        let b = s.add("b", Array::from_vec(vec![1.0]), true);
        let mut st = AdamState::new(&s);
        let g = grads_for(&s, a, 1.0);
        let moved = adamw_step(&mut s, &mut st, &g, 1e-2, 0.1, AdamHyper::default());
        assert_eq!(moved, vec![a]);
        assert_eq!(s.get(b).value.data(), &[1.0]);
        assert_eq!(st.steps, vec![1, 0]);
    }
}

//! Adam with row-sparse updates.
//!
//! Only parameters that received a gradient in a step are updated, and a
//! parameter may further restrict the update to a subset of its rows. Each
//! row keeps its own step counter for bias correction, so rows that are
//! rarely visited follow the same trajectory as if they were optimized alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<ParamId, Moments>,
}

fn row_layout(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        _ => (1, t.numel()),
    }
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Apply one update. `rows` restricts listed parameters to the given rows.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, rows: &BTreeMap<ParamId, Vec<usize>>) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (&id, g) in grads.params() {
            let value = store.get_mut(id);
            let (nrows, ncols) = row_layout(value);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(value.shape()),
                v: Tensor::zeros(value.shape()),
                steps: vec![0; nrows],
            });
            let selected: Vec<usize> = match rows.get(&id) {
                Some(r) => {
                    let mut r = r.clone();
                    r.sort_unstable();
                    r.dedup();
                    r
                }
                None => (0..nrows).collect(),
            };
            for r in selected {
                st.steps[r] += 1;
                let t = st.steps[r] as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for k in r * ncols..(r + 1) * ncols {
                    let gk = g.data()[k];
                    let m = &mut st.m.data_mut()[k];
                    *m = beta1 * *m + (1.0 - beta1) * gk;
                    let mhat = *m / c1;
                    let v = &mut st.v.data_mut()[k];
                    *v = beta2 * *v + (1.0 - beta2) * gk * gk;
                    let vhat = *v / c2;
                    value.data_mut()[k] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![1.0, -2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let sq = tape.square(x).unwrap();
        let y = tape.sum(sq).unwrap();
        let g = tape.backward(y).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &g, &BTreeMap::new());
        let v = store.get(id).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![3.0]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id).unwrap();
            let s = tape.add_scalar(x, -1.5).unwrap();
            let sq = tape.square(s).unwrap();
            let y = tape.sum(sq).unwrap();
            let g = tape.backward(y).unwrap();
            adam.step(&mut store, &g, &BTreeMap::new());
        }
        assert!((store.get(id).data()[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn untouched_rows_and_params_stay_put() {
        let mut store = ParamStore::new();
        let e = store.add("e", Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
        let other = store.add("other", Tensor::row(vec![5.0]));
        let mut tape = Tape::new();
        let ev = tape.param(&store, e).unwrap();
        let y = tape.sum(ev).unwrap();
        let g = tape.backward(y).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &g, &BTreeMap::from([(e, vec![2, 0, 2])]));
        let v = store.get(e).data();
        assert_eq!(&v[2..4], &[1.0, 1.0]);
        assert!(v[0] < 1.0 && v[4] < 1.0);
        assert_eq!(store.get(other).data(), &[5.0]);
    }
}

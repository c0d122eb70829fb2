use nalgebra::DMatrix;
use pavi::autodiff::{ParamStore, Tape, Tensor, HALF_LN_2PI};
use pavi::flows::{FlowConfig, FlowStack, ScaleMode, StageConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn configs() -> Vec<FlowConfig> {
    vec![
        FlowConfig::default(),
        FlowConfig {
            stages: vec![
                StageConfig::Affine {
                    scale_mode: ScaleMode::LowerTriangular,
                    hidden: 8,
                },
                StageConfig::Reverse,
                StageConfig::Maf { hidden: vec![12] },
                StageConfig::Reverse,
                StageConfig::Maf { hidden: vec![6, 6] },
            ],
        },
    ]
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

/// Flow with every weight moved off its identity initialization.
fn random_flow(config: &FlowConfig, dim: usize, cond: usize, seed: u64) -> (ParamStore, FlowStack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let flow = FlowStack::new(&mut store, "f", dim, cond, config, &mut rng).unwrap();
    let flat: Vec<f64> = store
        .flatten()
        .iter()
        .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    store.assign_flat(&flat).unwrap();
    (store, flow)
}

/// Autodiff Jacobian `∂θ/∂u` of the forward map at one row.
fn jacobian(flow: &FlowStack, store: &ParamStore, u: &[f64], cond: Option<&[f64]>) -> DMatrix<f64> {
    let d = u.len();
    let mut j = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut tape = Tape::new();
        let uv = tape.constant(Tensor::row(u.to_vec())).unwrap();
        let cv = cond.map(|c| tape.constant(Tensor::row(c.to_vec())).unwrap());
        let (y, _) = flow.forward(&mut tape, store, uv, cv).unwrap();
        let yk = tape.slice_cols(y, k, k + 1).unwrap();
        let s = tape.sum(yk).unwrap();
        let g = tape.backward(s).unwrap();
        for (c, v) in g.wrt(uv).unwrap().data().iter().enumerate() {
            j[(k, c)] = *v;
        }
    }
    j
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inverse_undoes_forward(dim in 1usize..5, cond in 0usize..4, seed in 0u64..1000) {
        for config in configs() {
            let (store, flow) = random_flow(&config, dim, cond, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let u = normal(&mut rng, 16, dim);
            let c = (cond > 0).then(|| normal(&mut rng, 16, cond));
            let (theta, fwd) = flow.forward_values(&store, &u, c.as_ref()).unwrap();
            let (back, inv) = flow.inverse_values(&store, &theta, c.as_ref()).unwrap();
            for (a, b) in u.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            for (f, i) in fwd.iter().zip(&inv) {
                prop_assert!((f + i).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn log_det_matches_the_autodiff_jacobian(dim in 1usize..5, cond in 0usize..3, seed in 0u64..1000) {
        for config in configs() {
            let (store, flow) = random_flow(&config, dim, cond, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let u = normal(&mut rng, 1, dim);
            let c = (cond > 0).then(|| normal(&mut rng, 1, cond));
            let (_, ld) = flow.forward_values(&store, &u, c.as_ref()).unwrap();
            let j = jacobian(&flow, &store, u.data(), c.as_ref().map(|c| c.data()));
            let det = j.determinant().abs().ln();
            prop_assert!((det - ld[0]).abs() < 1e-8, "{det} vs {}", ld[0]);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences(dim in 1usize..4, seed in 0u64..1000) {
        let (store, flow) = random_flow(&FlowConfig::default(), dim, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let u = normal(&mut rng, 1, dim);
        let c = normal(&mut rng, 1, 2);
        let j = jacobian(&flow, &store, u.data(), Some(c.data()));
        let h = 1e-6;
        for col in 0..dim {
            let shifted = |delta: f64| {
                let mut v = u.clone();
                v.data_mut()[col] += delta;
                flow.forward_values(&store, &v, Some(&c)).unwrap().0
            };
            let (up, down) = (shifted(h), shifted(-h));
            for row in 0..dim {
                let fd = (up.data()[row] - down.data()[row]) / (2.0 * h);
                prop_assert!((fd - j[(row, col)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn autoregressive_stacks_are_lower_triangular(dim in 2usize..6, seed in 0u64..1000) {
        let (store, flow) = random_flow(&FlowConfig::default(), dim, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
        let u = normal(&mut rng, 1, dim);
        let c = normal(&mut rng, 1, 3);
        let j = jacobian(&flow, &store, u.data(), Some(c.data()));
        for row in 0..dim {
            for col in row + 1..dim {
                prop_assert!(j[(row, col)].abs() < 1e-10);
            }
        }
    }
}

#[test]
fn two_dimensional_density_integrates_to_one() {
    for (k, config) in configs().iter().enumerate() {
        let (store, flow) = random_flow(config, 2, 1, 40 + k as u64);
        let (lo, hi, n) = (-14.0, 14.0, 561usize);
        let h = (hi - lo) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n * n)
            .flat_map(|k| [lo + (k / n) as f64 * h, lo + (k % n) as f64 * h])
            .collect();
        let theta = Tensor::matrix(n * n, 2, grid).unwrap();
        let cond = Tensor::matrix(n * n, 1, vec![0.6; n * n]).unwrap();
        let (u, ld) = flow.inverse_values(&store, &theta, Some(&cond)).unwrap();
        let mass: f64 = (0..n * n)
            .map(|r| {
                let q = u.row_slice(r).iter().map(|x| -HALF_LN_2PI - 0.5 * x * x).sum::<f64>() + ld[r];
                q.exp()
            })
            .sum::<f64>()
            * h
            * h;
        assert!((mass - 1.0).abs() < 1e-2, "config {k}: {mass}");
    }
}

#[test]
fn fresh_stacks_are_the_identity() {
    for config in configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let flow = FlowStack::new(&mut store, "f", 3, 2, &config, &mut rng).unwrap();
        let u = normal(&mut rng, 5, 3);
        let c = normal(&mut rng, 5, 2);
        let (theta, ld) = flow.forward_values(&store, &u, Some(&c)).unwrap();
        for (a, b) in u.data().iter().zip(theta.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ld.iter().all(|l| l.abs() < 1e-12));
    }
}

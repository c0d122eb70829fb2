use pavi::autodiff::{ParamStore, Tensor};
use pavi::checkpoint::{decode, encode, encode_store, load_into};
use pavi::models::{
    analytic_posterior, build_gre, decode_dataset, dense_conditional, dense_posterior, encode_dataset, gre_evidence,
    sample_dataset, GreConfig,
};
use pavi::template::ground;
use proptest::prelude::*;

fn gre_config() -> impl Strategy<Value = GreConfig> {
    (1usize..3, 1usize..6, 1usize..5, 0.3f64..2.0, 0.3f64..2.0, 0.3f64..2.0).prop_map(
        |(d, card1, card0, sx, s1, s2)| GreConfig {
            d,
            card1,
            card0,
            sigma_x: sx,
            sigma_1: s1,
            sigma_2: s2,
        },
    )
}

fn tensor() -> impl Strategy<Value = Tensor> {
    (0usize..4, 0usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1e6f64..1e6, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn factorized_and_dense_posteriors_agree(config in gre_config(), seed in 0u64..500) {
        let data = sample_dataset(&config, seed).unwrap();
        let a = analytic_posterior(&config, &data).unwrap();
        let b = dense_posterior(&config, &data).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() < 1e-8 * (1.0 + x.abs());
        prop_assert!(close(a.log_evidence, b.log_evidence));
        prop_assert!(close(a.log_evidence, gre_evidence(&config, &data).unwrap()));
        for d in 0..config.d {
            prop_assert!(close(a.theta2_mean[d], b.theta2_mean[d]));
            prop_assert!(close(a.theta2_std[d], b.theta2_std[d]));
            for n in 0..config.card1 {
                prop_assert!(close(a.theta1_mean[n][d], b.theta1_mean[n][d]));
                prop_assert!(close(a.theta1_std[n][d], b.theta1_std[n][d]));
            }
        }
    }

    #[test]
    fn evidence_is_the_joint_over_the_posterior(config in gre_config(), seed in 0u64..500) {
        // log p(X) = log p(X, Θ) − log p(Θ | X) at any Θ, here the posterior mean.
        let data = sample_dataset(&config, seed).unwrap();
        let template = build_gre(&config).unwrap();
        let model = ground(&template, &config.cards()).unwrap();
        let mut values = model.sample_prior(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
        values.0[2] = data.clone();
        let mut log_post = 0.0;
        for d in 0..config.d {
            let dense = dense_conditional(&config, &data, d).unwrap();
            let k = dense.mean.len();
            let chol = dense.cov.clone().cholesky().unwrap();
            let logdet = 2.0 * (0..k).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
            log_post += -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet);
            let mut v = values.0[0].clone();
            v.data_mut()[d] = dense.mean[0];
            values.0[0] = v;
            let mut v = values.0[1].clone();
            for n in 0..config.card1 {
                v.data_mut()[n * config.d + d] = dense.mean[1 + n];
            }
            values.0[1] = v;
        }
        let joint = model.log_prob(&values).unwrap();
        let evidence = gre_evidence(&config, &data).unwrap();
        prop_assert!((joint - log_post - evidence).abs() < 1e-7 * (1.0 + evidence.abs()));
    }

    #[test]
    fn dataset_files_round_trip(config in gre_config(), seed in 0u64..100) {
        let data = sample_dataset(&config, seed).unwrap();
        let (bytes, sidecar) = encode_dataset(&config, &data, seed).unwrap();
        let (back, meta) = decode_dataset(&bytes, &sidecar).unwrap();
        prop_assert_eq!(back, data);
        prop_assert_eq!(meta.seed, seed);
        prop_assert_eq!(meta.shape, vec![config.card1, config.card0, config.d]);
        prop_assert!(decode_dataset(&bytes[..bytes.len() - 1], &sidecar).is_err());
    }

    #[test]
    fn checkpoints_round_trip(tensors in prop::collection::vec(tensor(), 0..5)) {
        let named: Vec<(String, Tensor)> = tensors.into_iter().enumerate().map(|(k, t)| (format!("t{k}"), t)).collect();
        let bytes = encode(&named);
        prop_assert_eq!(decode(&bytes).unwrap(), named.clone());
        let mut store = ParamStore::new();
        for (name, t) in &named {
            store.add(name.clone(), Tensor::zeros(t.shape()));
        }
        load_into(&mut store, &bytes).unwrap();
        prop_assert_eq!(encode_store(&store), bytes);
    }

    #[test]
    fn decoders_never_panic_on_arbitrary_input(bytes in prop::collection::vec(any::<u8>(), 0..256), text in ".{0,64}") {
        let _ = decode(&bytes);
        let _ = decode_dataset(&bytes, &text);
        let _ = pavi::template::GraphTemplate::from_json(&text);
        let mut prefixed = b"PAVICKPT\x01\0\0\0".to_vec();
        prefixed.extend_from_slice(&bytes);
        let _ = decode(&prefixed);
    }
}

//! Gaussian random effects (GRE) benchmark with an exact posterior oracle.
//!
//! ```text
//! θ₂        ~ N(0, σ₂² I_D)                    global
//! θ₁,n      ~ N(θ₂, σ₁² I_D)                   n ∈ P1
//! x_{n,c}   ~ N(θ₁,n, σx² I_D)                 (n, c) ∈ P1 × P0
//! ```
//!
//! The joint is Gaussian and factorizes over the `D` coordinates, so the
//! posterior and evidence are available in closed form. Two independent
//! routes are provided: a factorized conjugate computation
//! ([`analytic_posterior`], [`gre_evidence`]) and dense joint-covariance
//! conditioning ([`dense_posterior`]).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::template::{self, cards, Cards, DistributionKind, GraphTemplate, RvTemplate, Values};

pub const PLATE_GROUPS: &str = "P1";
pub const PLATE_SAMPLES: &str = "P0";
pub const THETA2: &str = "theta2";
pub const THETA1: &str = "theta1";
pub const X: &str = "x";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid GRE configuration: {0}")]
    Config(String),
    #[error("data has shape {got:?}, expected {expected:?}")]
    Shape { got: Vec<usize>, expected: Vec<usize> },
    #[error("dataset file: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreConfig {
    pub d: usize,
    pub card1: usize,
    pub card0: usize,
    pub sigma_x: f64,
    pub sigma_1: f64,
    pub sigma_2: f64,
}

impl Default for GreConfig {
    fn default() -> Self {
        Self {
            d: 2,
            card1: 20,
            card0: 10,
            sigma_x: 1.0,
            sigma_1: 1.0,
            sigma_2: 1.0,
        }
    }
}

impl GreConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.card1 == 0 || self.card0 == 0 {
            return Err(ModelError::Config("d, card1 and card0 must be at least 1".into()));
        }
        for (name, s) in [
            ("sigma_x", self.sigma_x),
            ("sigma_1", self.sigma_1),
            ("sigma_2", self.sigma_2),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ModelError::Config(format!("{name} must be positive and finite")));
            }
        }
        Ok(())
    }

    /// Plate extents of the full model.
    pub fn cards(&self) -> Cards {
        cards(&[(PLATE_GROUPS, self.card1), (PLATE_SAMPLES, self.card0)])
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn data_shape(&self) -> Vec<usize> {
        vec![self.card1 * self.card0, self.d]
    }
}

pub fn build_gre(config: &GreConfig) -> Result<GraphTemplate, ModelError> {
    config.validate()?;
    let rv = |name: &str, plates: &[&str], kind, parents: &[&str], observed| RvTemplate {
        name: name.into(),
        plates: plates.iter().map(|s| s.to_string()).collect(),
        event_dim: config.d,
        kind,
        parents: parents.iter().map(|s| s.to_string()).collect(),
        observed,
    };
    GraphTemplate::new(
        vec![PLATE_GROUPS.into(), PLATE_SAMPLES.into()],
        vec![
            rv(
                THETA2,
                &[],
                DistributionKind::FixedGaussian {
                    mean: 0.0,
                    scale: config.sigma_2,
                },
                &[],
                false,
            ),
            rv(
                THETA1,
                &[PLATE_GROUPS],
                DistributionKind::GaussianParentMean { scale: config.sigma_1 },
                &[THETA2],
                false,
            ),
            rv(
                X,
                &[PLATE_GROUPS, PLATE_SAMPLES],
                DistributionKind::GaussianParentMean { scale: config.sigma_x },
                &[THETA1],
                true,
            ),
        ],
    )
    .map_err(|e| ModelError::Config(e.to_string()))
}

/// Ancestral draw of every GRE variable (values ordered `theta2, theta1, x`).
pub fn sample_gre(config: &GreConfig, seed: u64) -> Result<Values, ModelError> {
    let t = build_gre(config)?;
    let model = template::ground(&t, &config.cards()).map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(model.sample_prior(&mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Prior-predictive observations `[card1·card0, D]` for a seed.
pub fn sample_dataset(config: &GreConfig, seed: u64) -> Result<Tensor, ModelError> {
    let mut values = sample_gre(config, seed)?;
    Ok(values.0.pop().expect("x is last"))
}

fn check_data(config: &GreConfig, data: &Tensor) -> Result<(), ModelError> {
    config.validate()?;
    let expected = config.data_shape();
    if data.shape() != expected.as_slice() {
        return Err(ModelError::Shape {
            got: data.shape().to_vec(),
            expected,
        });
    }
    Ok(())
}

/// Marginal posterior moments of every latent plus the log evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub theta2_mean: Vec<f64>,
    pub theta2_std: Vec<f64>,
    /// `[card1][D]`.
    pub theta1_mean: Vec<Vec<f64>>,
    pub theta1_std: Vec<Vec<f64>>,
    pub log_evidence: f64,
}

struct GroupStats {
    means: Vec<f64>,
    scatter: Vec<f64>,
}

fn group_stats(config: &GreConfig, data: &Tensor, d: usize) -> GroupStats {
    let c = config.card0;
    let mut means = Vec::with_capacity(config.card1);
    let mut scatter = Vec::with_capacity(config.card1);
    for n in 0..config.card1 {
        let xs: Vec<f64> = (0..c).map(|k| data.at(n * c + k, d)).collect();
        let m = xs.iter().sum::<f64>() / c as f64;
        means.push(m);
        scatter.push(xs.iter().map(|x| (x - m) * (x - m)).sum());
    }
    GroupStats { means, scatter }
}

/// Factorized conjugate posterior.
pub fn analytic_posterior(config: &GreConfig, data: &Tensor) -> Result<GaussianPosterior, ModelError> {
    check_data(config, data)?;
    let (s1, sx, s2) = (config.sigma_1.powi(2), config.sigma_x.powi(2), config.sigma_2.powi(2));
    let (g, c) = (config.card1 as f64, config.card0 as f64);
    let v = s1 + sx / c;
    let a = 1.0 / s1 + c / sx;
    let mut post = GaussianPosterior {
        theta2_mean: Vec::new(),
        theta2_std: Vec::new(),
        theta1_mean: vec![Vec::new(); config.card1],
        theta1_std: vec![Vec::new(); config.card1],
        log_evidence: 0.0,
    };
    for d in 0..config.d {
        let stats = group_stats(config, data, d);
        let tau2 = 1.0 / s2 + g / v;
        let var2 = 1.0 / tau2;
        let m2 = stats.means.iter().sum::<f64>() / v * var2;
        post.theta2_mean.push(m2);
        post.theta2_std.push(var2.sqrt());
        let coupling = 1.0 / (s1 * a);
        for (n, &xbar) in stats.means.iter().enumerate() {
            post.theta1_mean[n].push((m2 / s1 + c * xbar / sx) / a);
            post.theta1_std[n].push((1.0 / a + coupling * coupling * var2).sqrt());
        }
        post.log_evidence += evidence_dim(config, &stats);
    }
    Ok(post)
}

fn evidence_dim(config: &GreConfig, stats: &GroupStats) -> f64 {
    let (s1, sx, s2) = (config.sigma_1.powi(2), config.sigma_x.powi(2), config.sigma_2.powi(2));
    let (g, c) = (config.card1 as f64, config.card0 as f64);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let within: f64 = stats
        .scatter
        .iter()
        .map(|s| -(c - 1.0) / 2.0 * (ln2pi + sx.ln()) - 0.5 * c.ln() - s / (2.0 * sx))
        .sum();
    let v = s1 + sx / c;
    let sum: f64 = stats.means.iter().sum();
    let sum_sq: f64 = stats.means.iter().map(|m| m * m).sum();
    let logdet = (g - 1.0) * v.ln() + (v + g * s2).ln();
    let quad = (sum_sq - s2 * sum * sum / (v + g * s2)) / v;
    within - 0.5 * (g * ln2pi + logdet + quad)
}

/// Exact `log p(X)` via the factorized route.
pub fn gre_evidence(config: &GreConfig, data: &Tensor) -> Result<f64, ModelError> {
    check_data(config, data)?;
    Ok((0..config.d)
        .map(|d| evidence_dim(config, &group_stats(config, data, d)))
        .sum())
}

/// Posterior of one coordinate from dense joint-Gaussian conditioning.
///
/// Latents are ordered `(θ₂, θ₁,0, …, θ₁,card1−1)`.
#[derive(Debug, Clone)]
pub struct DenseConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_evidence: f64,
}

pub fn dense_conditional(config: &GreConfig, data: &Tensor, d: usize) -> Result<DenseConditional, ModelError> {
    check_data(config, data)?;
    let (s1, sx, s2) = (config.sigma_1.powi(2), config.sigma_x.powi(2), config.sigma_2.powi(2));
    let (g, c) = (config.card1, config.card0);
    let nz = 1 + g;
    let nx = g * c;
    // Group of each joint coordinate: None for θ₂.
    let group = |i: usize| -> Option<usize> {
        match i {
            0 => None,
            i if i < nz => Some(i - 1),
            i => Some((i - nz) / c),
        }
    };
    let n = nz + nx;
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let mut v = s2;
        if let (Some(a), Some(b)) = (group(i), group(j)) {
            if a == b {
                v += s1;
            }
        }
        if i == j && i >= nz {
            v += sx;
        }
        v
    });
    let sxx = cov.view((nz, nz), (nx, nx)).into_owned();
    let szx = cov.view((0, nz), (nz, nx)).into_owned();
    let szz = cov.view((0, 0), (nz, nz)).into_owned();
    let x = DVector::from_fn(nx, |k, _| data.at(k, d));
    let chol = sxx
        .cholesky()
        .ok_or_else(|| ModelError::Config("observation covariance is not positive definite".into()))?;
    let alpha = chol.solve(&x);
    let mean = &szx * &alpha;
    let post_cov = &szz - &szx * chol.solve(&szx.transpose());
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let log_evidence = -0.5 * (nx as f64 * ln2pi + logdet + x.dot(&alpha));
    Ok(DenseConditional {
        mean,
        cov: post_cov,
        log_evidence,
    })
}

/// Marginal posterior via dense conditioning, one coordinate at a time.
pub fn dense_posterior(config: &GreConfig, data: &Tensor) -> Result<GaussianPosterior, ModelError> {
    let mut post = GaussianPosterior {
        theta2_mean: Vec::new(),
        theta2_std: Vec::new(),
        theta1_mean: vec![Vec::new(); config.card1],
        theta1_std: vec![Vec::new(); config.card1],
        log_evidence: 0.0,
    };
    for d in 0..config.d {
        let dc = dense_conditional(config, data, d)?;
        post.theta2_mean.push(dc.mean[0]);
        post.theta2_std.push(dc.cov[(0, 0)].sqrt());
        for n in 0..config.card1 {
            post.theta1_mean[n].push(dc.mean[1 + n]);
            post.theta1_std[n].push(dc.cov[(1 + n, 1 + n)].sqrt());
        }
        post.log_evidence += dc.log_evidence;
    }
    Ok(post)
}

/// JSON sidecar describing a binary dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    /// `[card1, card0, D]`.
    pub shape: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

/// Raw little-endian `f64` bytes plus a pretty-printed sidecar.
pub fn encode_dataset(config: &GreConfig, data: &Tensor, seed: u64) -> Result<(Vec<u8>, String), ModelError> {
    check_data(config, data)?;
    let meta = DatasetMeta {
        shape: vec![config.card1, config.card0, config.d],
        seed,
        config_hash: config.hash(),
    };
    let bytes = data.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let sidecar = serde_json::to_string_pretty(&meta).expect("meta serializes");
    Ok((bytes, sidecar))
}

/// Parse a dataset back into a `[card1·card0, D]` tensor.
pub fn decode_dataset(bytes: &[u8], sidecar: &str) -> Result<(Tensor, DatasetMeta), ModelError> {
    let meta: DatasetMeta = serde_json::from_str(sidecar).map_err(|e| ModelError::Dataset(e.to_string()))?;
    if meta.shape.len() != 3 || meta.shape.contains(&0) {
        return Err(ModelError::Dataset(format!(
            "shape {:?} is not [card1, card0, D]",
            meta.shape
        )));
    }
    let numel = meta
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| ModelError::Dataset("shape overflows".into()))?;
    if bytes.len() != numel * 8 {
        return Err(ModelError::Dataset(format!(
            "expected {} bytes, found {}",
            numel * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Dataset("non-finite value".into()));
    }
    let t = Tensor::matrix(meta.shape[0] * meta.shape[1], meta.shape[2], data)
        .map_err(|e| ModelError::Dataset(e.to_string()))?;
    Ok((t, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GreConfig {
        GreConfig {
            d: 1,
            card1: 2,
            card0: 2,
            sigma_x: 0.7,
            sigma_1: 1.3,
            sigma_2: 0.9,
        }
    }

    #[test]
    fn template_shapes() {
        let config = GreConfig {
            d: 8,
            card1: 100,
            ..GreConfig::default()
        };
        let t = build_gre(&config).unwrap();
        assert_eq!(t.rv(0).event_dim, 8);
        assert_eq!(t.rv(1).event_dim, 8);
        let m = template::ground(&t, &config.cards()).unwrap();
        assert_eq!(m.count(1), 100);
        let one = GreConfig {
            card1: 1,
            card0: 1,
            ..GreConfig::default()
        };
        let m = template::ground(&build_gre(&one).unwrap(), &one.cards()).unwrap();
        assert_eq!(m.total_ground(), 3);
    }

    #[test]
    fn symmetric_single_observation() {
        let config = GreConfig {
            d: 1,
            card1: 1,
            card0: 1,
            ..GreConfig::default()
        };
        let data = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let post = analytic_posterior(&config, &data).unwrap();
        assert_eq!(post.theta2_mean[0], 0.0);
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 3.0).ln();
        assert!((post.log_evidence - expected).abs() < 1e-14);
    }

    #[test]
    fn factorized_matches_dense() {
        for seed in 0..5 {
            let config = GreConfig {
                d: 2,
                card1: 3,
                card0: 4,
                ..tiny()
            };
            let data = sample_dataset(&config, seed).unwrap();
            let a = analytic_posterior(&config, &data).unwrap();
            let b = dense_posterior(&config, &data).unwrap();
            assert!((a.log_evidence - b.log_evidence).abs() < 1e-8);
            for d in 0..2 {
                assert!((a.theta2_mean[d] - b.theta2_mean[d]).abs() < 1e-10);
                assert!((a.theta2_std[d] - b.theta2_std[d]).abs() < 1e-10);
                for n in 0..3 {
                    assert!((a.theta1_mean[n][d] - b.theta1_mean[n][d]).abs() < 1e-10);
                    assert!((a.theta1_std[n][d] - b.theta1_std[n][d]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn uninformative_likelihood_returns_prior() {
        let config = GreConfig { sigma_x: 1e3, ..tiny() };
        let data = sample_dataset(
            &GreConfig {
                sigma_x: 1.0,
                ..config.clone()
            },
            3,
        )
        .unwrap();
        let post = analytic_posterior(&config, &data).unwrap();
        assert!(post.theta2_mean[0].abs() < 1e-3);
        assert!((post.theta2_std[0] - config.sigma_2).abs() < 1e-3);
    }

    #[test]
    fn more_data_never_widens_the_posterior() {
        let small = GreConfig { card0: 3, ..tiny() };
        let big = GreConfig { card0: 6, ..tiny() };
        let a = analytic_posterior(&small, &sample_dataset(&small, 1).unwrap()).unwrap();
        let b = analytic_posterior(&big, &sample_dataset(&big, 1).unwrap()).unwrap();
        assert!(b.theta2_std[0] <= a.theta2_std[0]);
        assert!(b.theta1_std[0][0] <= a.theta1_std[0][0]);
    }

    #[test]
    fn dataset_round_trip() {
        let config = GreConfig {
            d: 3,
            card1: 4,
            card0: 2,
            ..GreConfig::default()
        };
        let data = sample_dataset(&config, 11).unwrap();
        let (bytes, sidecar) = encode_dataset(&config, &data, 11).unwrap();
        let (back, meta) = decode_dataset(&bytes, &sidecar).unwrap();
        assert_eq!(back, data);
        assert_eq!(meta.seed, 11);
        assert_eq!(meta.config_hash, config.hash());
        assert!(decode_dataset(&bytes[1..], &sidecar).is_err());
        assert!(decode_dataset(&bytes, "{\"shape\":[1,1,1],\"seed\":0}").is_err());
    }

    #[test]
    fn datasets_are_seed_deterministic() {
        let c = GreConfig::default();
        assert_eq!(sample_dataset(&c, 4).unwrap(), sample_dataset(&c, 4).unwrap());
        assert_ne!(sample_dataset(&c, 4).unwrap(), sample_dataset(&c, 5).unwrap());
    }

    #[test]
    fn wrong_data_shape_is_rejected() {
        let err = analytic_posterior(&tiny(), &Tensor::zeros(&[3, 1])).unwrap_err();
        assert!(matches!(err, ModelError::Shape { .. }));
    }
}

//! Experiment runner for plate-amortized variational inference.
//!
//! Every command reads an [`ExperimentConfig`] and writes its artifacts under
//! `output.dir`. Outputs are byte-for-byte reproducible from the config and
//! seed, apart from the `wall_ms` columns.

pub mod config;
pub mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pavi::autodiff::Tensor;
use pavi::checkpoint::encode_store;
use pavi::models::{analytic_posterior, encode_dataset, sample_dataset};
use pavi::pavi::{
    asymptotic_elbo, initial_elbo, steps_to_fraction, ArchConfig, Architecture, ParamCount, PaviError, Scheme, Trace,
    TrainData,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{ExperimentConfig, ModelSection, Problem};

/// JSON schema of the report written by `sanity`.
pub const SANITY_REPORT_SCHEMA: &str = include_str!("../schema/sanity_report.schema.json");

/// Tool version with the source revision it was built from.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("PAVI_GIT_DESCRIBE"));

pub const COMPARE_HEADER: &str = "series,scheme,encoding_size,dataset,seed,steps_to_95,initial_elbo,asymptotic_elbo,\
asymptotic_sd,full_elbo,params_flows,params_encodings,params_encoder,params_total,wall_ms";

pub const PARAM_COUNT_HEADER: &str = "scheme,plate,card,flows,encodings,encoder,total";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error(transparent)]
    Pavi(PaviError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::Pavi(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<PaviError> for CliError {
    fn from(e: PaviError) -> Self {
        match e {
            PaviError::Divergence { step, reason } => CliError::Divergence { step, reason },
            PaviError::Config(m) => CliError::Config(m),
            other => CliError::Pavi(other),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

/// Load `path` (or the defaults) and apply the overrides. `--seed` sets
/// `train.seed`, except for `gen-data` where it sets `data_seed`.
pub fn resolve(path: Option<&Path>, overrides: &Overrides, seed_is_data: bool) -> Result<ExperimentConfig, CliError> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        if seed_is_data {
            config.data_seed = seed;
        } else {
            config.train.seed = seed;
        }
    }
    if let Some(out) = &overrides.out {
        config.output.dir = out.clone();
    }
    Ok(config)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.into(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_hash: String,
    train_seed: u64,
    data_seed: u64,
    schemes: Vec<&'static str>,
    /// SHA-256 of each deterministic artifact; `null` for files carrying wall time.
    files: BTreeMap<&'a str, Option<String>>,
    config: &'a ExperimentConfig,
}

fn write_manifest(
    config: &ExperimentConfig,
    command: &'static str,
    schemes: Vec<&'static str>,
    files: BTreeMap<&str, Option<String>>,
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        tool: "pavi",
        version: VERSION,
        command,
        config_hash: config.hash()?,
        train_seed: config.train.seed,
        data_seed: config.data_seed,
        schemes,
        files,
        config,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(&config.output.dir, "manifest.json", json.as_bytes())
}

fn trace_csv(trace: &Trace, wall_time: bool) -> String {
    if wall_time {
        return trace.to_csv();
    }
    let mut t = trace.clone();
    t.rows.iter_mut().for_each(|r| r.wall_ms = 0.0);
    t.to_csv()
}

fn train_data(scheme: Scheme, data: &[Tensor]) -> TrainData {
    match scheme {
        Scheme::PaviESa => TrainData::PriorPredictive,
        _ => TrainData::Fixed(data.to_vec()),
    }
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// Result of `train`.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: Trace,
    pub arch: Architecture,
}

/// Train one scheme and write `trace.csv`, `checkpoint.bin` and `manifest.json`.
pub fn cmd_train(config: &ExperimentConfig, scheme: Option<Scheme>, quiet: bool) -> Result<TrainOutcome, CliError> {
    let problem = config.problem()?;
    let scheme = scheme.unwrap_or(config.schemes[0]);
    let data = problem.data(config.data_seed)?;
    let mut arch = Architecture::build(
        &problem.template,
        &problem.cards_full,
        &problem.cards_redu,
        scheme,
        &config.arch,
        config.train.seed,
    )?;
    let trace = arch.train(&train_data(scheme, &data), &config.train)?;
    let dir = &config.output.dir;
    let trace_path = write(dir, "trace.csv", trace_csv(&trace, config.output.wall_time).as_bytes())?;
    let ckpt = encode_store(arch.store());
    write(dir, "checkpoint.bin", &ckpt)?;
    let trace_hash = (!config.output.wall_time).then(|| sha256(trace_csv(&trace, false).as_bytes()));
    let files = BTreeMap::from([("trace.csv", trace_hash), ("checkpoint.bin", Some(sha256(&ckpt)))]);
    write_manifest(config, "train", vec![scheme.label()], files)?;
    let (mean, sd) = asymptotic_elbo(&trace.elbos());
    say(
        quiet,
        format!(
            "{}: {} steps, asymptotic ELBO {mean:.3} ± {sd:.3}, wrote {}",
            scheme.label(),
            trace.rows.len(),
            trace_path.display()
        ),
    );
    Ok(TrainOutcome { trace, arch })
}

/// One row of `compare.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub series: String,
    pub scheme: Scheme,
    pub encoding_size: Option<usize>,
    pub dataset: usize,
    pub seed: u64,
    pub steps_to_95: Option<usize>,
    pub initial_elbo: f64,
    pub asymptotic_elbo: f64,
    pub asymptotic_sd: f64,
    pub full_elbo: f64,
    pub params: ParamCount,
    pub wall_ms: f64,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl CompareRow {
    fn csv(&self, wall_time: bool) -> String {
        let p = &self.params;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.series,
            self.scheme.label(),
            opt(self.encoding_size),
            self.dataset,
            self.seed,
            opt(self.steps_to_95),
            self.initial_elbo,
            self.asymptotic_elbo,
            self.asymptotic_sd,
            self.full_elbo,
            p.flows,
            p.encodings,
            p.encoder,
            p.total,
            if wall_time { self.wall_ms } else { 0.0 }
        )
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn summary_rows(series: &str, rows: &[&CompareRow], wall_time: bool) -> [String; 2] {
    let col = |f: &dyn Fn(&CompareRow) -> Option<f64>| mean_sd(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    let cols = [
        col(&|r| r.steps_to_95.map(|s| s as f64)),
        col(&|r| Some(r.initial_elbo)),
        col(&|r| Some(r.asymptotic_elbo)),
        col(&|r| Some(r.asymptotic_sd)),
        col(&|r| Some(r.full_elbo)),
        col(&|r| Some(r.params.flows as f64)),
        col(&|r| Some(r.params.encodings as f64)),
        col(&|r| Some(r.params.encoder as f64)),
        col(&|r| Some(r.params.total as f64)),
        col(&|r| Some(if wall_time { r.wall_ms } else { 0.0 })),
    ];
    let first = rows[0];
    [("mean", 0), ("sd", 1)].map(|(tag, k)| {
        let mut line = format!("{series},{},{},{tag},,", first.scheme.label(), opt(first.encoding_size));
        let vals: Vec<String> = cols
            .iter()
            .map(|c| {
                let v = if k == 0 { c.0 } else { c.1 };
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            })
            .collect();
        line.push_str(&vals.join(","));
        line
    })
}

/// Per-series mean ELBO curve, block-averaged to at most `points` points.
fn mean_curve(traces: &[&Trace], points: usize) -> Vec<(f64, f64)> {
    let len = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    if len == 0 {
        return Vec::new();
    }
    let block = len.div_ceil(points);
    (0..len)
        .step_by(block)
        .map(|start| {
            let end = (start + block).min(len);
            let sum: f64 = traces
                .iter()
                .flat_map(|t| t.rows[start..end].iter().map(|r| r.elbo))
                .sum();
            let n = (traces.len() * (end - start)) as f64;
            ((start + end - 1) as f64 / 2.0, sum / n)
        })
        .collect()
}

/// Result of `compare`.
#[derive(Debug)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub csv: String,
    pub svg: String,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(CliError::config)
}

fn arch_for(config: &ExperimentConfig, encoding_size: Option<usize>) -> ArchConfig {
    let mut arch = config.arch.clone();
    if let Some(e) = encoding_size {
        arch.encodings.size = e;
        arch.encodings.sizes.clear();
    }
    arch
}

/// Train every series on every (dataset, seed) pair; write `compare.csv`, `compare.svg` and `manifest.json`.
pub fn cmd_compare(config: &ExperimentConfig, quiet: bool) -> Result<CompareOutcome, CliError> {
    let series = config.series();
    if series.len() < 2 {
        return Err(CliError::Config(format!(
            "comparison needs at least two series, the config defines {}",
            series.len()
        )));
    }
    let problem = config.problem()?;
    let ev = &config.evaluation;
    let jobs: Vec<(usize, usize, u64)> = (0..series.len())
        .flat_map(|s| (0..ev.n_datasets).flat_map(move |d| (0..ev.n_seeds as u64).map(move |k| (s, d, k))))
        .collect();
    say(
        quiet,
        format!("compare: {} runs over {} series", jobs.len(), series.len()),
    );
    let results: Vec<Result<(CompareRow, Trace), CliError>> = pool(ev.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(s, d, k)| {
                let (label, scheme, enc) = &series[s];
                let data = problem.data(config.data_seed + d as u64)?;
                let seed = config.train.seed + k;
                let mut arch = Architecture::build(
                    &problem.template,
                    &problem.cards_full,
                    &problem.cards_redu,
                    *scheme,
                    &arch_for(config, *enc),
                    seed,
                )?;
                let mut train = config.train.clone();
                train.seed = seed;
                let trace = arch.train(&train_data(*scheme, &data), &train)?;
                let elbos = trace.elbos();
                let (asym, sd) = asymptotic_elbo(&elbos);
                let init = initial_elbo(&elbos);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let (full_elbo, _) = arch.estimate_elbo(&data, ev.elbo_samples, &mut rng)?;
                let row = CompareRow {
                    series: label.clone(),
                    scheme: *scheme,
                    encoding_size: *enc,
                    dataset: d,
                    seed,
                    steps_to_95: steps_to_fraction(&elbos, init, asym, 0.95),
                    initial_elbo: init,
                    asymptotic_elbo: asym,
                    asymptotic_sd: sd,
                    full_elbo,
                    params: arch.parameter_count(),
                    wall_ms: trace.rows.last().map_or(0.0, |r| r.wall_ms),
                };
                Ok((row, trace))
            })
            .collect()
    });
    let results: Vec<(CompareRow, Trace)> = results.into_iter().collect::<Result<_, _>>()?;
    let wall = config.output.wall_time;
    let mut csv = String::from(COMPARE_HEADER);
    csv.push('\n');
    let mut curves = Vec::new();
    for (label, _, _) in &series {
        let mine: Vec<&(CompareRow, Trace)> = results.iter().filter(|(r, _)| &r.series == label).collect();
        for (row, _) in &mine {
            let _ = writeln!(csv, "{}", row.csv(wall));
        }
        let rows: Vec<&CompareRow> = mine.iter().map(|(r, _)| r).collect();
        for line in summary_rows(label, &rows, wall) {
            let _ = writeln!(csv, "{line}");
        }
        let traces: Vec<&Trace> = mine.iter().map(|(_, t)| t).collect();
        curves.push((label.clone(), mean_curve(&traces, 400)));
    }
    let floor = curves
        .iter()
        .filter_map(|(_, c)| c.get(c.len() / 20).map(|p| p.1))
        .fold(f64::INFINITY, f64::min);
    let svg = svg::line_plot(
        "ELBO during training",
        "step",
        "ELBO (mean over runs)",
        &curves,
        floor.is_finite().then_some(floor),
    );
    write(&config.output.dir, "compare.csv", csv.as_bytes())?;
    write(&config.output.dir, "compare.svg", svg.as_bytes())?;
    let csv_hash = (!wall).then(|| sha256(csv.as_bytes()));
    let files = BTreeMap::from([("compare.csv", csv_hash), ("compare.svg", Some(sha256(svg.as_bytes())))]);
    let mut schemes: Vec<&'static str> = series.iter().map(|s| s.1.label()).collect();
    schemes.dedup();
    write_manifest(config, "compare", schemes, files)?;
    say(
        quiet,
        format!("wrote {}", config.output.dir.join("compare.csv").display()),
    );
    Ok(CompareOutcome {
        rows: results.into_iter().map(|(r, _)| r).collect(),
        csv,
        svg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct LatentReport {
    /// `theta2` or `theta1[n]`.
    pub name: String,
    /// Fraction of sampled coordinates within two analytic posterior stds.
    pub coverage: f64,
    /// Largest `|sample mean − analytic mean| / analytic std` over coordinates.
    pub mean_error: f64,
    pub coverage_by_dim: Vec<f64>,
    pub mean_error_by_dim: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SanitySummary {
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub max_mean_error: f64,
    /// Every coverage in `[0.9, 1.0]` and every mean error below `0.3`.
    pub within_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SanityReport {
    pub scheme: Scheme,
    /// The architecture was never optimized, so samples follow the prior.
    pub untrained: bool,
    pub trained_steps: u64,
    pub n_samples: usize,
    pub config_hash: String,
    pub log_evidence: f64,
    pub latents: Vec<LatentReport>,
    pub summary: SanitySummary,
}

/// Compare posterior samples with the conjugate oracle; write `sanity.json`, `sanity.svg` and `manifest.json`.
pub fn cmd_sanity(config: &ExperimentConfig, quiet: bool) -> Result<SanityReport, CliError> {
    let problem = config.problem()?;
    let gre = problem
        .gre
        .clone()
        .ok_or_else(|| CliError::Config("sanity needs a GRE model with an analytic posterior".into()))?;
    let scheme = config.schemes[0];
    let data = problem.data(config.data_seed)?;
    let mut arch = Architecture::build(
        &problem.template,
        &problem.cards_full,
        &problem.cards_redu,
        scheme,
        &config.arch,
        config.train.seed,
    )?;
    if config.train.steps > 0 {
        arch.train(&train_data(scheme, &data), &config.train)?;
    }
    let n = config.evaluation.posterior_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5a17);
    let draws = arch.sample_posterior(&data, n, &mut rng)?;
    let post = analytic_posterior(&gre, &data[0]).map_err(CliError::config)?;
    let d = gre.d;
    let mut latents = Vec::new();
    let mut scatter = Vec::new();
    let mut describe = |name: String, rv: usize, row: usize, mean: &[f64], std: &[f64]| {
        let mut cov = Vec::with_capacity(d);
        let mut err = Vec::with_capacity(d);
        let z: Vec<Vec<f64>> = draws
            .iter()
            .map(|v| (0..d).map(|k| (v.0[rv].at(row, k) - mean[k]) / std[k]).collect())
            .collect();
        for k in 0..d {
            cov.push(z.iter().filter(|zs| zs[k].abs() <= 2.0).count() as f64 / n as f64);
            err.push((z.iter().map(|zs| zs[k]).sum::<f64>() / n as f64).abs());
        }
        let pts: Vec<(f64, f64)> = z
            .iter()
            .take(200)
            .map(|zs| (zs[0], if d > 1 { zs[1] } else { 0.0 }))
            .collect();
        scatter.push((name.clone(), pts));
        latents.push(LatentReport {
            name,
            coverage: cov.iter().sum::<f64>() / d as f64,
            mean_error: err.iter().copied().fold(0.0, f64::max),
            coverage_by_dim: cov,
            mean_error_by_dim: err,
        });
    };
    describe("theta2".into(), 0, 0, &post.theta2_mean, &post.theta2_std);
    for g in 0..gre.card1 {
        describe(format!("theta1[{g}]"), 1, g, &post.theta1_mean[g], &post.theta1_std[g]);
    }
    let coverages = latents.iter().flat_map(|l| l.coverage_by_dim.iter().copied());
    let min_coverage = coverages.clone().fold(f64::INFINITY, f64::min);
    let max_coverage = coverages.fold(f64::NEG_INFINITY, f64::max);
    let max_mean_error = latents.iter().map(|l| l.mean_error).fold(0.0, f64::max);
    let report = SanityReport {
        scheme,
        untrained: arch.is_untrained(),
        trained_steps: arch.trained_steps(),
        n_samples: n,
        config_hash: config.hash()?,
        log_evidence: post.log_evidence,
        latents,
        summary: SanitySummary {
            min_coverage,
            max_coverage,
            max_mean_error,
            within_bounds: min_coverage >= 0.9 && max_coverage <= 1.0 && max_mean_error < 0.3,
        },
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let y_label = if d > 1 { "standardized coordinate 2" } else { "0" };
    let legend: Vec<(String, Vec<(f64, f64)>)> = if scatter.len() > 8 {
        let rest: Vec<(f64, f64)> = scatter[1..].iter().flat_map(|(_, p)| p.iter().copied()).collect();
        vec![scatter[0].clone(), ("theta1".into(), rest)]
    } else {
        scatter
    };
    let svg = svg::scatter_plot(
        "Posterior samples in analytic std units",
        "standardized coordinate 1",
        y_label,
        &legend,
        2.0,
    );
    write(&config.output.dir, "sanity.json", json.as_bytes())?;
    write(&config.output.dir, "sanity.svg", svg.as_bytes())?;
    let files = BTreeMap::from([
        ("sanity.json", Some(sha256(json.as_bytes()))),
        ("sanity.svg", Some(sha256(svg.as_bytes()))),
    ]);
    write_manifest(config, "sanity", vec![scheme.label()], files)?;
    say(
        quiet,
        format!(
            "sanity: coverage [{min_coverage:.3}, {max_coverage:.3}], max mean error {max_mean_error:.3} std{}",
            if report.untrained { " (untrained)" } else { "" }
        ),
    );
    Ok(report)
}

/// One row of `param_counts.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountRow {
    pub scheme: Scheme,
    pub plate: String,
    pub card: usize,
    pub count: ParamCount,
}

/// Count weights of every scheme at every configured plate card; write `param_counts.csv`.
pub fn cmd_param_count(config: &ExperimentConfig, quiet: bool) -> Result<Vec<ParamCountRow>, CliError> {
    let problem = config.problem()?;
    let pc = &config.param_count;
    let mut rows = Vec::new();
    for &scheme in &config.schemes {
        for &card in &pc.cards {
            let p = problem.with_card(&pc.plate, card)?;
            let arch = Architecture::build(&p.template, &p.cards_full, &p.cards_redu, scheme, &config.arch, 0)?;
            rows.push(ParamCountRow {
                scheme,
                plate: pc.plate.clone(),
                card,
                count: arch.parameter_count(),
            });
        }
    }
    let mut csv = String::from(PARAM_COUNT_HEADER);
    csv.push('\n');
    for r in &rows {
        let c = &r.count;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.scheme.label(),
            r.plate,
            r.card,
            c.flows,
            c.encodings,
            c.encoder,
            c.total
        );
    }
    write(&config.output.dir, "param_counts.csv", csv.as_bytes())?;
    if !quiet {
        print!("{csv}");
    }
    Ok(rows)
}

/// Draw one GRE dataset from the prior predictive; write `data.bin` and its `data.json` sidecar.
pub fn cmd_gen_data(config: &ExperimentConfig, quiet: bool) -> Result<PathBuf, CliError> {
    let ModelSection::Gre(gre) = &config.model else {
        return Err(CliError::Config("gen-data needs a GRE model".into()));
    };
    let data = sample_dataset(gre, config.data_seed).map_err(CliError::config)?;
    let (bytes, sidecar) = encode_dataset(gre, &data, config.data_seed).map_err(CliError::config)?;
    let path = write(&config.output.dir, "data.bin", &bytes)?;
    write(&config.output.dir, "data.json", sidecar.as_bytes())?;
    say(quiet, format!("wrote {} ({} rows)", path.display(), data.shape()[0]));
    Ok(path)
}

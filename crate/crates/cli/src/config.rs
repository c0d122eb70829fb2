//! Experiment configuration files.

use std::path::{Path, PathBuf};

use pavi::autodiff::Tensor;
use pavi::models::{build_gre, decode_dataset, sample_dataset, GreConfig};
use pavi::pavi::{ArchConfig, Scheme, TrainConfig};
use pavi::template::{ground, Cards, GraphTemplate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Which hierarchical model to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    /// Gaussian random effects with a conjugate oracle.
    Gre(GreConfig),
    /// Any template file; data are drawn from its prior predictive.
    Template { path: PathBuf, cards: Cards },
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::Gre(GreConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Evaluation {
    pub n_datasets: usize,
    pub n_seeds: usize,
    /// Monte Carlo draws for full-model ELBO estimates.
    pub elbo_samples: usize,
    /// Posterior draws used by `sanity`.
    pub posterior_samples: usize,
    /// Worker threads for independent runs; 0 uses every core.
    pub workers: usize,
}

impl Default for Evaluation {
    fn default() -> Self {
        Self {
            n_datasets: 20,
            n_seeds: 5,
            elbo_samples: 1000,
            posterior_samples: 1000,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Output {
    /// Not serialized, so the config hash does not depend on where artifacts go.
    #[serde(skip_serializing)]
    pub dir: PathBuf,
    /// Write measured wall time into traces; `false` writes zeros.
    pub wall_time: bool,
}

impl Default for Output {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            wall_time: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamCountSection {
    pub plate: String,
    pub cards: Vec<usize>,
}

impl Default for ParamCountSection {
    fn default() -> Self {
        Self {
            plate: "P1".into(),
            cards: vec![2, 20, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    /// Reduced plate extents; missing plates are not subsampled.
    pub reduced: Cards,
    pub schemes: Vec<Scheme>,
    /// Encoding widths to sweep in `compare`; empty keeps `arch.encodings`.
    pub encoding_sizes: Vec<usize>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub evaluation: Evaluation,
    pub output: Output,
    pub data_seed: u64,
    /// Binary dataset written by `gen-data`; its sidecar sits next to it with a `.json` extension.
    pub dataset: Option<PathBuf>,
    pub param_count: ParamCountSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            reduced: Cards::new(),
            schemes: vec![Scheme::PaviF],
            encoding_sizes: Vec::new(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            evaluation: Evaluation::default(),
            output: Output::default(),
            data_seed: 0,
            dataset: None,
            param_count: ParamCountSection::default(),
        }
    }
}

/// A grounded problem: template, plate extents and how to get data.
#[derive(Debug, Clone)]
pub struct Problem {
    pub template: GraphTemplate,
    pub cards_full: Cards,
    pub cards_redu: Cards,
    pub gre: Option<GreConfig>,
    dataset: Option<Tensor>,
}

impl Problem {
    /// Observed tensors in template order.
    pub fn data(&self, seed: u64) -> Result<Vec<Tensor>, CliError> {
        if let Some(d) = &self.dataset {
            return Ok(vec![d.clone()]);
        }
        match &self.gre {
            Some(gre) => Ok(vec![sample_dataset(gre, seed).map_err(CliError::config)?]),
            None => {
                let model = ground(&self.template, &self.cards_full).map_err(CliError::config)?;
                let values = model.sample_prior(&mut ChaCha8Rng::seed_from_u64(seed));
                Ok(self
                    .template
                    .observed_indices()
                    .into_iter()
                    .map(|i| values.0[i].clone())
                    .collect())
            }
        }
    }

    /// The same problem with one plate resized.
    pub fn with_card(&self, plate: &str, card: usize) -> Result<Problem, CliError> {
        if !self.cards_full.contains_key(plate) {
            return Err(CliError::Config(format!("unknown plate {plate:?}")));
        }
        let mut p = self.clone();
        p.cards_full.insert(plate.to_string(), card);
        let redu = p.cards_redu[plate].min(card);
        p.cards_redu.insert(plate.to_string(), redu);
        if let Some(g) = &mut p.gre {
            if plate == "P1" {
                g.card1 = card;
            } else {
                g.card0 = card;
            }
        }
        p.dataset = None;
        Ok(p)
    }
}

impl ExperimentConfig {
    /// Parse and validate a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new("."))).map_err(|e| match e {
            CliError::Config(m) if m.starts_with(':') => CliError::Config(format!("{}{m}", path.display())),
            other => other,
        })
    }

    /// Parse and validate config text, resolving relative paths against `base`.
    /// Syntax errors read `:line:column: message`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!(":{}:{}: {e}", e.line(), e.column())))?;
        if let ModelSection::Template { path: p, .. } = &mut config.model {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut config.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(CliError::Config(m.to_string()));
        if self.schemes.is_empty() {
            return fail("schemes must not be empty");
        }
        if self.encoding_sizes.contains(&0) {
            return fail("encoding sizes must be positive");
        }
        if self.train.mc_samples == 0 {
            return fail("train.mc_samples must be positive");
        }
        if self.evaluation.n_datasets == 0 || self.evaluation.n_seeds == 0 {
            return fail("evaluation needs at least one dataset and one seed");
        }
        if self.evaluation.elbo_samples == 0 || self.evaluation.posterior_samples == 0 {
            return fail("evaluation sample counts must be positive");
        }
        if self.param_count.cards.contains(&0) {
            return fail("param_count cards must be positive");
        }
        if self.dataset.is_some() && !matches!(self.model, ModelSection::Gre(_)) {
            return fail("dataset files are only supported for GRE models");
        }
        Ok(())
    }

    /// Ground the model section and check the reduced extents.
    pub fn problem(&self) -> Result<Problem, CliError> {
        let (template, cards_full, gre) = match &self.model {
            ModelSection::Gre(g) => (build_gre(g).map_err(CliError::config)?, g.cards(), Some(g.clone())),
            ModelSection::Template { path, cards } => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                (
                    GraphTemplate::from_json(&text).map_err(CliError::config)?,
                    cards.clone(),
                    None,
                )
            }
        };
        for plate in template.plates() {
            if !cards_full.contains_key(plate) {
                return Err(CliError::Config(format!("no card given for plate {plate:?}")));
            }
        }
        let mut cards_redu = cards_full.clone();
        for (plate, &card) in &self.reduced {
            match cards_full.get(plate) {
                None => return Err(CliError::Config(format!("reduced card for unknown plate {plate:?}"))),
                Some(&full) if card == 0 || card > full => {
                    return Err(CliError::Config(format!(
                        "reduced card {card} for {plate:?} must lie in 1..={full}"
                    )))
                }
                Some(_) => {
                    cards_redu.insert(plate.clone(), card);
                }
            }
        }
        let dataset = match (&self.dataset, &gre) {
            (Some(path), Some(g)) => Some(load_dataset(path, g)?),
            _ => None,
        };
        Ok(Problem {
            template,
            cards_full,
            cards_redu,
            gre,
            dataset,
        })
    }

    /// Hex SHA-256 of the canonical config JSON, followed by the template text when there is one.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("config serializes").as_bytes());
        if let ModelSection::Template { path, .. } = &self.model {
            let text = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            h.update(&text);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// `(label, scheme, encoding size)` for every series `compare` runs.
    pub fn series(&self) -> Vec<(String, Scheme, Option<usize>)> {
        if self.encoding_sizes.is_empty() {
            return self.schemes.iter().map(|&s| (s.label().to_string(), s, None)).collect();
        }
        self.schemes
            .iter()
            .flat_map(|&s| {
                self.encoding_sizes
                    .iter()
                    .map(move |&e| (format!("{}/enc{e}", s.label()), s, Some(e)))
            })
            .collect()
    }
}

/// Path of the JSON sidecar for a binary dataset.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

fn load_dataset(path: &Path, gre: &GreConfig) -> Result<Tensor, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let side = sidecar_path(path);
    let sidecar = std::fs::read_to_string(&side).map_err(|e| CliError::Config(format!("{}: {e}", side.display())))?;
    let (data, meta) = decode_dataset(&bytes, &sidecar).map_err(CliError::config)?;
    if meta.shape != [gre.card1, gre.card0, gre.d] {
        return Err(CliError::Config(format!(
            "dataset shape {:?} does not match the model's [{}, {}, {}]",
            meta.shape, gre.card1, gre.card0, gre.d
        )));
    }
    Ok(data)
}

//! Plate-amortized variational families, stochastic reduced-ELBO training and
//! full-model inference.
//!
//! Every latent template `i` owns one conditional flow stack `F_i` (one per
//! ground variable for [`Scheme::Baseline`]). A ground variable `θ_{i,n}` is
//! drawn by sampling `u` from the prior conditional `p_i(· | π(θ_{i,n}))` and
//! pushing it through `F_i` conditioned on the encoding `E_{i,n}`, so that
//!
//! ```text
//! log q_{i,n}(θ | π(θ)) = log p_i(u | π(θ)) − log|det J_F(u)|,  u = F⁻¹(θ).
//! ```
//!
//! Training draws a branching per step: for every plate, `Card^redu` indices
//! without replacement. The selected ground variables form the reduced model;
//! each template's terms are scaled by `N^full / N^redu`, which keeps the
//! reduced ELBO an unbiased estimate of the full one.
//!
//! Latents with a uniform prior are handled in logit space: the variational
//! variable is `z` with `θ = low + (high − low)·sigmoid(z)`, whose prior is the
//! standard logistic distribution.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encodings::{level_of_rvs, DeepSetEncoder, EncoderConfig, EncodingConfig, EncodingError, EncodingStore};
use crate::flows::{FlowConfig, FlowError, FlowStack};
use crate::optim::{Adam, AdamConfig};
use crate::template::{
    extents_of, flatten_index, ground, plate_levels, unflatten, Cards, DistributionKind, GraphTemplate, GroundModel,
    PlateLevel, TemplateError, Values,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaviError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, PaviError>;

/// Variational scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Shared flows, free encodings.
    PaviF,
    /// Shared flows, encoder trained on slices of one dataset.
    PaviE,
    /// Shared flows, encoder trained on fresh reduced-model prior-predictive draws.
    PaviESa,
    /// One flow per ground variable, no encodings.
    Baseline,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::PaviF => "pavi_f",
            Scheme::PaviE => "pavi_e",
            Scheme::PaviESa => "pavi_e_sa",
            Scheme::Baseline => "baseline",
        }
    }
}

/// Network shapes shared by every scheme.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub flow: FlowConfig,
    pub encodings: EncodingConfig,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub mc_samples: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            mc_samples: 8,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One stochastic branching of the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBatch {
    pub step: u64,
    /// Sorted sampled indices per plate.
    pub plate_indices: BTreeMap<String, Vec<usize>>,
    /// Cardinalities of the branching.
    pub cards: Cards,
    /// `ground[i]`: full-model flat indices of template `i`, in reduced row-major order.
    pub ground: Vec<Vec<usize>>,
    /// `N_i^full / N_i^redu` per template.
    pub scale: Vec<f64>,
}

/// Pre-drawn standard noise for `samples` Monte Carlo draws of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub samples: usize,
    /// `[samples · |B_i|, D_i]` per latent template.
    eps: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone)]
enum FlowSet {
    Shared(FlowStack),
    PerGround(Vec<FlowStack>),
}

impl FlowSet {
    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            FlowSet::Shared(f) => f.param_ids(),
            FlowSet::PerGround(fs) => fs.iter().flat_map(FlowStack::param_ids).collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum Conditioning {
    None,
    Free(EncodingStore),
    Encoder(Box<DeepSetEncoder>),
    /// Frozen full-cardinality arrays per level.
    Fixed(Vec<Tensor>),
}

/// Exact parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub flows: usize,
    pub encodings: usize,
    pub encoder: usize,
    pub total: usize,
}

/// Training data source.
#[derive(Debug, Clone)]
pub enum TrainData {
    /// Observed arrays at full cardinality, one per observed template in order.
    Fixed(Vec<Tensor>),
    /// Fresh reduced-model prior-predictive draw every step.
    PriorPredictive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub elbo: f64,
    pub wall_ms: f64,
    pub grad_norm_total: f64,
    /// Per-group norms, aligned with [`Trace::groups`].
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub groups: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn header(&self) -> String {
        let mut cols = vec![
            "step".to_string(),
            "elbo".into(),
            "wall_ms".into(),
            "grad_norm_total".into(),
        ];
        cols.extend(self.groups.iter().map(|g| format!("grad_norm_{g}")));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.3},{}", r.step, r.elbo, r.wall_ms, r.grad_norm_total));
            for g in &r.grad_norms {
                out.push_str(&format!(",{g}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn elbos(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.elbo).collect()
    }
}

/// Mean and standard deviation of the ELBO over the last 10% of steps.
pub fn asymptotic_elbo(elbos: &[f64]) -> (f64, f64) {
    if elbos.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = (elbos.len() / 10).max(1);
    let tail = &elbos[elbos.len() - k..];
    let mean = tail.iter().sum::<f64>() / k as f64;
    let var = tail.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k.max(2) - 1) as f64;
    (mean, var.sqrt())
}

/// Mean of the first `min(10, len)` ELBO values.
pub fn initial_elbo(elbos: &[f64]) -> f64 {
    let k = elbos.len().min(10);
    elbos[..k].iter().sum::<f64>() / k as f64
}

/// First step whose trailing-50 mean exceeds `init + fraction·(target − init)`.
pub fn steps_to_fraction(elbos: &[f64], init: f64, target: f64, fraction: f64) -> Option<usize> {
    let threshold = init + fraction * (target - init);
    let window = 50;
    let mut sum = 0.0;
    for (t, e) in elbos.iter().enumerate() {
        sum += e;
        if t >= window {
            sum -= elbos[t - window];
        }
        let n = (t + 1).min(window) as f64;
        if sum / n > threshold {
            return Some(t);
        }
    }
    None
}

/// `Σ_i (N_i^full/N_i^redu) Σ_{n ∈ B_i} log p_i(θ_{i,n} | π(θ_{i,n}))` over every template.
pub fn reduced_log_p(model_full: &GroundModel, batch: &ReducedBatch, values: &Values) -> Result<f64> {
    model_full.check_values(values)?;
    let mut total = 0.0;
    for (i, rows) in batch.ground.iter().enumerate() {
        let s: f64 = rows
            .iter()
            .map(|&n| model_full.conditional_log_prob(values, i, n))
            .sum();
        total += batch.scale[i] * s;
    }
    Ok(total)
}

fn logistic_log_pdf(tape: &mut Tape, z: Var) -> std::result::Result<Var, AutodiffError> {
    let a = tape.softplus(z)?;
    let nz = tape.neg(z)?;
    let b = tape.softplus(nz)?;
    let s = tape.add(a, b)?;
    tape.neg(s)
}

fn repeat_rows(rows: &[usize], samples: usize) -> Vec<usize> {
    (0..samples).flat_map(|_| rows.iter().copied()).collect()
}

/// Rows `s·R_child + r ↦ s·R_parent + parent[r]`.
fn parent_rows(parent: &[usize], r_parent: usize, samples: usize) -> Vec<usize> {
    (0..samples)
        .flat_map(|s| parent.iter().map(move |&p| s * r_parent + p))
        .collect()
}

/// Result of one batched pass.
struct Pass {
    /// Constrained values per template, `[S·R_i, D_i]`.
    theta: Vec<Option<Var>>,
    /// Per-sample ELBO contributions `[S, 1]`.
    per_sample: Var,
}

/// A built variational family.
#[derive(Debug, Clone)]
pub struct Architecture {
    template: GraphTemplate,
    scheme: Scheme,
    config: ArchConfig,
    cards_full: Cards,
    cards_redu: Cards,
    model_full: GroundModel,
    model_redu: GroundModel,
    levels: Vec<PlateLevel>,
    level_of: Vec<Option<usize>>,
    store: ParamStore,
    flows: Vec<Option<FlowSet>>,
    conditioning: Conditioning,
    trained_steps: u64,
}

impl Architecture {
    /// Build and initialize every weight from `seed`.
    pub fn build(
        template: &GraphTemplate,
        cards_full: &Cards,
        cards_redu: &Cards,
        scheme: Scheme,
        config: &ArchConfig,
        seed: u64,
    ) -> Result<Self> {
        let model_full = ground(template, cards_full)?;
        let model_redu = ground(template, cards_redu)?;
        for p in template.plates() {
            if cards_redu[p] > cards_full[p] {
                return Err(PaviError::Config(format!(
                    "reduced cardinality of {p} exceeds the full one"
                )));
            }
        }
        if template.observed_indices().is_empty() {
            return Err(PaviError::Config("template has no observed variable".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let levels = plate_levels(template);
        let level_of = level_of_rvs(template, &levels);
        let conditioning = match scheme {
            Scheme::PaviF => Conditioning::Free(EncodingStore::new(
                &mut store,
                template,
                cards_full,
                &config.encodings,
                &mut rng,
            )?),
            Scheme::PaviE | Scheme::PaviESa => Conditioning::Encoder(Box::new(DeepSetEncoder::new(
                &mut store,
                template,
                &config.encodings,
                &config.encoder,
                &mut rng,
            )?)),
            Scheme::Baseline => Conditioning::None,
        };
        let mut arch = Self {
            template: template.clone(),
            scheme,
            config: config.clone(),
            cards_full: cards_full.clone(),
            cards_redu: cards_redu.clone(),
            model_full,
            model_redu,
            levels,
            level_of,
            store,
            flows: Vec::new(),
            conditioning,
            trained_steps: 0,
        };
        let widths: Vec<usize> = (0..template.rvs().len()).map(|i| arch.cond_width(i)).collect();
        for (i, rv) in template.rvs().iter().enumerate() {
            if rv.observed {
                arch.flows.push(None);
                continue;
            }
            let set = if scheme == Scheme::Baseline {
                let stacks = (0..arch.model_full.count(i))
                    .map(|n| {
                        FlowStack::new(
                            &mut arch.store,
                            &format!("flow.{}[{n}]", rv.name),
                            rv.event_dim,
                            0,
                            &config.flow,
                            &mut rng,
                        )
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                FlowSet::PerGround(stacks)
            } else {
                FlowSet::Shared(FlowStack::new(
                    &mut arch.store,
                    &format!("flow.{}", rv.name),
                    rv.event_dim,
                    widths[i],
                    &config.flow,
                    &mut rng,
                )?)
            };
            arch.flows.push(Some(set));
        }
        Ok(arch)
    }

    /// Baseline whose per-ground flows all carry this PAVI-F architecture's
    /// shared weights and are conditioned on its current encodings.
    pub fn tied_baseline(&self) -> Result<Self> {
        let Conditioning::Free(enc) = &self.conditioning else {
            return Err(PaviError::Config("tied baseline needs a PAVI-F architecture".into()));
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fixed: Vec<Tensor> = (0..self.levels.len())
            .map(|l| self.store.get(enc.param(l)).clone())
            .collect();
        let mut flows = Vec::new();
        for (i, rv) in self.template.rvs().iter().enumerate() {
            let Some(FlowSet::Shared(shared)) = &self.flows[i] else {
                flows.push(None);
                continue;
            };
            let mut stacks = Vec::new();
            for n in 0..self.model_full.count(i) {
                let f = FlowStack::new(
                    &mut store,
                    &format!("flow.{}[{n}]", rv.name),
                    rv.event_dim,
                    shared.cond_dim(),
                    &self.config.flow,
                    &mut rng,
                )?;
                f.copy_weights(&mut store, shared, &self.store)?;
                stacks.push(f);
            }
            flows.push(Some(FlowSet::PerGround(stacks)));
        }
        Ok(Self {
            scheme: Scheme::Baseline,
            store,
            flows,
            conditioning: Conditioning::Fixed(fixed),
            ..self.clone()
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn template(&self) -> &GraphTemplate {
        &self.template
    }

    pub fn model_full(&self) -> &GroundModel {
        &self.model_full
    }

    pub fn model_redu(&self) -> &GroundModel {
        &self.model_redu
    }

    pub fn cards_full(&self) -> &Cards {
        &self.cards_full
    }

    pub fn cards_redu(&self) -> &Cards {
        &self.cards_redu
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn levels(&self) -> &[PlateLevel] {
        &self.levels
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn is_untrained(&self) -> bool {
        self.trained_steps == 0
    }

    /// Free encoding arrays (PAVI-F only).
    pub fn encoding_store(&self) -> Option<&EncodingStore> {
        match &self.conditioning {
            Conditioning::Free(e) => Some(e),
            _ => None,
        }
    }

    pub fn encoder(&self) -> Option<&DeepSetEncoder> {
        match &self.conditioning {
            Conditioning::Encoder(e) => Some(e),
            _ => None,
        }
    }

    fn cond_width(&self, i: usize) -> usize {
        let Some(l) = self.level_of[i] else { return 0 };
        match &self.conditioning {
            Conditioning::None => 0,
            Conditioning::Free(e) => e.width(l),
            Conditioning::Encoder(e) => e.width(l),
            Conditioning::Fixed(arrays) => arrays[l].cols(),
        }
    }

    /// Parameter ids of template `i`'s flows.
    pub fn flow_param_ids(&self, i: usize) -> Vec<ParamId> {
        self.flows[i].as_ref().map(FlowSet::param_ids).unwrap_or_default()
    }

    pub fn parameter_count(&self) -> ParamCount {
        let flows = (0..self.flows.len())
            .map(|i| self.store.count(&self.flow_param_ids(i)))
            .sum();
        let encodings = self.encoding_store().map(EncodingStore::param_count).unwrap_or(0);
        let encoder = self.encoder().map(|e| self.store.count(&e.param_ids())).unwrap_or(0);
        ParamCount {
            flows,
            encodings,
            encoder,
            total: flows + encodings + encoder,
        }
    }

    fn batch_from_indices(&self, step: u64, plate_indices: BTreeMap<String, Vec<usize>>) -> ReducedBatch {
        let cards: Cards = plate_indices.iter().map(|(p, v)| (p.clone(), v.len())).collect();
        let ground = self
            .template
            .rvs()
            .iter()
            .map(|rv| {
                let redu_ext = extents_of(&rv.plates, &cards);
                let full_ext = extents_of(&rv.plates, &self.cards_full);
                let count: usize = redu_ext.iter().product();
                (0..count)
                    .map(|r| {
                        let local = unflatten(r, &redu_ext);
                        let global: Vec<usize> = rv
                            .plates
                            .iter()
                            .zip(&local)
                            .map(|(p, &k)| plate_indices[p][k])
                            .collect();
                        flatten_index(&global, &full_ext)
                    })
                    .collect()
            })
            .collect::<Vec<Vec<usize>>>();
        let scale = (0..ground.len())
            .map(|i| self.model_full.count(i) as f64 / ground[i].len() as f64)
            .collect();
        ReducedBatch {
            step,
            plate_indices,
            cards,
            ground,
            scale,
        }
    }

    /// Sample `Card^redu(P)` indices without replacement for every plate.
    pub fn sample_branching<R: Rng + ?Sized>(&self, rng: &mut R, step: u64) -> ReducedBatch {
        let plate_indices = self
            .template
            .plates()
            .iter()
            .map(|p| {
                let mut idx = sample_indices(rng, self.cards_full[p], self.cards_redu[p]).into_vec();
                idx.sort_unstable();
                (p.clone(), idx)
            })
            .collect();
        self.batch_from_indices(step, plate_indices)
    }

    /// Branching with explicit plate indices (sorted internally).
    pub fn branching_from(&self, step: u64, plate_indices: &BTreeMap<String, Vec<usize>>) -> Result<ReducedBatch> {
        let mut sorted = BTreeMap::new();
        for p in self.template.plates() {
            let mut idx = plate_indices
                .get(p)
                .cloned()
                .ok_or_else(|| PaviError::Config(format!("no indices for plate {p}")))?;
            idx.sort_unstable();
            idx.dedup();
            if idx.is_empty() || idx.iter().any(|&k| k >= self.cards_full[p]) {
                return Err(PaviError::Config(format!("invalid indices for plate {p}")));
            }
            sorted.insert(p.clone(), idx);
        }
        Ok(self.batch_from_indices(step, sorted))
    }

    /// Every index of every plate.
    pub fn full_batch(&self) -> ReducedBatch {
        let plate_indices = self
            .template
            .plates()
            .iter()
            .map(|p| (p.clone(), (0..self.cards_full[p]).collect()))
            .collect();
        self.batch_from_indices(0, plate_indices)
    }

    fn batch_model(&self, batch: &ReducedBatch) -> Result<std::borrow::Cow<'_, GroundModel>> {
        use std::borrow::Cow;
        if batch.cards == self.cards_redu {
            Ok(Cow::Borrowed(&self.model_redu))
        } else if batch.cards == self.cards_full {
            Ok(Cow::Borrowed(&self.model_full))
        } else {
            Ok(Cow::Owned(ground(&self.template, &batch.cards)?))
        }
    }

    /// Observed rows of the batch, gathered from full-cardinality arrays.
    pub fn batch_data(&self, batch: &ReducedBatch, data_full: &[Tensor]) -> Result<Vec<Tensor>> {
        let observed = self.template.observed_indices();
        if data_full.len() != observed.len() {
            return Err(PaviError::Data(format!(
                "expected {} observed arrays, got {}",
                observed.len(),
                data_full.len()
            )));
        }
        observed
            .iter()
            .zip(data_full)
            .map(|(&o, t)| {
                let expected = [self.model_full.count(o), self.template.rv(o).event_dim];
                if t.shape() != expected {
                    return Err(PaviError::Data(format!(
                        "`{}` has shape {:?}, expected {expected:?}",
                        self.template.rv(o).name,
                        t.shape()
                    )));
                }
                let rows: Vec<Vec<f64>> = batch.ground[o].iter().map(|&n| t.row_slice(n).to_vec()).collect();
                Ok(Tensor::matrix(rows.len(), expected[1], rows.concat())?)
            })
            .collect()
    }

    /// Standard noise for `samples` draws of every latent in `batch`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: &ReducedBatch, samples: usize, rng: &mut R) -> Noise {
        let eps = self
            .template
            .rvs()
            .iter()
            .enumerate()
            .map(|(i, rv)| {
                if rv.observed {
                    return None;
                }
                let rows = samples * batch.ground[i].len();
                let data = (0..rows * rv.event_dim)
                    .map(|_| match rv.kind {
                        DistributionKind::Uniform { .. } => {
                            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
                            (u / (1.0 - u)).ln()
                        }
                        _ => rng.sample::<f64, _>(StandardNormal),
                    })
                    .collect();
                Some(Tensor::matrix(rows, rv.event_dim, data).expect("noise shape"))
            })
            .collect();
        Noise { samples, eps }
    }

    /// Conditioning rows for template `i` in `[S·R_i, width]` layout.
    fn conditioning_rows(
        &self,
        tape: &mut Tape,
        i: usize,
        batch: &ReducedBatch,
        encoded: &Option<Vec<Var>>,
        samples: usize,
    ) -> Result<Option<Var>> {
        let Some(l) = self.level_of[i] else { return Ok(None) };
        let rows = &batch.ground[i];
        Ok(match &self.conditioning {
            Conditioning::None => None,
            Conditioning::Free(enc) => Some(enc.slice(tape, &self.store, l, &repeat_rows(rows, samples))?),
            Conditioning::Encoder(_) => {
                let e = encoded.as_ref().expect("encoder output")[l];
                let local: Vec<usize> = (0..rows.len()).collect();
                Some(tape.gather_rows(e, &repeat_rows(&local, samples))?)
            }
            Conditioning::Fixed(arrays) => {
                let c = tape.constant(arrays[l].clone())?;
                Some(tape.gather_rows(c, &repeat_rows(rows, samples))?)
            }
        })
    }

    fn encode_batch(&self, tape: &mut Tape, batch: &ReducedBatch, data: &[Tensor]) -> Result<Option<Vec<Var>>> {
        match &self.conditioning {
            Conditioning::Encoder(e) => Ok(Some(e.encode(tape, &self.store, &self.template, &batch.cards, data)?)),
            _ => Ok(None),
        }
    }

    /// Apply template `i`'s flows (forward or inverse) to `[S·R, D]` rows.
    #[allow(clippy::too_many_arguments)]
    fn apply_flows(
        &self,
        tape: &mut Tape,
        i: usize,
        batch: &ReducedBatch,
        x: Var,
        cond: Option<Var>,
        samples: usize,
        inverse: bool,
    ) -> Result<(Var, Var)> {
        let run = |tape: &mut Tape, f: &FlowStack, x: Var, c: Option<Var>| -> Result<(Var, Var)> {
            Ok(if inverse {
                f.inverse(tape, &self.store, x, c)?
            } else {
                f.forward(tape, &self.store, x, c)?
            })
        };
        match self.flows[i].as_ref().expect("latent flows") {
            FlowSet::Shared(f) => run(tape, f, x, cond),
            FlowSet::PerGround(stacks) => {
                let rows = &batch.ground[i];
                let r = rows.len();
                let mut ys = Vec::with_capacity(r);
                let mut lds = Vec::with_capacity(r);
                for (k, &n) in rows.iter().enumerate() {
                    let idx: Vec<usize> = (0..samples).map(|s| s * r + k).collect();
                    let xk = tape.gather_rows(x, &idx)?;
                    let ck = cond.map(|c| tape.gather_rows(c, &idx)).transpose()?;
                    let (y, ld) = run(tape, &stacks[n], xk, ck)?;
                    ys.push(y);
                    lds.push(ld);
                }
                let perm: Vec<usize> = (0..samples)
                    .flat_map(|s| (0..r).map(move |k| k * samples + s))
                    .collect();
                let y = tape.concat_rows(&ys)?;
                let ld = tape.concat_rows(&lds)?;
                Ok((tape.gather_rows(y, &perm)?, tape.gather_rows(ld, &perm)?))
            }
        }
    }

    /// Summed parent values of template `i`'s batch rows, `[S·R_i, D]`.
    fn parent_mean(
        &self,
        tape: &mut Tape,
        model: &GroundModel,
        i: usize,
        theta: &[Option<Var>],
        batch: &ReducedBatch,
        samples: usize,
    ) -> Result<Option<Var>> {
        let mut mean: Option<Var> = None;
        for (k, &p) in self.template.parents_of(i).iter().enumerate() {
            let idx = parent_rows(&model.ground_rv(i).parents[k], batch.ground[p].len(), samples);
            let g = tape.gather_rows(theta[p].expect("parent sampled first"), &idx)?;
            mean = Some(match mean {
                None => g,
                Some(m) => tape.add(m, g)?,
            });
        }
        Ok(mean)
    }

    /// Per-row `log p_i(x | mean)` in `[rows, 1]`, for Gaussian kinds.
    fn gaussian_rows(tape: &mut Tape, kind: &DistributionKind, x: Var, mean: Option<Var>) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (m, s) = match (kind, mean) {
            (DistributionKind::GaussianParentMean { scale }, Some(m)) => (m, *scale),
            (DistributionKind::FixedGaussian { mean, scale }, _) => {
                (tape.constant(Tensor::filled(&shape, *mean))?, *scale)
            }
            _ => return Err(PaviError::Config("distribution kind has no Gaussian density".into())),
        };
        let sd = tape.constant(Tensor::filled(&shape, s))?;
        let lp = tape.gaussian_log_pdf(x, m, sd)?;
        Ok(tape.sum_cols(lp)?)
    }

    /// Sum `[S·R, 1]` rows into per-sample totals `[S, 1]`.
    fn per_sample(tape: &mut Tape, rows: Var, samples: usize) -> Result<Var> {
        let r = tape.value(rows).rows() / samples;
        let m = tape.reshape(rows, &[samples, r])?;
        Ok(tape.sum_cols(m)?)
    }

    /// Reparameterized pass over a batch: samples every latent and accumulates
    /// scaled `log p − log q` per Monte Carlo sample.
    fn pass(&self, tape: &mut Tape, batch: &ReducedBatch, data: &[Tensor], noise: &Noise) -> Result<Pass> {
        let samples = noise.samples;
        let model = self.batch_model(batch)?;
        let encoded = self.encode_batch(tape, batch, data)?;
        let n = self.template.rvs().len();
        let mut theta: Vec<Option<Var>> = vec![None; n];
        let mut total = tape.constant(Tensor::zeros(&[samples, 1]))?;
        let observed = self.template.observed_indices();
        for i in 0..n {
            let rv = self.template.rv(i);
            let mean = self.parent_mean(tape, &model, i, &theta, batch, samples)?;
            let contribution = if rv.observed {
                let o = observed.iter().position(|&k| k == i).expect("observed index");
                let x = tape.constant(data[o].clone())?;
                let local: Vec<usize> = (0..batch.ground[i].len()).collect();
                let xr = tape.gather_rows(x, &repeat_rows(&local, samples))?;
                theta[i] = Some(xr);
                Self::gaussian_rows(tape, &rv.kind, xr, mean)?
            } else {
                let eps = tape.constant(noise.eps[i].clone().expect("latent noise"))?;
                let cond = self.conditioning_rows(tape, i, batch, &encoded, samples)?;
                let (log_base, u) = match &rv.kind {
                    DistributionKind::Uniform { .. } => (logistic_log_pdf(tape, eps)?, eps),
                    kind => {
                        let (m, s) = match (kind, mean) {
                            (DistributionKind::GaussianParentMean { scale }, Some(m)) => (m, *scale),
                            (DistributionKind::FixedGaussian { mean, scale }, _) => {
                                let shape = tape.value(eps).shape().to_vec();
                                (tape.constant(Tensor::filled(&shape, *mean))?, *scale)
                            }
                            _ => unreachable!("validated template"),
                        };
                        let se = tape.scale(eps, s)?;
                        let u = tape.add(m, se)?;
                        (Self::gaussian_rows(tape, kind, u, Some(m))?, u)
                    }
                };
                let log_base = if matches!(rv.kind, DistributionKind::Uniform { .. }) {
                    tape.sum_cols(log_base)?
                } else {
                    log_base
                };
                let (z, log_det) = self.apply_flows(tape, i, batch, u, cond, samples, false)?;
                let log_q = tape.sub(log_base, log_det)?;
                let (log_p, value) = match rv.kind {
                    DistributionKind::Uniform { low, high } => {
                        let lp = logistic_log_pdf(tape, z)?;
                        let lp = tape.sum_cols(lp)?;
                        let sg = tape.sigmoid(z)?;
                        let sg = tape.scale(sg, high - low)?;
                        (lp, tape.add_scalar(sg, low)?)
                    }
                    _ => (Self::gaussian_rows(tape, &rv.kind, z, mean)?, z),
                };
                theta[i] = Some(value);
                tape.sub(log_p, log_q)?
            };
            let ps = Self::per_sample(tape, contribution, samples)?;
            let scaled = tape.scale(ps, batch.scale[i])?;
            total = tape.add(total, scaled)?;
        }
        Ok(Pass {
            theta,
            per_sample: total,
        })
    }

    /// Differentiable Monte Carlo reduced ELBO with the given noise.
    pub fn reduced_elbo(&self, tape: &mut Tape, batch: &ReducedBatch, data: &[Tensor], noise: &Noise) -> Result<Var> {
        let pass = self.pass(tape, batch, data, noise)?;
        let s = tape.sum(pass.per_sample)?;
        Ok(tape.scale(s, 1.0 / noise.samples as f64)?)
    }

    /// `Σ_i (N_i^full/N_i^redu) Σ_{n ∈ B_i} log q_{i,n}(θ_{i,n} | π(θ_{i,n}))` at fixed values.
    ///
    /// `values` covers the full model; `data` holds the batch's observed rows
    /// (used by encoder-based schemes).
    pub fn reduced_log_q(&self, batch: &ReducedBatch, values: &Values, data: &[Tensor]) -> Result<f64> {
        self.model_full.check_values(values)?;
        let mut tape = Tape::new();
        let encoded = self.encode_batch(&mut tape, batch, data)?;
        let mut total = 0.0;
        for i in self.template.latent_indices() {
            let rv = self.template.rv(i);
            let rows = &batch.ground[i];
            let gathered: Vec<Vec<f64>> = rows.iter().map(|&n| values.get(i).row_slice(n).to_vec()).collect();
            let theta = Tensor::matrix(rows.len(), rv.event_dim, gathered.concat())?;
            let mut means: Vec<Vec<f64>> = rows.iter().map(|&n| self.model_full.parent_sum(values, i, n)).collect();
            let (x, jac) = match rv.kind {
                DistributionKind::Uniform { low, high } => {
                    let mut jac = 0.0;
                    let z: Vec<f64> = theta
                        .data()
                        .iter()
                        .map(|&t| {
                            let p = (t - low) / (high - low);
                            jac += ((high - low) * p * (1.0 - p)).ln();
                            (p / (1.0 - p)).ln()
                        })
                        .collect();
                    (Tensor::matrix(rows.len(), rv.event_dim, z)?, jac)
                }
                _ => (theta, 0.0),
            };
            let xv = tape.constant(x)?;
            let cond = self.conditioning_rows(&mut tape, i, batch, &encoded, 1)?;
            let (u, ld) = self.apply_flows(&mut tape, i, batch, xv, cond, 1, true)?;
            let base = match rv.kind {
                DistributionKind::Uniform { .. } => {
                    let l = logistic_log_pdf(&mut tape, u)?;
                    tape.sum_cols(l)?
                }
                _ => {
                    let mean = match rv.kind {
                        DistributionKind::GaussianParentMean { .. } => {
                            let flat: Vec<f64> = means.drain(..).flatten().collect();
                            Some(tape.constant(Tensor::matrix(rows.len(), rv.event_dim, flat)?)?)
                        }
                        _ => None,
                    };
                    Self::gaussian_rows(&mut tape, &rv.kind, u, mean)?
                }
            };
            let lq = tape.add(base, ld)?;
            let s: f64 = tape.value(lq).data().iter().sum::<f64>() - jac;
            total += batch.scale[i] * s;
        }
        Ok(total)
    }

    /// Conditioning arrays per plate level at full cardinality, for the
    /// schemes that have them.
    pub fn full_encodings(&self, data_full: &[Tensor]) -> Result<Option<Vec<Tensor>>> {
        let batch = self.full_batch();
        let data = self.batch_data(&batch, data_full)?;
        Ok(match &self.conditioning {
            Conditioning::None => None,
            Conditioning::Free(e) => Some(e.param_ids().iter().map(|&id| self.store.get(id).clone()).collect()),
            Conditioning::Fixed(arrays) => Some(arrays.clone()),
            Conditioning::Encoder(_) => {
                let mut tape = Tape::new();
                let vars = self.encode_batch(&mut tape, &batch, &data)?.expect("encoder output");
                Some(vars.into_iter().map(|v| tape.value(v).clone()).collect())
            }
        })
    }

    /// Full-model `log q(Θ)` at fixed latent values.
    pub fn log_q_full(&self, values: &Values, data_full: &[Tensor]) -> Result<f64> {
        let batch = self.full_batch();
        let data = self.batch_data(&batch, data_full)?;
        self.reduced_log_q(&batch, values, &data)
    }

    /// Joint posterior draws at full cardinality. Observed slots hold the data.
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        data_full: &[Tensor],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Values>> {
        let batch = self.full_batch();
        let data = self.batch_data(&batch, data_full)?;
        let observed = self.template.observed_indices();
        let mut out = Vec::with_capacity(n);
        let chunk = 64;
        while out.len() < n {
            let samples = chunk.min(n - out.len());
            let noise = self.sample_noise(&batch, samples, rng);
            let mut tape = Tape::new();
            let pass = self.pass(&mut tape, &batch, &data, &noise)?;
            for s in 0..samples {
                let tensors = (0..self.template.rvs().len())
                    .map(|i| {
                        if let Some(o) = observed.iter().position(|&k| k == i) {
                            return data_full[o].clone();
                        }
                        let v = tape.value(pass.theta[i].expect("latent sampled"));
                        let r = batch.ground[i].len();
                        let d = v.cols();
                        Tensor::matrix(r, d, v.data()[s * r * d..(s + 1) * r * d].to_vec()).expect("sample shape")
                    })
                    .collect();
                out.push(Values(tensors));
            }
        }
        Ok(out)
    }

    /// Full-model ELBO estimate: mean and standard error over `n` draws.
    pub fn estimate_elbo<R: Rng + ?Sized>(&self, data_full: &[Tensor], n: usize, rng: &mut R) -> Result<(f64, f64)> {
        let batch = self.full_batch();
        let data = self.batch_data(&batch, data_full)?;
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let samples = 64.min(n - values.len());
            let noise = self.sample_noise(&batch, samples, rng);
            let mut tape = Tape::new();
            let pass = self.pass(&mut tape, &batch, &data, &noise)?;
            values.extend_from_slice(tape.value(pass.per_sample).data());
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        Ok((mean, (var / n as f64).sqrt()))
    }

    /// Gradient-norm groups: one per latent template, then encodings or encoder.
    pub fn grad_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = self
            .template
            .latent_indices()
            .into_iter()
            .map(|i| (self.template.rv(i).name.clone(), self.flow_param_ids(i)))
            .collect();
        match &self.conditioning {
            Conditioning::Free(e) => groups.push(("encodings".into(), e.param_ids().to_vec())),
            Conditioning::Encoder(e) => groups.push(("encoder".into(), e.param_ids())),
            _ => {}
        }
        groups
    }

    /// Rows of each free encoding array touched by a batch.
    fn touched_rows(&self, batch: &ReducedBatch) -> BTreeMap<ParamId, Vec<usize>> {
        let Conditioning::Free(enc) = &self.conditioning else {
            return BTreeMap::new();
        };
        (0..self.levels.len())
            .map(|l| {
                let member = self.levels[l].members[0];
                (enc.param(l), batch.ground[member].clone())
            })
            .collect()
    }

    /// Run `config.steps` Adam steps on the reduced ELBO.
    pub fn train(&mut self, data: &TrainData, config: &TrainConfig) -> Result<Trace> {
        match (self.scheme, data) {
            (Scheme::PaviESa, TrainData::Fixed(_)) => {
                return Err(PaviError::Config("PAVI-E-sa trains on prior-predictive draws".into()))
            }
            (s, TrainData::PriorPredictive) if s != Scheme::PaviESa => {
                return Err(PaviError::Config(format!("{} trains on one fixed dataset", s.label())))
            }
            _ => {}
        }
        if config.mc_samples == 0 {
            return Err(PaviError::Config("mc_samples must be positive".into()));
        }
        if let TrainData::Fixed(d) = data {
            self.batch_data(&self.full_batch(), d)?;
        }
        let groups = self.grad_groups();
        let mut trace = Trace {
            groups: groups.iter().map(|(g, _)| g.clone()).collect(),
            rows: Vec::with_capacity(config.steps as usize),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut adam = Adam::new(config.adam.clone());
        let start = Instant::now();
        for step in 0..config.steps {
            let batch = self.sample_branching(&mut rng, step);
            let batch_data = match data {
                TrainData::Fixed(full) => self.batch_data(&batch, full)?,
                TrainData::PriorPredictive => {
                    let draw = self.model_redu.sample_prior(&mut rng);
                    self.template
                        .observed_indices()
                        .iter()
                        .map(|&o| draw.0[o].clone())
                        .collect()
                }
            };
            let noise = self.sample_noise(&batch, config.mc_samples, &mut rng);
            let diverged = |reason: String| PaviError::Divergence { step, reason };
            let mut tape = Tape::new();
            let elbo = self
                .reduced_elbo(&mut tape, &batch, &batch_data, &noise)
                .map_err(|e| match e {
                    PaviError::Autodiff(AutodiffError::NonFinite { .. }) | PaviError::Flow(_) => {
                        diverged(e.to_string())
                    }
                    other => other,
                })?;
            let value = tape.scalar(elbo);
            if !value.is_finite() {
                return Err(diverged("non-finite ELBO".into()));
            }
            let loss = tape.neg(elbo)?;
            let grads = tape.backward(loss)?;
            let norms: Vec<f64> = groups.iter().map(|(_, ids)| grad_norm(&grads, ids)).collect();
            let total = norms.iter().map(|n| n * n).sum::<f64>().sqrt();
            if !total.is_finite() {
                return Err(diverged("non-finite gradient".into()));
            }
            let touched = self.touched_rows(&batch);
            adam.step(&mut self.store, &grads, &touched);
            self.trained_steps += 1;
            trace.rows.push(TraceRow {
                step,
                elbo: value,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                grad_norm_total: total,
                grad_norms: norms,
            });
        }
        Ok(trace)
    }
}

fn grad_norm(grads: &Gradients, ids: &[ParamId]) -> f64 {
    ids.iter()
        .filter_map(|&id| grads.param(id))
        .map(Tensor::norm_sq)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_gre, sample_gre, GreConfig};
    use crate::template::cards;

    fn small_flow() -> ArchConfig {
        ArchConfig {
            flow: FlowConfig {
                stages: vec![
                    crate::flows::StageConfig::Affine {
                        scale_mode: crate::flows::ScaleMode::Diagonal,
                        hidden: 8,
                    },
                    crate::flows::StageConfig::Maf { hidden: vec![8] },
                ],
            },
            encodings: EncodingConfig::with_size(4),
            encoder: EncoderConfig {
                inducing_points: 4,
                ..EncoderConfig::default()
            },
        }
    }

    fn gre(card1: usize, card0: usize) -> (GreConfig, GraphTemplate) {
        let c = GreConfig {
            d: 2,
            card1,
            card0,
            ..GreConfig::default()
        };
        let t = build_gre(&c).unwrap();
        (c, t)
    }

    #[test]
    fn degenerate_branching_is_everything() {
        let (c, t) = gre(3, 2);
        let a = Architecture::build(&t, &c.cards(), &c.cards(), Scheme::PaviF, &small_flow(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for step in 0..5 {
            let b = a.sample_branching(&mut rng, step);
            assert_eq!(b.ground, a.full_batch().ground);
            assert!(b.scale.iter().all(|&s| s == 1.0));
        }
    }

    #[test]
    fn branching_is_a_cross_product() {
        let (c, t) = gre(4, 3);
        let a = Architecture::build(
            &t,
            &c.cards(),
            &cards(&[("P1", 2), ("P0", 2)]),
            Scheme::PaviF,
            &small_flow(),
            0,
        )
        .unwrap();
        let b = a
            .branching_from(
                0,
                &BTreeMap::from([("P1".into(), vec![2, 1]), ("P0".into(), vec![0, 2])]),
            )
            .unwrap();
        assert_eq!(b.ground[1], vec![1, 2]);
        assert_eq!(b.ground[2], vec![3, 5, 6, 8]);
        assert_eq!(b.scale, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn reduced_equals_full_without_subsampling() {
        let (c, t) = gre(2, 2);
        let a = Architecture::build(&t, &c.cards(), &c.cards(), Scheme::PaviF, &small_flow(), 0).unwrap();
        let values = sample_gre(&c, 4).unwrap();
        let lp = reduced_log_p(a.model_full(), &a.full_batch(), &values).unwrap();
        assert!((lp - a.model_full().log_prob(&values).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identity_flows_give_prior_log_q() {
        let (c, t) = gre(3, 2);
        let a = Architecture::build(&t, &c.cards(), &c.cards(), Scheme::PaviF, &small_flow(), 0).unwrap();
        let values = sample_gre(&c, 9).unwrap();
        let lq = a.log_q_full(&values, &[values.0[2].clone()]).unwrap();
        let m = a.model_full();
        let prior: f64 = (0..m.count(0))
            .map(|n| m.conditional_log_prob(&values, 0, n))
            .sum::<f64>()
            + (0..m.count(1))
                .map(|n| m.conditional_log_prob(&values, 1, n))
                .sum::<f64>();
        assert!((lq - prior).abs() < 1e-10);
    }

    #[test]
    fn baseline_counts_scale_with_groups() {
        let (c, t) = gre(3, 2);
        let a = Architecture::build(&t, &c.cards(), &c.cards(), Scheme::Baseline, &small_flow(), 0).unwrap();
        let per_stack = a.store().count(&a.flow_param_ids(0));
        assert_eq!(a.parameter_count().flows, per_stack * 4);
        assert_eq!(a.parameter_count().encodings, 0);
        let e = Architecture::build(&t, &c.cards(), &c.cards(), Scheme::PaviE, &small_flow(), 0).unwrap();
        let pc = e.parameter_count();
        assert_eq!(pc.encodings, 0);
        assert!(pc.encoder > 0);
        assert_eq!(pc.total, pc.flows + pc.encoder);
    }

    #[test]
    fn training_is_deterministic_and_zero_steps_is_a_no_op() {
        let (c, t) = gre(4, 2);
        let values = sample_gre(&c, 1).unwrap();
        let data = TrainData::Fixed(vec![values.0[2].clone()]);
        let redu = cards(&[("P1", 2), ("P0", 2)]);
        let mut a = Architecture::build(&t, &c.cards(), &redu, Scheme::PaviF, &small_flow(), 3).unwrap();
        let before = a.store().flatten();
        let empty = a
            .train(
                &data,
                &TrainConfig {
                    steps: 0,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        assert!(empty.rows.is_empty());
        assert_eq!(a.store().flatten(), before);
        assert!(a.is_untrained());
        let cfg = TrainConfig {
            steps: 20,
            seed: 5,
            ..TrainConfig::default()
        };
        let t1 = a.clone().train(&data, &cfg).unwrap();
        let t2 = a.clone().train(&data, &cfg).unwrap();
        assert_eq!(t1.elbos(), t2.elbos());
        assert_eq!(
            t1.header(),
            "step,elbo,wall_ms,grad_norm_total,grad_norm_theta2,grad_norm_theta1,grad_norm_encodings"
        );
    }

    #[test]
    fn scheme_data_contract() {
        let (c, t) = gre(2, 2);
        let mut a = Architecture::build(&t, &c.cards(), &c.cards(), Scheme::PaviESa, &small_flow(), 0).unwrap();
        let fixed = TrainData::Fixed(vec![Tensor::zeros(&[4, 2])]);
        assert!(matches!(
            a.train(&fixed, &TrainConfig::default()),
            Err(PaviError::Config(_))
        ));
        let trace = a
            .train(
                &TrainData::PriorPredictive,
                &TrainConfig {
                    steps: 3,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        assert_eq!(trace.rows.len(), 3);
        let mut f = Architecture::build(&t, &c.cards(), &c.cards(), Scheme::PaviF, &small_flow(), 0).unwrap();
        assert!(f.train(&TrainData::PriorPredictive, &TrainConfig::default()).is_err());
    }

    #[test]
    fn steps_to_fraction_uses_trailing_mean() {
        let elbos: Vec<f64> = (0..200).map(|t| if t < 100 { -100.0 } else { 0.0 }).collect();
        // The trailing-50 mean crosses −5 once 48 of 50 entries are zero.
        assert_eq!(steps_to_fraction(&elbos, -100.0, 0.0, 0.95), Some(147));
        assert_eq!(asymptotic_elbo(&elbos), (0.0, 0.0));
    }
}

//! Per-ground-variable conditioning vectors.
//!
//! Two sources are supported:
//! - [`EncodingStore`]: one free trainable array per plate level, sized by the
//!   full-model cardinalities and sliced per training step.
//! - [`DeepSetEncoder`]: a permutation-invariant network mapping observed data
//!   to encodings, following the [`BackwardPlateGraph`] from data levels
//!   towards the global level. The same weights apply at any cardinality.
//!
//! Pooling blocks are set-transformer stacks: an input projection, induced
//! set attention blocks (ISAB) and a pooling-by-attention head (PMA) with one
//! seed vector.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::template::{extents_of, level_name, plate_levels, project_index, Cards, GraphTemplate, PlateLevel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("index {index} out of range for level {level} with {count} rows")]
    IndexOutOfRange { level: String, index: usize, count: usize },
    #[error("plate level {0} is not reachable from any observed variable")]
    Unreachable(String),
    #[error("unsupported template for the encoder: {0}")]
    Unsupported(String),
    #[error("inconsistent data cardinalities: {0}")]
    Cardinality(String),
    #[error("invalid encoding configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EncodingError>;

/// Encoding width per plate level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    /// Width used for every level without an override.
    pub size: usize,
    /// Overrides keyed by level name, e.g. `"(P1)"` or `"()"`.
    pub sizes: BTreeMap<String, usize>,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            size: 8,
            sizes: BTreeMap::new(),
        }
    }
}

impl EncodingConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            sizes: BTreeMap::new(),
        }
    }

    pub fn size_for(&self, level: &PlateLevel) -> usize {
        self.sizes.get(&level.name()).copied().unwrap_or(self.size)
    }

    fn validate(&self, levels: &[PlateLevel]) -> Result<()> {
        if let Some(bad) = self.sizes.keys().find(|k| !levels.iter().any(|l| &l.name() == *k)) {
            return Err(EncodingError::Config(format!("no plate level named {bad}")));
        }
        if levels.iter().any(|l| self.size_for(l) == 0) {
            return Err(EncodingError::Config("encoding sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Level index of every latent template (`None` for observed ones).
pub fn level_of_rvs(template: &GraphTemplate, levels: &[PlateLevel]) -> Vec<Option<usize>> {
    (0..template.rvs().len())
        .map(|i| levels.iter().position(|l| l.members.contains(&i)))
        .collect()
}

/// Free encoding arrays `E_ℓ` of shape `[∏ Card^full, D_enc(ℓ)]`.
#[derive(Debug, Clone)]
pub struct EncodingStore {
    levels: Vec<PlateLevel>,
    params: Vec<ParamId>,
    widths: Vec<usize>,
    counts: Vec<usize>,
}

impl EncodingStore {
    /// Register every level array in `store`, initialized i.i.d. `N(0, 0.1²)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        template: &GraphTemplate,
        cards_full: &Cards,
        config: &EncodingConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = plate_levels(template);
        config.validate(&levels)?;
        let mut params = Vec::new();
        let mut widths = Vec::new();
        let mut counts = Vec::new();
        for level in &levels {
            let count: usize = extents_of(&level.plates, cards_full).iter().product();
            let width = config.size_for(level);
            let data = (0..count * width)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let t = Tensor::matrix(count, width, data)?;
            params.push(store.add(format!("encodings{}", level.name()), t));
            widths.push(width);
            counts.push(count);
        }
        Ok(Self {
            levels,
            params,
            widths,
            counts,
        })
    }

    pub fn levels(&self) -> &[PlateLevel] {
        &self.levels
    }

    pub fn width(&self, level: usize) -> usize {
        self.widths[level]
    }

    pub fn count(&self, level: usize) -> usize {
        self.counts[level]
    }

    pub fn param(&self, level: usize) -> ParamId {
        self.params[level]
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// `Σ_ℓ ∏ Card^full × D_enc(ℓ)`.
    pub fn param_count(&self) -> usize {
        self.counts.iter().zip(&self.widths).map(|(c, w)| c * w).sum()
    }

    /// Rows `indices` of level `level`, as a differentiable view of the store.
    pub fn slice(&self, tape: &mut Tape, store: &ParamStore, level: usize, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.counts[level]) {
            return Err(EncodingError::IndexOutOfRange {
                level: self.levels[level].name(),
                index: bad,
                count: self.counts[level],
            });
        }
        let e = tape.param(store, self.params[level])?;
        Ok(tape.gather_rows(e, indices)?)
    }
}

/// Source of a pooling edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    /// Observed template index.
    Data(usize),
    /// Latent plate level index.
    Level(usize),
}

/// One pooling step `source → target`, contracting the plates the target lacks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackwardEdge {
    pub source: Source,
    pub target: usize,
}

/// Edges fed by one observed variable, in evaluation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pipeline {
    pub observed: usize,
    pub edges: Vec<BackwardEdge>,
}

/// Reversed level dependencies pruned to a maximum branching.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPlateGraph {
    pub levels: Vec<PlateLevel>,
    pub pipelines: Vec<Pipeline>,
}

impl BackwardPlateGraph {
    /// Plates of a source node.
    pub fn source_plates<'a>(&'a self, template: &'a GraphTemplate, source: Source) -> &'a [String] {
        match source {
            Source::Data(o) => &template.rv(o).plates,
            Source::Level(l) => &self.levels[l].plates,
        }
    }

    /// Number of pipelines producing encodings for level `l`.
    pub fn fan_in(&self, l: usize) -> usize {
        self.pipelines
            .iter()
            .filter(|p| p.edges.iter().any(|e| e.target == l))
            .count()
    }
}

/// Build the backward plate graph of a template.
///
/// Level `ℓ_a` receives an edge from `ℓ_c` when a template at `ℓ_c` is a child of
/// a template at `ℓ_a`. Each observed variable spawns its own pipeline; within a
/// pipeline every level keeps at most one incoming edge, chosen among already
/// reachable sources by the smallest source level name.
pub fn build_backward_graph(template: &GraphTemplate) -> Result<BackwardPlateGraph> {
    let levels = plate_levels(template);
    let level_of = level_of_rvs(template, &levels);
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| {
        levels[b]
            .plates
            .len()
            .cmp(&levels[a].plates.len())
            .then_with(|| levels[a].name().cmp(&levels[b].name()))
    });
    let mut pipelines = Vec::new();
    let mut covered = BTreeSet::new();
    for o in template.observed_indices() {
        let o_plates = &template.rv(o).plates;
        if levels.iter().any(|l| &l.plates == o_plates) {
            return Err(EncodingError::Unsupported(format!(
                "observed `{}` shares plate level {} with a latent variable",
                template.rv(o).name,
                level_name(o_plates)
            )));
        }
        let mut fed: Vec<Source> = vec![Source::Data(o)];
        let mut edges = Vec::new();
        for &l in &order {
            let members_children: BTreeSet<usize> = levels[l]
                .members
                .iter()
                .flat_map(|&m| template.children_of(m))
                .collect();
            let candidates = fed.iter().copied().filter(|&s| match s {
                Source::Data(d) => members_children.contains(&d),
                Source::Level(k) => k != l && members_children.iter().any(|&c| level_of[c] == Some(k)),
            });
            let name = |s: Source| match s {
                Source::Data(d) => level_name(&template.rv(d).plates),
                Source::Level(k) => levels[k].name(),
            };
            if let Some(best) = candidates.min_by_key(|&s| (name(s), s)) {
                edges.push(BackwardEdge {
                    source: best,
                    target: l,
                });
                fed.push(Source::Level(l));
                covered.insert(l);
            }
        }
        pipelines.push(Pipeline { observed: o, edges });
    }
    if let Some(l) = (0..levels.len()).find(|l| !covered.contains(l)) {
        return Err(EncodingError::Unreachable(levels[l].name()));
    }
    Ok(BackwardPlateGraph { levels, pipelines })
}

/// Set-transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub heads: usize,
    pub head_units: usize,
    pub isab_blocks: usize,
    pub inducing_points: usize,
    /// Hidden width of the pointwise data network.
    pub rho_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            head_units: 4,
            isab_blocks: 2,
            inducing_points: 32,
            rho_hidden: 16,
        }
    }
}

fn init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    init_std(rows, cols, 1.0 / (rows.max(1) as f64).sqrt(), rng)
}

fn init_std<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        Ok(tape.affine(x, w, b)?)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, width])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (rows, width) = (tape.value(x).rows(), tape.value(x).cols());
        let inv = 1.0 / width as f64;
        let s = tape.sum_cols(x)?;
        let mean = tape.scale(s, inv)?;
        let mean = tape.broadcast_cols(mean, width)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.square(centered)?;
        let ss = tape.sum_cols(sq)?;
        let var = tape.scale(ss, inv)?;
        let var = tape.add_scalar(var, LN_EPS)?;
        let sd = tape.sqrt(var)?;
        let sd = tape.broadcast_cols(sd, width)?;
        let z = tape.div(centered, sd)?;
        let g = tape.param(store, self.gain)?;
        let g = tape.broadcast_rows(g, rows)?;
        let b = tape.param(store, self.bias)?;
        let b = tape.broadcast_rows(b, rows)?;
        let zg = tape.mul(z, g)?;
        Ok(tape.add(zg, b)?)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Row ranges of consecutive sets, or one block of rows shared by every set.
#[derive(Debug, Clone)]
enum Rows {
    Shared(usize),
    Sets(Vec<(usize, usize)>),
}

impl Rows {
    fn range(&self, s: usize) -> (usize, usize) {
        match self {
            Rows::Shared(n) => (0, *n),
            Rows::Sets(r) => r[s],
        }
    }
}

/// Multihead attention block `LN(H + rFF(H))`, `H = LN(Q + MHA(Q, K, K))`.
#[derive(Debug, Clone)]
struct Mab {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff: Linear,
    ln2: LayerNorm,
    heads: usize,
    head_units: usize,
}

impl Mab {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.heads * cfg.head_units;
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ff: Linear::new(store, &format!("{name}.ff"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            heads: cfg.heads,
            head_units: cfg.head_units,
        }
    }

    /// Attend each query set to its key set; output rows follow the query sets.
    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        q_rows: &Rows,
        k_in: Var,
        k_rows: &[(usize, usize)],
    ) -> Result<Var> {
        let qp = self.q.apply(tape, store, q_in)?;
        let kp = self.k.apply(tape, store, k_in)?;
        let vp = self.v.apply(tape, store, k_in)?;
        let scale = 1.0 / (self.head_units as f64).sqrt();
        let mut outs = Vec::with_capacity(k_rows.len());
        let mut residual = Vec::with_capacity(k_rows.len());
        for (s, &(ks, kl)) in k_rows.iter().enumerate() {
            let (qs, ql) = q_rows.range(s);
            let qset = tape.slice_rows(qp, qs, qs + ql)?;
            let kset = tape.slice_rows(kp, ks, ks + kl)?;
            let vset = tape.slice_rows(vp, ks, ks + kl)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (c0, c1) = (h * self.head_units, (h + 1) * self.head_units);
                let qh = tape.slice_cols(qset, c0, c1)?;
                let kh = tape.slice_cols(kset, c0, c1)?;
                let vh = tape.slice_cols(vset, c0, c1)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            outs.push(tape.concat_cols(&heads)?);
            residual.push(tape.slice_rows(q_in, qs, qs + ql)?);
        }
        let attended = tape.concat_rows(&outs)?;
        let q_all = tape.concat_rows(&residual)?;
        let mixed = self.o.apply(tape, store, attended)?;
        let h = tape.add(q_all, mixed)?;
        let h = self.ln1.apply(tape, store, h)?;
        let f = self.ff.apply(tape, store, h)?;
        let f = tape.tanh(f)?;
        let out = tape.add(h, f)?;
        self.ln2.apply(tape, store, out)
    }

    fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.ids())
            .chain(self.ln1.ids())
            .chain(self.ff.ids())
            .chain(self.ln2.ids())
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Isab {
    inducing: ParamId,
    n_inducing: usize,
    to_inducing: Mab,
    back: Mab,
}

impl Isab {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, sets: &[(usize, usize)]) -> Result<Var> {
        let i = tape.param(store, self.inducing)?;
        let h = self
            .to_inducing
            .apply(tape, store, i, &Rows::Shared(self.n_inducing), x, sets)?;
        let k = self.n_inducing;
        let h_sets: Vec<(usize, usize)> = (0..sets.len()).map(|s| (s * k, k)).collect();
        self.back.apply(tape, store, x, &Rows::Sets(sets.to_vec()), h, &h_sets)
    }

    fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.inducing)
            .chain(self.to_inducing.ids())
            .chain(self.back.ids())
            .collect()
    }
}

/// Set pooling `g`: one output row per set.
#[derive(Debug, Clone)]
struct PoolBlock {
    input: Linear,
    isabs: Vec<Isab>,
    seed: ParamId,
    pma_ff: Linear,
    pma: Mab,
    output: Linear,
}

impl PoolBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.heads * cfg.head_units;
        let input = Linear::new(store, &format!("{name}.input"), in_width, d, rng);
        let isabs = (0..cfg.isab_blocks)
            .map(|b| Isab {
                inducing: store.add(
                    format!("{name}.isab{b}.inducing"),
                    init_std(cfg.inducing_points, d, 1.0, rng),
                ),
                n_inducing: cfg.inducing_points,
                to_inducing: Mab::new(store, &format!("{name}.isab{b}.mab0"), cfg, rng),
                back: Mab::new(store, &format!("{name}.isab{b}.mab1"), cfg, rng),
            })
            .collect();
        Self {
            input,
            isabs,
            seed: store.add(format!("{name}.pma.seed"), init_std(1, d, 1.0, rng)),
            pma_ff: Linear::new(store, &format!("{name}.pma.ff"), d, d, rng),
            pma: Mab::new(store, &format!("{name}.pma.mab"), cfg, rng),
            output: Linear::new(store, &format!("{name}.output"), d, out_width, rng),
        }
    }

    /// `x` rows are grouped into consecutive `sets`.
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, sets: &[(usize, usize)]) -> Result<Var> {
        let mut h = self.input.apply(tape, store, x)?;
        for isab in &self.isabs {
            h = isab.apply(tape, store, h, sets)?;
        }
        let f = self.pma_ff.apply(tape, store, h)?;
        let f = tape.tanh(f)?;
        let seed = tape.param(store, self.seed)?;
        let pooled = self.pma.apply(tape, store, seed, &Rows::Shared(1), f, sets)?;
        self.output.apply(tape, store, pooled)
    }

    fn ids(&self) -> Vec<ParamId> {
        self.input
            .ids()
            .into_iter()
            .chain(self.isabs.iter().flat_map(Isab::ids))
            .chain(std::iter::once(self.seed))
            .chain(self.pma_ff.ids())
            .chain(self.pma.ids())
            .chain(self.output.ids())
            .collect()
    }
}

/// Pointwise data network `ρ`.
#[derive(Debug, Clone)]
struct Rho {
    l1: Linear,
    l2: Linear,
}

/// Permutation-invariant encoder producing every latent level's encodings.
#[derive(Debug, Clone)]
pub struct DeepSetEncoder {
    graph: BackwardPlateGraph,
    widths: Vec<usize>,
    rhos: Vec<Rho>,
    /// `pools[p][e]`: block of edge `e` of pipeline `p`.
    pools: Vec<Vec<PoolBlock>>,
    data_dims: Vec<usize>,
}

impl DeepSetEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        template: &GraphTemplate,
        encodings: &EncodingConfig,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || config.head_units == 0 || config.inducing_points == 0 || config.rho_hidden == 0 {
            return Err(EncodingError::Config("encoder sizes must be positive".into()));
        }
        let graph = build_backward_graph(template)?;
        encodings.validate(&graph.levels)?;
        let widths: Vec<usize> = graph.levels.iter().map(|l| encodings.size_for(l)).collect();
        let d = config.heads * config.head_units;
        let mut rhos = Vec::new();
        let mut pools = Vec::new();
        let mut data_dims = Vec::new();
        for p in &graph.pipelines {
            let rv = template.rv(p.observed);
            let name = format!("encoder.{}", rv.name);
            data_dims.push(rv.event_dim);
            rhos.push(Rho {
                l1: Linear::new(store, &format!("{name}.rho1"), rv.event_dim, config.rho_hidden, rng),
                l2: Linear::new(store, &format!("{name}.rho2"), config.rho_hidden, d, rng),
            });
            let blocks = p
                .edges
                .iter()
                .map(|e| {
                    let in_width = match e.source {
                        Source::Data(_) => d,
                        Source::Level(k) => widths[k],
                    };
                    let tag = graph.levels[e.target].name();
                    PoolBlock::new(
                        store,
                        &format!("{name}.pool{tag}"),
                        in_width,
                        widths[e.target],
                        config,
                        rng,
                    )
                })
                .collect();
            pools.push(blocks);
        }
        Ok(Self {
            graph,
            widths,
            rhos,
            pools,
            data_dims,
        })
    }

    pub fn graph(&self) -> &BackwardPlateGraph {
        &self.graph
    }

    /// Width of the concatenated encoding of level `l`.
    pub fn width(&self, l: usize) -> usize {
        self.widths[l] * self.graph.fan_in(l)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.rhos
            .iter()
            .flat_map(|r| r.l1.ids().into_iter().chain(r.l2.ids()))
            .chain(self.pools.iter().flatten().flat_map(PoolBlock::ids))
            .collect()
    }

    /// Encodings of every latent level at the cardinalities of `data`.
    ///
    /// `data[p]` holds the observed values of pipeline `p`'s variable, one row
    /// per ground variable in row-major plate order at `cards`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template: &GraphTemplate,
        cards: &Cards,
        data: &[Tensor],
    ) -> Result<Vec<Var>> {
        if data.len() != self.graph.pipelines.len() {
            return Err(EncodingError::Cardinality(format!(
                "expected {} observed arrays, got {}",
                self.graph.pipelines.len(),
                data.len()
            )));
        }
        let mut per_level: Vec<Vec<Var>> = vec![Vec::new(); self.graph.levels.len()];
        for (p, pipe) in self.graph.pipelines.iter().enumerate() {
            let plates = &template.rv(pipe.observed).plates;
            let rows: usize = extents_of(plates, cards).iter().product();
            if data[p].shape() != [rows, self.data_dims[p]] {
                return Err(EncodingError::Cardinality(format!(
                    "`{}` has shape {:?}, cardinalities imply [{rows}, {}]",
                    template.rv(pipe.observed).name,
                    data[p].shape(),
                    self.data_dims[p]
                )));
            }
            let x = tape.constant(data[p].clone())?;
            let h = self.rhos[p].l1.apply(tape, store, x)?;
            let h = tape.tanh(h)?;
            let data_enc = self.rhos[p].l2.apply(tape, store, h)?;
            let mut produced: BTreeMap<Source, Var> = BTreeMap::new();
            produced.insert(Source::Data(pipe.observed), data_enc);
            for (e, edge) in pipe.edges.iter().enumerate() {
                let src = produced[&edge.source];
                let from = self.graph.source_plates(template, edge.source);
                let to = &self.graph.levels[edge.target].plates;
                let n_src: usize = extents_of(from, cards).iter().product();
                let n_dst: usize = extents_of(to, cards).iter().product();
                let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_dst];
                for r in 0..n_src {
                    groups[project_index(from, cards, r, to)].push(r);
                }
                let order: Vec<usize> = groups.iter().flatten().copied().collect();
                let mut sets = Vec::with_capacity(n_dst);
                let mut start = 0;
                for g in &groups {
                    sets.push((start, g.len()));
                    start += g.len();
                }
                let gathered = tape.gather_rows(src, &order)?;
                let out = self.pools[p][e].apply(tape, store, gathered, &sets)?;
                produced.insert(Source::Level(edge.target), out);
                per_level[edge.target].push(out);
            }
        }
        per_level
            .into_iter()
            .map(|parts| {
                if parts.len() == 1 {
                    Ok(parts[0])
                } else {
                    Ok(tape.concat_cols(&parts)?)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{cards, DistributionKind, RvTemplate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rv(name: &str, plates: &[&str], parents: &[&str], observed: bool) -> RvTemplate {
        RvTemplate {
            name: name.into(),
            plates: plates.iter().map(|s| s.to_string()).collect(),
            event_dim: 2,
            kind: if parents.is_empty() {
                DistributionKind::FixedGaussian { mean: 0.0, scale: 1.0 }
            } else {
                DistributionKind::GaussianParentMean { scale: 1.0 }
            },
            parents: parents.iter().map(|s| s.to_string()).collect(),
            observed,
        }
    }

    fn gre() -> GraphTemplate {
        GraphTemplate::new(
            vec!["P1".into(), "P0".into()],
            vec![
                rv("theta2", &[], &[], false),
                rv("theta1", &["P1"], &["theta2"], false),
                rv("x", &["P1", "P0"], &["theta1"], true),
            ],
        )
        .unwrap()
    }

    #[test]
    fn gre_backward_chain() {
        let g = build_backward_graph(&gre()).unwrap();
        let names: Vec<String> = g.levels.iter().map(PlateLevel::name).collect();
        assert_eq!(names, vec!["()", "(P1)"]);
        assert_eq!(
            g.pipelines[0].edges,
            vec![
                BackwardEdge {
                    source: Source::Data(2),
                    target: 1
                },
                BackwardEdge {
                    source: Source::Level(1),
                    target: 0
                },
            ]
        );
    }

    #[test]
    fn single_global_latent() {
        let t = GraphTemplate::new(
            vec!["N".into()],
            vec![rv("mu", &[], &[], false), rv("y", &["N"], &["mu"], true)],
        )
        .unwrap();
        let g = build_backward_graph(&t).unwrap();
        assert_eq!(
            g.pipelines[0].edges,
            vec![BackwardEdge {
                source: Source::Data(1),
                target: 0
            }]
        );
    }

    #[test]
    fn diamond_keeps_one_incoming_edge() {
        let t = GraphTemplate::new(
            vec!["A".into(), "B".into()],
            vec![
                rv("g", &[], &[], false),
                rv("a", &["A"], &["g"], false),
                rv("b", &["B"], &["g"], false),
                rv("y", &["A", "B"], &["a", "b"], true),
            ],
        )
        .unwrap();
        let g = build_backward_graph(&t).unwrap();
        let into_global: Vec<&BackwardEdge> = g.pipelines[0].edges.iter().filter(|e| e.target == 0).collect();
        assert_eq!(into_global.len(), 1);
        assert_eq!(into_global[0].source, Source::Level(1));
    }

    #[test]
    fn unobserved_branch_is_unreachable() {
        let t = GraphTemplate::new(
            vec!["N".into()],
            vec![
                rv("mu", &[], &[], false),
                rv("lonely", &[], &[], false),
                rv("y", &["N"], &["mu"], true),
            ],
        )
        .unwrap();
        // Both globals share the () level, which is reachable through `mu`.
        assert!(build_backward_graph(&t).is_ok());
        let t = GraphTemplate::new(
            vec!["N".into(), "M".into()],
            vec![
                rv("mu", &[], &[], false),
                rv("side", &["M"], &["mu"], false),
                rv("y", &["N"], &["mu"], true),
            ],
        )
        .unwrap();
        assert_eq!(build_backward_graph(&t), Err(EncodingError::Unreachable("(M)".into())));
    }

    #[test]
    fn store_counts_and_slices() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = EncodingStore::new(
            &mut store,
            &gre(),
            &cards(&[("P1", 20), ("P0", 3)]),
            &EncodingConfig::with_size(8),
            &mut rng,
        )
        .unwrap();
        assert_eq!(enc.param_count(), 8 + 160);
        let mut tape = Tape::new();
        let s = enc.slice(&mut tape, &store, 1, &[1, 2]).unwrap();
        assert_eq!(tape.value(s).row_slice(0), store.get(enc.param(1)).row_slice(1));
        let all: Vec<usize> = (0..20).collect();
        let s = enc.slice(&mut tape, &store, 1, &all).unwrap();
        assert_eq!(tape.value(s), store.get(enc.param(1)));
        let g1 = enc.slice(&mut tape, &store, 0, &[0]).unwrap();
        assert_eq!(tape.value(g1).rows(), 1);
        assert!(matches!(
            enc.slice(&mut tape, &store, 1, &[20]),
            Err(EncodingError::IndexOutOfRange { .. })
        ));
    }

    fn encoder() -> (ParamStore, DeepSetEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig {
            inducing_points: 4,
            ..EncoderConfig::default()
        };
        let e = DeepSetEncoder::new(&mut store, &gre(), &EncodingConfig::with_size(3), &cfg, &mut rng).unwrap();
        (store, e)
    }

    fn data(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init(rows, 2, &mut rng)
    }

    #[test]
    fn encoder_shapes_follow_cardinalities() {
        let (store, e) = encoder();
        for card in [2, 20] {
            let c = cards(&[("P1", card), ("P0", 5)]);
            let mut tape = Tape::new();
            let out = e.encode(&mut tape, &store, &gre(), &c, &[data(card * 5, 2)]).unwrap();
            assert_eq!(tape.value(out[1]).shape(), &[card, 3]);
            assert_eq!(tape.value(out[0]).shape(), &[1, 3]);
            assert!(tape.value(out[1]).is_finite());
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let (store, e) = encoder();
        let c = cards(&[("P1", 3), ("P0", 4)]);
        let x = data(12, 5);
        let mut tape = Tape::new();
        let base = e
            .encode(&mut tape, &store, &gre(), &c, std::slice::from_ref(&x))
            .unwrap();
        // Permute P0 within each group and P1 across groups.
        let perm0 = [2, 0, 3, 1];
        let perm1 = [1, 2, 0];
        let mut rows = Vec::new();
        for &n in &perm1 {
            for &k in &perm0 {
                rows.push(x.row_slice(n * 4 + k).to_vec());
            }
        }
        let xp = Tensor::from_rows(&rows).unwrap();
        let mut tape2 = Tape::new();
        let moved = e.encode(&mut tape2, &store, &gre(), &c, &[xp]).unwrap();
        for (j, &n) in perm1.iter().enumerate() {
            for (a, b) in tape2
                .value(moved[1])
                .row_slice(j)
                .iter()
                .zip(tape.value(base[1]).row_slice(n))
            {
                assert!((a - b).abs() < 1e-10);
            }
        }
        for (a, b) in tape2.value(moved[0]).data().iter().zip(tape.value(base[0]).data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_data_gives_identical_rows() {
        let (store, e) = encoder();
        let c = cards(&[("P1", 4), ("P0", 3)]);
        let x = Tensor::matrix(12, 2, vec![0.7; 24]).unwrap();
        let mut tape = Tape::new();
        let out = e.encode(&mut tape, &store, &gre(), &c, &[x]).unwrap();
        let v = tape.value(out[1]);
        for n in 1..4 {
            for (a, b) in v.row_slice(n).iter().zip(v.row_slice(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let (store, e) = encoder();
        let c = cards(&[("P1", 4), ("P0", 3)]);
        let mut tape = Tape::new();
        let err = e.encode(&mut tape, &store, &gre(), &c, &[data(10, 0)]).unwrap_err();
        assert!(matches!(err, EncodingError::Cardinality(_)));
    }
}

//! Conditional normalizing flows with shared weights.
//!
//! A [`FlowStack`] maps base samples `u` to `θ = F(u; φ, cond)` row by row.
//! Rows of a batch are independent ground variables; `cond` holds one
//! conditioning vector per row. Every map is evaluated on a [`Tape`] so that
//! both directions are differentiable with respect to the weights.
//!
//! Stages:
//! - [`StageConfig::Affine`]: `θ = L(cond)·u + m(cond)` with `L` diagonal or
//!   lower-triangular and a positive diagonal.
//! - [`StageConfig::Maf`]: masked autoregressive transform
//!   `θ_k = u_k·s_k(u_<k, cond) + m_k(u_<k, cond)`; the inverse is a sequential
//!   coordinate-wise solve.
//! - [`StageConfig::Reverse`]: reverses the coordinate order.
//!
//! Final conditioner layers start at zero, so a fresh stack is the identity.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("autoregressive inversion missed by {0:e}")]
    Inversion(f64),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Scale matrix structure of an affine stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Diagonal,
    LowerTriangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageConfig {
    Affine { scale_mode: ScaleMode, hidden: usize },
    Maf { hidden: Vec<usize> },
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub stages: Vec<StageConfig>,
}

impl Default for FlowConfig {
    /// Affine block followed by a MAF with `[32, 32]` hidden units.
    fn default() -> Self {
        Self {
            stages: vec![
                StageConfig::Affine {
                    scale_mode: ScaleMode::Diagonal,
                    hidden: 32,
                },
                StageConfig::Maf { hidden: vec![32, 32] },
            ],
        }
    }
}

/// Lower bound added to every positive scale.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Offset making `softplus(0 + c) + SCALE_FLOOR == 1`.
fn scale_offset() -> f64 {
    ((1.0 - SCALE_FLOOR).exp() - 1.0).ln()
}

fn positive_scale(tape: &mut Tape, raw: Var) -> Result<Var> {
    let shifted = tape.add_scalar(raw, scale_offset())?;
    let sp = tape.softplus(shifted)?;
    Ok(tape.add_scalar(sp, SCALE_FLOOR)?)
}

fn gaussian_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            gaussian_init(fan_in, fan_out, rng)
        };
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        Ok(tape.affine(x, w, b)?)
    }

    fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Debug, Clone)]
struct AffineStage {
    dim: usize,
    mode: ScaleMode,
    /// `None` when there is no conditioning input; the output layer is then a bias.
    hidden: Option<Dense>,
    out: Dense,
}

impl AffineStage {
    fn out_width(dim: usize, mode: ScaleMode) -> usize {
        match mode {
            ScaleMode::Diagonal => 2 * dim,
            ScaleMode::LowerTriangular => 2 * dim + dim * (dim - 1) / 2,
        }
    }

    /// Shift `[R, D]`, positive diagonal `[R, D]`, strictly-lower entries `[R, D(D-1)/2]`.
    fn params(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rows: usize,
        cond: Option<Var>,
    ) -> Result<(Var, Var, Option<Var>)> {
        let d = self.dim;
        let out = match (&self.hidden, cond) {
            (Some(hidden), Some(c)) => {
                let h = hidden.apply(tape, store, c)?;
                let h = tape.tanh(h)?;
                self.out.apply(tape, store, h)?
            }
            _ => {
                let b = tape.param(store, self.out.b)?;
                tape.broadcast_rows(b, rows)?
            }
        };
        let shift = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let diag = positive_scale(tape, raw)?;
        let off = match self.mode {
            ScaleMode::LowerTriangular if d > 1 => Some(tape.slice_cols(out, 2 * d, Self::out_width(d, self.mode))?),
            _ => None,
        };
        Ok((shift, diag, off))
    }

    fn log_det(tape: &mut Tape, diag: Var) -> Result<Var> {
        let l = tape.log(diag)?;
        Ok(tape.sum_cols(l)?)
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let rows = tape.value(u).rows();
        let d = self.dim;
        let (shift, diag, off) = self.params(tape, store, rows, cond)?;
        let lu = match off {
            None => tape.mul(diag, u)?,
            Some(off) => {
                let mut cols = Vec::with_capacity(d * (d + 1) / 2);
                for k in 0..d {
                    for j in 0..k {
                        let c = k * (k - 1) / 2 + j;
                        cols.push(tape.slice_cols(off, c, c + 1)?);
                    }
                    cols.push(tape.slice_cols(diag, k, k + 1)?);
                }
                let packed = tape.concat_cols(&cols)?;
                tape.tri_matvec(packed, u)?
            }
        };
        let theta = tape.add(lu, shift)?;
        let ld = Self::log_det(tape, diag)?;
        Ok((theta, ld))
    }

    fn inverse(&self, tape: &mut Tape, store: &ParamStore, theta: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let rows = tape.value(theta).rows();
        let d = self.dim;
        let (shift, diag, off) = self.params(tape, store, rows, cond)?;
        let y = tape.sub(theta, shift)?;
        let u = match off {
            None => tape.div(y, diag)?,
            Some(off) => {
                let mut us: Vec<Var> = Vec::with_capacity(d);
                for k in 0..d {
                    let mut acc = tape.slice_cols(y, k, k + 1)?;
                    for (j, &uj) in us.iter().enumerate() {
                        let c = k * (k - 1) / 2 + j;
                        let l = tape.slice_cols(off, c, c + 1)?;
                        let t = tape.mul(l, uj)?;
                        acc = tape.sub(acc, t)?;
                    }
                    let dk = tape.slice_cols(diag, k, k + 1)?;
                    us.push(tape.div(acc, dk)?);
                }
                tape.concat_cols(&us)?
            }
        };
        let ld = Self::log_det(tape, diag)?;
        Ok((u, tape.neg(ld)?))
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.as_ref().map(Dense::ids).unwrap_or_default();
        match self.hidden {
            Some(_) => ids.extend(self.out.ids()),
            None => ids.push(self.out.b),
        }
        ids
    }
}

/// One masked layer `act(x·(W∘M) + cond·V + b)`.
#[derive(Debug, Clone)]
struct MaskedLayer {
    w: ParamId,
    mask: Tensor,
    v: Option<ParamId>,
    b: ParamId,
}

impl MaskedLayer {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, cond: Option<Var>) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let m = tape.constant(self.mask.clone())?;
        let wm = tape.mul(w, m)?;
        let mut out = tape.matmul(x, wm)?;
        if let (Some(v), Some(c)) = (self.v, cond) {
            let v = tape.param(store, v)?;
            let cv = tape.matmul(c, v)?;
            out = tape.add(out, cv)?;
        }
        let rows = tape.value(out).rows();
        let b = tape.param(store, self.b)?;
        let bb = tape.broadcast_rows(b, rows)?;
        Ok(tape.add(out, bb)?)
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.v);
        ids.push(self.b);
        ids
    }
}

/// MADE degrees for hidden units: cycle through `1..D-1` (all 1 when `D = 1`).
fn hidden_degrees(dim: usize, units: usize) -> Vec<usize> {
    (0..units)
        .map(|j| if dim > 1 { j % (dim - 1) + 1 } else { 1 })
        .collect()
}

fn mask(in_deg: &[usize], out_deg: &[usize], strict: bool) -> Tensor {
    let data = in_deg
        .iter()
        .flat_map(|&i| {
            out_deg.iter().map(move |&o| {
                let on = if strict { o > i } else { o >= i };
                if on {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    Tensor::matrix(in_deg.len(), out_deg.len(), data).expect("mask shape")
}

#[derive(Debug, Clone)]
struct MafStage {
    dim: usize,
    layers: Vec<MaskedLayer>,
    out: MaskedLayer,
}

impl MafStage {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let input_deg: Vec<usize> = (1..=dim).collect();
        let mut prev = input_deg.clone();
        let mut layers = Vec::with_capacity(hidden.len());
        for (l, &units) in hidden.iter().enumerate() {
            let deg = hidden_degrees(dim, units);
            let v = (cond_dim > 0).then(|| store.add(format!("{name}.h{l}.v"), gaussian_init(cond_dim, units, rng)));
            layers.push(MaskedLayer {
                w: store.add(format!("{name}.h{l}.w"), gaussian_init(prev.len(), units, rng)),
                mask: mask(&prev, &deg, false),
                v,
                b: store.add(format!("{name}.h{l}.b"), Tensor::zeros(&[1, units])),
            });
            prev = deg;
        }
        let out_deg: Vec<usize> = input_deg.iter().chain(&input_deg).copied().collect();
        let v = (cond_dim > 0).then(|| store.add(format!("{name}.out.v"), Tensor::zeros(&[cond_dim, 2 * dim])));
        let out = MaskedLayer {
            w: store.add(format!("{name}.out.w"), Tensor::zeros(&[prev.len(), 2 * dim])),
            mask: mask(&prev, &out_deg, true),
            v,
            b: store.add(format!("{name}.out.b"), Tensor::zeros(&[1, 2 * dim])),
        };
        Self { dim, layers, out }
    }

    /// Shift and positive scale, both `[R, D]`, as functions of `u`.
    fn conditioner(&self, tape: &mut Tape, store: &ParamStore, u: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let mut h = u;
        for layer in &self.layers {
            let a = layer.apply(tape, store, h, cond)?;
            h = tape.tanh(a)?;
        }
        let out = self.out.apply(tape, store, h, cond)?;
        let shift = tape.slice_cols(out, 0, self.dim)?;
        let raw = tape.slice_cols(out, self.dim, 2 * self.dim)?;
        Ok((shift, positive_scale(tape, raw)?))
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let (shift, scale) = self.conditioner(tape, store, u, cond)?;
        let su = tape.mul(u, scale)?;
        let theta = tape.add(su, shift)?;
        let l = tape.log(scale)?;
        Ok((theta, tape.sum_cols(l)?))
    }

    fn inverse(&self, tape: &mut Tape, store: &ParamStore, theta: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        let rows = tape.value(theta).rows();
        let d = self.dim;
        let mut solved: Vec<Var> = Vec::with_capacity(d);
        for k in 0..d {
            let mut cols = solved.clone();
            cols.push(tape.constant(Tensor::zeros(&[rows, d - k]))?);
            let current = tape.concat_cols(&cols)?;
            let (shift, scale) = self.conditioner(tape, store, current, cond)?;
            let tk = tape.slice_cols(theta, k, k + 1)?;
            let mk = tape.slice_cols(shift, k, k + 1)?;
            let sk = tape.slice_cols(scale, k, k + 1)?;
            let diff = tape.sub(tk, mk)?;
            solved.push(tape.div(diff, sk)?);
        }
        let u = tape.concat_cols(&solved)?;
        let (shift, scale) = self.conditioner(tape, store, u, cond)?;
        let su = tape.mul(u, scale)?;
        let back = tape.add(su, shift)?;
        let miss = tape
            .value(back)
            .data()
            .iter()
            .zip(tape.value(theta).data())
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max);
        if miss > 1e-8 {
            return Err(FlowError::Inversion(miss));
        }
        let l = tape.log(scale)?;
        let ld = tape.sum_cols(l)?;
        Ok((u, tape.neg(ld)?))
    }

    fn ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.out))
            .flat_map(MaskedLayer::ids)
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Affine(AffineStage),
    Maf(MafStage),
    Reverse(usize),
}

fn reverse_cols(tape: &mut Tape, x: Var, dim: usize) -> Result<Var> {
    let t = tape.transpose(x)?;
    let order: Vec<usize> = (0..dim).rev().collect();
    let g = tape.gather_rows(t, &order)?;
    Ok(tape.transpose(g)?)
}

/// Sequence of conditional flows sharing one weight set `φ`.
#[derive(Debug, Clone)]
pub struct FlowStack {
    event_dim: usize,
    cond_dim: usize,
    stages: Vec<Stage>,
}

impl FlowStack {
    /// Register a freshly initialized stack in `store` under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        event_dim: usize,
        cond_dim: usize,
        config: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if event_dim == 0 {
            return Err(FlowError::Config("event dimension must be positive".into()));
        }
        let mut stages = Vec::with_capacity(config.stages.len());
        for (s, stage) in config.stages.iter().enumerate() {
            let name = format!("{prefix}.s{s}");
            stages.push(match stage {
                StageConfig::Affine { scale_mode, hidden } => {
                    let width = AffineStage::out_width(event_dim, *scale_mode);
                    if cond_dim > 0 && *hidden == 0 {
                        return Err(FlowError::Config("affine conditioner needs hidden units".into()));
                    }
                    let hidden_layer = (cond_dim > 0)
                        .then(|| Dense::new(store, &format!("{name}.hidden"), cond_dim, *hidden, false, rng));
                    let out = if cond_dim > 0 {
                        Dense::new(store, &format!("{name}.out"), *hidden, width, true, rng)
                    } else {
                        let b = store.add(format!("{name}.out.b"), Tensor::zeros(&[1, width]));
                        Dense { w: b, b }
                    };
                    Stage::Affine(AffineStage {
                        dim: event_dim,
                        mode: *scale_mode,
                        hidden: hidden_layer,
                        out,
                    })
                }
                StageConfig::Maf { hidden } => {
                    if hidden.is_empty() || hidden.contains(&0) {
                        return Err(FlowError::Config("MAF needs non-empty hidden layers".into()));
                    }
                    Stage::Maf(MafStage::new(store, &name, event_dim, cond_dim, hidden, rng))
                }
                StageConfig::Reverse => Stage::Reverse(event_dim),
            });
        }
        Ok(Self {
            event_dim,
            cond_dim,
            stages,
        })
    }

    pub fn event_dim(&self) -> usize {
        self.event_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Every weight of the stack, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|s| match s {
                Stage::Affine(a) => a.ids(),
                Stage::Maf(m) => m.ids(),
                Stage::Reverse(_) => Vec::new(),
            })
            .collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.count(&self.param_ids())
    }

    /// Copy the weights of a structurally identical stack.
    pub fn copy_weights(&self, store: &mut ParamStore, from: &FlowStack, from_store: &ParamStore) -> Result<()> {
        let (dst, src) = (self.param_ids(), from.param_ids());
        if dst.len() != src.len() {
            return Err(FlowError::Config("stacks differ in structure".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if store.get(d).shape() != from_store.get(s).shape() {
                return Err(FlowError::Config("stacks differ in structure".into()));
            }
            *store.get_mut(d) = from_store.get(s).clone();
        }
        Ok(())
    }

    fn check(&self, tape: &Tape, x: Var, cond: Option<Var>) -> Result<()> {
        let xs = tape.value(x).shape();
        if xs.len() != 2 || xs[1] != self.event_dim {
            return Err(FlowError::Config(format!(
                "input shape {xs:?} does not match event dimension {}",
                self.event_dim
            )));
        }
        let width = cond.map(|c| tape.value(c).shape().to_vec());
        match (width, self.cond_dim) {
            (None, 0) => Ok(()),
            (Some(s), c) if c > 0 && s == [xs[0], c] => Ok(()),
            (w, c) => Err(FlowError::Config(format!(
                "conditioning {w:?} does not match width {c} for {} rows",
                xs[0]
            ))),
        }
    }

    /// `θ = F(u)` and `log|det ∂θ/∂u|` per row (`[R, D]`, `[R, 1]`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.check(tape, u, cond)?;
        let rows = tape.value(u).rows();
        let mut x = u;
        let mut total = tape.constant(Tensor::zeros(&[rows, 1]))?;
        for stage in &self.stages {
            let (y, ld) = match stage {
                Stage::Affine(a) => a.forward(tape, store, x, cond)?,
                Stage::Maf(m) => m.forward(tape, store, x, cond)?,
                Stage::Reverse(d) => {
                    let y = reverse_cols(tape, x, *d)?;
                    let z = tape.constant(Tensor::zeros(&[rows, 1]))?;
                    (y, z)
                }
            };
            x = y;
            total = tape.add(total, ld)?;
        }
        Ok((x, total))
    }

    /// `u = F⁻¹(θ)` and `log|det ∂u/∂θ|` per row.
    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore, theta: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.check(tape, theta, cond)?;
        let rows = tape.value(theta).rows();
        let mut x = theta;
        let mut total = tape.constant(Tensor::zeros(&[rows, 1]))?;
        for stage in self.stages.iter().rev() {
            let (y, ld) = match stage {
                Stage::Affine(a) => a.inverse(tape, store, x, cond)?,
                Stage::Maf(m) => m.inverse(tape, store, x, cond)?,
                Stage::Reverse(d) => {
                    let y = reverse_cols(tape, x, *d)?;
                    let z = tape.constant(Tensor::zeros(&[rows, 1]))?;
                    (y, z)
                }
            };
            x = y;
            total = tape.add(total, ld)?;
        }
        Ok((x, total))
    }

    /// `log q(θ) = log p(F⁻¹(θ)) + log|det ∂F⁻¹/∂θ|` per row, with `base`
    /// returning the base log-density of each row of `u` as `[R, 1]`.
    pub fn push_forward_log_prob<B>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        theta: Var,
        cond: Option<Var>,
        base: B,
    ) -> Result<Var>
    where
        B: FnOnce(&mut Tape, Var) -> std::result::Result<Var, AutodiffError>,
    {
        let (u, ld) = self.inverse(tape, store, theta, cond)?;
        let lp = base(tape, u)?;
        Ok(tape.add(lp, ld)?)
    }

    fn run_values(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cond: Option<&Tensor>,
        inverse: bool,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let cv = cond.map(|c| tape.constant(c.clone())).transpose()?;
        let (y, ld) = if inverse {
            self.inverse(&mut tape, store, xv, cv)?
        } else {
            self.forward(&mut tape, store, xv, cv)?
        };
        Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
    }

    /// Forward map on plain values (no gradients).
    pub fn forward_values(&self, store: &ParamStore, u: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Vec<f64>)> {
        self.run_values(store, u, cond, false)
    }

    /// Inverse map on plain values (no gradients).
    pub fn inverse_values(
        &self,
        store: &ParamStore,
        theta: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Vec<f64>)> {
        self.run_values(store, theta, cond, true)
    }
}

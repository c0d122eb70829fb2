//! Plate-enriched graph templates and their grounding into hierarchical models.
//!
//! A [`GraphTemplate`] lists plates and random-variable templates. Grounding it
//! at concrete plate cardinalities yields a [`GroundModel`], where template
//! `i` expands into `N_i = ∏ Card(P)` ground variables (product over the
//! plates the template belongs to). Ground variables are identified by the
//! flat row-major index of their multi-index over the template's plates.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{gaussian_log_pdf, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("duplicate plate `{0}`")]
    DuplicatePlate(String),
    #[error("duplicate random variable `{0}`")]
    DuplicateRv(String),
    #[error("random variable `{rv}` references unknown plate `{plate}`")]
    UnknownPlate { rv: String, plate: String },
    #[error("plates of `{0}` must be distinct and follow the template plate order")]
    PlateOrder(String),
    #[error("random variable `{rv}` references unknown parent `{parent}`")]
    UnknownParent { rv: String, parent: String },
    #[error("parent `{parent}` of `{rv}` belongs to plates the child does not")]
    ParentPlates { rv: String, parent: String },
    #[error("invalid distribution for `{rv}`: {reason}")]
    InvalidKind { rv: String, reason: String },
    #[error("the template graph has a cycle through `{0}`")]
    Cycle(String),
    #[error("no extent given for plate `{0}`")]
    MissingExtent(String),
    #[error("plate `{0}` has zero extent")]
    ZeroExtent(String),
    #[error("extent given for unknown plate `{0}`")]
    ExtraExtent(String),
    #[error("missing value for random variable `{0}`")]
    MissingValue(String),
    #[error("value for `{rv}` has shape {got:?}, expected {expected:?}")]
    ValueShape {
        rv: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("template JSON: {message} (line {line}, column {column})")]
    Json {
        message: String,
        line: usize,
        column: usize,
    },
}

impl From<serde_json::Error> for TemplateError {
    fn from(e: serde_json::Error) -> Self {
        TemplateError::Json {
            message: e.to_string(),
            line: e.line(),
            column: e.column(),
        }
    }
}

/// Conditional distribution family of a random-variable template.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionKind {
    /// `N(Σ parents, scale²)` independently per coordinate.
    GaussianParentMean { scale: f64 },
    /// `N(mean, scale²)` independently per coordinate; no parents.
    FixedGaussian { mean: f64, scale: f64 },
    /// `Uniform(low, high)` per coordinate; no parents.
    Uniform { low: f64, high: f64 },
}

impl DistributionKind {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::GaussianParentMean { .. } => "gaussian_parent_mean",
            Self::FixedGaussian { .. } => "fixed_gaussian",
            Self::Uniform { .. } => "uniform",
        }
    }

    fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match *self {
            Self::GaussianParentMean { scale } => vec![("scale", scale)],
            Self::FixedGaussian { mean, scale } => vec![("mean", mean), ("scale", scale)],
            Self::Uniform { low, high } => vec![("low", low), ("high", high)],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn from_parts(rv: &str, tag: &str, params: &BTreeMap<String, f64>) -> Result<Self, TemplateError> {
        let invalid = |reason: String| TemplateError::InvalidKind {
            rv: rv.to_string(),
            reason,
        };
        let expected: &[&str] = match tag {
            "gaussian_parent_mean" => &["scale"],
            "fixed_gaussian" => &["mean", "scale"],
            "uniform" => &["high", "low"],
            other => return Err(invalid(format!("unknown kind `{other}`"))),
        };
        let keys: Vec<&str> = params.keys().map(String::as_str).collect();
        if keys != expected {
            return Err(invalid(format!("kind `{tag}` takes params {expected:?}, got {keys:?}")));
        }
        Ok(match tag {
            "gaussian_parent_mean" => Self::GaussianParentMean { scale: params["scale"] },
            "fixed_gaussian" => Self::FixedGaussian {
                mean: params["mean"],
                scale: params["scale"],
            },
            _ => Self::Uniform {
                low: params["low"],
                high: params["high"],
            },
        })
    }

    /// Per-coordinate conditional log-density given the summed parent mean.
    pub fn log_density(&self, x: f64, parent_sum: f64) -> f64 {
        match *self {
            Self::GaussianParentMean { scale } => gaussian_log_pdf(x, parent_sum, scale),
            Self::FixedGaussian { mean, scale } => gaussian_log_pdf(x, mean, scale),
            Self::Uniform { low, high } => {
                if (low..=high).contains(&x) {
                    -(high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, parent_sum: f64, rng: &mut R) -> f64 {
        match *self {
            Self::GaussianParentMean { scale } => parent_sum + scale * rng.sample::<f64, _>(StandardNormal),
            Self::FixedGaussian { mean, scale } => mean + scale * rng.sample::<f64, _>(StandardNormal),
            Self::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

/// One random-variable template.
#[derive(Debug, Clone, PartialEq)]
pub struct RvTemplate {
    pub name: String,
    pub plates: Vec<String>,
    pub event_dim: usize,
    pub kind: DistributionKind,
    pub parents: Vec<String>,
    pub observed: bool,
}

/// Plate-enriched DAG of random-variable templates, stored in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTemplate {
    plates: Vec<String>,
    rvs: Vec<RvTemplate>,
    parent_indices: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateDoc {
    plates: Vec<String>,
    rvs: Vec<RvDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RvDoc {
    name: String,
    plates: Vec<String>,
    shape: Vec<usize>,
    kind: String,
    params: BTreeMap<String, f64>,
    #[serde(default)]
    parents: Vec<String>,
    #[serde(default)]
    observed: bool,
}

impl GraphTemplate {
    /// Validate and topologically order a template.
    pub fn new(plates: Vec<String>, rvs: Vec<RvTemplate>) -> Result<Self, TemplateError> {
        let mut seen = BTreeSet::new();
        for p in &plates {
            if !seen.insert(p.as_str()) {
                return Err(TemplateError::DuplicatePlate(p.clone()));
            }
        }
        let mut names = BTreeSet::new();
        for rv in &rvs {
            if !names.insert(rv.name.as_str()) {
                return Err(TemplateError::DuplicateRv(rv.name.clone()));
            }
        }
        let plate_pos = |p: &str| plates.iter().position(|q| q == p);
        for rv in &rvs {
            let mut last = None;
            for p in &rv.plates {
                let pos = plate_pos(p).ok_or_else(|| TemplateError::UnknownPlate {
                    rv: rv.name.clone(),
                    plate: p.clone(),
                })?;
                if last.is_some_and(|l| pos <= l) {
                    return Err(TemplateError::PlateOrder(rv.name.clone()));
                }
                last = Some(pos);
            }
            let invalid = |reason: &str| TemplateError::InvalidKind {
                rv: rv.name.clone(),
                reason: reason.to_string(),
            };
            if rv.event_dim == 0 {
                return Err(invalid("event shape must be non-empty"));
            }
            match rv.kind {
                DistributionKind::GaussianParentMean { scale } => {
                    if rv.parents.is_empty() {
                        return Err(invalid("gaussian_parent_mean needs at least one parent"));
                    }
                    if !(scale > 0.0 && scale.is_finite()) {
                        return Err(invalid("scale must be positive"));
                    }
                }
                DistributionKind::FixedGaussian { mean, scale } => {
                    if !rv.parents.is_empty() {
                        return Err(invalid("fixed_gaussian takes no parents"));
                    }
                    if !(scale > 0.0 && scale.is_finite() && mean.is_finite()) {
                        return Err(invalid("scale must be positive and mean finite"));
                    }
                }
                DistributionKind::Uniform { low, high } => {
                    if !rv.parents.is_empty() {
                        return Err(invalid("uniform takes no parents"));
                    }
                    if !(low < high && low.is_finite() && high.is_finite()) {
                        return Err(invalid("uniform needs finite low < high"));
                    }
                }
            }
            let mut ps = BTreeSet::new();
            for parent in &rv.parents {
                if !ps.insert(parent) {
                    return Err(invalid("duplicate parent"));
                }
                let p = rvs
                    .iter()
                    .find(|r| &r.name == parent)
                    .ok_or_else(|| TemplateError::UnknownParent {
                        rv: rv.name.clone(),
                        parent: parent.clone(),
                    })?;
                if !p.plates.iter().all(|pl| rv.plates.contains(pl)) {
                    return Err(TemplateError::ParentPlates {
                        rv: rv.name.clone(),
                        parent: parent.clone(),
                    });
                }
                if p.event_dim != rv.event_dim {
                    return Err(invalid("parent event shape differs from child"));
                }
                if p.observed {
                    return Err(invalid("observed variables cannot be parents"));
                }
            }
        }

        // Kahn's algorithm, always releasing the earliest declared ready node.
        let n = rvs.len();
        let index: BTreeMap<&str, usize> = rvs.iter().enumerate().map(|(i, r)| (r.name.as_str(), i)).collect();
        let mut indegree: Vec<usize> = rvs.iter().map(|r| r.parents.len()).collect();
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n).find(|&i| !placed[i] && indegree[i] == 0);
            let Some(i) = next else {
                let stuck = (0..n).find(|&i| !placed[i]).unwrap_or(0);
                return Err(TemplateError::Cycle(rvs[stuck].name.clone()));
            };
            placed[i] = true;
            order.push(i);
            for (j, r) in rvs.iter().enumerate() {
                if r.parents.iter().any(|p| index[p.as_str()] == i) {
                    indegree[j] -= 1;
                }
            }
        }
        let rvs: Vec<RvTemplate> = order.into_iter().map(|i| rvs[i].clone()).collect();
        let parent_indices = rvs
            .iter()
            .map(|r| {
                r.parents
                    .iter()
                    .map(|p| rvs.iter().position(|q| &q.name == p).unwrap_or_default())
                    .collect()
            })
            .collect();
        Ok(Self {
            plates,
            rvs,
            parent_indices,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let doc: TemplateDoc = serde_json::from_str(text)?;
        let rvs = doc
            .rvs
            .into_iter()
            .map(|r| {
                let kind = DistributionKind::from_parts(&r.name, &r.kind, &r.params)?;
                Ok(RvTemplate {
                    event_dim: r.shape.iter().product(),
                    name: r.name,
                    plates: r.plates,
                    kind,
                    parents: r.parents,
                    observed: r.observed,
                })
            })
            .collect::<Result<Vec<_>, TemplateError>>()?;
        Self::new(doc.plates, rvs)
    }

    /// Canonical JSON: topological RV order, one-element shapes, sorted params.
    pub fn to_json(&self) -> String {
        let doc = TemplateDoc {
            plates: self.plates.clone(),
            rvs: self
                .rvs
                .iter()
                .map(|r| RvDoc {
                    name: r.name.clone(),
                    plates: r.plates.clone(),
                    shape: vec![r.event_dim],
                    kind: r.kind.tag().to_string(),
                    params: r.kind.params(),
                    parents: r.parents.clone(),
                    observed: r.observed,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("template serializes")
    }

    pub fn plates(&self) -> &[String] {
        &self.plates
    }

    pub fn rvs(&self) -> &[RvTemplate] {
        &self.rvs
    }

    pub fn rv(&self, i: usize) -> &RvTemplate {
        &self.rvs[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.rvs.iter().position(|r| r.name == name)
    }

    /// Template indices of the parents of `i`, in declaration order.
    pub fn parents_of(&self, i: usize) -> &[usize] {
        &self.parent_indices[i]
    }

    pub fn children_of(&self, i: usize) -> Vec<usize> {
        (0..self.rvs.len())
            .filter(|&j| self.parent_indices[j].contains(&i))
            .collect()
    }

    pub fn latent_indices(&self) -> Vec<usize> {
        (0..self.rvs.len()).filter(|&i| !self.rvs[i].observed).collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.rvs.len()).filter(|&i| self.rvs[i].observed).collect()
    }
}

/// Display name of a plate combination, e.g. `(P1,P0)` or `()`.
pub fn level_name(plates: &[String]) -> String {
    format!("({})", plates.join(","))
}

/// A plate combination shared by one or more latent templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlateLevel {
    pub plates: Vec<String>,
    /// Template indices of the latent members.
    pub members: Vec<usize>,
}

impl PlateLevel {
    pub fn name(&self) -> String {
        level_name(&self.plates)
    }
}

/// Distinct plate sets of the latent templates, in order of first appearance.
pub fn plate_levels(template: &GraphTemplate) -> Vec<PlateLevel> {
    let mut levels: Vec<PlateLevel> = Vec::new();
    for i in template.latent_indices() {
        let plates = &template.rv(i).plates;
        match levels.iter_mut().find(|l| &l.plates == plates) {
            Some(level) => level.members.push(i),
            None => levels.push(PlateLevel {
                plates: plates.clone(),
                members: vec![i],
            }),
        }
    }
    levels
}

/// Plate name → extent.
pub type Cards = BTreeMap<String, usize>;

/// Build a [`Cards`] map from `(plate, extent)` pairs.
pub fn cards(pairs: &[(&str, usize)]) -> Cards {
    pairs.iter().map(|&(p, n)| (p.to_string(), n)).collect()
}

/// Row-major extents of an ordered plate list.
pub fn extents_of(plates: &[String], cards: &Cards) -> Vec<usize> {
    plates.iter().map(|p| cards.get(p).copied().unwrap_or(0)).collect()
}

/// Decompose a flat row-major index into a multi-index.
pub fn unflatten(mut n: usize, extents: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; extents.len()];
    for k in (0..extents.len()).rev() {
        idx[k] = n % extents[k];
        n /= extents[k];
    }
    idx
}

pub fn flatten_index(idx: &[usize], extents: &[usize]) -> usize {
    idx.iter().zip(extents).fold(0, |acc, (&i, &e)| acc * e + i)
}

/// Flat index, in `to_plates` coordinates, of the ancestor of ground index `n` of a
/// variable over `from_plates`. `to_plates` must be a subset of `from_plates`.
pub fn project_index(from_plates: &[String], cards: &Cards, n: usize, to_plates: &[String]) -> usize {
    let from_ext = extents_of(from_plates, cards);
    let multi = unflatten(n, &from_ext);
    let sub: Vec<usize> = to_plates
        .iter()
        .map(|p| {
            let k = from_plates.iter().position(|q| q == p).expect("subset plates");
            multi[k]
        })
        .collect();
    flatten_index(&sub, &extents_of(to_plates, cards))
}

/// Ground instances of one template.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundRv {
    pub count: usize,
    pub extents: Vec<usize>,
    /// `parents[k][n]`: flat index of the `k`-th parent of ground variable `n`.
    pub parents: Vec<Vec<usize>>,
}

/// A template grounded at concrete plate cardinalities. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundModel {
    template: GraphTemplate,
    cards: Cards,
    ground: Vec<GroundRv>,
}

/// Values of every ground variable: one `[N_i, event_dim]` tensor per template.
#[derive(Debug, Clone, PartialEq)]
pub struct Values(pub Vec<Tensor>);

impl Values {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.0[i]
    }
}

pub fn ground(template: &GraphTemplate, cards: &Cards) -> Result<GroundModel, TemplateError> {
    for p in template.plates() {
        match cards.get(p) {
            None => return Err(TemplateError::MissingExtent(p.clone())),
            Some(0) => return Err(TemplateError::ZeroExtent(p.clone())),
            Some(_) => {}
        }
    }
    if let Some(extra) = cards.keys().find(|k| !template.plates().contains(k)) {
        return Err(TemplateError::ExtraExtent(extra.clone()));
    }
    let ground = template
        .rvs()
        .iter()
        .enumerate()
        .map(|(i, rv)| {
            let extents = extents_of(&rv.plates, cards);
            let count = extents.iter().product();
            let parents = template
                .parents_of(i)
                .iter()
                .map(|&p| {
                    let pp = &template.rv(p).plates;
                    (0..count).map(|n| project_index(&rv.plates, cards, n, pp)).collect()
                })
                .collect();
            GroundRv {
                count,
                extents,
                parents,
            }
        })
        .collect();
    Ok(GroundModel {
        template: template.clone(),
        cards: cards.clone(),
        ground,
    })
}

impl GroundModel {
    pub fn template(&self) -> &GraphTemplate {
        &self.template
    }

    pub fn cards(&self) -> &Cards {
        &self.cards
    }

    pub fn ground_rv(&self, i: usize) -> &GroundRv {
        &self.ground[i]
    }

    /// Number of ground variables of template `i`.
    pub fn count(&self, i: usize) -> usize {
        self.ground[i].count
    }

    pub fn total_ground(&self) -> usize {
        self.ground.iter().map(|g| g.count).sum()
    }

    pub fn multi_index(&self, i: usize, n: usize) -> Vec<usize> {
        unflatten(n, &self.ground[i].extents)
    }

    pub fn check_values(&self, values: &Values) -> Result<(), TemplateError> {
        for (i, rv) in self.template.rvs().iter().enumerate() {
            let t = values
                .0
                .get(i)
                .ok_or_else(|| TemplateError::MissingValue(rv.name.clone()))?;
            let expected = vec![self.ground[i].count, rv.event_dim];
            if t.shape() != expected.as_slice() {
                return Err(TemplateError::ValueShape {
                    rv: rv.name.clone(),
                    got: t.shape().to_vec(),
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Summed parent values of ground variable `(i, n)`, one entry per coordinate.
    pub fn parent_sum(&self, values: &Values, i: usize, n: usize) -> Vec<f64> {
        let d = self.template.rv(i).event_dim;
        let mut sum = vec![0.0; d];
        for (k, &p) in self.template.parents_of(i).iter().enumerate() {
            let row = values.get(p).row_slice(self.ground[i].parents[k][n]);
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        sum
    }

    /// `log p_i(θ_{i,n} | π(θ_{i,n}))`.
    pub fn conditional_log_prob(&self, values: &Values, i: usize, n: usize) -> f64 {
        let kind = &self.template.rv(i).kind;
        let mean = self.parent_sum(values, i, n);
        values
            .get(i)
            .row_slice(n)
            .iter()
            .zip(&mean)
            .map(|(&x, &m)| kind.log_density(x, m))
            .sum()
    }

    /// Joint log-density: sum of every ground conditional.
    pub fn log_prob(&self, values: &Values) -> Result<f64, TemplateError> {
        self.check_values(values)?;
        let mut total = 0.0;
        for i in 0..self.template.rvs().len() {
            for n in 0..self.ground[i].count {
                total += self.conditional_log_prob(values, i, n);
            }
        }
        Ok(total)
    }

    /// Ancestral sample in topological order.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Values {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.ground.len());
        for (i, rv) in self.template.rvs().iter().enumerate() {
            let count = self.ground[i].count;
            let mut data = Vec::with_capacity(count * rv.event_dim);
            for n in 0..count {
                let mut mean = vec![0.0; rv.event_dim];
                for (k, &p) in self.template.parents_of(i).iter().enumerate() {
                    let row = out[p].row_slice(self.ground[i].parents[k][n]);
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in mean {
                    data.push(rv.kind.sample(m, rng));
                }
            }
            out.push(Tensor::matrix(count, rv.event_dim, data).expect("consistent sample shape"));
        }
        Values(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rv(name: &str, plates: &[&str], kind: DistributionKind, parents: &[&str], observed: bool) -> RvTemplate {
        RvTemplate {
            name: name.into(),
            plates: plates.iter().map(|s| s.to_string()).collect(),
            event_dim: 1,
            kind,
            parents: parents.iter().map(|s| s.to_string()).collect(),
            observed,
        }
    }

    /// θ₂ (global) → θ₁ (per P1) → X (per P1×P0).
    fn figure_one() -> GraphTemplate {
        GraphTemplate::new(
            vec!["P1".into(), "P0".into()],
            vec![
                rv(
                    "theta2",
                    &[],
                    DistributionKind::FixedGaussian { mean: 0.0, scale: 1.0 },
                    &[],
                    false,
                ),
                rv(
                    "theta1",
                    &["P1"],
                    DistributionKind::GaussianParentMean { scale: 1.0 },
                    &["theta2"],
                    false,
                ),
                rv(
                    "x",
                    &["P1", "P0"],
                    DistributionKind::GaussianParentMean { scale: 1.0 },
                    &["theta1"],
                    true,
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn grounding_counts_follow_product_law() {
        let t = figure_one();
        let m = ground(&t, &cards(&[("P1", 3), ("P0", 2)])).unwrap();
        assert_eq!((m.count(0), m.count(1), m.count(2)), (1, 3, 6));
        let m = ground(&t, &cards(&[("P1", 2), ("P0", 1)])).unwrap();
        assert_eq!((m.count(1), m.count(2)), (2, 2));
        let m = ground(&t, &cards(&[("P1", 1), ("P0", 1)])).unwrap();
        assert_eq!(m.total_ground(), 3);
    }

    #[test]
    fn parent_map_agrees_on_shared_plates() {
        let m = ground(&figure_one(), &cards(&[("P1", 3), ("P0", 2)])).unwrap();
        // x is row-major over (P1, P0): x_4 = (2, 0) has parent theta1_2.
        assert_eq!(m.ground_rv(2).parents[0], vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(m.ground_rv(1).parents[0], vec![0, 0, 0]);
        assert_eq!(m.multi_index(2, 4), vec![2, 0]);
    }

    #[test]
    fn grounding_rejects_bad_extents() {
        let t = figure_one();
        assert_eq!(
            ground(&t, &cards(&[("P1", 3)])).unwrap_err(),
            TemplateError::MissingExtent("P0".into())
        );
        assert_eq!(
            ground(&t, &cards(&[("P1", 0), ("P0", 2)])).unwrap_err(),
            TemplateError::ZeroExtent("P1".into())
        );
    }

    #[test]
    fn standard_normal_at_mean() {
        let t = GraphTemplate::new(
            vec![],
            vec![rv(
                "z",
                &[],
                DistributionKind::FixedGaussian { mean: 0.0, scale: 1.0 },
                &[],
                false,
            )],
        )
        .unwrap();
        let m = ground(&t, &Cards::new()).unwrap();
        let lp = m
            .log_prob(&Values(vec![Tensor::matrix(1, 1, vec![0.0]).unwrap()]))
            .unwrap();
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn all_zero_values_give_three_standard_terms() {
        let m = ground(&figure_one(), &cards(&[("P1", 1), ("P0", 1)])).unwrap();
        let zeros = Values((0..3).map(|_| Tensor::zeros(&[1, 1])).collect());
        let lp = m.log_prob(&zeros).unwrap();
        assert!((lp - 3.0 * -HALF).abs() < 1e-14);
    }
    const HALF: f64 = crate::autodiff::HALF_LN_2PI;

    #[test]
    fn log_prob_reports_missing_and_misshaped_values() {
        let m = ground(&figure_one(), &cards(&[("P1", 2), ("P0", 1)])).unwrap();
        let short = Values(vec![Tensor::zeros(&[1, 1])]);
        assert_eq!(
            m.log_prob(&short).unwrap_err(),
            TemplateError::MissingValue("theta1".into())
        );
        let bad = Values(vec![
            Tensor::zeros(&[1, 1]),
            Tensor::zeros(&[3, 1]),
            Tensor::zeros(&[2, 1]),
        ]);
        assert!(matches!(m.log_prob(&bad), Err(TemplateError::ValueShape { .. })));
    }

    #[test]
    fn prior_sampling_is_deterministic() {
        let m = ground(&figure_one(), &cards(&[("P1", 3), ("P0", 2)])).unwrap();
        let a = m.sample_prior(&mut ChaCha8Rng::seed_from_u64(5));
        let b = m.sample_prior(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let m1 = ground(&figure_one(), &cards(&[("P1", 1), ("P0", 1)])).unwrap();
        let m2 = ground(&figure_one(), &cards(&[("P1", 1), ("P0", 1)])).unwrap();
        assert_eq!(
            m1.sample_prior(&mut ChaCha8Rng::seed_from_u64(9)),
            m2.sample_prior(&mut ChaCha8Rng::seed_from_u64(9))
        );
    }

    #[test]
    fn plate_levels_of_figure_one() {
        let levels = plate_levels(&figure_one());
        let names: Vec<String> = levels.iter().map(PlateLevel::name).collect();
        assert_eq!(names, vec!["()", "(P1)"]);
    }

    #[test]
    fn shared_plates_collapse_into_one_level() {
        let t = GraphTemplate::new(
            vec!["G".into()],
            vec![
                rv(
                    "a",
                    &["G"],
                    DistributionKind::FixedGaussian { mean: 0.0, scale: 1.0 },
                    &[],
                    false,
                ),
                rv(
                    "b",
                    &["G"],
                    DistributionKind::FixedGaussian { mean: 0.0, scale: 2.0 },
                    &[],
                    false,
                ),
            ],
        )
        .unwrap();
        let levels = plate_levels(&t);
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].members, vec![0, 1]);
    }

    #[test]
    fn validation_errors() {
        let g = DistributionKind::GaussianParentMean { scale: 1.0 };
        let f = DistributionKind::FixedGaussian { mean: 0.0, scale: 1.0 };
        let err = GraphTemplate::new(
            vec!["P".into()],
            vec![
                rv("a", &["P"], f.clone(), &[], false),
                rv("b", &[], g.clone(), &["a"], false),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, TemplateError::ParentPlates { .. }));
        let err = GraphTemplate::new(
            vec![],
            vec![
                rv("a", &[], g.clone(), &["b"], false),
                rv("b", &[], g.clone(), &["a"], false),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, TemplateError::Cycle(_)));
        let err = GraphTemplate::new(vec!["P".into(), "P".into()], vec![]).unwrap_err();
        assert_eq!(err, TemplateError::DuplicatePlate("P".into()));
        let err =
            GraphTemplate::new(vec!["A".into(), "B".into()], vec![rv("a", &["B", "A"], f, &[], false)]).unwrap_err();
        assert_eq!(err, TemplateError::PlateOrder("a".into()));
    }

    #[test]
    fn out_of_order_declarations_are_sorted() {
        let t = GraphTemplate::new(
            vec![],
            vec![
                rv(
                    "child",
                    &[],
                    DistributionKind::GaussianParentMean { scale: 1.0 },
                    &["root"],
                    false,
                ),
                rv(
                    "root",
                    &[],
                    DistributionKind::FixedGaussian { mean: 0.0, scale: 1.0 },
                    &[],
                    false,
                ),
            ],
        )
        .unwrap();
        assert_eq!(t.rv(0).name, "root");
        assert_eq!(t.parents_of(1), &[0]);
    }

    #[test]
    fn json_roundtrip_is_byte_stable() {
        let text = figure_one().to_json();
        let again = GraphTemplate::from_json(&text).unwrap();
        assert_eq!(again, figure_one());
        assert_eq!(again.to_json(), text);
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = GraphTemplate::from_json("{\n  \"plates\": [,\n}").unwrap_err();
        match err {
            TemplateError::Json { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = GraphTemplate::from_json(r#"{"plates": [], "rvs": [], "extra": 1}"#).unwrap_err();
        assert!(matches!(err, TemplateError::Json { .. }));
    }

    #[test]
    fn uniform_density_is_flat_inside_support() {
        let k = DistributionKind::Uniform { low: -2.0, high: 2.0 };
        assert!((k.log_density(0.3, 0.0) + 4f64.ln()).abs() < 1e-15);
        assert_eq!(k.log_density(3.0, 0.0), f64::NEG_INFINITY);
    }
}

//! Declarative model specification and its translation into a latent-field
//! layout: block offsets, prior precision assembly, observation incidence,
//! and the sum-to-zero constraints that keep intrinsic blocks identified
//! next to an intercept.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gmrf::SymmetricSparseMatrix;
use crate::likelihood::ObservationRow;
use crate::linalg::{DenseChol, DenseSym};
use crate::priors::{self, AdjacencyGraph, HyperPrior};

const MAX_HYPERPARAMETERS: usize = 6;
const LN_2PI: f64 = 1.8378770664093453;

/// Observations plus raw covariate columns, one entry per data row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub rows: Vec<ObservationRow>,
    pub covariates: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn has_covariate(&self, name: &str) -> bool {
        self.covariates.contains_key(name)
    }

    pub fn covariate_raw(&self, name: &str) -> Result<&Vec<String>> {
        self.covariates
            .get(name)
            .ok_or_else(|| Error::Spec(format!("unknown covariate {name:?}")))
    }

    pub fn covariate_numeric(&self, name: &str) -> Result<Vec<f64>> {
        let raw = self.covariate_raw(name)?;
        raw.iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|_| Error::Spec(format!("covariate {name:?} is not numeric at row {i}: {s:?}")))
            })
            .collect()
    }
}

/// Binning rule for smooth-effect covariates.
#[derive(Debug, Clone, PartialEq)]
pub enum BinRule {
    FixedWidth { width: f64, origin: Option<f64> },
    Quantile { k: usize },
    Edges(Vec<f64>),
}

/// Deterministic assignment of observations to ordered covariate bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCovariate {
    pub bin_edges: Vec<f64>,
    pub level_of_row: Vec<usize>,
    pub level_values: Vec<f64>,
    /// Empty bins dropped during assignment (reported, not silently ignored).
    pub dropped_bins: Vec<usize>,
}

impl BinnedCovariate {
    pub fn n_levels(&self) -> usize {
        self.level_values.len()
    }
}

/// Assign values to bins under `rule`; empty bins are merged away and
/// reported. Fewer than 3 nonempty bins is an error since the smooth prior
/// needs at least 3 levels.
pub fn bin_covariate(values: &[f64], rule: &BinRule) -> Result<BinnedCovariate> {
    if values.is_empty() {
        return Err(Error::Spec("cannot bin an empty covariate".into()));
    }
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !vmin.is_finite() || !vmax.is_finite() {
        return Err(Error::Spec("covariate contains non-finite values".into()));
    }

    let edges: Vec<f64> = match rule {
        BinRule::FixedWidth { width, origin } => {
            if *width <= 0.0 {
                return Err(Error::Spec(format!("bin width must be positive, got {width}")));
            }
            let origin = origin.unwrap_or_else(|| (vmin / width).floor() * width);
            let mut e = vec![origin];
            let mut hi = origin;
            while hi <= vmax {
                hi += width;
                e.push(hi);
            }
            e
        }
        BinRule::Quantile { k } => {
            if *k < 3 {
                return Err(Error::Spec(format!("quantile binning needs k >= 3, got {k}")));
            }
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut e = vec![vmin];
            for i in 1..*k {
                let q = i as f64 / *k as f64;
                let pos = q * (sorted.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let frac = pos - lo as f64;
                let v = if lo + 1 < sorted.len() {
                    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
                } else {
                    sorted[lo]
                };
                e.push(v);
            }
            e.push(vmax + (vmax - vmin).max(1.0) * 1e-9);
            e.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            e
        }
        BinRule::Edges(e) => {
            if e.len() < 2 {
                return Err(Error::Spec("explicit bin edges need at least 2 entries".into()));
            }
            for w in e.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Spec("bin edges must be strictly increasing".into()));
                }
            }
            e.clone()
        }
    };

    let n_bins = edges.len() - 1;
    let assign = |v: f64| -> Result<usize> {
        if v < edges[0] || v > edges[n_bins] {
            return Err(Error::Spec(format!("value {v} outside bin range [{}, {}]", edges[0], edges[n_bins])));
        }
        // half-open bins [e_i, e_{i+1}); the top edge closes the last bin
        let mut b = n_bins - 1;
        for i in 0..n_bins {
            if v < edges[i + 1] {
                b = i;
                break;
            }
        }
        Ok(b)
    };

    let raw_bins: Vec<usize> = values.iter().map(|&v| assign(v)).collect::<Result<_>>()?;
    let mut counts = vec![0usize; n_bins];
    for &b in &raw_bins {
        counts[b] += 1;
    }
    let nonempty: Vec<usize> = (0..n_bins).filter(|&b| counts[b] > 0).collect();
    let dropped: Vec<usize> = (0..n_bins).filter(|&b| counts[b] == 0).collect();
    if nonempty.len() < 3 {
        return Err(Error::Spec(format!(
            "covariate produces only {} nonempty bins; a second-order random walk needs at least 3",
            nonempty.len()
        )));
    }
    let mut level_of_bin = vec![usize::MAX; n_bins];
    for (lvl, &b) in nonempty.iter().enumerate() {
        level_of_bin[b] = lvl;
    }
    let level_of_row: Vec<usize> = raw_bins.iter().map(|&b| level_of_bin[b]).collect();
    let level_values: Vec<f64> = nonempty.iter().map(|&b| 0.5 * (edges[b] + edges[b + 1])).collect();

    Ok(BinnedCovariate { bin_edges: edges, level_of_row, level_values, dropped_bins: dropped })
}

/// One term of the structured additive predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Intercept,
    Linear { covariate: String },
    SmoothRw2 { covariate: String, bin: BinRule },
    SpatialIcar,
    IidUnit,
    ZoneFactor { covariate: String, reference: String, random: bool },
}

/// Declarative model: ordered term list plus prior settings.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub terms: Vec<Term>,
    pub hyperprior: HyperPrior,
    pub fixed_prior_precision: f64,
}

impl ModelSpec {
    pub fn new(name: &str, terms: Vec<Term>) -> Result<Self> {
        let spec = ModelSpec {
            name: name.to_string(),
            terms,
            hyperprior: HyperPrior::new(0.001, 0.001)?,
            fixed_prior_precision: 0.01,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let count = |f: fn(&Term) -> bool| self.terms.iter().filter(|t| f(t)).count();
        if count(|t| matches!(t, Term::Intercept)) > 1 {
            return Err(Error::Spec("at most one intercept term".into()));
        }
        if count(|t| matches!(t, Term::SpatialIcar)) > 1 {
            return Err(Error::Spec("at most one spatial ICAR term".into()));
        }
        if count(|t| matches!(t, Term::IidUnit)) > 1 {
            return Err(Error::Spec("at most one iid unit term".into()));
        }
        if self.fixed_prior_precision <= 0.0 {
            return Err(Error::Spec("fixed-effect prior precision must be positive".into()));
        }
        let n_hyper = self.n_hyperparameters();
        if n_hyper > MAX_HYPERPARAMETERS {
            return Err(Error::Spec(format!(
                "model has {n_hyper} hyperparameters; the grid-exploration engine is designed for at most {MAX_HYPERPARAMETERS}"
            )));
        }
        Ok(())
    }

    pub fn n_hyperparameters(&self) -> usize {
        self.terms
            .iter()
            .map(|t| match t {
                Term::SmoothRw2 { .. } | Term::SpatialIcar | Term::IidUnit => 1,
                Term::ZoneFactor { random: true, .. } => 1,
                _ => 0,
            })
            .sum()
    }

    /// Parse the JSON model-config format. Unknown keys are rejected.
    pub fn from_json(name: &str, text: &str) -> Result<Self> {
        let cfg: ModelConfigFile = serde_json::from_str(text)?;
        let mut terms = Vec::new();
        for t in cfg.terms {
            terms.push(match t {
                TermConfig::Intercept {} => Term::Intercept,
                TermConfig::Linear { covariate } => Term::Linear { covariate },
                TermConfig::Rw2 { covariate, bin } => Term::SmoothRw2 { covariate, bin: bin.into_rule()? },
                TermConfig::Icar { graph } => {
                    // the path is informational; the graph used is the one
                    // supplied at fit time
                    drop(graph);
                    Term::SpatialIcar
                }
                TermConfig::Iid {} => Term::IidUnit,
                TermConfig::ZoneFactor { covariate, reference, random } => {
                    Term::ZoneFactor { covariate, reference, random }
                }
            });
        }
        let hyperprior = HyperPrior::new(cfg.hyperprior.a, cfg.hyperprior.b)?;
        let fixed_prior_precision = if cfg.fixed_prior_is_variance {
            1.0 / cfg.fixed_prior_precision
        } else {
            cfg.fixed_prior_precision
        };
        let spec = ModelSpec { name: name.to_string(), terms, hyperprior, fixed_prior_precision };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigFile {
    terms: Vec<TermConfig>,
    #[serde(default = "default_hyperprior")]
    hyperprior: HyperPriorConfig,
    #[serde(default = "default_fixed_prior_precision")]
    fixed_prior_precision: f64,
    /// The N(0, 0.01) fixed-effect prior is read as precision 0.01 by
    /// default; set true to read 0.01 as a variance instead.
    #[serde(default)]
    fixed_prior_is_variance: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HyperPriorConfig {
    a: f64,
    b: f64,
}

fn default_hyperprior() -> HyperPriorConfig {
    HyperPriorConfig { a: 0.001, b: 0.001 }
}

fn default_fixed_prior_precision() -> f64 {
    0.01
}

#[derive(Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
enum TermConfig {
    #[serde(rename = "intercept")]
    Intercept {},
    #[serde(rename = "linear")]
    Linear { covariate: String },
    #[serde(rename = "rw2")]
    Rw2 { covariate: String, bin: BinConfig },
    #[serde(rename = "icar")]
    Icar {
        /// Informational reference to the adjacency file; the graph actually
        /// used is the one supplied at fit time.
        #[serde(default)]
        graph: Option<String>,
    },
    #[serde(rename = "iid")]
    Iid {},
    #[serde(rename = "zone_factor")]
    ZoneFactor {
        covariate: String,
        reference: String,
        #[serde(default)]
        random: bool,
    },
}

#[derive(Deserialize)]
#[serde(tag = "rule", deny_unknown_fields)]
enum BinConfig {
    #[serde(rename = "fixed")]
    Fixed { width: f64, #[serde(default)] origin: Option<f64> },
    #[serde(rename = "quantile")]
    Quantile { k: usize },
    #[serde(rename = "edges")]
    Edges { edges: Vec<f64> },
}

impl BinConfig {
    fn into_rule(self) -> Result<BinRule> {
        Ok(match self {
            BinConfig::Fixed { width, origin } => BinRule::FixedWidth { width, origin },
            BinConfig::Quantile { k } => BinRule::Quantile { k },
            BinConfig::Edges { edges } => BinRule::Edges(edges),
        })
    }
}

/// Kind and payload of one contiguous block of the latent vector.
#[derive(Debug, Clone)]
pub enum BlockKind {
    Intercept,
    Linear { covariate: String, values: Vec<f64> },
    Zone { covariate: String, levels: Vec<String>, reference: String, level_of_row: Vec<Option<usize>> },
    ZoneRandom { covariate: String, levels: Vec<String>, hyper: usize, level_of_row: Vec<usize> },
    Rw2 { covariate: String, hyper: usize, bins: BinnedCovariate },
    Icar { hyper: usize, n_components: usize },
    Iid { hyper: usize },
}

#[derive(Debug, Clone)]
pub struct Block {
    pub offset: usize,
    pub len: usize,
    pub kind: BlockKind,
    pub label: String,
    /// Intrinsic blocks carry their precision structure at tau = 1 and the
    /// log generalized determinant of that structure.
    pub structure: Option<SymmetricSparseMatrix>,
    pub rank: usize,
    pub log_det_structure: f64,
}

/// Latent-field layout: block map, constraints, and everything needed to
/// evaluate prior precision and prior log-density at a hyperparameter point.
#[derive(Debug, Clone)]
pub struct LatentLayout {
    pub n: usize,
    pub n_units: usize,
    pub blocks: Vec<Block>,
    pub constraint_rows: Vec<Vec<f64>>,
    pub n_hyper: usize,
    pub hyper_labels: Vec<String>,
    pub fixed_prior_precision: f64,
    pub warnings: Vec<String>,
}

/// Sparse observation-to-latent incidence: eta = A x.
#[derive(Debug, Clone)]
pub struct Incidence {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_latent: usize,
}

impl Incidence {
    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    /// eta for a single observation.
    pub fn eta_row(&self, obs: usize, x: &[f64]) -> f64 {
        self.rows[obs].iter().map(|&(j, v)| v * x[j]).sum()
    }
}

/// log generalized determinant of an intrinsic structure matrix via
/// det+(Q) = det(Q + V V^T) / det(V^T V) where V spans the null space.
fn log_gen_det(q: &SymmetricSparseMatrix, null_basis: &[Vec<f64>]) -> Result<f64> {
    let n = q.dim();
    let mut augmented = q.clone();
    for i in 0..n {
        for j in i..n {
            let mut v = 0.0;
            for col in null_basis {
                v += col[i] * col[j];
            }
            if v != 0.0 {
                augmented.add_entry(i, j, v)?;
            }
        }
    }
    let f = crate::gmrf::cholesky(&augmented, 0.0)?;
    let k = null_basis.len();
    let mut gram = DenseSym::zeros(k);
    for a in 0..k {
        for b in a..k {
            let dot: f64 = null_basis[a].iter().zip(&null_basis[b]).map(|(x, y)| x * y).sum();
            gram.set(a, b, dot);
        }
    }
    let gram_chol = DenseChol::new(&gram)?;
    Ok(f.log_det() - gram_chol.log_det())
}

/// Map the term list onto contiguous latent blocks in deterministic order
/// (intercept, linear/zone factors, smooths, spatial, iid) and collect the
/// identifiability constraints.
pub fn assemble_layout(spec: &ModelSpec, data: &Dataset, graph: &AdjacencyGraph) -> Result<LatentLayout> {
    spec.validate()?;
    let n_units = graph.n_units();
    for row in &data.rows {
        if row.unit_id >= n_units {
            return Err(Error::Spec(format!(
                "row references unit {} but the adjacency graph has {} units",
                row.unit_id, n_units
            )));
        }
    }

    let has_intercept = spec.terms.iter().any(|t| matches!(t, Term::Intercept));
    let mut warnings = Vec::new();

    // deterministic block order
    let mut ordered: Vec<&Term> = Vec::new();
    for t in &spec.terms {
        if matches!(t, Term::Intercept) {
            ordered.push(t);
        }
    }
    for t in &spec.terms {
        if matches!(t, Term::Linear { .. } | Term::ZoneFactor { .. }) {
            ordered.push(t);
        }
    }
    for t in &spec.terms {
        if matches!(t, Term::SmoothRw2 { .. }) {
            ordered.push(t);
        }
    }
    for t in &spec.terms {
        if matches!(t, Term::SpatialIcar) {
            ordered.push(t);
        }
    }
    for t in &spec.terms {
        if matches!(t, Term::IidUnit) {
            ordered.push(t);
        }
    }

    let linear_covariates: Vec<String> = spec
        .terms
        .iter()
        .filter_map(|t| match t {
            Term::Linear { covariate } => Some(covariate.clone()),
            _ => None,
        })
        .collect();

    let mut blocks: Vec<Block> = Vec::new();
    let mut offset = 0usize;
    let mut hyper_labels: Vec<String> = Vec::new();

    for term in ordered {
        match term {
            Term::Intercept => {
                blocks.push(Block {
                    offset,
                    len: 1,
                    kind: BlockKind::Intercept,
                    label: "intercept".into(),
                    structure: None,
                    rank: 1,
                    log_det_structure: 0.0,
                });
                offset += 1;
            }
            Term::Linear { covariate } => {
                let values = data.covariate_numeric(covariate)?;
                blocks.push(Block {
                    offset,
                    len: 1,
                    kind: BlockKind::Linear { covariate: covariate.clone(), values },
                    label: format!("linear:{covariate}"),
                    structure: None,
                    rank: 1,
                    log_det_structure: 0.0,
                });
                offset += 1;
            }
            Term::ZoneFactor { covariate, reference, random } => {
                let raw = data.covariate_raw(covariate)?;
                let mut levels: Vec<String> = raw.iter().cloned().collect();
                levels.sort();
                levels.dedup();
                if !levels.contains(reference) {
                    return Err(Error::Spec(format!(
                        "reference zone {reference:?} not present in covariate {covariate:?}"
                    )));
                }
                if *random {
                    let hyper = hyper_labels.len();
                    hyper_labels.push(format!("tau_zone_{covariate}"));
                    let level_of_row: Vec<usize> = raw
                        .iter()
                        .map(|s| levels.iter().position(|l| l == s).unwrap())
                        .collect();
                    let len = levels.len();
                    blocks.push(Block {
                        offset,
                        len,
                        kind: BlockKind::ZoneRandom {
                            covariate: covariate.clone(),
                            levels,
                            hyper,
                            level_of_row,
                        },
                        label: format!("zone:{covariate}"),
                        structure: None,
                        rank: len,
                        log_det_structure: 0.0,
                    });
                    offset += len;
                } else {
                    let nonref: Vec<String> = levels.iter().filter(|l| *l != reference).cloned().collect();
                    let level_of_row: Vec<Option<usize>> = raw
                        .iter()
                        .map(|s| {
                            if s == reference {
                                None
                            } else {
                                Some(nonref.iter().position(|l| l == s).unwrap())
                            }
                        })
                        .collect();
                    let len = nonref.len();
                    if len == 0 {
                        return Err(Error::Spec(format!(
                            "zone factor {covariate:?} has only the reference level"
                        )));
                    }
                    blocks.push(Block {
                        offset,
                        len,
                        kind: BlockKind::Zone {
                            covariate: covariate.clone(),
                            levels: nonref,
                            reference: reference.clone(),
                            level_of_row,
                        },
                        label: format!("zone:{covariate}"),
                        structure: None,
                        rank: len,
                        log_det_structure: 0.0,
                    });
                    offset += len;
                }
            }
            Term::SmoothRw2 { covariate, bin } => {
                let values = data.covariate_numeric(covariate)?;
                let bins = bin_covariate(&values, bin)?;
                if !bins.dropped_bins.is_empty() {
                    warnings.push(format!(
                        "covariate {covariate:?}: {} empty bins merged into neighbors",
                        bins.dropped_bins.len()
                    ));
                }
                let m = bins.n_levels();
                let structure = priors::rw2_precision(m, 1.0)?;
                let ones = vec![1.0; m];
                let lin: Vec<f64> = (0..m).map(|i| i as f64 + 1.0 - 0.5 * (m as f64 + 1.0)).collect();
                let log_det_structure = log_gen_det(&structure, &[ones, lin])?;
                let hyper = hyper_labels.len();
                hyper_labels.push(format!("tau_rw2_{covariate}"));
                blocks.push(Block {
                    offset,
                    len: m,
                    kind: BlockKind::Rw2 { covariate: covariate.clone(), hyper, bins },
                    label: format!("rw2:{covariate}"),
                    structure: Some(structure),
                    rank: m - 2,
                    log_det_structure,
                });
                offset += m;
            }
            Term::SpatialIcar => {
                let structure = priors::icar_precision(graph, 1.0)?;
                let components = graph.connected_components();
                if components.len() > 1 {
                    warnings.push(format!(
                        "adjacency graph has {} connected components; the spatial prior rank drops accordingly",
                        components.len()
                    ));
                }
                let basis: Vec<Vec<f64>> = components
                    .iter()
                    .map(|comp| {
                        let mut v = vec![0.0; n_units];
                        for &u in comp {
                            v[u] = 1.0;
                        }
                        v
                    })
                    .collect();
                let log_det_structure = log_gen_det(&structure, &basis)?;
                let hyper = hyper_labels.len();
                hyper_labels.push("tau_spatial".into());
                blocks.push(Block {
                    offset,
                    len: n_units,
                    kind: BlockKind::Icar { hyper, n_components: components.len() },
                    label: "spatial".into(),
                    structure: Some(structure),
                    rank: n_units - components.len(),
                    log_det_structure,
                });
                offset += n_units;
            }
            Term::IidUnit => {
                let hyper = hyper_labels.len();
                hyper_labels.push("tau_iid".into());
                blocks.push(Block {
                    offset,
                    len: n_units,
                    kind: BlockKind::Iid { hyper },
                    label: "iid".into(),
                    structure: None,
                    rank: n_units,
                    log_det_structure: 0.0,
                });
                offset += n_units;
            }
        }
    }

    // sum-to-zero constraints for intrinsic blocks, only when an intercept
    // would otherwise be confounded with their null space
    let n = offset;
    let mut constraint_rows: Vec<Vec<f64>> = Vec::new();
    if has_intercept {
        for block in &blocks {
            match &block.kind {
                BlockKind::Icar { .. } => {
                    for comp in graph.connected_components() {
                        let mut row = vec![0.0; n];
                        for &u in &comp {
                            row[block.offset + u] = 1.0;
                        }
                        constraint_rows.push(row);
                    }
                }
                BlockKind::Rw2 { covariate, .. } => {
                    let mut row = vec![0.0; n];
                    for j in 0..block.len {
                        row[block.offset + j] = 1.0;
                    }
                    constraint_rows.push(row);
                    if linear_covariates.contains(covariate) {
                        // the in-block linear trend is confounded with the
                        // matching linear term; pin it with a centered ramp
                        let m = block.len as f64;
                        let mut lin = vec![0.0; n];
                        for j in 0..block.len {
                            lin[block.offset + j] = j as f64 + 1.0 - 0.5 * (m + 1.0);
                        }
                        constraint_rows.push(lin);
                    }
                }
                _ => {}
            }
        }
    }

    let n_hyper = hyper_labels.len();
    Ok(LatentLayout {
        n,
        n_units,
        blocks,
        constraint_rows,
        n_hyper,
        hyper_labels,
        fixed_prior_precision: spec.fixed_prior_precision,
        warnings,
    })
}

impl LatentLayout {
    /// Block-diagonal prior precision at the log-precision point `theta`.
    pub fn prior_precision(&self, theta: &[f64]) -> Result<SymmetricSparseMatrix> {
        if theta.len() != self.n_hyper {
            return Err(Error::DimensionMismatch { expected: self.n_hyper, got: theta.len() });
        }
        let mut q = SymmetricSparseMatrix::zeros(self.n);
        for block in &self.blocks {
            match &block.kind {
                BlockKind::Intercept | BlockKind::Linear { .. } | BlockKind::Zone { .. } => {
                    let b = priors::fixed_effect_precision(block.len, self.fixed_prior_precision)?;
                    q.add_block(block.offset, &b)?;
                }
                BlockKind::ZoneRandom { hyper, .. } | BlockKind::Iid { hyper } => {
                    let tau = theta[*hyper].exp();
                    let b = priors::iid_precision(block.len, tau)?;
                    q.add_block(block.offset, &b)?;
                }
                BlockKind::Rw2 { hyper, .. } | BlockKind::Icar { hyper, .. } => {
                    let tau = theta[*hyper].exp();
                    let structure = block.structure.as_ref().expect("intrinsic block has structure");
                    q.add_block(block.offset, &structure.scaled(tau))?;
                }
            }
        }
        Ok(q)
    }

    /// Joint prior log-density of the latent field at `x`. Proper blocks use
    /// full Gaussian constants; intrinsic blocks use the rank-based exponent
    /// plus their structure's log generalized determinant, which makes the
    /// value the exact subspace density once the matching sum-to-zero
    /// constraints hold.
    pub fn prior_log_density(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        if theta.len() != self.n_hyper {
            return Err(Error::DimensionMismatch { expected: self.n_hyper, got: theta.len() });
        }
        let mut total = 0.0;
        for block in &self.blocks {
            let xb = &x[block.offset..block.offset + block.len];
            match &block.kind {
                BlockKind::Intercept | BlockKind::Linear { .. } | BlockKind::Zone { .. } => {
                    let p = self.fixed_prior_precision;
                    let ss: f64 = xb.iter().map(|v| v * v).sum();
                    total += 0.5 * block.len as f64 * (p.ln() - LN_2PI) - 0.5 * p * ss;
                }
                BlockKind::ZoneRandom { hyper, .. } | BlockKind::Iid { hyper } => {
                    let tau = theta[*hyper].exp();
                    let ss: f64 = xb.iter().map(|v| v * v).sum();
                    total += 0.5 * block.len as f64 * (tau.ln() - LN_2PI) - 0.5 * tau * ss;
                }
                BlockKind::Rw2 { hyper, .. } | BlockKind::Icar { hyper, .. } => {
                    let tau = theta[*hyper].exp();
                    let structure = block.structure.as_ref().expect("intrinsic block has structure");
                    let quad = structure.quadratic_form(xb)?;
                    total += 0.5 * block.rank as f64 * (tau.ln() - LN_2PI)
                        + 0.5 * block.log_det_structure
                        - 0.5 * tau * quad;
                }
            }
        }
        Ok(total)
    }

    /// Log-prior of the hyperparameters on the log-precision scale:
    /// gamma densities in tau plus the log-scale Jacobian.
    pub fn theta_log_prior(&self, theta: &[f64], hp: &HyperPrior) -> Result<f64> {
        if theta.len() != self.n_hyper {
            return Err(Error::DimensionMismatch { expected: self.n_hyper, got: theta.len() });
        }
        let mut total = 0.0;
        for &t in theta {
            total += priors::log_gamma_density(t.exp(), hp)? + t;
        }
        Ok(total)
    }

    /// (block label, component label) for each latent index.
    pub fn component_labels(&self) -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(self.n);
        for block in &self.blocks {
            match &block.kind {
                BlockKind::Intercept => out.push((block.label.clone(), "mu".into())),
                BlockKind::Linear { covariate, .. } => out.push((block.label.clone(), covariate.clone())),
                BlockKind::Zone { levels, .. } => {
                    for l in levels {
                        out.push((block.label.clone(), l.clone()));
                    }
                }
                BlockKind::ZoneRandom { levels, .. } => {
                    for l in levels {
                        out.push((block.label.clone(), l.clone()));
                    }
                }
                BlockKind::Rw2 { bins, .. } => {
                    for v in &bins.level_values {
                        out.push((block.label.clone(), format!("{v}")));
                    }
                }
                BlockKind::Icar { .. } | BlockKind::Iid { .. } => {
                    for u in 0..block.len {
                        out.push((block.label.clone(), format!("{u}")));
                    }
                }
            }
        }
        out
    }

    pub fn spatial_block(&self) -> Option<&Block> {
        self.blocks.iter().find(|b| matches!(b.kind, BlockKind::Icar { .. }))
    }
}

/// Build the per-observation incidence rows realizing the additive predictor.
pub fn incidence(layout: &LatentLayout, data: &Dataset) -> Result<Incidence> {
    let n_obs = data.n_rows();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_obs];
    for block in &layout.blocks {
        match &block.kind {
            BlockKind::Intercept => {
                for row in rows.iter_mut() {
                    row.push((block.offset, 1.0));
                }
            }
            BlockKind::Linear { values, .. } => {
                for (o, row) in rows.iter_mut().enumerate() {
                    row.push((block.offset, values[o]));
                }
            }
            BlockKind::Zone { level_of_row, .. } => {
                for (o, row) in rows.iter_mut().enumerate() {
                    if let Some(lvl) = level_of_row[o] {
                        row.push((block.offset + lvl, 1.0));
                    }
                }
            }
            BlockKind::ZoneRandom { level_of_row, .. } => {
                for (o, row) in rows.iter_mut().enumerate() {
                    row.push((block.offset + level_of_row[o], 1.0));
                }
            }
            BlockKind::Rw2 { bins, .. } => {
                for (o, row) in rows.iter_mut().enumerate() {
                    row.push((block.offset + bins.level_of_row[o], 1.0));
                }
            }
            BlockKind::Icar { .. } | BlockKind::Iid { .. } => {
                for (o, row) in rows.iter_mut().enumerate() {
                    row.push((block.offset + data.rows[o].unit_id, 1.0));
                }
            }
        }
    }
    Ok(Incidence { rows, n_latent: layout.n })
}

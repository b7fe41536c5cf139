//! Central-node combination of local particle approximations.
//!
//! Three scenarios: pooling reports that target the same posterior
//! (parallel), ranking models by their marginal-likelihood estimates
//! (model selection), and multiplying kernel-density sub-posterior
//! approximations reported by nodes that each saw a slice of the data
//! (distributed). Prior splitting for sub-posteriors is the caller's
//! concern; fusion operates on the reported mixtures only.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::compress::{log_sum_exp, CompressedSet, CovarianceMode, ModeTag};
use crate::error::{Error, Result};
use crate::sample::WeightedSampleSet;

/// What a local node reports to the central node.
#[derive(Clone, Debug)]
pub enum LocalApproximation {
    Samples(WeightedSampleSet),
    Compressed(CompressedSet),
}

/// A local node's contribution: its (possibly compressed) approximation
/// plus the bookkeeping the central node needs to weight it.
#[derive(Clone, Debug)]
pub struct LocalReport {
    pub node_id: u64,
    pub approximation: LocalApproximation,
    /// Local sample count `N_l` (before compression).
    pub sample_count: usize,
    /// Aggregated weight `W_l`: `N_l` for unweighted sources,
    /// `N_l * Z-hat_l` for weighted sources.
    pub aggregated_weight: f64,
    pub marginal_likelihood: Option<f64>,
}

impl LocalReport {
    /// Report carrying the raw samples (no compression).
    pub fn from_samples(node_id: u64, s: WeightedSampleSet) -> Self {
        let n = s.len();
        let zhat = s.marginal_likelihood().ok();
        let w = match zhat {
            Some(z) => n as f64 * z,
            None => n as f64,
        };
        LocalReport {
            node_id,
            approximation: LocalApproximation::Samples(s),
            sample_count: n,
            aggregated_weight: w,
            marginal_likelihood: zhat,
        }
    }

    /// Report carrying a compressed set built from `n` local samples.
    pub fn from_compressed(node_id: u64, c: CompressedSet, n: usize) -> Self {
        let w = c.aggregated_weight();
        // W = N Z-hat identifies Z-hat for weighted sources; unweighted
        // sources have W = N exactly and no Z estimate.
        let zhat = c.unnorm_weights().map(|_| w / n as f64);
        LocalReport {
            node_id,
            approximation: LocalApproximation::Compressed(c),
            sample_count: n,
            aggregated_weight: w,
            marginal_likelihood: zhat,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.approximation {
            LocalApproximation::Samples(s) => s.dim(),
            LocalApproximation::Compressed(c) => c.dim(),
        }
    }

    fn particle_count(&self) -> usize {
        match &self.approximation {
            LocalApproximation::Samples(s) => s.len(),
            LocalApproximation::Compressed(c) => c.len(),
        }
    }

    /// Scalar transmission cost of this report: the payload of the carried
    /// approximation plus one for the aggregated weight in weighted
    /// scenarios.
    pub fn payload_scalars(&self) -> usize {
        let base = match &self.approximation {
            LocalApproximation::Compressed(c) => c.payload_scalars(),
            // Raw transmission: N*d scalars, plus the weight column when
            // weighted.
            LocalApproximation::Samples(s) => {
                s.len() * (s.dim() + usize::from(s.is_weighted()))
            }
        };
        base + usize::from(self.marginal_likelihood.is_some())
    }

    /// Serializes a compressed report to the wire format: the compressed
    /// set's JSON plus `{node_id, N, W, Zhat?}`.
    pub fn to_wire_json(&self) -> Result<String> {
        let c = match &self.approximation {
            LocalApproximation::Compressed(c) => c,
            LocalApproximation::Samples(_) => {
                return Err(Error::invalid(
                    "wire format is defined for compressed reports; compress first",
                ))
            }
        };
        let wire = WireReport {
            node_id: self.node_id,
            n: self.sample_count,
            w: self.aggregated_weight,
            zhat: self.marginal_likelihood,
            compressed: serde_json::from_str(&c.to_json()?)?,
        };
        Ok(serde_json::to_string(&wire)?)
    }

    pub fn from_wire_json(s: &str) -> Result<Self> {
        let wire: WireReport = serde_json::from_str(s)?;
        let c = CompressedSet::from_json(&serde_json::to_string(&wire.compressed)?)?;
        Ok(LocalReport {
            node_id: wire.node_id,
            approximation: LocalApproximation::Compressed(c),
            sample_count: wire.n,
            aggregated_weight: wire.w,
            marginal_likelihood: wire.zhat,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireReport {
    node_id: u64,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "W")]
    w: f64,
    #[serde(rename = "Zhat", skip_serializing_if = "Option::is_none")]
    zhat: Option<f64>,
    #[serde(flatten)]
    compressed: serde_json::Value,
}

fn check_reports(reports: &[LocalReport]) -> Result<usize> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to fuse"));
    }
    let dim = reports[0].dim();
    for r in reports {
        if r.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.dim(),
            });
        }
    }
    let weighted = reports[0].marginal_likelihood.is_some();
    if reports
        .iter()
        .any(|r| r.marginal_likelihood.is_some() != weighted)
    {
        return Err(Error::invalid(
            "cannot mix weighted and unweighted reports in one pool",
        ));
    }
    Ok(dim)
}

/// Parallel-framework pooling: node `l`'s particles are scaled by
/// `rho-bar_l = W_l / sum_j W_j` on top of their local weights, which makes
/// the pool a convex combination of the local approximations.
pub fn fuse_parallel(reports: &[LocalReport]) -> Result<CompressedSet> {
    let dim = check_reports(reports)?;
    let w_total: f64 = reports.iter().map(|r| r.aggregated_weight).sum();
    if !(w_total > 0.0) {
        return Err(Error::DegenerateWeights("degenerate pool".into()));
    }

    let mut particles = Vec::new();
    let mut weights = Vec::new();
    let mut covariances: Option<Vec<DMatrix<f64>>> = Some(Vec::new());
    for r in reports {
        let rho = r.aggregated_weight / w_total;
        match &r.approximation {
            LocalApproximation::Samples(s) => {
                particles.extend_from_slice(s.points_flat());
                weights.extend(s.norm_weights().iter().map(|w| rho * w));
                covariances = None;
            }
            LocalApproximation::Compressed(c) => {
                particles.extend_from_slice(c.particles_flat());
                weights.extend(c.weights().iter().map(|w| rho * w));
                match (&mut covariances, c.covariances()) {
                    (Some(acc), Some(cov)) => acc.extend(cov.iter().cloned()),
                    _ => covariances = None,
                }
            }
        }
    }
    CompressedSet::new(
        dim,
        particles,
        weights,
        None,
        w_total,
        covariances,
        None,
        ModeTag::Deterministic,
    )
}

/// Model-selection weights: the posterior probability mass of each model,
/// `rho-bar_l = N_l Z-hat_l / sum_k N_k Z-hat_k`.
pub fn model_posterior(reports: &[LocalReport]) -> Result<Vec<f64>> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports"));
    }
    let mut terms = Vec::with_capacity(reports.len());
    for r in reports {
        let z = r.marginal_likelihood.ok_or_else(|| {
            Error::invalid("model selection requires a marginal-likelihood estimate per report")
        })?;
        if z < 0.0 || !z.is_finite() {
            return Err(Error::invalid("marginal likelihood must be >= 0 and finite"));
        }
        terms.push(r.sample_count as f64 * z);
    }
    let total: f64 = terms.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights(
            "all model evidences are zero".into(),
        ));
    }
    Ok(terms.into_iter().map(|t| t / total).collect())
}

/// Result of multiplying kernel-density reports: the product mixture and
/// its unnormalized total mass (the integral of the product density).
#[derive(Clone, Debug)]
pub struct ProductFusion {
    pub mixture: CompressedSet,
    pub log_mass: f64,
}

impl ProductFusion {
    pub fn mass(&self) -> f64 {
        self.log_mass.exp()
    }
}

/// Exact product of the Gaussian-mixture reports: one component per tuple
/// of local components, with precision-weighted means/covariances and
/// weights scaled by the Gaussian overlap constants. Component count is
/// the product of the local counts and is capped.
pub fn fuse_product_of_mixtures(reports: &[LocalReport]) -> Result<ProductFusion> {
    fuse_product_of_mixtures_pruned(reports, crate::compress::DEFAULT_COMPONENT_CAP, 0.0)
}

/// As [`fuse_product_of_mixtures`], with an explicit component cap and a
/// relative mass floor: after each pairwise fold, components whose weight
/// falls below `prune_floor` times the largest weight are dropped (0 keeps
/// everything).
pub fn fuse_product_of_mixtures_pruned(
    reports: &[LocalReport],
    cap: usize,
    prune_floor: f64,
) -> Result<ProductFusion> {
    let dim = check_reports(reports)?;
    let mut total: usize = 1;
    for r in reports {
        total = total.saturating_mul(r.particle_count());
    }
    if total > cap {
        return Err(Error::EnumerationTooLarge {
            components: total,
            cap,
        });
    }

    let mut acc: Option<Vec<GaussComp>> = None;
    for r in reports {
        let comps = gauss_components(r)?;
        acc = Some(match acc {
            None => comps,
            Some(prev) => fold_product(&prev, &comps, prune_floor)?,
        });
    }
    let comps = acc.unwrap();
    if comps.is_empty() {
        return Err(Error::numerical(
            "product mixture lost all components (singular precisions)",
        ));
    }

    let log_ws: Vec<f64> = comps.iter().map(|c| c.log_w).collect();
    let log_mass = log_sum_exp(&log_ws);
    let mut particles = Vec::with_capacity(comps.len() * dim);
    let mut weights = Vec::with_capacity(comps.len());
    let mut covs = Vec::with_capacity(comps.len());
    for c in &comps {
        particles.extend(c.mean.iter().copied());
        weights.push((c.log_w - log_mass).exp());
        covs.push(c.cov.to_full(dim));
    }
    // Exp-normalization leaves the sum within roundoff of one; tidy it.
    let s: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= s;
    }
    let w_total: f64 = reports.iter().map(|r| r.aggregated_weight).sum();
    let mixture = CompressedSet::new(
        dim,
        particles,
        weights,
        None,
        w_total,
        Some(covs),
        Some(CovarianceMode::Full),
        ModeTag::Deterministic,
    )?;
    Ok(ProductFusion { mixture, log_mass })
}

/// Covariance in either diagonal or full form; products of diagonal
/// mixtures stay diagonal, which keeps large folds cheap.
#[derive(Clone, Debug)]
enum Cov {
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Cov {
    fn to_full(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Cov::Full(m) => m.clone(),
            Cov::Diag(d) => DMatrix::from_diagonal(&DVector::from_fn(dim, |i, _| d[i])),
        }
    }
}

#[derive(Clone, Debug)]
struct GaussComp {
    log_w: f64,
    mean: DVector<f64>,
    cov: Cov,
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

fn gauss_components(r: &LocalReport) -> Result<Vec<GaussComp>> {
    let c = match &r.approximation {
        LocalApproximation::Compressed(c) => c,
        LocalApproximation::Samples(_) => {
            return Err(Error::invalid(
                "product fusion requires kernel-density compressed reports",
            ))
        }
    };
    let covs = c.covariances().ok_or_else(|| {
        Error::invalid("product fusion requires reports with kernel covariances")
    })?;
    let d = c.dim();
    Ok((0..c.len())
        .map(|m| {
            let cov = if is_diagonal(&covs[m]) {
                Cov::Diag(DVector::from_fn(d, |i, _| covs[m][(i, i)]))
            } else {
                Cov::Full(covs[m].clone())
            };
            GaussComp {
                log_w: c.weights()[m].ln(),
                mean: DVector::from_fn(d, |i, _| c.particle(m)[i]),
                cov,
            }
        })
        .collect())
}

const LOG_2PI: f64 = 1.8378770664093453;

/// Product of two Gaussian components: `N(m1,S1) N(m2,S2) = z N(m,S)` with
/// `S = (S1^-1 + S2^-1)^-1`, `m = S (S1^-1 m1 + S2^-1 m2)`, and overlap
/// `z = N(m1; m2, S1 + S2)`. Returns `None` when `S1 + S2` is singular.
fn gauss_product(a: &GaussComp, b: &GaussComp) -> Option<GaussComp> {
    let d = a.mean.len();
    match (&a.cov, &b.cov) {
        (Cov::Diag(da), Cov::Diag(db)) => {
            let mut var = DVector::zeros(d);
            let mut mean = DVector::zeros(d);
            let mut log_z = -0.5 * d as f64 * LOG_2PI;
            for i in 0..d {
                let s = da[i] + db[i];
                if !(s > 0.0) {
                    return None;
                }
                let diff = a.mean[i] - b.mean[i];
                log_z += -0.5 * (s.ln() + diff * diff / s);
                var[i] = da[i] * db[i] / s;
                mean[i] = (a.mean[i] * db[i] + b.mean[i] * da[i]) / s;
            }
            Some(GaussComp {
                log_w: a.log_w + b.log_w + log_z,
                mean,
                cov: Cov::Diag(var),
            })
        }
        _ => {
            let sa = a.cov.to_full(d);
            let sb = b.cov.to_full(d);
            let sum = &sa + &sb;
            let chol_sum = Cholesky::new(sum)?;
            let diff = &a.mean - &b.mean;
            let half = chol_sum.l().solve_lower_triangular(&diff)?;
            let log_det: f64 = (0..d).map(|i| chol_sum.l()[(i, i)].ln()).sum::<f64>() * 2.0;
            let log_z = -0.5 * (d as f64 * LOG_2PI + log_det + half.dot(&half));

            // S = Sa (Sa + Sb)^-1 Sb is symmetric positive definite when
            // both inputs are; symmetrize against roundoff.
            let inv_sum = chol_sum.inverse();
            let cov = &sa * &inv_sum * &sb;
            let cov = 0.5 * (&cov + &cov.transpose());
            let mean = &sb * &inv_sum * &a.mean + &sa * &inv_sum * &b.mean;
            Some(GaussComp {
                log_w: a.log_w + b.log_w + log_z,
                mean,
                cov: Cov::Full(cov),
            })
        }
    }
}

fn fold_product(
    left: &[GaussComp],
    right: &[GaussComp],
    prune_floor: f64,
) -> Result<Vec<GaussComp>> {
    let mut out = Vec::with_capacity(left.len() * right.len());
    for a in left {
        for b in right {
            // Components with a singular precision sum are rejected rather
            // than failing the whole fusion.
            if let Some(c) = gauss_product(a, b) {
                if c.log_w.is_finite() {
                    out.push(c);
                }
            }
        }
    }
    if prune_floor > 0.0 && !out.is_empty() {
        let max = out
            .iter()
            .map(|c| c.log_w)
            .fold(f64::NEG_INFINITY, f64::max);
        let cut = max + prune_floor.ln();
        out.retain(|c| c.log_w >= cut);
    }
    Ok(out)
}

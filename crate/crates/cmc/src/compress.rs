//! Compression of a weighted sample set into summary particles.
//!
//! Given samples, a partition, and an assignment, the summary weight of a
//! region is the sum of the normalized sample weights falling in it. The
//! summary particle is chosen stochastically (resampled within the region),
//! deterministically (the within-region weighted mean, an approximate
//! sigma point), or specifically for one integrand `h` (the within-region
//! estimate of `h`, which compresses that integral with zero loss).
//!
//! Kernel variants attach per-region Gaussian covariances so the compressed
//! set doubles as a sampleable mixture density.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{cumulative, pick, Assignment};
use crate::rng;
use crate::sample::{MomentFamily, WeightedSampleSet};

/// Default kernel covariance regularizer.
pub const DEFAULT_DELTA: f64 = 0.1;

/// Default cap on exact product-of-mixtures enumeration.
pub const DEFAULT_COMPONENT_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeTag {
    Stochastic,
    Deterministic,
    HSpecific,
    Ls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Per-region empirical covariance plus `delta * I`.
    Full,
    /// One diagonal matrix shared by every particle: per-coordinate
    /// variances of the whole sample set plus `delta * I`.
    SharedDiagonal,
}

/// How the summary particle of each region is selected.
pub enum Selection<'a> {
    /// Resample one sample per region by the within-region weights.
    Stochastic { seed: u64 },
    /// Within-region weighted mean.
    Deterministic,
    /// Within-region estimate of `h`; particles become scalars and no
    /// further spatial operation (kernels, products) applies to them.
    HSpecific(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
}

/// `M'` weighted summary particles, with optional unnormalized weights,
/// aggregated weight `W`, and optional Gaussian kernel covariances.
#[derive(Clone, Debug)]
pub struct CompressedSet {
    dim: usize,
    particles: Vec<f64>, // row-major M' x dim
    weights: Vec<f64>,
    unnorm_weights: Option<Vec<f64>>,
    aggregated_weight: f64,
    covariances: Option<Vec<DMatrix<f64>>>,
    covariance_mode: Option<CovarianceMode>,
    mode_tag: ModeTag,
}

impl CompressedSet {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        dim: usize,
        particles: Vec<f64>,
        weights: Vec<f64>,
        unnorm_weights: Option<Vec<f64>>,
        aggregated_weight: f64,
        covariances: Option<Vec<DMatrix<f64>>>,
        covariance_mode: Option<CovarianceMode>,
        mode_tag: ModeTag,
    ) -> Result<Self> {
        if dim == 0 || particles.is_empty() || particles.len() % dim != 0 {
            return Err(Error::invalid("bad particle storage"));
        }
        let m = particles.len() / dim;
        if weights.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: weights.len(),
            });
        }
        if mode_tag != ModeTag::Ls {
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
                return Err(Error::invalid(format!(
                    "summary weights must be nonnegative and sum to 1 (sum = {sum})"
                )));
            }
        }
        if let Some(cov) = &covariances {
            if cov.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: cov.len(),
                });
            }
        }
        Ok(Self {
            dim,
            particles,
            weights,
            unnorm_weights,
            aggregated_weight,
            covariances,
            covariance_mode,
            mode_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least one particle enforced at construction
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, m: usize) -> &[f64] {
        &self.particles[m * self.dim..(m + 1) * self.dim]
    }

    pub fn particles_flat(&self) -> &[f64] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn unnorm_weights(&self) -> Option<&[f64]> {
        self.unnorm_weights.as_deref()
    }

    pub fn aggregated_weight(&self) -> f64 {
        self.aggregated_weight
    }

    pub fn covariances(&self) -> Option<&[DMatrix<f64>]> {
        self.covariances.as_deref()
    }

    pub fn covariance_mode(&self) -> Option<CovarianceMode> {
        self.covariance_mode
    }

    pub fn mode_tag(&self) -> ModeTag {
        self.mode_tag
    }

    /// Weighted mean of the particle locations.
    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for (m, p) in self.particles.chunks_exact(self.dim).enumerate() {
            for (a, b) in mu.iter_mut().zip(p) {
                *a += self.weights[m] * b;
            }
        }
        mu
    }

    /// Replaces the summary weights with a least-squares solution; the
    /// result may carry negative weights and is tagged accordingly.
    pub fn with_ls_weights(&self, weights: Vec<f64>) -> Result<CompressedSet> {
        if weights.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: weights.len(),
            });
        }
        CompressedSet::new(
            self.dim,
            self.particles.clone(),
            weights,
            None,
            self.aggregated_weight,
            self.covariances.clone(),
            self.covariance_mode,
            ModeTag::Ls,
        )
    }

    /// Scalar transmission cost of this set: `M(d+1)` plain, `M(2d+1)` for
    /// the shared-diagonal kernel form, `M(d^2/2 + 3d/2 + 1)` for full
    /// kernels. The aggregated weight adds one more scalar in weighted
    /// scenarios (accounted by the fusion layer, which knows the scenario).
    pub fn payload_scalars(&self) -> usize {
        let m = self.len();
        let d = self.dim;
        match self.covariance_mode {
            None => m * (d + 1),
            Some(CovarianceMode::SharedDiagonal) => m * (2 * d + 1),
            Some(CovarianceMode::Full) => m * (d * d / 2 + 3 * d / 2 + 1),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&WireCompressedSet::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let wire: WireCompressedSet = serde_json::from_str(s)?;
        wire.try_into()
    }
}

/// JSON wire form: `{particles, weights, W, covariances?, mode_tag}`.
#[derive(Serialize, Deserialize)]
struct WireCompressedSet {
    particles: Vec<Vec<f64>>,
    weights: Vec<f64>,
    #[serde(rename = "W")]
    aggregated_weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariances: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance_mode: Option<CovarianceMode>,
    mode_tag: ModeTag,
}

impl From<&CompressedSet> for WireCompressedSet {
    fn from(c: &CompressedSet) -> Self {
        WireCompressedSet {
            particles: (0..c.len()).map(|m| c.particle(m).to_vec()).collect(),
            weights: c.weights.clone(),
            aggregated_weight: c.aggregated_weight,
            covariances: c.covariances.as_ref().map(|cov| {
                cov.iter()
                    .map(|s| {
                        (0..s.nrows())
                            .map(|i| (0..s.ncols()).map(|j| s[(i, j)]).collect())
                            .collect()
                    })
                    .collect()
            }),
            covariance_mode: c.covariance_mode,
            mode_tag: c.mode_tag,
        }
    }
}

impl TryFrom<WireCompressedSet> for CompressedSet {
    type Error = Error;

    fn try_from(w: WireCompressedSet) -> Result<Self> {
        if w.particles.is_empty() {
            return Err(Error::invalid("empty particle list"));
        }
        let dim = w.particles[0].len();
        let mut flat = Vec::with_capacity(w.particles.len() * dim);
        for p in &w.particles {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
        let covariances = w
            .covariances
            .map(|cov| {
                cov.iter()
                    .map(|rows| {
                        let n = rows.len();
                        let mut m = DMatrix::zeros(n, n);
                        for (i, row) in rows.iter().enumerate() {
                            if row.len() != n {
                                return Err(Error::invalid("covariance not square"));
                            }
                            for (j, &v) in row.iter().enumerate() {
                                m[(i, j)] = v;
                            }
                        }
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        CompressedSet::new(
            dim,
            flat,
            w.weights,
            None,
            w.aggregated_weight,
            covariances,
            w.covariance_mode,
            w.mode_tag,
        )
    }
}

/// Summary weights per region: `â_m = sum_{i in J_m} w̄_i`. Empty regions
/// get weight zero.
pub fn cmc_weights(s: &WeightedSampleSet, a: &Assignment) -> Vec<f64> {
    let w = s.norm_weights();
    a.iter()
        .map(|idx| idx.iter().map(|&i| w[i]).sum())
        .collect()
}

/// Normalized weights within region `m` (in the order of `J_m`):
/// `w̄_{m,i} = w̄_i / â_m`.
pub fn within_region_weights(
    s: &WeightedSampleSet,
    a: &Assignment,
    m: usize,
) -> Result<Vec<f64>> {
    let w = s.norm_weights();
    let idx = a.indices(m);
    let total: f64 = idx.iter().map(|&i| w[i]).sum();
    if total <= 0.0 {
        return Err(Error::EmptyRegion(m));
    }
    Ok(idx.iter().map(|&i| w[i] / total).collect())
}

/// Compresses `s` into one summary particle per nonempty region.
///
/// Regions with zero summary weight are dropped; the remaining weights
/// already sum to one. The aggregated weight is `sum_n w_n` (or `N` for
/// unweighted sets), and for weighted sets the per-particle unnormalized
/// weights `a_m = Ẑ_m` are attached so the marginal-likelihood estimator
/// survives compression exactly.
pub fn compress(s: &WeightedSampleSet, a: &Assignment, selection: Selection) -> Result<CompressedSet> {
    let all_w = cmc_weights(s, a);
    let nonempty: Vec<usize> = (0..a.region_count()).filter(|&m| all_w[m] > 0.0).collect();
    if nonempty.is_empty() {
        return Err(Error::DegenerateWeights("no nonempty region".into()));
    }

    let out_dim = match selection {
        Selection::HSpecific(_) => 1,
        _ => s.dim(),
    };
    let mut particles = Vec::with_capacity(nonempty.len() * out_dim);
    let mut weights = Vec::with_capacity(nonempty.len());
    for &m in &nonempty {
        let idx = a.indices(m);
        let wm = within_region_weights(s, a, m)?;
        match &selection {
            Selection::Deterministic => {
                let mut sm = vec![0.0; s.dim()];
                for (&i, &w) in idx.iter().zip(&wm) {
                    for (acc, &x) in sm.iter_mut().zip(s.point(i)) {
                        *acc += w * x;
                    }
                }
                particles.extend_from_slice(&sm);
            }
            Selection::Stochastic { seed } => {
                // One uniform per region from a region-indexed sub-stream:
                // reproducible and independent across regions.
                let u: f64 = rng::substream(*seed, m as u64).random();
                let cum = cumulative(&wm);
                let j = idx[pick(&cum, u)];
                particles.extend_from_slice(s.point(j));
            }
            Selection::HSpecific(h) => {
                let mut sm = 0.0;
                for (&i, &w) in idx.iter().zip(&wm) {
                    let v = h(s.point(i));
                    if !v.is_finite() {
                        return Err(Error::NonFiniteIntegrand(i));
                    }
                    sm += w * v;
                }
                particles.push(sm);
            }
        }
        weights.push(all_w[m]);
    }

    // Unnormalized summary weights: the total unnormalized weight of each
    // region, so (1/N) sum_m a_m recovers the Z estimator exactly.
    let unnorm = s.unnorm_weights().map(|uw| {
        nonempty
            .iter()
            .map(|&m| a.indices(m).iter().map(|&i| uw[i]).sum::<f64>())
            .collect()
    });
    let tag = match selection {
        Selection::Stochastic { .. } => ModeTag::Stochastic,
        Selection::Deterministic => ModeTag::Deterministic,
        Selection::HSpecific(_) => ModeTag::HSpecific,
    };
    CompressedSet::new(
        out_dim,
        particles,
        weights,
        unnorm,
        s.aggregated_weight(),
        None,
        None,
        tag,
    )
}

/// Estimator on the compressed set: `sum_m â_m g(s_m)`.
///
/// For h-specific sets the particles already hold values of `h`, so `g`
/// must be the identity on scalars.
pub fn cmc_estimate(c: &CompressedSet, g: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let mut acc = 0.0;
    for m in 0..c.len() {
        let v = g(c.particle(m));
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand(m));
        }
        acc += c.weights[m] * v;
    }
    Ok(acc)
}

/// Rebuilds the marginal-likelihood estimator from the unnormalized summary
/// weights: `(1/N) sum_m a_m`, which equals `Ẑ` of the source set exactly.
pub fn reconstruct_z(c: &CompressedSet, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("N must be positive"));
    }
    let a = c.unnorm_weights.as_ref().ok_or(Error::UnweightedSource)?;
    Ok(a.iter().sum::<f64>() / n as f64)
}

/// Kernel-density compression: deterministic summary particles used as
/// Gaussian kernel locations with regularized covariances.
pub fn kde_compress(
    s: &WeightedSampleSet,
    a: &Assignment,
    covariance_mode: CovarianceMode,
    delta: f64,
) -> Result<CompressedSet> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let base = compress(s, a, Selection::Deterministic)?;
    let d = s.dim();
    let all_w = cmc_weights(s, a);
    let nonempty: Vec<usize> = (0..a.region_count()).filter(|&m| all_w[m] > 0.0).collect();

    let covs = match covariance_mode {
        CovarianceMode::Full => nonempty
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let idx = a.indices(m);
                let wm = within_region_weights(s, a, m)?;
                let sm = base.particle(k);
                let mut sigma = DMatrix::zeros(d, d);
                for (&i, &w) in idx.iter().zip(&wm) {
                    let x = s.point(i);
                    for r in 0..d {
                        for c in 0..d {
                            sigma[(r, c)] += w * (x[r] - sm[r]) * (x[c] - sm[c]);
                        }
                    }
                }
                for r in 0..d {
                    sigma[(r, r)] += delta;
                }
                Ok(sigma)
            })
            .collect::<Result<Vec<_>>>()?,
        CovarianceMode::SharedDiagonal => {
            // Per-coordinate variances of the whole weighted set.
            let mut mu = vec![0.0; d];
            for (x, w) in s.iter() {
                for (acc, &v) in mu.iter_mut().zip(x) {
                    *acc += w * v;
                }
            }
            let mut var = vec![0.0; d];
            for (x, w) in s.iter() {
                for (acc, (&v, &m)) in var.iter_mut().zip(x.iter().zip(&mu)) {
                    *acc += w * (v - m) * (v - m);
                }
            }
            let mut sigma = DMatrix::zeros(d, d);
            for r in 0..d {
                sigma[(r, r)] = var[r] + delta;
            }
            vec![sigma; nonempty.len()]
        }
    };

    CompressedSet::new(
        d,
        base.particles,
        base.weights,
        base.unnorm_weights,
        base.aggregated_weight,
        Some(covs),
        Some(covariance_mode),
        ModeTag::Deterministic,
    )
}

/// Draws `n` unweighted samples from the Gaussian mixture carried by a
/// compressed set with covariances: pick a component by inverse CDF on the
/// summary weights, then draw from its kernel.
pub fn kde_sample(c: &CompressedSet, n: usize, seed: u64) -> Result<WeightedSampleSet> {
    let covs = c.covariances.as_ref().ok_or_else(|| {
        Error::invalid("kde_sample requires a compressed set with covariances")
    })?;
    if n == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    let d = c.dim;
    let factors: Vec<Cholesky<f64, Dyn>> = covs
        .iter()
        .map(|s| {
            Cholesky::new(s.clone())
                .ok_or_else(|| Error::numerical("kernel covariance not positive definite"))
        })
        .collect::<Result<Vec<_>>>()?;
    let cum = cumulative(&c.weights);
    let mut rng = rng::root(seed);
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let m = pick(&cum, rng.random());
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let x = factors[m].l() * z;
        for i in 0..d {
            out.push(c.particle(m)[i] + x[i]);
        }
    }
    WeightedSampleSet::unweighted(d, out)
}

/// Evaluator for the Gaussian-mixture density of a compressed set with
/// covariances. Counts kernel evaluations (one per component per call).
pub struct MixturePdf {
    dim: usize,
    means: Vec<f64>,
    log_weights: Vec<f64>,
    factors: Vec<Cholesky<f64, Dyn>>,
    log_norms: Vec<f64>,
    evals: AtomicU64,
}

impl MixturePdf {
    pub fn new(c: &CompressedSet) -> Result<Self> {
        let covs = c
            .covariances
            .as_ref()
            .ok_or_else(|| Error::invalid("mixture pdf requires covariances"))?;
        let d = c.dim;
        let mut factors = Vec::with_capacity(covs.len());
        let mut log_norms = Vec::with_capacity(covs.len());
        for s in covs {
            let ch = Cholesky::new(s.clone())
                .ok_or_else(|| Error::numerical("kernel covariance not positive definite"))?;
            let log_det: f64 = (0..d).map(|i| ch.l()[(i, i)].ln()).sum::<f64>() * 2.0;
            log_norms.push(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det));
            factors.push(ch);
        }
        Ok(Self {
            dim: d,
            means: c.particles.clone(),
            log_weights: c.weights.iter().map(|w| w.ln()).collect(),
            factors,
            log_norms,
            evals: AtomicU64::new(0),
        })
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    /// Total kernel evaluations so far (components x calls).
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    /// Log density of the mixture at `x` (log-sum-exp over components).
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut terms = Vec::with_capacity(self.components());
        for m in 0..self.components() {
            let mu = &self.means[m * d..(m + 1) * d];
            let diff = DVector::from_fn(d, |i, _| x[i] - mu[i]);
            let half = self.factors[m].l().solve_lower_triangular(&diff).unwrap();
            let quad = half.dot(&half);
            terms.push(self.log_weights[m] + self.log_norms[m] - 0.5 * quad);
        }
        self.evals
            .fetch_add(self.components() as u64, Ordering::Relaxed);
        log_sum_exp(&terms)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.logpdf(x).exp()
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Least-squares summary weights for fixed particles: solves
/// `min ||H a - v||_2` where row 0 of `H` is the constant function 1 and
/// row `r` evaluates `h_r` at the particles, `v = [1, Î(h_1)..Î(h_R)]`.
#[derive(Clone, Debug)]
pub struct LsWeights {
    pub weights: Vec<f64>,
    pub rank_deficient: bool,
    pub residual: f64,
}

pub fn ls_weights(
    particles: &CompressedSet,
    s: &WeightedSampleSet,
    fam: &MomentFamily,
) -> Result<LsWeights> {
    let m = particles.len();
    let r = fam.len();
    if r + 1 < m {
        return Err(Error::invalid(format!(
            "need R+1 >= M equations (R = {r}, M = {m})"
        )));
    }
    let mut h = DMatrix::zeros(r + 1, m);
    for j in 0..m {
        h[(0, j)] = 1.0;
    }
    for i in 0..r {
        for j in 0..m {
            let v = fam.eval(i, particles.particle(j));
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand(j));
            }
            h[(i + 1, j)] = v;
        }
    }
    let mut v = DVector::zeros(r + 1);
    v[0] = 1.0;
    for i in 0..r {
        v[i + 1] = s.mc_estimate(|x| fam.eval(i, x))?;
    }

    // Rank-revealing solve through the SVD: minimum-norm least squares.
    let svd = h.clone().svd(true, true);
    let tol = f64::EPSILON * (r + 1).max(m) as f64 * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&sv| sv > tol).count();
    let sol = svd
        .solve(&v, tol)
        .map_err(|e| Error::numerical(format!("svd solve failed: {e}")))?;
    let residual = (&h * &sol - &v).norm();
    Ok(LsWeights {
        weights: sol.iter().copied().collect(),
        rank_deficient: rank < m,
        residual,
    })
}

/// Baseline bootstrap compression: `M` multinomial resamples with uniform
/// weights `1/M` and the aggregated weight of the source set.
pub fn bootstrap_compress(s: &WeightedSampleSet, m: usize, seed: u64) -> Result<CompressedSet> {
    if m == 0 || m > s.len() {
        return Err(Error::invalid(format!(
            "need 1 <= M <= N, got M = {m}, N = {}",
            s.len()
        )));
    }
    let cum = cumulative(s.norm_weights());
    let mut rng = rng::root(seed);
    let mut particles = Vec::with_capacity(m * s.dim());
    for _ in 0..m {
        let i = pick(&cum, rng.random());
        particles.extend_from_slice(s.point(i));
    }
    CompressedSet::new(
        s.dim(),
        particles,
        vec![1.0 / m as f64; m],
        None,
        s.aggregated_weight(),
        None,
        None,
        ModeTag::Stochastic,
    )
}

//! Compression losses, per-region costs, and stratified-estimator oracles.
//!
//! For fixed samples and a fixed partition, the deterministic compression
//! loss for an integrand `h` factors into per-region costs with
//! `l(h) = (sum_m c_m)^2`, while the stochastic selection has conditional
//! expected squared error `l(h) = sum_m c_m` with each `c_m` a scaled
//! within-region variance (hence nonnegative). Both cost vectors depend
//! only on the samples and the partition, which is what makes the adaptive
//! splitting procedure possible before any summary particle is drawn.

use std::io::Write;

use crate::compress::{cmc_estimate, CompressedSet, ModeTag};
use crate::error::{Error, Result};
use crate::partition::Assignment;
use crate::quad;
use crate::rng;
use crate::sample::{MomentFamily, WeightedSampleSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMode {
    Deterministic,
    Stochastic,
}

/// Per-region costs `c_m(h)` and the total loss they imply.
#[derive(Clone, Debug)]
pub struct RegionCosts {
    pub costs: Vec<f64>,
    pub mode: CostMode,
    /// `(sum c_m)^2` in deterministic mode, `sum c_m` in stochastic mode.
    pub total: f64,
}

impl RegionCosts {
    /// Audit-trail CSV: `region_index, cost`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["region_index", "cost"])?;
        for (m, c) in self.costs.iter().enumerate() {
            wtr.write_record([m.to_string(), c.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Squared-error loss between two scalar estimates.
pub fn loss_single(i_n: f64, i_m: f64) -> f64 {
    (i_n - i_m) * (i_n - i_m)
}

/// Weighted family loss `L_R = sum_r xi_r^2 (I-hat(h_r) - I-tilde(h_r))^2`.
///
/// H-specific compressed sets are accepted only for a single-function
/// family (whose function must be the one the set was built for; the
/// particles are scalar values of `h`, evaluated through the identity).
pub fn loss_family(
    s: &WeightedSampleSet,
    c: &CompressedSet,
    fam: &MomentFamily,
) -> Result<f64> {
    if c.mode_tag() == ModeTag::HSpecific && fam.len() != 1 {
        return Err(Error::invalid(
            "h-specific compressed sets support only a single-function family",
        ));
    }
    let mut total = 0.0;
    for r in 0..fam.len() {
        let i_n = s.mc_estimate(|x| fam.eval(r, x))?;
        let i_m = if c.mode_tag() == ModeTag::HSpecific {
            cmc_estimate(c, |v| v[0])?
        } else {
            cmc_estimate(c, |x| fam.eval(r, x))?
        };
        total += fam.loss_weights()[r] * loss_single(i_n, i_m);
    }
    Ok(total)
}

/// Deterministic-selection costs:
/// `c_m = sum_{j in J_m} w̄_j [h(x_j) - h(s_m)]` with `s_m` the
/// within-region weighted mean; total `(sum_m c_m)^2`.
pub fn region_costs_deterministic(
    s: &WeightedSampleSet,
    a: &Assignment,
    h: impl Fn(&[f64]) -> f64,
) -> Result<RegionCosts> {
    let w = s.norm_weights();
    let d = s.dim();
    let mut costs = Vec::with_capacity(a.region_count());
    for idx in a.iter() {
        if idx.is_empty() {
            costs.push(0.0);
            continue;
        }
        let a_m: f64 = idx.iter().map(|&i| w[i]).sum();
        if a_m <= 0.0 {
            costs.push(0.0);
            continue;
        }
        let mut s_m = vec![0.0; d];
        for &i in idx {
            for (acc, &x) in s_m.iter_mut().zip(s.point(i)) {
                *acc += (w[i] / a_m) * x;
            }
        }
        let h_sm = h(&s_m);
        if !h_sm.is_finite() {
            return Err(Error::numerical("h not finite at summary particle"));
        }
        let mut c = 0.0;
        for &i in idx {
            let v = h(s.point(i));
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand(i));
            }
            c += w[i] * (v - h_sm);
        }
        costs.push(c);
    }
    let sum: f64 = costs.iter().sum();
    Ok(RegionCosts {
        costs,
        mode: CostMode::Deterministic,
        total: sum * sum,
    })
}

/// Stochastic-selection costs:
/// `c_m = (sum w̄_i)(sum w̄_i h(x_i)^2) - (sum w̄_i h(x_i))^2`
/// over `J_m`; total `sum_m c_m`, the conditional expected squared error.
pub fn region_costs_stochastic(
    s: &WeightedSampleSet,
    a: &Assignment,
    h: impl Fn(&[f64]) -> f64,
) -> Result<RegionCosts> {
    let w = s.norm_weights();
    let mut costs = Vec::with_capacity(a.region_count());
    for idx in a.iter() {
        if idx.is_empty() {
            costs.push(0.0);
            continue;
        }
        let mut w_sum = 0.0;
        let mut wh = 0.0;
        let mut wh2 = 0.0;
        for &i in idx {
            let v = h(s.point(i));
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand(i));
            }
            w_sum += w[i];
            wh += w[i] * v;
            wh2 += w[i] * v * v;
        }
        costs.push(w_sum * wh2 - wh * wh);
    }
    let total = costs.iter().sum();
    Ok(RegionCosts {
        costs,
        mode: CostMode::Stochastic,
        total,
    })
}

/// Ground truth about a stratified one-dimensional target, computed by
/// numerical integration. Exists to validate the estimators; the
/// compression machinery itself never needs true region masses.
#[derive(Clone, Debug)]
pub struct StratifiedOracle {
    /// True region probabilities `a-bar_m`.
    pub region_masses: Vec<f64>,
    /// `I_m = E[h(X) | X in region m]`.
    pub region_means: Vec<f64>,
    /// `sigma_m^2 = var[h(X) | X in region m]`.
    pub region_variances: Vec<f64>,
    /// Draws per stratum for the stratified estimator.
    pub samples_per_region: Vec<usize>,
}

/// Oracle tolerance for the quadrature.
pub const ORACLE_TOL: f64 = 1e-8;

/// Builds the oracle for an unnormalized density on strata delimited by
/// `edges` (length `M + 1`, finite bounds covering the support).
pub fn stratified_oracle(
    pdf_unnorm: impl Fn(f64) -> f64,
    h: impl Fn(f64) -> f64,
    edges: &[f64],
    samples_per_region: Vec<usize>,
) -> Result<StratifiedOracle> {
    if edges.len() < 2 {
        return Err(Error::invalid("need at least one stratum"));
    }
    let m = edges.len() - 1;
    if samples_per_region.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: samples_per_region.len(),
        });
    }
    let mut z = Vec::with_capacity(m);
    let mut hz = Vec::with_capacity(m);
    let mut h2z = Vec::with_capacity(m);
    for k in 0..m {
        let (a, b) = (edges[k], edges[k + 1]);
        z.push(quad::integrate(&pdf_unnorm, a, b, ORACLE_TOL));
        hz.push(quad::integrate(|x| h(x) * pdf_unnorm(x), a, b, ORACLE_TOL));
        h2z.push(quad::integrate(
            |x| h(x) * h(x) * pdf_unnorm(x),
            a,
            b,
            ORACLE_TOL,
        ));
    }
    let total: f64 = z.iter().sum();
    if !(total > 0.0) {
        return Err(Error::IntegrationFailure("zero total mass".into()));
    }
    let masses: Vec<f64> = z.iter().map(|v| v / total).collect();
    let means: Vec<f64> = hz.iter().zip(&z).map(|(a, b)| a / b).collect();
    let vars: Vec<f64> = h2z
        .iter()
        .zip(&z)
        .zip(&means)
        .map(|((a, b), mu)| a / b - mu * mu)
        .collect();
    if vars.iter().any(|&v| v < -1e-6) {
        return Err(Error::IntegrationFailure(
            "negative stratum variance".into(),
        ));
    }
    Ok(StratifiedOracle {
        region_masses: masses,
        region_means: means,
        region_variances: vars.into_iter().map(|v| v.max(0.0)).collect(),
        samples_per_region,
    })
}

impl StratifiedOracle {
    /// Overall mean `I = sum a-bar_m I_m`.
    pub fn overall_mean(&self) -> f64 {
        self.region_masses
            .iter()
            .zip(&self.region_means)
            .map(|(a, i)| a * i)
            .sum()
    }

    /// Variance of the stratified estimator: `sum a-bar_m^2 sigma_m^2 / K_m`.
    pub fn estimator_variance(&self) -> f64 {
        self.region_masses
            .iter()
            .zip(&self.region_variances)
            .zip(&self.samples_per_region)
            .map(|((a, v), &k)| a * a * v / k as f64)
            .sum()
    }
}

/// Stratified estimator with known region masses: draws `K_m` points from
/// each restricted target through `region_samplers` and combines the
/// per-region averages with the true masses.
pub fn stratified_estimate(
    oracle: &StratifiedOracle,
    region_samplers: &[Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> f64>],
    h: impl Fn(f64) -> f64,
    seed: u64,
) -> Result<f64> {
    let m = oracle.region_masses.len();
    if region_samplers.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: region_samplers.len(),
        });
    }
    if oracle.samples_per_region.iter().any(|&k| k == 0) {
        return Err(Error::invalid("every stratum needs at least one draw"));
    }
    let mut acc = 0.0;
    for k in 0..m {
        let mut rng = rng::substream(seed, k as u64);
        let km = oracle.samples_per_region[k];
        let mut local = 0.0;
        for _ in 0..km {
            local += h(region_samplers[k](&mut rng));
        }
        acc += oracle.region_masses[k] * local / km as f64;
    }
    Ok(acc)
}

/// Within/between decomposition of the target variance:
/// `sigma^2 = sum a-bar_m sigma_m^2 + sum a-bar_m (I_m - I)^2`.
#[derive(Clone, Copy, Debug)]
pub struct VarianceSplit {
    pub within: f64,
    pub between: f64,
}

pub fn variance_decomposition(
    oracle: &StratifiedOracle,
    total_variance: f64,
) -> Result<VarianceSplit> {
    let i = oracle.overall_mean();
    let within: f64 = oracle
        .region_masses
        .iter()
        .zip(&oracle.region_variances)
        .map(|(a, v)| a * v)
        .sum();
    let between: f64 = oracle
        .region_masses
        .iter()
        .zip(&oracle.region_means)
        .map(|(a, m)| a * (m - i) * (m - i))
        .sum();
    if within < -1e-8 || between < -1e-8 {
        return Err(Error::IntegrationFailure(
            "negative variance component".into(),
        ));
    }
    let _ = total_variance;
    Ok(VarianceSplit { within, between })
}

//! Weighted-sample container and plain/importance-sampling estimators.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Absolute tolerance on the normalized-weight sum.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// `N` points in `R^d` with optional unnormalized weights and always-valid
/// normalized weights.
///
/// Samples from MCMC or direct Monte Carlo carry no unnormalized weights and
/// get uniform normalized weights `1/N`; importance-sampling output carries
/// both. Immutable after construction, so it can be shared freely across
/// threads.
#[derive(Clone, Debug)]
pub struct WeightedSampleSet {
    dim: usize,
    /// Row-major `n × dim`.
    points: Vec<f64>,
    unnorm_weights: Option<Vec<f64>>,
    norm_weights: Vec<f64>,
}

impl WeightedSampleSet {
    /// Unweighted samples from flat row-major storage.
    pub fn unweighted(dim: usize, points: Vec<f64>) -> Result<Self> {
        Self::build(dim, points, None)
    }

    /// Weighted samples from flat row-major storage. Weights are the
    /// unnormalized importance weights `w_n >= 0`.
    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::build(dim, points, Some(weights))
    }

    /// Convenience constructor from per-sample rows.
    pub fn from_rows(rows: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("sample set must hold at least one point"));
        }
        let dim = rows[0].len();
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Self::build(dim, flat, weights.map(|w| w.to_vec()))
    }

    /// One-dimensional unweighted samples.
    pub fn unweighted_1d(xs: &[f64]) -> Result<Self> {
        Self::build(1, xs.to_vec(), None)
    }

    /// One-dimensional weighted samples.
    pub fn weighted_1d(xs: &[f64], ws: &[f64]) -> Result<Self> {
        Self::build(1, xs.to_vec(), Some(ws.to_vec()))
    }

    fn build(dim: usize, points: Vec<f64>, unnorm: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "point storage of length {} is not a positive multiple of dim {}",
                points.len(),
                dim
            )));
        }
        let n = points.len() / dim;
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("points must be finite"));
        }
        let norm = match &unnorm {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: w.len(),
                    });
                }
                normalize_weights(w)?
            }
            None => vec![1.0 / n as f64; n],
        };
        Ok(Self {
            dim,
            points,
            unnorm_weights: unnorm,
            norm_weights: norm,
        })
    }

    pub fn len(&self) -> usize {
        self.norm_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 is enforced at construction
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn norm_weights(&self) -> &[f64] {
        &self.norm_weights
    }

    pub fn unnorm_weights(&self) -> Option<&[f64]> {
        self.unnorm_weights.as_deref()
    }

    pub fn is_weighted(&self) -> bool {
        self.unnorm_weights.is_some()
    }

    /// Iterator over `(point, normalized weight)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks_exact(self.dim)
            .zip(self.norm_weights.iter().copied())
    }

    /// Monte Carlo estimate of `E[h(X)]`: the weighted average
    /// `sum_i w̄_i h(x_i)`.
    pub fn mc_estimate(&self, h: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (x, w)) in self.iter().enumerate() {
            let v = h(x);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand(i));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Unbiased marginal-likelihood estimate `Ẑ = (1/N) sum_n w_n`.
    ///
    /// Only available when the unnormalized weights are known (importance
    /// sampling); MCMC/direct-MC sets carry no such information.
    pub fn marginal_likelihood(&self) -> Result<f64> {
        let w = self.unnorm_weights.as_ref().ok_or(Error::ZUnavailable)?;
        Ok(w.iter().sum::<f64>() / w.len() as f64)
    }

    /// Aggregated weight `W`: `sum_n w_n` for weighted sets, `N` otherwise.
    pub fn aggregated_weight(&self) -> f64 {
        match &self.unnorm_weights {
            Some(w) => w.iter().sum(),
            None => self.len() as f64,
        }
    }

    /// Per-dimension minima and maxima of the points.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.points.chunks_exact(self.dim) {
            for (i, &x) in p.iter().enumerate() {
                lo[i] = lo[i].min(x);
                hi[i] = hi[i].max(x);
            }
        }
        (lo, hi)
    }

    /// Writes one row per sample: columns `x_1..x_d` plus `w` when the set
    /// is weighted.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        if self.is_weighted() {
            header.push("w".into());
        }
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.point(i).iter().map(|v| v.to_string()).collect();
            if let Some(w) = &self.unnorm_weights {
                rec.push(w[i].to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`WeightedSampleSet::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let weighted = headers.iter().last() == Some("w");
        let dim = if weighted {
            headers.len() - 1
        } else {
            headers.len()
        };
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad float {field:?}: {e}")))?;
                if weighted && j == dim {
                    weights.push(v);
                } else {
                    points.push(v);
                }
            }
        }
        Self::build(dim, points, weighted.then_some(weights))
    }
}

/// Normalizes nonnegative weights to sum to one.
pub fn normalize_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::DegenerateWeights("empty weight vector".into()));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::DegenerateWeights(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateWeights("all weights are zero".into()));
    }
    Ok(w.iter().map(|x| x / sum).collect())
}

/// A family of `R` scalar moment functions `h_1..h_R` with positive loss
/// weights `ξ_r²`, used by the family loss `L_R`.
pub struct MomentFamily {
    functions: Vec<Box<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    loss_weights: Vec<f64>,
}

impl MomentFamily {
    pub fn new(
        functions: Vec<Box<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
        loss_weights: Vec<f64>,
    ) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::invalid("moment family needs at least one function"));
        }
        if loss_weights.len() != functions.len() {
            return Err(Error::DimensionMismatch {
                expected: functions.len(),
                got: loss_weights.len(),
            });
        }
        if loss_weights.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid("loss weights must be positive and finite"));
        }
        Ok(Self {
            functions,
            loss_weights,
        })
    }

    /// Family with unit loss weights.
    pub fn unit(functions: Vec<Box<dyn Fn(&[f64]) -> f64 + Send + Sync>>) -> Result<Self> {
        let n = functions.len();
        Self::new(functions, vec![1.0; n])
    }

    /// The first `r_max` one-dimensional power moments `h_r(x) = x^r` with
    /// unit weights; `L_5` over this family is the loss in the first five
    /// moments.
    pub fn powers_1d(r_max: usize) -> Result<Self> {
        let fns: Vec<Box<dyn Fn(&[f64]) -> f64 + Send + Sync>> = (1..=r_max)
            .map(|r| {
                Box::new(move |x: &[f64]| x[0].powi(r as i32))
                    as Box<dyn Fn(&[f64]) -> f64 + Send + Sync>
            })
            .collect();
        Self::unit(fns)
    }

    /// Replaces the loss weights by the relative-error convention
    /// `ξ_r² = 1 / Î(h_r)²` computed on `s`.
    ///
    /// Unstable when any estimate is near zero; estimates with
    /// `|Î(h_r)| <= floor` are rejected rather than silently amplified.
    pub fn with_relative_weights(mut self, s: &WeightedSampleSet, floor: f64) -> Result<Self> {
        let mut w = Vec::with_capacity(self.functions.len());
        for f in &self.functions {
            let est = s.mc_estimate(|x| f(x))?;
            if est.abs() <= floor {
                return Err(Error::numerical(format!(
                    "relative loss weight undefined: |estimate| = {} <= {floor}",
                    est.abs()
                )));
            }
            w.push(1.0 / (est * est));
        }
        self.loss_weights = w;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // R >= 1 enforced at construction
    }

    pub fn eval(&self, r: usize, x: &[f64]) -> f64 {
        (self.functions[r])(x)
    }

    pub fn function(&self, r: usize) -> &(dyn Fn(&[f64]) -> f64 + Send + Sync) {
        self.functions[r].as_ref()
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.loss_weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normalize_uniform() {
        let w = normalize_weights(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn normalize_proportional() {
        let w = normalize_weights(&[2.0, 6.0]).unwrap();
        assert_relative_eq!(w[0], 0.25);
        assert_relative_eq!(w[1], 0.75);
    }

    #[test]
    fn normalize_rejects_all_zero() {
        let err = normalize_weights(&[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("degenerate weights"));
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize_weights(&[1.0, f64::NAN]).is_err());
        assert!(normalize_weights(&[1.0, f64::INFINITY]).is_err());
        assert!(normalize_weights(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn mc_estimate_uniform_mean() {
        let s = WeightedSampleSet::unweighted_1d(&[1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(s.mc_estimate(|x| x[0]).unwrap(), 2.0);
    }

    #[test]
    fn mc_estimate_weighted_second_moment() {
        let s = WeightedSampleSet::weighted_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_relative_eq!(s.mc_estimate(|x| x[0] * x[0]).unwrap(), 3.0);
    }

    #[test]
    fn mc_estimate_standard_normal_second_moment() {
        // Oracle: E[X^2] = 1 for X ~ N(0,1).
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::root(42);
        let xs: Vec<f64> = (0..1000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let s = WeightedSampleSet::unweighted_1d(&xs).unwrap();
        let est = s.mc_estimate(|x| x[0] * x[0]).unwrap();
        assert!((est - 1.0).abs() < 0.15, "got {est}");
    }

    #[test]
    fn mc_estimate_rejects_non_finite_h() {
        let s = WeightedSampleSet::unweighted_1d(&[0.0, 1.0]).unwrap();
        let err = s.mc_estimate(|x| 1.0 / x[0]).unwrap_err();
        assert!(err.to_string().contains("non-finite integrand"));
    }

    #[test]
    fn marginal_likelihood_basics() {
        let s = WeightedSampleSet::weighted_1d(&[0.0, 1.0], &[2.0, 4.0]).unwrap();
        assert_relative_eq!(s.marginal_likelihood().unwrap(), 3.0);

        let c = WeightedSampleSet::weighted_1d(&[0.0, 1.0, 2.0], &[5.0, 5.0, 5.0]).unwrap();
        assert_relative_eq!(c.marginal_likelihood().unwrap(), 5.0);

        // Proposal equal to the target: all weights one, Z-hat exactly one.
        let z = WeightedSampleSet::weighted_1d(&[0.3, 0.7], &[1.0, 1.0]).unwrap();
        assert_relative_eq!(z.marginal_likelihood().unwrap(), 1.0);

        let u = WeightedSampleSet::unweighted_1d(&[0.0]).unwrap();
        assert!(matches!(
            u.marginal_likelihood().unwrap_err(),
            Error::ZUnavailable
        ));
    }

    #[test]
    fn marginal_likelihood_permutation_invariant() {
        let a = WeightedSampleSet::weighted_1d(&[1.0, 2.0, 3.0], &[0.5, 1.5, 3.0]).unwrap();
        let b = WeightedSampleSet::weighted_1d(&[3.0, 1.0, 2.0], &[3.0, 0.5, 1.5]).unwrap();
        assert_eq!(
            a.marginal_likelihood().unwrap(),
            b.marginal_likelihood().unwrap()
        );
    }

    #[test]
    fn unweighted_norm_weights_are_exactly_uniform() {
        let s = WeightedSampleSet::unweighted_1d(&[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert!(s.norm_weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn empty_set_rejected() {
        assert!(WeightedSampleSet::unweighted(1, vec![]).is_err());
    }

    #[test]
    fn csv_round_trip_weighted() {
        let s =
            WeightedSampleSet::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], Some(&[0.5, 1.5]))
                .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let r = WeightedSampleSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(r.dim(), 2);
        assert_eq!(r.point(1), &[3.0, 4.0]);
        assert_eq!(r.unnorm_weights().unwrap(), &[0.5, 1.5]);
    }

    #[test]
    fn csv_round_trip_unweighted() {
        let s = WeightedSampleSet::unweighted_1d(&[1.5, -2.5]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let r = WeightedSampleSet::read_csv(buf.as_slice()).unwrap();
        assert!(!r.is_weighted());
        assert_eq!(r.points_flat(), s.points_flat());
    }

    #[test]
    fn moment_family_validation() {
        assert!(MomentFamily::unit(vec![]).is_err());
        let f: Vec<Box<dyn Fn(&[f64]) -> f64 + Send + Sync>> = vec![Box::new(|x: &[f64]| x[0])];
        assert!(MomentFamily::new(f, vec![0.0]).is_err());
    }

    #[test]
    fn relative_weights_guard_near_zero() {
        let s = WeightedSampleSet::unweighted_1d(&[-1.0, 1.0]).unwrap();
        let fam = MomentFamily::powers_1d(1).unwrap();
        // Mean is exactly zero: the relative convention must refuse.
        assert!(fam.with_relative_weights(&s, 1e-9).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_h_one(xs in proptest::collection::vec(-100.0f64..100.0, 1..50),
                                   ws in proptest::collection::vec(0.01f64..10.0, 1..50)) {
                let n = xs.len().min(ws.len());
                let s = WeightedSampleSet::weighted_1d(&xs[..n], &ws[..n]).unwrap();
                let est = s.mc_estimate(|_| 1.0).unwrap();
                prop_assert!((est - 1.0).abs() < 1e-12);
            }

            #[test]
            fn estimator_linear_in_h(xs in proptest::collection::vec(-10.0f64..10.0, 2..40),
                                     a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let s = WeightedSampleSet::unweighted_1d(&xs).unwrap();
                let h1 = |x: &[f64]| x[0];
                let h2 = |x: &[f64]| x[0] * x[0];
                let lhs = s.mc_estimate(|x| a * h1(x) + b * h2(x)).unwrap();
                let rhs = a * s.mc_estimate(h1).unwrap() + b * s.mc_estimate(h2).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
            }
        }
    }
}

//! Disjoint exhaustive partitions of the state space and sample-to-region
//! assignment.
//!
//! Two geometries are supported: axis-aligned grids (uniform, random, or
//! quantile-based breakpoints; the two extreme cells per dimension extend to
//! infinity so the partition covers all of `R^d`) and Voronoi regions around
//! k-means centroids. Grid cells are half-open `[lo, hi)`, so a point lying
//! exactly on a breakpoint belongs to the upper cell; together with the
//! unbounded extremes this makes region lookup total and deterministic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, CostMode};
use crate::rng;
use crate::sample::WeightedSampleSet;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionGeometry {
    /// Tensor grid given by sorted interior breakpoints per dimension.
    /// `breakpoints[i].len() + 1` cells along dimension `i`.
    Grid { breakpoints: Vec<Vec<f64>> },
    /// Voronoi regions of pairwise-distinct centroids; ties resolve to the
    /// lowest region index.
    Voronoi { centroids: Vec<Vec<f64>> },
}

/// A partition of `R^d` into `M` disjoint regions indexed `0..M`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Partition {
    pub dim: usize,
    #[serde(flatten)]
    pub geometry: PartitionGeometry,
    /// Dimensions collapsed to a single cell because all samples shared one
    /// coordinate value there (degenerate range warning).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_dims: Vec<usize>,
}

impl Partition {
    pub fn region_count(&self) -> usize {
        match &self.geometry {
            PartitionGeometry::Grid { breakpoints } => {
                breakpoints.iter().map(|b| b.len() + 1).product()
            }
            PartitionGeometry::Voronoi { centroids } => centroids.len(),
        }
    }

    /// Region index of an arbitrary point (total: every point of `R^d` maps
    /// to exactly one region).
    pub fn region_of(&self, x: &[f64]) -> usize {
        debug_assert_eq!(x.len(), self.dim);
        match &self.geometry {
            PartitionGeometry::Grid { breakpoints } => {
                let mut idx = 0usize;
                for (i, bks) in breakpoints.iter().enumerate() {
                    // Half-open cells: a point on a breakpoint goes up.
                    let k = bks.partition_point(|&b| b <= x[i]);
                    idx = idx * (bks.len() + 1) + k;
                }
                idx
            }
            PartitionGeometry::Voronoi { centroids } => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (m, c) in centroids.iter().enumerate() {
                    let d: f64 = c
                        .iter()
                        .zip(x)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = m;
                    }
                }
                best
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// The index sets `J_m`: which samples fall in which region. Empty regions
/// are retained with an empty index set; compression drops them later.
#[derive(Clone, Debug)]
pub struct Assignment {
    index_sets: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn region_count(&self) -> usize {
        self.index_sets.len()
    }

    /// Sample indices in region `m`, in ascending order.
    pub fn indices(&self, m: usize) -> &[usize] {
        &self.index_sets[m]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.index_sets.iter().map(|j| j.len()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.index_sets.iter()
    }
}

/// Assigns every sample to exactly one region.
pub fn assign(p: &Partition, s: &WeightedSampleSet) -> Result<Assignment> {
    if p.dim != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim,
            got: s.dim(),
        });
    }
    let mut index_sets = vec![Vec::new(); p.region_count()];
    for i in 0..s.len() {
        index_sets[p.region_of(s.point(i))].push(i);
    }
    Ok(Assignment { index_sets })
}

fn grid_from_breakpoints(
    dim: usize,
    breakpoints: Vec<Vec<f64>>,
    degenerate: Vec<usize>,
) -> Partition {
    Partition {
        dim,
        geometry: PartitionGeometry::Grid { breakpoints },
        degenerate_dims: degenerate,
    }
}

/// Uniform deterministic grid: interior breakpoints equally spaced between
/// the per-dimension sample minimum and maximum.
///
/// A dimension whose samples share a single value cannot be subdivided; it
/// collapses to one cell and is reported in `degenerate_dims`.
pub fn build_uniform_grid(s: &WeightedSampleSet, cells_per_dim: &[usize]) -> Result<Partition> {
    check_cells(s, cells_per_dim)?;
    let (lo, hi) = s.bounding_box();
    let mut breakpoints = Vec::with_capacity(s.dim());
    let mut degenerate = Vec::new();
    for i in 0..s.dim() {
        let c = cells_per_dim[i];
        if hi[i] <= lo[i] {
            if c > 1 {
                degenerate.push(i);
            }
            breakpoints.push(Vec::new());
            continue;
        }
        let step = (hi[i] - lo[i]) / c as f64;
        breakpoints.push((1..c).map(|k| lo[i] + step * k as f64).collect());
    }
    Ok(grid_from_breakpoints(s.dim(), breakpoints, degenerate))
}

/// Random grid: interior breakpoints drawn uniformly inside the sample range
/// of each dimension, then sorted. Deterministic given the seed.
pub fn build_random_grid(
    s: &WeightedSampleSet,
    cells_per_dim: &[usize],
    seed: u64,
) -> Result<Partition> {
    check_cells(s, cells_per_dim)?;
    let (lo, hi) = s.bounding_box();
    let mut rng = rng::root(seed);
    let mut breakpoints = Vec::with_capacity(s.dim());
    let mut degenerate = Vec::new();
    for i in 0..s.dim() {
        let c = cells_per_dim[i];
        if hi[i] <= lo[i] {
            if c > 1 {
                degenerate.push(i);
            }
            breakpoints.push(Vec::new());
            continue;
        }
        let mut b: Vec<f64> = (1..c)
            .map(|_| rng.random_range(lo[i]..hi[i]))
            .collect();
        b.sort_by(|a, b| a.partial_cmp(b).unwrap());
        b.dedup();
        breakpoints.push(b);
    }
    Ok(grid_from_breakpoints(s.dim(), breakpoints, degenerate))
}

fn check_cells(s: &WeightedSampleSet, cells_per_dim: &[usize]) -> Result<()> {
    if cells_per_dim.len() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            got: cells_per_dim.len(),
        });
    }
    if cells_per_dim.iter().any(|&c| c == 0) {
        return Err(Error::invalid("cells_per_dim entries must be positive"));
    }
    Ok(())
}

/// Voronoi partition from Lloyd's k-means.
///
/// Weighted inputs are first resampled into an unweighted cloud before
/// clustering; the caller recomputes weighted statistics on the original set
/// through [`assign`]. An emptied cluster is reseeded at the point farthest
/// from its nearest centroid.
pub fn build_voronoi_kmeans(
    s: &WeightedSampleSet,
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Partition> {
    if m == 0 {
        return Err(Error::invalid("M must be positive"));
    }
    let d = s.dim();
    // Cluster on an unweighted view of the target measure.
    let cloud: Vec<Vec<f64>> = if s.is_weighted() {
        let mut rng = rng::substream(seed, 0xB00);
        let cum = cumulative(s.norm_weights());
        (0..s.len())
            .map(|_| s.point(pick(&cum, rng.random())).to_vec())
            .collect()
    } else {
        (0..s.len()).map(|i| s.point(i).to_vec()).collect()
    };

    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for p in &cloud {
        if !distinct.contains(p) {
            distinct.push(p.clone());
        }
    }
    if distinct.len() < m {
        return Err(Error::invalid(format!(
            "k-means needs M <= distinct points ({} < {m})",
            distinct.len()
        )));
    }

    // Seed centroids with M distinct points chosen without replacement.
    let mut rng = rng::substream(seed, 0xC01);
    let mut pool: Vec<usize> = (0..distinct.len()).collect();
    let mut centroids: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let j = rng.random_range(0..pool.len());
            distinct[pool.swap_remove(j)].clone()
        })
        .collect();

    let mut labels = vec![0usize; cloud.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in cloud.iter().enumerate() {
            let l = nearest(&centroids, p);
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; m];
        let mut counts = vec![0usize; m];
        for (i, p) in cloud.iter().enumerate() {
            counts[labels[i]] += 1;
            for (a, b) in sums[labels[i]].iter_mut().zip(p) {
                *a += b;
            }
        }
        for k in 0..m {
            if counts[k] == 0 {
                // Reseed at the point farthest from its nearest centroid.
                let far = cloud
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        dist2(&centroids[nearest(&centroids, a)], a)
                            .partial_cmp(&dist2(&centroids[nearest(&centroids, b)], b))
                            .unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[k] = cloud[far].clone();
                changed = true;
            } else {
                for (j, v) in sums[k].iter().enumerate() {
                    centroids[k][j] = v / counts[k] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    Ok(Partition {
        dim: d,
        geometry: PartitionGeometry::Voronoi { centroids },
        degenerate_dims: Vec::new(),
    })
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (m, c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn cumulative(w: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for &x in w {
        acc += x;
        cum.push(acc);
    }
    cum
}

/// Inverse-CDF lookup on cumulative weights: smallest index whose cumulative
/// weight strictly exceeds `u * total`, so zero-weight entries are never
/// selected for `u` in `[0, 1)`.
pub(crate) fn pick(cum: &[f64], u: f64) -> usize {
    let target = u * cum.last().copied().unwrap_or(1.0);
    let i = cum.partition_point(|&c| c <= target);
    i.min(cum.len() - 1)
}

/// Quantile grid for unweighted one-dimensional samples: each cell holds
/// `floor(N/M)` or `ceil(N/M)` samples (earlier cells take the remainder),
/// so the summary weights come out equal up to the remainder.
pub fn build_equal_count_partition(s: &WeightedSampleSet, m: usize) -> Result<Partition> {
    if s.is_weighted() {
        return Err(Error::invalid(
            "equal-count partition requires unweighted samples",
        ));
    }
    if s.dim() != 1 {
        return Err(Error::EqualCountDimension);
    }
    let n = s.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("need 1 <= M <= N, got M={m}, N={n}")));
    }
    let mut xs: Vec<f64> = s.points_flat().to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let base = n / m;
    let extra = n % m;
    let mut breakpoints = Vec::with_capacity(m - 1);
    let mut offset = 0usize;
    for k in 0..m - 1 {
        offset += if k < extra { base + 1 } else { base };
        breakpoints.push(0.5 * (xs[offset - 1] + xs[offset]));
    }
    Ok(grid_from_breakpoints(1, vec![breakpoints], Vec::new()))
}

/// Stopping rule for [`adaptive_refine`].
#[derive(Clone, Copy, Debug)]
pub enum RefineStop {
    /// Split while the region count stays at or below this bound.
    MaxRegions(usize),
    /// Split while the current loss `l(h)` stays at or above this threshold.
    LossAbove(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineOutcome {
    StopConditionMet,
    /// No region with at least two distinct samples remained.
    NoSplittableRegion,
}

#[derive(Clone, Debug)]
pub struct RefinedPartition {
    pub partition: Partition,
    pub outcome: RefineOutcome,
    pub final_loss: f64,
    pub splits: usize,
}

/// Greedy grid refinement: repeatedly splits the region with the largest
/// per-region cost `c_m(h)` at the weighted median of its samples along its
/// axis of largest sample spread.
///
/// The split breakpoint is inserted into the grid axis, so the result stays
/// a valid tensor grid (in more than one dimension a split may subdivide
/// other regions crossed by the same hyperplane, which can only lower the
/// stochastic-mode total cost further).
pub fn adaptive_refine(
    s: &WeightedSampleSet,
    h: impl Fn(&[f64]) -> f64,
    initial: &Partition,
    stop: RefineStop,
    mode: CostMode,
) -> Result<RefinedPartition> {
    let mut breakpoints = match &initial.geometry {
        PartitionGeometry::Grid { breakpoints } => breakpoints.clone(),
        PartitionGeometry::Voronoi { .. } => {
            return Err(Error::invalid(
                "adaptive refinement is defined on grid partitions",
            ))
        }
    };
    if initial.dim != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: initial.dim,
            got: s.dim(),
        });
    }

    let mut splits = 0usize;
    loop {
        let part = grid_from_breakpoints(s.dim(), breakpoints.clone(), Vec::new());
        let a = assign(&part, s)?;
        let costs = match mode {
            CostMode::Deterministic => loss::region_costs_deterministic(s, &a, &h)?,
            CostMode::Stochastic => loss::region_costs_stochastic(s, &a, &h)?,
        };
        let m_t = part.region_count();
        let stop_now = match stop {
            RefineStop::MaxRegions(m_max) => m_t > m_max,
            RefineStop::LossAbove(l) => costs.total < l,
        };
        if stop_now {
            return Ok(RefinedPartition {
                partition: part,
                outcome: RefineOutcome::StopConditionMet,
                final_loss: costs.total,
                splits,
            });
        }

        // Candidate regions by descending cost; skip unsplittable ones.
        let mut order: Vec<usize> = (0..m_t).collect();
        order.sort_by(|&i, &j| costs.costs[j].partial_cmp(&costs.costs[i]).unwrap());
        let mut split_done = false;
        for &m in &order {
            if let Some((axis, bp)) = split_candidate(s, a.indices(m)) {
                breakpoints[axis].push(bp);
                breakpoints[axis].sort_by(|a, b| a.partial_cmp(b).unwrap());
                splits += 1;
                split_done = true;
                break;
            }
        }
        if !split_done {
            return Ok(RefinedPartition {
                partition: part,
                outcome: RefineOutcome::NoSplittableRegion,
                final_loss: costs.total,
                splits,
            });
        }

        if cfg!(debug_assertions) && matches!(mode, CostMode::Stochastic) {
            // Splitting never increases the stochastic total (law of total
            // variance).
            let part2 = grid_from_breakpoints(s.dim(), breakpoints.clone(), Vec::new());
            let a2 = assign(&part2, s)?;
            let after = loss::region_costs_stochastic(s, &a2, &h)?;
            debug_assert!(
                after.total <= costs.total + 1e-12 * (1.0 + costs.total.abs()),
                "stochastic cost increased: {} -> {}",
                costs.total,
                after.total
            );
        }
    }
}

/// Split axis and breakpoint for one region: the axis with the largest
/// sample spread, cut at the weighted median so that both children hold at
/// least one sample. `None` when the region has fewer than two distinct
/// points.
fn split_candidate(s: &WeightedSampleSet, idx: &[usize]) -> Option<(usize, f64)> {
    if idx.len() < 2 {
        return None;
    }
    let d = s.dim();
    let mut best_axis = None;
    let mut best_spread = 0.0;
    for axis in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in idx {
            let v = s.point(i)[axis];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let spread = hi - lo;
        if spread > best_spread {
            best_spread = spread;
            best_axis = Some(axis);
        }
    }
    let axis = best_axis?; // all-identical points have zero spread everywhere

    // Weighted median along the chosen axis over distinct values.
    let mut vw: Vec<(f64, f64)> = idx
        .iter()
        .map(|&i| (s.point(i)[axis], s.norm_weights()[i]))
        .collect();
    vw.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = vw.iter().map(|(_, w)| w).sum();
    let mut acc = 0.0;
    let mut median = vw[0].0;
    for &(v, w) in &vw {
        acc += w;
        if acc >= 0.5 * total {
            median = v;
            break;
        }
    }
    // Place the breakpoint between distinct neighbors of the median so both
    // children are nonempty under the half-open rule.
    let lower = vw.iter().map(|&(v, _)| v).filter(|&v| v < median).fold(
        f64::NEG_INFINITY,
        f64::max,
    );
    let upper = vw
        .iter()
        .map(|&(v, _)| v)
        .filter(|&v| v > median)
        .fold(f64::INFINITY, f64::min);
    if lower.is_finite() {
        Some((axis, 0.5 * (lower + median)))
    } else if upper.is_finite() {
        Some((axis, 0.5 * (median + upper)))
    } else {
        None
    }
}

/// Factors a total region count into per-dimension cell counts for grid
/// strategies in more than one dimension: prime factors are assigned
/// greedily to the dimension with the largest remaining spread per cell.
pub fn grid_dims_for(m: usize, spreads: &[f64]) -> Vec<usize> {
    let d = spreads.len();
    let mut cells = vec![1usize; d];
    if d == 1 {
        cells[0] = m.max(1);
        return cells;
    }
    let mut factors = prime_factors(m.max(1));
    factors.sort_unstable_by(|a, b| b.cmp(a));
    for f in factors {
        let mut best = 0usize;
        let mut best_ratio = f64::NEG_INFINITY;
        for i in 0..d {
            let ratio = spreads[i] / cells[i] as f64;
            if ratio > best_ratio {
                best_ratio = ratio;
                best = i;
            }
        }
        cells[best] *= f;
    }
    cells
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// How filters and samplers build their per-call partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    /// P2: uniform deterministic grid.
    UniformGrid,
    /// P1: random grid.
    RandomGrid,
    /// P3: Voronoi regions from k-means.
    KMeans,
}

impl PartitionStrategy {
    /// Builds a partition with (about) `m` regions over the given samples.
    pub fn build(&self, s: &WeightedSampleSet, m: usize, seed: u64) -> Result<Partition> {
        match self {
            PartitionStrategy::UniformGrid | PartitionStrategy::RandomGrid => {
                let (lo, hi) = s.bounding_box();
                let spreads: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
                let cells = grid_dims_for(m, &spreads);
                match self {
                    PartitionStrategy::UniformGrid => build_uniform_grid(s, &cells),
                    _ => build_random_grid(s, &cells, seed),
                }
            }
            PartitionStrategy::KMeans => build_voronoi_kmeans(s, m, seed, 100),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uniform_1d(xs: &[f64]) -> WeightedSampleSet {
        WeightedSampleSet::unweighted_1d(xs).unwrap()
    }

    #[test]
    fn uniform_grid_1d_breakpoint_and_assignment() {
        let s = uniform_1d(&[0.0, 1.0, 2.0, 3.0]);
        let p = build_uniform_grid(&s, &[2]).unwrap();
        match &p.geometry {
            PartitionGeometry::Grid { breakpoints } => {
                assert_eq!(breakpoints[0], vec![1.5]);
            }
            _ => panic!("expected grid"),
        }
        let a = assign(&p, &s).unwrap();
        assert_eq!(a.indices(0), &[0, 1]);
        assert_eq!(a.indices(1), &[2, 3]);
    }

    #[test]
    fn uniform_grid_2d_covers_bounding_rectangle() {
        let s = WeightedSampleSet::from_rows(
            &[
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
            None,
        )
        .unwrap();
        let p = build_uniform_grid(&s, &[2, 2]).unwrap();
        assert_eq!(p.region_count(), 4);
        let a = assign(&p, &s).unwrap();
        // One corner point per box.
        assert!(a.counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn degenerate_dimension_collapses_with_warning() {
        let s = uniform_1d(&[5.0]);
        let p = build_uniform_grid(&s, &[3]).unwrap();
        assert_eq!(p.region_count(), 1);
        assert_eq!(p.degenerate_dims, vec![0]);
    }

    #[test]
    fn random_grid_breakpoint_inside_range_and_deterministic() {
        let s = uniform_1d(&[0.0, 1.0, 2.0, 3.0]);
        let p1 = build_random_grid(&s, &[2], 9).unwrap();
        let p2 = build_random_grid(&s, &[2], 9).unwrap();
        let b = match &p1.geometry {
            PartitionGeometry::Grid { breakpoints } => breakpoints[0][0],
            _ => panic!(),
        };
        assert!(b > 0.0 && b < 3.0);
        assert_eq!(p1.to_json().unwrap(), p2.to_json().unwrap());
    }

    #[test]
    fn boundary_point_goes_to_upper_cell() {
        let p = grid_from_breakpoints(1, vec![vec![1.5]], Vec::new());
        assert_eq!(p.region_of(&[1.5]), 1);
        assert_eq!(p.region_of(&[1.4999]), 0);
    }

    #[test]
    fn out_of_range_points_still_map_to_a_region() {
        let p = grid_from_breakpoints(1, vec![vec![0.0, 1.0]], Vec::new());
        assert_eq!(p.region_of(&[-1e9]), 0);
        assert_eq!(p.region_of(&[1e9]), 2);
    }

    #[test]
    fn all_samples_in_one_cell() {
        let s = uniform_1d(&[10.0, 10.1, 10.2]);
        let p = grid_from_breakpoints(1, vec![vec![0.0, 100.0]], Vec::new());
        let a = assign(&p, &s).unwrap();
        assert_eq!(a.counts(), vec![0, 3, 0]);
    }

    #[test]
    fn assignment_matches_brute_force_point_in_box() {
        // Oracle: O(N*M) direct point-in-box containment on a 2-D grid.
        use rand::Rng;
        let mut rng = crate::rng::root(17);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let s = WeightedSampleSet::from_rows(&rows, None).unwrap();
        let p = build_uniform_grid(&s, &[3, 4]).unwrap();
        let a = assign(&p, &s).unwrap();

        let bks = match &p.geometry {
            PartitionGeometry::Grid { breakpoints } => breakpoints.clone(),
            _ => panic!(),
        };
        let edges = |b: &Vec<f64>| {
            let mut e = vec![f64::NEG_INFINITY];
            e.extend(b.iter().copied());
            e.push(f64::INFINITY);
            e
        };
        let e0 = edges(&bks[0]);
        let e1 = edges(&bks[1]);
        let mut oracle = vec![Vec::new(); p.region_count()];
        for (i, row) in rows.iter().enumerate() {
            for c0 in 0..e0.len() - 1 {
                for c1 in 0..e1.len() - 1 {
                    if row[0] >= e0[c0]
                        && row[0] < e0[c0 + 1]
                        && row[1] >= e1[c1]
                        && row[1] < e1[c1 + 1]
                    {
                        oracle[c0 * (e1.len() - 1) + c1].push(i);
                    }
                }
            }
        }
        for m in 0..p.region_count() {
            assert_eq!(a.indices(m), oracle[m].as_slice(), "region {m}");
        }
    }

    #[test]
    fn kmeans_separated_clusters() {
        let s = uniform_1d(&[0.0, 0.1, 10.0, 10.1]);
        let p = build_voronoi_kmeans(&s, 2, 3, 50).unwrap();
        let mut cs = match &p.geometry {
            PartitionGeometry::Voronoi { centroids } => {
                centroids.iter().map(|c| c[0]).collect::<Vec<_>>()
            }
            _ => panic!(),
        };
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(cs[0], 0.05, epsilon = 1e-9);
        assert_relative_eq!(cs[1], 10.05, epsilon = 1e-9);
    }

    #[test]
    fn kmeans_m_equals_n_distinct_points() {
        let s = uniform_1d(&[1.0, 2.0, 5.0]);
        let p = build_voronoi_kmeans(&s, 3, 11, 50).unwrap();
        let a = assign(&p, &s).unwrap();
        assert_eq!(a.counts(), vec![1, 1, 1]);
    }

    #[test]
    fn kmeans_reduces_within_cluster_sse() {
        use rand::Rng;
        let mut rng = crate::rng::root(5);
        let mut rows = Vec::new();
        for c in [-5.0, 0.0, 5.0] {
            for _ in 0..30 {
                rows.push(vec![c + rng.random_range(-0.5..0.5)]);
            }
        }
        let s = WeightedSampleSet::from_rows(&rows, None).unwrap();
        let sse = |p: &Partition| -> f64 {
            let cs = match &p.geometry {
                PartitionGeometry::Voronoi { centroids } => centroids,
                _ => panic!(),
            };
            rows.iter()
                .map(|r| {
                    cs.iter()
                        .map(|c| dist2(c, r))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum()
        };
        let converged = build_voronoi_kmeans(&s, 3, 7, 100).unwrap();
        let initial = build_voronoi_kmeans(&s, 3, 7, 0).unwrap(); // zero iterations
        assert!(sse(&converged) <= sse(&initial) + 1e-12);
    }

    #[test]
    fn equal_count_partition_counts_and_weights() {
        let s = uniform_1d(&[1.0, 2.0, 3.0, 4.0]);
        let p = build_equal_count_partition(&s, 2).unwrap();
        let a = assign(&p, &s).unwrap();
        assert_eq!(a.counts(), vec![2, 2]);
        let w = crate::compress::cmc_weights(&s, &a);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn equal_count_remainder_goes_to_earlier_cells() {
        let s = uniform_1d(&[1.0, 2.0, 3.0]);
        let p = build_equal_count_partition(&s, 2).unwrap();
        let a = assign(&p, &s).unwrap();
        assert_eq!(a.counts(), vec![2, 1]);
    }

    #[test]
    fn equal_count_normal_draws_exactly_uniform_summary_weights() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::root(23);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let s = uniform_1d(&xs);
        let p = build_equal_count_partition(&s, 10).unwrap();
        let a = assign(&p, &s).unwrap();
        let w = crate::compress::cmc_weights(&s, &a);
        for &wm in &w {
            assert_relative_eq!(wm, 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_count_rejects_weighted_and_multidim() {
        let w = WeightedSampleSet::weighted_1d(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(build_equal_count_partition(&w, 2).is_err());
        let s2 = WeightedSampleSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]], None).unwrap();
        assert!(matches!(
            build_equal_count_partition(&s2, 2).unwrap_err(),
            Error::EqualCountDimension
        ));
    }

    #[test]
    fn proper_partition_limit_one_sample_per_region() {
        // Grid through distinct 1-D points with M = N.
        let s = uniform_1d(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = build_equal_count_partition(&s, 5).unwrap();
        let a = assign(&p, &s).unwrap();
        assert!(a.counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn adaptive_refine_linear_h_no_splits() {
        let s = uniform_1d(&[0.0, 1.0, 2.0, 5.0, 9.0]);
        let init = build_uniform_grid(&s, &[1]).unwrap();
        let r = adaptive_refine(
            &s,
            |x| 3.0 * x[0] + 1.0,
            &init,
            RefineStop::LossAbove(1e-14),
            CostMode::Deterministic,
        )
        .unwrap();
        assert_eq!(r.splits, 0);
        assert!(r.final_loss < 1e-14);
    }

    #[test]
    fn adaptive_refine_splits_largest_cost_first() {
        // Two well-separated lumps; h = x^2 makes the wide lump costly.
        let s = uniform_1d(&[0.0, 0.1, 0.2, 10.0, 20.0, 30.0]);
        let init = build_uniform_grid(&s, &[2]).unwrap();
        let r = adaptive_refine(
            &s,
            |x| x[0] * x[0],
            &init,
            RefineStop::MaxRegions(2),
            CostMode::Stochastic,
        )
        .unwrap();
        // One split performed (2 -> 3 regions, exceeding M_max = 2), and it
        // must land inside the costly upper lump.
        assert_eq!(r.splits, 1);
        assert_eq!(r.partition.region_count(), 3);
        match &r.partition.geometry {
            PartitionGeometry::Grid { breakpoints } => {
                assert!(breakpoints[0].iter().any(|&b| b > 10.0));
            }
            _ => panic!(),
        }
    }

    #[test]
    fn adaptive_refine_never_increases_stochastic_loss() {
        use rand::Rng;
        let mut rng = crate::rng::root(31);
        let xs: Vec<f64> = (0..400)
            .map(|_| {
                if rng.random::<f64>() < 0.5 {
                    rng.random_range(-3.0..-1.0)
                } else {
                    rng.random_range(1.0..4.0)
                }
            })
            .collect();
        let s = uniform_1d(&xs);
        let init = build_uniform_grid(&s, &[2]).unwrap();
        let h = |x: &[f64]| x[0] * x[0];

        let a0 = assign(&init, &s).unwrap();
        let before = loss::region_costs_stochastic(&s, &a0, h).unwrap().total;
        let r = adaptive_refine(&s, h, &init, RefineStop::MaxRegions(8), CostMode::Stochastic)
            .unwrap();
        assert!(r.final_loss <= before + 1e-12);
        assert!(r.partition.region_count() > 8);
    }

    #[test]
    fn adaptive_refine_stops_when_nothing_splittable() {
        let s = uniform_1d(&[1.0, 1.0, 1.0]);
        let init = build_uniform_grid(&s, &[1]).unwrap();
        let r = adaptive_refine(
            &s,
            |x| x[0] * x[0],
            &init,
            RefineStop::MaxRegions(5),
            CostMode::Stochastic,
        )
        .unwrap();
        assert_eq!(r.outcome, RefineOutcome::NoSplittableRegion);
    }

    #[test]
    fn partition_json_round_trip() {
        let p = grid_from_breakpoints(2, vec![vec![0.5], vec![]], Vec::new());
        let j = p.to_json().unwrap();
        assert!(j.contains("\"kind\":\"grid\""));
        let q = Partition::from_json(&j).unwrap();
        assert_eq!(q.region_count(), 2);
    }

    #[test]
    fn grid_dims_factorization() {
        assert_eq!(grid_dims_for(10, &[1.0]), vec![10]);
        let dims = grid_dims_for(6, &[10.0, 1.0]);
        assert_eq!(dims.iter().product::<usize>(), 6);
        assert!(dims[0] >= dims[1]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn assignment_is_disjoint_and_exhaustive(
                xs in proptest::collection::vec(-50.0f64..50.0, 2..80),
                cells in 1usize..6,
                seed in 0u64..50,
            ) {
                let s = WeightedSampleSet::unweighted_1d(&xs).unwrap();
                for p in [
                    build_uniform_grid(&s, &[cells]).unwrap(),
                    build_random_grid(&s, &[cells], seed).unwrap(),
                ] {
                    let a = assign(&p, &s).unwrap();
                    let mut seen = vec![false; xs.len()];
                    for m in 0..a.region_count() {
                        for &i in a.indices(m) {
                            prop_assert!(!seen[i], "duplicate sample index");
                            seen[i] = true;
                        }
                    }
                    prop_assert!(seen.iter().all(|&b| b));
                }
            }

            #[test]
            fn voronoi_assignment_exhaustive(
                seed in 0u64..30,
                m in 1usize..5,
            ) {
                use rand::Rng;
                let mut rng = crate::rng::root(seed);
                let rows: Vec<Vec<f64>> = (0..40)
                    .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect();
                let s = WeightedSampleSet::from_rows(&rows, None).unwrap();
                let p = build_voronoi_kmeans(&s, m, seed, 30).unwrap();
                let a = assign(&p, &s).unwrap();
                prop_assert_eq!(a.counts().iter().sum::<usize>(), 40);
            }
        }
    }
}

//! Band-limited weight rescale search.
//!
//! RoPE pair dimensions are grouped into log-spaced frequency bands; each
//! band gets one multiplicative scale applied to the query/key projection
//! rows feeding it (symmetric mode inverts the key-side scale so
//! full-precision logits are unchanged). Per-band safe bounds come from a
//! frequency prior that tightens the window for higher-frequency bands and
//! an overshoot cap tied to the band's measured tail inflation. Scales are
//! chosen by coordinate descent over a small log-spaced grid per band,
//! minimizing the weighted dev-set objective, with an optional reverse
//! refinement pass. The committed objective sequence never increases and
//! the candidate budget is exactly `passes * bands * grid_points`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::{score, AttentionWeights, DevSet, Objective};
use crate::diagnostics::{median_nearest_rank, tail_inflation_weight};
use crate::error::{Error, Result};
use crate::interp::PiScheme;
use crate::mat::Matrix;
use crate::num::{real, Real};
use crate::quant::QuantSpec;
use crate::rope::FrequencySchedule;

/// Scales never shrink below this floor, even when a band's interval
/// degenerates; it keeps quantization steps away from underflow.
pub const SCALE_FLOOR: f64 = 0.5;

/// A partition of the pair dimensions into frequency bands.
///
/// Bands are ordered by decreasing frequency, are disjoint, and jointly cover
/// every pair index. Each band carries the nearest-rank median of its
/// frequencies; the schedule's minimum frequency is kept for the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPartition<T> {
    bands: Vec<Vec<usize>>,
    omega_med: Vec<T>,
    omega_min: T,
}

impl<T: Real> BandPartition<T> {
    /// Rebuild a partition from explicit band index sets (for example the
    /// ones stored in a search result), recomputing the per-band medians
    /// from the schedule. The sets must exactly cover the schedule's pairs.
    pub fn from_bands(bands: Vec<Vec<usize>>, sched: &FrequencySchedule<T>) -> Result<Self> {
        let half = sched.half_dim();
        let probe = Self {
            bands,
            omega_med: Vec::new(),
            omega_min: sched.freqs()[half - 1],
        };
        probe.pair_to_band(half)?;
        let omega_med = probe
            .bands
            .iter()
            .map(|band| {
                let vals: Vec<T> = band.iter().map(|&i| sched.freqs()[i]).collect();
                median_nearest_rank(&vals)
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(Self { omega_med, ..probe })
    }

    pub fn bands(&self) -> &[Vec<usize>] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn omega_med(&self) -> &[T] {
        &self.omega_med
    }

    pub fn omega_min(&self) -> T {
        self.omega_min
    }

    /// Map from pair index to band index; errors if the partition does not
    /// exactly cover `0..half_dim`.
    pub fn pair_to_band(&self, half_dim: usize) -> Result<Vec<usize>> {
        let mut map = vec![usize::MAX; half_dim];
        for (b, band) in self.bands.iter().enumerate() {
            for &i in band {
                if i >= half_dim {
                    return Err(Error::Shape(format!(
                        "partition pair index {i} out of range {half_dim}"
                    )));
                }
                if map[i] != usize::MAX {
                    return Err(Error::Shape(format!("pair {i} assigned to two bands")));
                }
                map[i] = b;
            }
        }
        if let Some(i) = map.iter().position(|b| *b == usize::MAX) {
            return Err(Error::Shape(format!("pair {i} not covered by the partition")));
        }
        Ok(map)
    }
}

/// Split a schedule into `b` log-spaced frequency bands.
///
/// Cut points are log-equispaced between the largest and smallest frequency;
/// a geometric schedule therefore splits uniformly in index. Empty bands are
/// merged into their lower-frequency neighbour (dropped from the list).
pub fn partition_bands<T: Real>(
    sched: &FrequencySchedule<T>,
    b: usize,
) -> Result<BandPartition<T>> {
    let half = sched.half_dim();
    if b < 1 || b > half {
        return Err(Error::Config(format!(
            "band count must be in 1..={half}, got {b}"
        )));
    }
    let freqs = sched.freqs();
    let ln_max = freqs[0].ln();
    let ln_min = freqs[half - 1].ln();
    let span = ln_max - ln_min;

    let mut bands: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (i, &f) in freqs.iter().enumerate() {
        let idx = if span <= T::zero() {
            0
        } else {
            let t = (ln_max - f.ln()) / span;
            (t * real::<T>(b as f64))
                .floor()
                .to_usize()
                .unwrap_or(0)
                .min(b - 1)
        };
        bands[idx].push(i);
    }
    bands.retain(|band| !band.is_empty());

    let omega_med = bands
        .iter()
        .map(|band| {
            let vals: Vec<T> = band.iter().map(|&i| freqs[i]).collect();
            median_nearest_rank(&vals)
        })
        .collect::<Result<Vec<T>>>()?;
    let omega_min = freqs[half - 1];
    Ok(BandPartition { bands, omega_med, omega_min })
}

/// Frequency prior: `1 + tau / (1 + ln(omega_med / omega_min))`.
///
/// Higher-frequency bands get a tighter window around 1.
pub fn gamma_bound<T: Real>(omega_med: T, omega_min: T, tau: T) -> Result<T> {
    if !(omega_min > T::zero()) || omega_med < omega_min {
        return Err(Error::Config(format!(
            "need omega_med >= omega_min > 0, got {omega_med} and {omega_min}"
        )));
    }
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be finite and positive, got {tau}")));
    }
    Ok(T::one() + tau / (T::one() + (omega_med / omega_min).ln()))
}

/// A band's admissible scale interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandBounds<T> {
    pub lo: T,
    pub hi: T,
    /// Set when the raw interval `[1/gamma, min(gamma, kappa/rho)]` was
    /// empty and collapsed to a single conservative point.
    pub degenerate: bool,
}

/// Bounds `[1/gamma, min(gamma, kappa/rho_w)]` for one band.
///
/// When the overshoot cap drops the upper end below the lower end (possible
/// for `rho_w > kappa * gamma`), the interval collapses to the singleton
/// `max(upper, SCALE_FLOOR)`: tails already exceed the cap, so shrinking is
/// the conservative action, floored to avoid quantization-scale underflow.
pub fn band_bounds<T: Real>(gamma: T, rho_w: T, kappa: T) -> BandBounds<T> {
    let lo = T::one() / gamma;
    let hi = gamma.min(kappa / rho_w);
    if hi < lo {
        let g = hi.max(real(SCALE_FLOOR));
        BandBounds { lo: g, hi: g, degenerate: true }
    } else {
        BandBounds { lo, hi, degenerate: false }
    }
}

/// Log-spaced candidate grid over a band's interval.
///
/// Produces exactly `k` points with both endpoints included. When 1 lies in
/// the interval, the point nearest to it in log space is snapped to exactly
/// 1 so the no-op scale is always a candidate without changing the grid
/// size. Degenerate bounds yield a single candidate.
pub fn make_grid<T: Real>(bounds: &BandBounds<T>, k: usize) -> Result<Vec<T>> {
    if bounds.degenerate || bounds.lo == bounds.hi {
        return Ok(vec![bounds.lo]);
    }
    if k < 2 {
        return Err(Error::Config(format!("grid needs at least 2 points, got {k}")));
    }
    let ln_lo = bounds.lo.ln();
    let ln_hi = bounds.hi.ln();
    let step = (ln_hi - ln_lo) / real::<T>((k - 1) as f64);
    let mut grid: Vec<T> = (0..k)
        .map(|j| {
            if j == 0 {
                bounds.lo
            } else if j == k - 1 {
                bounds.hi
            } else {
                (ln_lo + real::<T>(j as f64) * step).exp()
            }
        })
        .collect();
    if bounds.lo <= T::one() && T::one() <= bounds.hi {
        let nearest = (0..k)
            .min_by(|&a, &b| {
                let da = grid[a].ln().abs();
                let db = grid[b].ln().abs();
                da.partial_cmp(&db).expect("grid points are finite")
            })
            .expect("grid is non-empty");
        grid[nearest] = T::one();
    }
    Ok(grid)
}

/// How a band's scale is applied to the key projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `w_q *= g`, `w_k *= g`; logits in the band scale by `g^2`.
    Shared,
    /// `w_q *= g`, `w_k /= g`; full-precision logits are unchanged.
    #[default]
    Symmetric,
}

/// Apply per-band scales to the projection rows, returning a new snapshot.
///
/// Row `r` of either projection belongs to pair `(r % d_h) / 2`; its band's
/// scale multiplies the query row and, depending on the mode, multiplies or
/// divides the key row.
pub fn apply_band_scales(
    weights: &AttentionWeights,
    partition: &BandPartition<f64>,
    g: &[f64],
    mode: ScaleMode,
) -> Result<AttentionWeights> {
    if g.len() != partition.len() {
        return Err(Error::Shape(format!(
            "{} scales for {} bands",
            g.len(),
            partition.len()
        )));
    }
    let pair_to_band = partition.pair_to_band(weights.d_h() / 2)?;
    let mut w_q = weights.w_q().clone();
    let mut w_k = weights.w_k().clone();
    for r in 0..w_q.rows() {
        let band = pair_to_band[weights.pair_of_row(r)];
        let gb = g[band];
        w_q.scale_row(r, gb);
        match mode {
            ScaleMode::Shared => w_k.scale_row(r, gb),
            ScaleMode::Symmetric => w_k.scale_row(r, 1.0 / gb),
        }
    }
    weights.with_projections(w_q, w_k)
}

/// Search configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Number of frequency bands.
    pub bands: usize,
    /// Grid points per band.
    pub grid_points: usize,
    /// Frequency prior strength.
    pub tau: f64,
    /// Overshoot cap on `kappa / rho_w`.
    pub kappa: f64,
    /// Tail quantile epsilon for the inflation estimate.
    pub eps: f64,
    pub mode: ScaleMode,
    /// Run a reverse refinement pass after the forward pass.
    pub reverse_pass: bool,
    /// Re-estimate band inflation on the rescaled weights after each commit.
    pub reestimate_rho: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            bands: 8,
            grid_points: 7,
            tau: 0.1,
            kappa: 1.2,
            eps: 1e-3,
            mode: ScaleMode::Symmetric,
            reverse_pass: true,
            reestimate_rho: false,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands < 1 {
            return Err(Error::Config("band count must be at least 1".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid needs at least 2 points per band".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(1.0..=1.3).contains(&self.kappa) {
            return Err(Error::Config(format!(
                "kappa must be in [1.0, 1.3], got {}",
                self.kappa
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config(format!("eps must be in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }
}

/// One objective evaluation in the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pass: usize,
    pub band: usize,
    pub candidate: f64,
    pub objective: f64,
}

/// One per-band commit decision in the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub pass: usize,
    pub band: usize,
    pub scale: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub improved: bool,
}

/// Everything recorded during a search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchAudit {
    pub baseline_objective: f64,
    pub final_objective: f64,
    pub rho_band: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eps_requested: f64,
    pub eps_effective: f64,
    pub evaluations: Vec<EvalRecord>,
    pub commits: Vec<CommitRecord>,
}

/// The search result: per-band scales with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandScales {
    pub format_version: u32,
    pub mode: ScaleMode,
    /// Pair indices per band, highest frequency first.
    pub bands: Vec<Vec<usize>>,
    pub g: Vec<f64>,
    pub bounds: Vec<BandBounds<f64>>,
    pub grids: Vec<Vec<f64>>,
    pub audit: SearchAudit,
}

/// A search result paired with the rescaled weights.
pub struct SearchOutcome {
    pub scales: BandScales,
    pub rescaled: AttentionWeights,
}

struct DescentResult {
    g: Vec<f64>,
    baseline: f64,
    final_objective: f64,
    evaluations: Vec<EvalRecord>,
    commits: Vec<CommitRecord>,
    grids: Vec<Vec<f64>>,
}

/// Coordinate descent over fixed per-band grids.
///
/// `refresh`, when present, is invoked after each commit and may replace the
/// grids (used to re-estimate inflation bounds on the rescaled weights).
fn run_descent<F, R>(
    scorer: &F,
    mut grids: Vec<Vec<f64>>,
    reverse_pass: bool,
    mut refresh: Option<R>,
) -> Result<DescentResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
    R: FnMut(&[f64]) -> Result<Vec<Vec<f64>>>,
{
    let nb = grids.len();
    let mut g = vec![1.0; nb];
    let baseline = scorer(&g)?;
    let mut current = baseline;
    let mut evaluations = Vec::new();
    let mut commits = Vec::new();

    let orders: Vec<Vec<usize>> = if reverse_pass {
        vec![(0..nb).collect(), (0..nb).rev().collect()]
    } else {
        vec![(0..nb).collect()]
    };

    for (pass, order) in orders.iter().enumerate() {
        for &band in order {
            let candidates = grids[band].clone();
            let results: Vec<f64> = candidates
                .par_iter()
                .map(|&cand| {
                    let mut trial = g.clone();
                    trial[band] = cand;
                    scorer(&trial)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mut best = 0usize;
            for (idx, (&cand, &j)) in candidates.iter().zip(&results).enumerate() {
                evaluations.push(EvalRecord { pass, band, candidate: cand, objective: j });
                if j < results[best] {
                    best = idx;
                }
            }
            let improved = results[best] < current;
            let before = current;
            if improved {
                g[band] = candidates[best];
                current = results[best];
                if let Some(r) = refresh.as_mut() {
                    grids = r(&g)?;
                }
            }
            commits.push(CommitRecord {
                pass,
                band,
                scale: g[band],
                objective_before: before,
                objective_after: current,
                improved,
            });
        }
    }

    Ok(DescentResult {
        g,
        baseline,
        final_objective: current,
        evaluations,
        commits,
        grids,
    })
}

/// Run coordinate descent against a caller-supplied objective over explicit
/// per-band grids. Returns the scales plus the audit trail. This is the
/// search core without the rescale/quantize plumbing; useful for custom
/// objectives and for verifying the descent against exhaustive enumeration.
pub fn coordinate_search_with<F>(
    scorer: F,
    grids: Vec<Vec<f64>>,
    reverse_pass: bool,
) -> Result<(Vec<f64>, SearchAudit)>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if grids.is_empty() {
        return Err(Error::Config("descent needs at least one band".into()));
    }
    let descent = run_descent(
        &scorer,
        grids,
        reverse_pass,
        None::<fn(&[f64]) -> Result<Vec<Vec<f64>>>>,
    )?;
    let audit = SearchAudit {
        baseline_objective: descent.baseline,
        final_objective: descent.final_objective,
        rho_band: Vec::new(),
        gamma: Vec::new(),
        eps_requested: 0.0,
        eps_effective: 0.0,
        evaluations: descent.evaluations,
        commits: descent.commits,
    };
    Ok((descent.g, audit))
}

/// Pool dev-set rows into short-context (position below `l0`) and
/// long-context (position at or beyond `l0`) sample matrices.
fn pool_rows(devset: &DevSet, l0: usize) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let d_model = devset.items()[0].d_model();
    let mut short = Vec::new();
    let mut long = Vec::new();
    let mut n_short = 0usize;
    let mut n_long = 0usize;
    for item in devset.items() {
        if item.d_model() != d_model {
            return Err(Error::Shape("dev items disagree on hidden width".into()));
        }
        for r in 0..item.len() {
            if r < l0 {
                short.extend_from_slice(item.data.row(r));
                n_short += 1;
            } else {
                long.extend_from_slice(item.data.row(r));
                n_long += 1;
            }
        }
    }
    if n_long == 0 {
        return Err(Error::Config(format!(
            "dev set has no positions at or beyond the training window {l0}"
        )));
    }
    if n_short == 0 {
        return Err(Error::Config("dev set has no positions inside the training window".into()));
    }
    Ok((Matrix::new(n_short, d_model, short)?, Matrix::new(n_long, d_model, long)?))
}

const MIN_POOL_ROWS: usize = 40;

/// Per-band weight-side tail inflation estimated from the dev set.
///
/// Projections of the pooled short and long rows through both `w_q` and
/// `w_k` contribute channels to their pair's band; the band value is the
/// nearest-rank median over that union. Dev sets smaller than the strict
/// quantile floor `10 / eps` are handled by raising the effective epsilon to
/// `10 / n`, which is reported back.
pub fn estimate_rho_band(
    weights: &AttentionWeights,
    partition: &BandPartition<f64>,
    devset: &DevSet,
    l0: usize,
    eps: f64,
) -> Result<(Vec<f64>, f64)> {
    let (short, long) = pool_rows(devset, l0)?;
    let n_min = short.rows().min(long.rows());
    if n_min < MIN_POOL_ROWS {
        return Err(Error::SampleSize(format!(
            "inflation estimate needs at least {MIN_POOL_ROWS} rows per branch, got {n_min}"
        )));
    }
    let eps_effective = eps.max(10.0 / n_min as f64);

    let d_h = weights.d_h();
    let q = tail_inflation_weight(weights.w_q(), &short, &long, eps_effective, partition, d_h)?;
    let k = tail_inflation_weight(weights.w_k(), &short, &long, eps_effective, partition, d_h)?;

    let pair_to_band = partition.pair_to_band(d_h / 2)?;
    let mut grouped: Vec<Vec<f64>> = vec![Vec::new(); partition.len()];
    for (r, &v) in q.rho.iter().enumerate() {
        grouped[pair_to_band[(r % d_h) / 2]].push(v);
    }
    for (r, &v) in k.rho.iter().enumerate() {
        grouped[pair_to_band[(r % d_h) / 2]].push(v);
    }
    let rho_band = grouped
        .iter()
        .map(|vals| median_nearest_rank(vals))
        .collect::<Result<Vec<f64>>>()?;
    Ok((rho_band, eps_effective))
}

fn bounds_and_grids(
    partition: &BandPartition<f64>,
    rho_band: &[f64],
    cfg: &SearchConfig,
) -> Result<(Vec<f64>, Vec<BandBounds<f64>>, Vec<Vec<f64>>)> {
    let mut gammas = Vec::with_capacity(partition.len());
    let mut bounds = Vec::with_capacity(partition.len());
    let mut grids = Vec::with_capacity(partition.len());
    for b in 0..partition.len() {
        let gamma = gamma_bound(partition.omega_med()[b], partition.omega_min(), cfg.tau)?;
        let bb = band_bounds(gamma, rho_band[b], cfg.kappa);
        grids.push(make_grid(&bb, cfg.grid_points)?);
        gammas.push(gamma);
        bounds.push(bb);
    }
    Ok((gammas, bounds, grids))
}

/// The full band-rescale search.
///
/// Estimates per-band tail inflation from the dev set, derives safe bounds
/// and candidate grids, then coordinate-descends on the objective: each
/// candidate scale is applied to the band, the scaled weights are
/// re-quantized, and the weighted dev-set score decides the commit. With
/// 1 in every non-degenerate grid and commits only on improvement, the
/// final objective never exceeds the baseline.
#[allow(clippy::too_many_arguments)]
pub fn coordinate_search(
    weights: &AttentionWeights,
    partition: &BandPartition<f64>,
    quant: Option<&QuantSpec<f64>>,
    sched: &FrequencySchedule<f64>,
    scheme: &PiScheme<f64>,
    objective: &Objective,
    devset: &DevSet,
    l0: usize,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if let Some(spec) = quant {
        spec.validate()?;
    }
    if devset.items().is_empty() {
        return Err(Error::Config("dev set must not be empty".into()));
    }

    let (rho_band, eps_effective) = estimate_rho_band(weights, partition, devset, l0, cfg.eps)?;
    let (gammas, bounds, grids) = bounds_and_grids(partition, &rho_band, cfg)?;

    let scorer = |g: &[f64]| -> Result<f64> {
        let scaled = apply_band_scales(weights, partition, g, cfg.mode)?;
        Ok(score(objective, &scaled, sched, scheme, quant, devset)?.total)
    };

    let refresh = if cfg.reestimate_rho {
        Some(|g: &[f64]| -> Result<Vec<Vec<f64>>> {
            let scaled = apply_band_scales(weights, partition, g, cfg.mode)?;
            let (rho, _) = estimate_rho_band(&scaled, partition, devset, l0, cfg.eps)?;
            let (_, _, grids) = bounds_and_grids(partition, &rho, cfg)?;
            Ok(grids)
        })
    } else {
        None
    };

    let descent = run_descent(&scorer, grids, cfg.reverse_pass, refresh)?;

    let rescaled = apply_band_scales(weights, partition, &descent.g, cfg.mode)?;
    let scales = BandScales {
        format_version: 1,
        mode: cfg.mode,
        bands: partition.bands().to_vec(),
        g: descent.g,
        bounds,
        grids: descent.grids,
        audit: SearchAudit {
            baseline_objective: descent.baseline,
            final_objective: descent.final_objective,
            rho_band,
            gamma: gammas,
            eps_requested: cfg.eps,
            eps_effective,
            evaluations: descent.evaluations,
            commits: descent.commits,
        },
    };
    Ok(SearchOutcome { scales, rescaled })
}

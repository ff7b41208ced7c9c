//! Interpolation and quantization diagnostics.
//!
//! Phase deviation measures how far a scheme pushes a dimension's phase from
//! the training regime; interpolation pressure is the sensitivity of that
//! deviation to the per-dimension scale. Tail-inflation ratios compare high
//! quantiles of pre-activation magnitudes (weight side) or rotated-pair
//! infinity norms (activation side) between long-context and short-context
//! distributions. The logit bound decomposes the attention-score perturbation
//! caused by quantized projections.
//!
//! All quantiles use the nearest-rank rule on sorted samples, fixed for
//! determinism; the minimum sample count for a `1 - eps` quantile is
//! `ceil(10 / eps)`.

use crate::error::{Error, Result};
use crate::interp::PiScheme;
use crate::mat::{dot, norm2, Matrix};
use crate::num::{real, Real};
use crate::quant::{midrise_step, quantize_midrise, QuantMode, QuantSpec};
use crate::rope::{rotate_pairs_in_place, FrequencySchedule, Position};
use crate::search::BandPartition;

/// Nearest-rank quantile of a sample set: the `ceil(p * n)`-th smallest value.
///
/// Sorts a copy of the input. For `p = 0.5` and even `n` this picks the lower
/// of the two middle values.
pub fn quantile_nearest_rank<T: Real>(samples: &[T], p: T) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::SampleSize("quantile of an empty sample set".into()));
    }
    if !(p > T::zero()) || !(p <= T::one()) {
        return Err(Error::Config(format!("quantile level must be in (0, 1], got {p}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("samples must be comparable"));
    let n = sorted.len();
    let rank = (p * real::<T>(n as f64)).ceil().to_usize().unwrap_or(n).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Nearest-rank median.
pub fn median_nearest_rank<T: Real>(samples: &[T]) -> Result<T> {
    quantile_nearest_rank(samples, real(0.5))
}

/// Minimum sample count for estimating a `1 - eps` quantile: `ceil(10 / eps)`.
pub fn min_samples<T: Real>(eps: T) -> usize {
    (real::<T>(10.0) / eps).ceil().to_usize().unwrap_or(usize::MAX)
}

fn check_eps<T: Real>(eps: T) -> Result<()> {
    if !(eps > T::zero()) || !(eps < real::<T>(0.5)) {
        return Err(Error::Config(format!("quantile eps must be in (0, 0.5), got {eps}")));
    }
    Ok(())
}

/// Phase deviation of dimension `i` at displacement `d` relative to the
/// training displacement `d0`: `freq[i] * (f(d) / s_i - d0)`.
pub fn phase_deviation<T: Real>(
    scheme: &PiScheme<T>,
    sched: &FrequencySchedule<T>,
    i: usize,
    d: Position<T>,
    d0: Position<T>,
) -> Result<T> {
    let s = scheme.scale_at(i, sched.half_dim())?;
    Ok(sched.freqs()[i] * (scheme.warp(d) / s - d0.value()))
}

/// Interpolation pressure of dimension `i` at displacement `d`:
/// `freq[i] * f(d) / s_i^2`, the magnitude of the phase-deviation derivative
/// with respect to the scale.
pub fn interpolation_pressure<T: Real>(
    scheme: &PiScheme<T>,
    sched: &FrequencySchedule<T>,
    i: usize,
    d: Position<T>,
) -> Result<T> {
    let s = scheme.scale_at(i, sched.half_dim())?;
    Ok(sched.freqs()[i] * scheme.warp(d) / (s * s))
}

/// Central-difference estimate of the pressure, for verifying the closed
/// form. `rel_step` is the step relative to the dimension's scale.
pub fn interpolation_pressure_fd<T: Real>(
    scheme: &PiScheme<T>,
    sched: &FrequencySchedule<T>,
    i: usize,
    d: Position<T>,
    rel_step: T,
) -> Result<T> {
    let s = scheme.scale_at(i, sched.half_dim())?;
    let freq = sched.freqs()[i];
    let fd = scheme.warp(d);
    let h = rel_step * s;
    let eps_at = |scale: T| freq * (fd / scale); // d0 term cancels in the difference
    Ok(((eps_at(s + h) - eps_at(s - h)) / (real::<T>(2.0) * h)).abs())
}

/// Per-channel weight-side tail inflation with per-band medians.
#[derive(Debug, Clone)]
pub struct WeightTailInflation<T> {
    /// One ratio per output channel (row of the projection matrix).
    pub rho: Vec<T>,
    /// Nearest-rank median of the ratios falling in each band.
    pub band_medians: Vec<T>,
    /// Sample counts of the short and long branches.
    pub sample_counts: (usize, usize),
}

/// Ratio of `1 - eps` quantiles of `|w_i . h|` between long-context and
/// short-context samples, per channel, with band medians.
///
/// `w` has one row per output channel; `h_short` and `h_long` hold one sample
/// per row. Channel `r` belongs to RoPE pair `(r % d_h) / 2`, which the
/// partition maps to a band.
pub fn tail_inflation_weight<T: Real>(
    w: &Matrix<T>,
    h_short: &Matrix<T>,
    h_long: &Matrix<T>,
    eps: T,
    partition: &BandPartition<T>,
    d_h: usize,
) -> Result<WeightTailInflation<T>> {
    check_eps(eps)?;
    let need = min_samples(eps);
    if h_short.rows() < need || h_long.rows() < need {
        return Err(Error::SampleSize(format!(
            "tail quantile at eps={eps} needs at least {need} samples per branch, got {} short / {} long",
            h_short.rows(),
            h_long.rows()
        )));
    }
    if h_short.cols() != w.cols() || h_long.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "hidden width {} / {} vs projection width {}",
            h_short.cols(),
            h_long.cols(),
            w.cols()
        )));
    }
    if d_h == 0 || w.rows() % d_h != 0 {
        return Err(Error::Shape(format!(
            "projection rows {} not a multiple of head dim {d_h}",
            w.rows()
        )));
    }

    let p = T::one() - eps;
    let pre_short = w.mul_transpose(h_short)?;
    let pre_long = w.mul_transpose(h_long)?;

    let mut rho = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        let abs_short: Vec<T> = pre_short.row(r).iter().map(|v| v.abs()).collect();
        let abs_long: Vec<T> = pre_long.row(r).iter().map(|v| v.abs()).collect();
        let q_short = quantile_nearest_rank(&abs_short, p)?;
        let q_long = quantile_nearest_rank(&abs_long, p)?;
        if q_short == T::zero() {
            return Err(Error::DegenerateQuantile(format!(
                "short-context quantile of channel {r} is zero"
            )));
        }
        rho.push(q_long / q_short);
    }

    let band_medians = band_medians_over_channels(&rho, partition, d_h)?;
    Ok(WeightTailInflation { rho, band_medians, sample_counts: (h_short.rows(), h_long.rows()) })
}

/// Median of per-channel values over the channels belonging to each band.
pub fn band_medians_over_channels<T: Real>(
    per_channel: &[T],
    partition: &BandPartition<T>,
    d_h: usize,
) -> Result<Vec<T>> {
    if d_h == 0 || per_channel.len() % d_h != 0 {
        return Err(Error::Shape(format!(
            "{} channels not a multiple of head dim {d_h}",
            per_channel.len()
        )));
    }
    let mut pair_to_band = vec![usize::MAX; d_h / 2];
    for (b, band) in partition.bands().iter().enumerate() {
        for &i in band {
            if i >= pair_to_band.len() {
                return Err(Error::Shape(format!(
                    "partition pair index {i} out of range for head dim {d_h}"
                )));
            }
            pair_to_band[i] = b;
        }
    }
    let mut grouped: Vec<Vec<T>> = vec![Vec::new(); partition.bands().len()];
    for (r, &v) in per_channel.iter().enumerate() {
        let pair = (r % d_h) / 2;
        let band = pair_to_band[pair];
        if band == usize::MAX {
            return Err(Error::Shape(format!("pair {pair} not covered by the partition")));
        }
        grouped[band].push(v);
    }
    grouped.iter().map(|vals| median_nearest_rank(vals)).collect()
}

/// How the unscaled reference phase is chosen when measuring activation-side
/// inflation at a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationPairing {
    /// Compare scaled and unscaled phase maps at the same nominal position.
    #[default]
    SamePosition,
    /// Compare the scaled phase at `m` against the unscaled phase at the
    /// warped position `f(m)`. Differs from `SamePosition` only for schemes
    /// that warp positions.
    WarpedReference,
}

/// Activation-side tail inflation: per dimension and position, the ratio of
/// `1 - eps` quantiles of the rotated-pair infinity norm under the scaled
/// versus unscaled phase map.
///
/// `u` holds one pre-rotation vector per row (pairs interleaved). Returns a
/// matrix with one row per pair dimension and one column per position.
pub fn tail_inflation_activation<T: Real>(
    u: &Matrix<T>,
    scheme: &PiScheme<T>,
    sched: &FrequencySchedule<T>,
    positions: &[Position<T>],
    eps: T,
    pairing: ActivationPairing,
) -> Result<Matrix<T>> {
    check_eps(eps)?;
    let need = min_samples(eps);
    if u.rows() < need {
        return Err(Error::SampleSize(format!(
            "tail quantile at eps={eps} needs at least {need} samples, got {}",
            u.rows()
        )));
    }
    if u.cols() != sched.dim() {
        return Err(Error::Shape(format!(
            "pair samples of width {} vs schedule dim {}",
            u.cols(),
            sched.dim()
        )));
    }
    let half = sched.half_dim();
    let p = T::one() - eps;
    let scales = scheme.scales_for(half)?;

    let mut out = Matrix::zeros(half, positions.len());
    let mut scaled_norms = Vec::with_capacity(u.rows());
    let mut base_norms = Vec::with_capacity(u.rows());
    for i in 0..half {
        let freq = sched.freqs()[i];
        for (c, &m) in positions.iter().enumerate() {
            let scaled_phase = freq * scheme.warp(m) / scales[i];
            let base_phase = match pairing {
                ActivationPairing::SamePosition => freq * m.value(),
                ActivationPairing::WarpedReference => freq * scheme.warp(m),
            };
            let (sin_s, cos_s) = scaled_phase.sin_cos();
            let (sin_b, cos_b) = base_phase.sin_cos();
            scaled_norms.clear();
            base_norms.clear();
            for s in 0..u.rows() {
                let row = u.row(s);
                let (re, im) = (row[2 * i], row[2 * i + 1]);
                scaled_norms.push((re * cos_s - im * sin_s).abs().max((re * sin_s + im * cos_s).abs()));
                base_norms.push((re * cos_b - im * sin_b).abs().max((re * sin_b + im * cos_b).abs()));
            }
            let q_scaled = quantile_nearest_rank(&scaled_norms, p)?;
            let q_base = quantile_nearest_rank(&base_norms, p)?;
            if q_base == T::zero() {
                return Err(Error::DegenerateQuantile(format!(
                    "unscaled quantile of dimension {i} is zero"
                )));
            }
            out.set(i, c, q_scaled / q_base);
        }
    }
    Ok(out)
}

/// Attention-logit perturbation bound and its realized value.
#[derive(Debug, Clone, Copy)]
pub struct LogitBound<T> {
    /// `|e_q||k| + |e_k||q| + |e_q||e_k|`.
    pub bound: T,
    /// `|(q + e_q) . (k + e_k) - q . k|`.
    pub actual: T,
    /// The three bound terms in the order above.
    pub components: [T; 3],
}

/// Evaluate the logit perturbation bound for one query/key pair with additive
/// errors `e_q`, `e_k`. The realized perturbation never exceeds the bound.
pub fn logit_error_bound<T: Real>(
    q: &[T],
    k: &[T],
    e_q: &[T],
    e_k: &[T],
) -> Result<LogitBound<T>> {
    let n = q.len();
    if k.len() != n || e_q.len() != n || e_k.len() != n {
        return Err(Error::Shape(format!(
            "logit_error_bound: lengths {} / {} / {} / {}",
            q.len(),
            k.len(),
            e_q.len(),
            e_k.len()
        )));
    }
    let nq = norm2(q);
    let nk = norm2(k);
    let neq = norm2(e_q);
    let nek = norm2(e_k);
    let components = [neq * nk, nek * nq, neq * nek];
    let bound = components[0] + components[1] + components[2];

    let qhat: Vec<T> = q.iter().zip(e_q).map(|(&a, &b)| a + b).collect();
    let khat: Vec<T> = k.iter().zip(e_k).map(|(&a, &b)| a + b).collect();
    let actual = (dot(&qhat, &khat) - dot(q, k)).abs();
    Ok(LogitBound { bound, actual, components })
}

/// Empirical phase/range noise factor per dimension and position.
///
/// Each 2D pair is rotated to the scheme's scaled phase and quantized with
/// the configured mid-rise quantizer; the factor is the measured per-pair
/// squared error divided by `step^2 / 6`, the granular-noise prediction for
/// two coordinates. Values near 1 indicate the granular regime; clipping or
/// axis mismatch pushes the factor above 1. A zero input signal degenerates
/// to the mid-rise floor (both coordinates reconstruct at half a step), which
/// reports as exactly 3.
pub fn eta_factor<T: Real>(
    u: &Matrix<T>,
    scheme: &PiScheme<T>,
    sched: &FrequencySchedule<T>,
    positions: &[Position<T>],
    spec: &QuantSpec<T>,
) -> Result<Matrix<T>> {
    spec.validate()?;
    if spec.mode != QuantMode::MidRiseClipped {
        return Err(Error::InvalidSpec(
            "eta_factor needs an activation quantizer (mid-rise with clips)".into(),
        ));
    }
    let half = sched.half_dim();
    let clips = spec.clip.as_ref().expect("validated");
    if clips.len() != half {
        return Err(Error::InvalidSpec(format!(
            "{} clip ranges vs {half} pair dimensions",
            clips.len()
        )));
    }
    if u.cols() != sched.dim() {
        return Err(Error::Shape(format!(
            "pair samples of width {} vs schedule dim {}",
            u.cols(),
            sched.dim()
        )));
    }
    if u.rows() == 0 {
        return Err(Error::SampleSize("eta_factor needs at least one sample".into()));
    }
    let scales = scheme.scales_for(half)?;

    let mut out = Matrix::zeros(half, positions.len());
    let mut coords = Vec::with_capacity(u.rows() * 2);
    for i in 0..half {
        let freq = sched.freqs()[i];
        let delta = midrise_step(clips[i], spec.bits);
        let reference = delta * delta / real::<T>(6.0);
        for (c, &m) in positions.iter().enumerate() {
            let phase = freq * scheme.warp(m) / scales[i];
            let (sin, cos) = phase.sin_cos();
            coords.clear();
            for s in 0..u.rows() {
                let row = u.row(s);
                let (re, im) = (row[2 * i], row[2 * i + 1]);
                coords.push(re * cos - im * sin);
                coords.push(re * sin + im * cos);
            }
            let (_, stats) = quantize_midrise(&coords, delta, clips[i], spec.bits)?;
            // stats.mse is per coordinate; the pair error is twice that
            out.set(i, c, real::<T>(2.0) * stats.mse / reference);
        }
    }
    Ok(out)
}

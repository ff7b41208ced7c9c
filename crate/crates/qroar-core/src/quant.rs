//! Uniform quantizers with grouping, clipping statistics and error tensors.
//!
//! Two quantizer families are provided. The asymmetric min-max quantizer maps
//! each group onto `[0, 2^bits - 1]` via
//! `round((x - min) / (max - min) * (2^bits - 1))` and is the round-to-nearest
//! weight path. The symmetric mid-rise quantizer clamps to `[-clip, clip]`
//! and places reconstruction levels at half-step offsets; it is the
//! activation path and stays disabled unless a clip range is configured.
//!
//! Rounding ties go half away from zero everywhere (the behaviour of
//! `f64::round`), so identical inputs always produce bit-identical codes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::{norm2, Matrix};
use crate::num::{real, Real};

/// How a tensor is split into independently quantized groups.
///
/// Groups run along the flattened row-major buffer; a `Size` equal to the
/// row length is per-channel quantization. The final group may be shorter
/// when the size does not divide the element count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    PerTensor,
    Size(usize),
}

/// Quantizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Asymmetric per-group min-max (round-to-nearest weights).
    MinMax,
    /// Symmetric clipped mid-rise (activations).
    MidRiseClipped,
}

/// Bit width, grouping and mode of a quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec<T> {
    pub bits: u32,
    pub group: Grouping,
    pub mode: QuantMode,
    /// Per-channel clip ranges, mid-rise mode only.
    pub clip: Option<Vec<T>>,
}

/// Widest supported code width; codes are stored as `i32`.
pub const MAX_BITS: u32 = 16;

impl<T: Real> QuantSpec<T> {
    pub fn minmax(bits: u32, group: Grouping) -> Self {
        Self { bits, group, mode: QuantMode::MinMax, clip: None }
    }

    pub fn midrise(bits: u32, clip: Vec<T>) -> Self {
        Self { bits, group: Grouping::PerTensor, mode: QuantMode::MidRiseClipped, clip: Some(clip) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 || self.bits > MAX_BITS {
            return Err(Error::InvalidSpec(format!(
                "bits must be in 2..={MAX_BITS}, got {}",
                self.bits
            )));
        }
        if let Grouping::Size(0) = self.group {
            return Err(Error::InvalidSpec("group size must be positive".into()));
        }
        if self.mode == QuantMode::MidRiseClipped {
            match &self.clip {
                None => {
                    return Err(Error::InvalidSpec("mid-rise mode needs clip ranges".into()));
                }
                Some(c) if c.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) => {
                    return Err(Error::InvalidSpec("clip ranges must be finite and positive".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of code levels minus one, `2^bits - 1`.
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Quantized codes plus everything needed to audit the reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    pub codes: Vec<i32>,
    /// Per-group step sizes.
    pub scales: Vec<T>,
    /// Per-group minima (min-max) or zeros (mid-rise).
    pub offsets: Vec<T>,
    pub reconstructed: Matrix<T>,
    /// `reconstructed - original`.
    pub error: Matrix<T>,
    pub bits: u32,
    /// Flattened group length (element count for per-tensor).
    pub group_len: usize,
}

/// Empirical clipping probability and decomposed mean squared error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStats<T> {
    /// Fraction of samples with `|x| > clip`.
    pub p_clip: T,
    /// Measured mean squared reconstruction error.
    pub mse: T,
    /// Granular term `step^2 / 12`.
    pub mse_granular: T,
    /// Mean of `(|x| - clip)^2` over clipped samples (zero elsewhere).
    pub mse_overload: T,
}

/// Quantize `w` group-wise with the asymmetric min-max rule.
///
/// A degenerate group (all values equal) stores code 0 with step 1 and
/// offset equal to the value, so reconstruction is exact and no division by
/// zero occurs.
pub fn quantize_minmax<T: Real>(w: &Matrix<T>, spec: &QuantSpec<T>) -> Result<QuantizedTensor<T>> {
    spec.validate()?;
    if spec.mode != QuantMode::MinMax {
        return Err(Error::InvalidSpec("quantize_minmax needs a min-max spec".into()));
    }
    let n = w.data().len();
    if n == 0 {
        return Err(Error::Shape("cannot quantize an empty tensor".into()));
    }
    let group_len = match spec.group {
        Grouping::PerTensor => n,
        Grouping::Size(g) => g.min(n),
    };
    let levels = real::<T>(spec.levels() as f64);

    let mut codes = Vec::with_capacity(n);
    let mut scales = Vec::new();
    let mut offsets = Vec::new();
    let mut recon = Vec::with_capacity(n);

    for chunk in w.data().chunks(group_len) {
        let mn = chunk.iter().fold(T::infinity(), |m, v| m.min(*v));
        let mx = chunk.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        if mx == mn {
            scales.push(T::one());
            offsets.push(mn);
            for _ in chunk {
                codes.push(0);
                recon.push(mn);
            }
            continue;
        }
        let range = mx - mn;
        let delta = range / levels;
        scales.push(delta);
        offsets.push(mn);
        for &x in chunk {
            let code = ((x - mn) / range * levels)
                .round()
                .max(T::zero())
                .min(levels)
                .to_i32()
                .expect("code fits i32");
            codes.push(code);
            recon.push(mn + real::<T>(code as f64) * delta);
        }
    }

    let reconstructed = Matrix::new(w.rows(), w.cols(), recon)?;
    let error = Matrix::new(
        w.rows(),
        w.cols(),
        reconstructed.data().iter().zip(w.data()).map(|(&r, &o)| r - o).collect(),
    )?;
    Ok(QuantizedTensor { codes, scales, offsets, reconstructed, error, bits: spec.bits, group_len })
}

/// Quantize one channel with a clipped mid-rise quantizer.
///
/// Values are clamped to `[-clip, clip]`, then mapped to the level
/// `(k + 1/2) * delta` with `k = floor(x / delta)` clamped to the signed code
/// range. Returns the quantized channel plus its clipping statistics.
pub fn quantize_midrise<T: Real>(
    x: &[T],
    delta: T,
    clip: T,
    bits: u32,
) -> Result<(QuantizedTensor<T>, ClipStats<T>)> {
    if !(delta > T::zero()) || !delta.is_finite() {
        return Err(Error::InvalidSpec(format!("step must be finite and positive, got {delta}")));
    }
    if !(clip > T::zero()) || !clip.is_finite() {
        return Err(Error::InvalidSpec(format!("clip must be finite and positive, got {clip}")));
    }
    if bits < 2 || bits > MAX_BITS {
        return Err(Error::InvalidSpec(format!("bits must be in 2..={MAX_BITS}, got {bits}")));
    }
    if x.is_empty() {
        return Err(Error::Shape("cannot quantize an empty channel".into()));
    }
    let qmin = -(1i64 << (bits - 1));
    let qmax = (1i64 << (bits - 1)) - 1;

    let mut codes = Vec::with_capacity(x.len());
    let mut recon = Vec::with_capacity(x.len());
    let mut clipped = 0usize;
    let mut overload = T::zero();
    let half = real::<T>(0.5);

    for &v in x {
        if v.abs() > clip {
            clipped += 1;
            let over = v.abs() - clip;
            overload = overload + over * over;
        }
        let clamped = v.max(-clip).min(clip);
        let k = (clamped / delta)
            .floor()
            .to_i64()
            .unwrap_or(0)
            .max(qmin)
            .min(qmax);
        codes.push(k as i32);
        recon.push((real::<T>(k as f64) + half) * delta);
    }

    let n = real::<T>(x.len() as f64);
    let mse = x
        .iter()
        .zip(&recon)
        .fold(T::zero(), |s, (&o, &r)| {
            let e = r - o;
            s + e * e
        })
        / n;
    let stats = ClipStats {
        p_clip: real::<T>(clipped as f64) / n,
        mse,
        mse_granular: delta * delta / real::<T>(12.0),
        mse_overload: overload / n,
    };

    let len = x.len();
    let reconstructed = Matrix::new(1, len, recon)?;
    let error = Matrix::new(
        1,
        len,
        reconstructed.data().iter().zip(x).map(|(&r, &o)| r - o).collect(),
    )?;
    Ok((
        QuantizedTensor {
            codes,
            scales: vec![delta],
            offsets: vec![T::zero()],
            reconstructed,
            error,
            bits,
            group_len: len,
        },
        stats,
    ))
}

/// Mid-rise step implied by a clip range: `2 * clip / (2^bits - 1)`.
pub fn midrise_step<T: Real>(clip: T, bits: u32) -> T {
    real::<T>(2.0) * clip / real::<T>(((1u32 << bits) - 1) as f64)
}

/// Enlarge per-channel clips by the given inflation factors and derive the
/// matching mid-rise steps.
pub fn rescale_clips<T: Real>(
    clip0: &[T],
    rho: &[T],
    bits: u32,
) -> Result<(Vec<T>, Vec<T>)> {
    if clip0.len() != rho.len() {
        return Err(Error::Shape(format!(
            "rescale_clips: {} clips vs {} inflation factors",
            clip0.len(),
            rho.len()
        )));
    }
    if let Some(bad) = rho.iter().find(|r| !(**r > T::zero()) || !r.is_finite()) {
        return Err(Error::InvalidInflation(format!(
            "inflation factors must be finite and positive, got {bad}"
        )));
    }
    if bits < 2 || bits > MAX_BITS {
        return Err(Error::InvalidSpec(format!("bits must be in 2..={MAX_BITS}, got {bits}")));
    }
    let clips: Vec<T> = clip0.iter().zip(rho).map(|(&c, &r)| r * c).collect();
    let deltas = clips.iter().map(|&c| midrise_step(c, bits)).collect();
    Ok((clips, deltas))
}

/// Quantization error of `w` under `spec` plus a spectral-norm estimate of
/// the error matrix.
pub struct WeightError<T> {
    pub quantized: QuantizedTensor<T>,
    pub spectral_norm: T,
}

/// Quantize `w`, returning the error tensor and its operator norm estimated
/// by power iteration (relative tolerance 1e-6, at most 200 iterations).
pub fn weight_error<T: Real>(w: &Matrix<T>, spec: &QuantSpec<T>) -> Result<WeightError<T>> {
    let quantized = quantize_minmax(w, spec)?;
    let spectral_norm = spectral_norm(&quantized.error, real::<T>(1e-6), 200);
    Ok(WeightError { quantized, spectral_norm })
}

/// Largest singular value of `m` by power iteration on `m^T m`.
///
/// Starts from a fixed pseudo-random unit vector so results are
/// deterministic; stops when the estimate changes by less than
/// `tol * estimate` or after `max_iter` rounds.
pub fn spectral_norm<T: Real>(m: &Matrix<T>, tol: T, max_iter: usize) -> T {
    if m.rows() == 0 || m.cols() == 0 {
        return T::zero();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ec7ea1);
    let mut v: Vec<T> =
        (0..m.cols()).map(|_| real::<T>(rng.sample::<f64, _>(rand_distr::StandardNormal))).collect();
    let vnorm = norm2(&v);
    if vnorm == T::zero() {
        return T::zero();
    }
    for x in v.iter_mut() {
        *x = *x / vnorm;
    }

    let mut sigma = T::zero();
    for _ in 0..max_iter {
        let u = m.matvec(&v).expect("dims fixed");
        let unorm = norm2(&u);
        if unorm == T::zero() {
            return T::zero();
        }
        let mut w = m.t_matvec(&u).expect("dims fixed");
        let wnorm = norm2(&w);
        if wnorm == T::zero() {
            return unorm;
        }
        for x in w.iter_mut() {
            *x = *x / wnorm;
        }
        let prev = sigma;
        sigma = unorm;
        v = w;
        if (sigma - prev).abs() <= tol * sigma.max(T::min_positive_value()) {
            break;
        }
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn row(data: Vec<f64>) -> Matrix<f64> {
        let n = data.len();
        Matrix::new(1, n, data).unwrap()
    }

    #[test]
    fn exact_grid_round_trip() {
        let w = row(vec![0.0, 1.0, 2.0, 3.0]);
        let q = quantize_minmax(&w, &QuantSpec::minmax(2, Grouping::PerTensor)).unwrap();
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(q.reconstructed.data(), w.data());
        assert!(q.error.data().iter().all(|e| *e == 0.0));
    }

    #[test]
    fn constant_group_reconstructs_exactly() {
        let w = row(vec![5.0; 8]);
        let q = quantize_minmax(&w, &QuantSpec::minmax(4, Grouping::PerTensor)).unwrap();
        assert!(q.codes.iter().all(|c| *c == 0));
        assert!(q.reconstructed.data().iter().all(|v| *v == 5.0));
        assert!(q.error.data().iter().all(|e| *e == 0.0));
    }

    #[test]
    fn uniform_input_matches_granular_noise_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200_000;
        let w = row((0..n).map(|_| rng.gen::<f64>()).collect());
        let q = quantize_minmax(&w, &QuantSpec::minmax(8, Grouping::PerTensor)).unwrap();
        let mse: f64 = q.error.data().iter().map(|e| e * e).sum::<f64>() / n as f64;
        let delta = q.scales[0];
        let expect = delta * delta / 12.0;
        assert!((mse - expect).abs() < 0.05 * expect, "mse {mse} vs {expect}");
    }

    #[test]
    fn grouping_bounds_error_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w = Matrix::new(4, 64, (0..256).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let q = quantize_minmax(&w, &QuantSpec::minmax(4, Grouping::Size(32))).unwrap();
        assert_eq!(q.scales.len(), 8);
        for (g, chunk) in q.error.data().chunks(32).enumerate() {
            let bound = q.scales[g] / 2.0 + 1e-12;
            for e in chunk {
                assert!(e.abs() <= bound, "group {g}: |{e}| > {bound}");
            }
        }
    }

    #[test]
    fn tail_group_may_be_shorter() {
        let w = row(vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let q = quantize_minmax(&w, &QuantSpec::minmax(2, Grouping::Size(3))).unwrap();
        assert_eq!(q.scales.len(), 2);
        assert_eq!(q.codes.len(), 5);
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = row((0..1000).map(|_| rng.sample(StandardNormal)).collect());
        let spec = QuantSpec::minmax(4, Grouping::Size(128));
        let a = quantize_minmax(&w, &spec).unwrap();
        let b = quantize_minmax(&w, &spec).unwrap();
        assert_eq!(a.codes, b.codes);
        assert_eq!(a.reconstructed.data(), b.reconstructed.data());
    }

    #[test]
    fn requantizing_reconstruction_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let w = row((0..512).map(|_| rng.sample(StandardNormal)).collect());
        let spec = QuantSpec::minmax(4, Grouping::Size(128));
        let q1 = quantize_minmax(&w, &spec).unwrap();
        let q2 = quantize_minmax(&q1.reconstructed, &spec).unwrap();
        assert_eq!(q1.codes, q2.codes);
    }

    #[test]
    fn midrise_on_grid_is_exact() {
        let delta = 0.25;
        let xs: Vec<f64> = vec![-0.625, -0.125, 0.125, 0.375, 0.625];
        let (q, stats) = quantize_midrise(&xs, delta, 1.0, 4).unwrap();
        assert!(q.error.data().iter().all(|e| e.abs() < 1e-15));
        assert_eq!(stats.p_clip, 0.0);
    }

    #[test]
    fn midrise_full_clipping() {
        let c = 1.0;
        let bits = 4;
        let delta = 2.0 * c / (1u32 << bits) as f64;
        let (q, stats) = quantize_midrise(&[2.0 * c, -2.0 * c], delta, c, bits).unwrap();
        assert_eq!(stats.p_clip, 1.0);
        let top = c - delta / 2.0;
        assert!((q.reconstructed.get(0, 0) - top).abs() < 1e-12);
        assert!((q.reconstructed.get(0, 1) + top).abs() < 1e-12);
    }

    #[test]
    fn gaussian_three_sigma_clip_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let xs: Vec<f64> = (0..400_000).map(|_| rng.sample(StandardNormal)).collect();
        let c = 3.0;
        let (_, stats) = quantize_midrise(&xs, midrise_step(c, 8), c, 8).unwrap();
        let expect = 0.0026997960632601866; // 2 * (1 - Phi(3))
        assert!(
            (stats.p_clip - expect).abs() < 0.15 * expect,
            "p_clip {} vs {expect}",
            stats.p_clip
        );
    }

    #[test]
    fn mse_decomposition_reassembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let xs: Vec<f64> = (0..400_000).map(|_| rng.sample(StandardNormal)).collect();
        let c = 2.5;
        let (_, stats) = quantize_midrise(&xs, midrise_step(c, 8), c, 8).unwrap();
        let model = (1.0 - stats.p_clip) * stats.mse_granular + stats.mse_overload;
        assert!(
            (stats.mse - model).abs() < 0.05 * stats.mse,
            "measured {} vs model {model}",
            stats.mse
        );
    }

    #[test]
    fn more_bits_never_hurt() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let xs: Vec<f64> = (0..50_000).map(|_| rng.sample(StandardNormal)).collect();
        let c = 3.0;
        let mut prev = f64::INFINITY;
        for bits in 3..=8 {
            let (_, stats) = quantize_midrise(&xs, midrise_step(c, bits), c, bits).unwrap();
            assert!(stats.mse <= prev, "bits {bits}: {} > {prev}", stats.mse);
            prev = stats.mse;
        }
    }

    #[test]
    fn rescale_identity_and_scaling() {
        let (c, d) = rescale_clips(&[2.0, 3.0], &[1.0, 1.0], 4).unwrap();
        assert_eq!(c, vec![2.0, 3.0]);
        assert!((d[0] - 2.0 * 2.0 / 15.0).abs() < 1e-15);
        let (c, _) = rescale_clips(&[2.0], &[1.5], 4).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn rescale_rejects_bad_inflation() {
        assert!(matches!(
            rescale_clips(&[1.0], &[0.0], 4),
            Err(Error::InvalidInflation(_))
        ));
        assert!(matches!(
            rescale_clips(&[1.0], &[-1.0], 4),
            Err(Error::InvalidInflation(_))
        ));
    }

    #[test]
    fn rescale_restores_clip_probability_after_amplitude_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let n = 400_000;
        let short: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let long: Vec<f64> = (0..n).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let c0 = 2.5;
        let bits = 8;
        let (_, short_stats) = quantize_midrise(&short, midrise_step(c0, bits), c0, bits).unwrap();
        let (clips, deltas) = rescale_clips(&[c0], &[1.5], bits).unwrap();
        let (_, long_stats) = quantize_midrise(&long, deltas[0], clips[0], bits).unwrap();
        let rel = (long_stats.p_clip - short_stats.p_clip).abs() / short_stats.p_clip;
        assert!(rel < 0.10, "p_clip drifted by {rel}");
    }

    #[test]
    fn exactly_representable_weights_have_zero_error() {
        let w = row(vec![0.0, 0.5, 1.0, 1.5]);
        let we = weight_error(&w, &QuantSpec::minmax(2, Grouping::PerTensor)).unwrap();
        assert!(we.quantized.error.data().iter().all(|e| *e == 0.0));
        assert_eq!(we.spectral_norm, 0.0);
    }

    #[test]
    fn sixteen_bits_is_near_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let w = Matrix::new(64, 64, (0..4096).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let we = weight_error(&w, &QuantSpec::minmax(16, Grouping::Size(128))).unwrap();
        let wnorm = spectral_norm(&w, 1e-9, 500);
        assert!(we.spectral_norm <= 1e-3 * wnorm, "{} vs {wnorm}", we.spectral_norm);
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let data: Vec<f64> = (0..4096).map(|_| rng.sample(StandardNormal)).collect();
        let m = Matrix::new(64, 64, data.clone()).unwrap();
        let est = spectral_norm(&m, 1e-9, 2000);
        let dm = nalgebra::DMatrix::from_row_slice(64, 64, &data);
        let exact = dm.svd(false, false).singular_values[0];
        assert!((est - exact).abs() <= 1e-4 * exact, "{est} vs {exact}");
    }

    #[test]
    fn spec_validation() {
        assert!(QuantSpec::<f64>::minmax(1, Grouping::PerTensor).validate().is_err());
        assert!(QuantSpec::<f64>::minmax(17, Grouping::PerTensor).validate().is_err());
        assert!(QuantSpec::<f64>::minmax(4, Grouping::Size(0)).validate().is_err());
        assert!(QuantSpec::<f64>::midrise(4, vec![]).validate().is_ok());
        let no_clip: QuantSpec<f64> = QuantSpec {
            bits: 4,
            group: Grouping::PerTensor,
            mode: QuantMode::MidRiseClipped,
            clip: None,
        };
        assert!(no_clip.validate().is_err());
    }
}

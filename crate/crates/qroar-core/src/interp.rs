//! Position-interpolation schemes in a unified per-dimension form.
//!
//! Every supported scheme reduces to a position warp `f(m) = warp_slope * m`
//! plus per-dimension scales `s_i`, so the effective phase of pair `i` at
//! position `m` is `freq[i] * f(m) / s_i`. The named constructors (linear,
//! NTK base stretch, YaRN band segmentation, per-dimension scaling) only
//! differ in how they populate `(warp_slope, s_i)`; downstream code handles
//! exactly one representation.

use crate::error::{Error, Result};
use crate::num::{real, real_usize, Real};
use crate::rope::{rotate_pairs_in_place, FrequencySchedule, Position};

/// Which constructor produced a scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    None,
    Linear,
    Ntk,
    Yarn,
    LongRope,
}

/// Per-dimension scale storage. Dimension-independent schemes keep a single
/// uniform value so they can be applied to any schedule.
#[derive(Debug, Clone, PartialEq)]
enum Scales<T> {
    Uniform(T),
    PerDim(Vec<T>),
}

/// A position-interpolation scheme: a position warp plus per-dimension scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PiScheme<T> {
    kind: SchemeKind,
    warp_slope: T,
    scales: Scales<T>,
}

/// Default YaRN ramp thresholds on the ratio `wavelength / L0`.
///
/// Pairs with ratio at or below the low threshold are untouched; at or above
/// the high threshold they are fully interpolated; in between the slowdown
/// exponent ramps linearly in log-wavelength.
pub const YARN_RAMP_LOW: f64 = 1.0 / 32.0;
pub const YARN_RAMP_HIGH: f64 = 1.0;

impl<T: Real> PiScheme<T> {
    /// The no-op scheme: unwarped positions, unit scales.
    pub fn identity() -> Self {
        Self { kind: SchemeKind::None, warp_slope: T::one(), scales: Scales::Uniform(T::one()) }
    }

    /// Uniform position compression `m -> m * l0 / l`.
    pub fn linear(l0: u64, l: u64) -> Result<Self> {
        if l0 < 1 || l < l0 {
            return Err(Error::InvalidWindow(format!(
                "linear interpolation needs l >= l0 >= 1, got l0={l0}, l={l}"
            )));
        }
        let slope = real::<T>(l0 as f64) / real::<T>(l as f64);
        Ok(Self { kind: SchemeKind::Linear, warp_slope: slope, scales: Scales::Uniform(T::one()) })
    }

    /// Base stretch: slows pair `i` by `alpha^(2i/(dim-2))`, leaving the
    /// highest-frequency pair untouched and the lowest slowed by `alpha`.
    ///
    /// Equivalent to replacing the schedule base `b` with
    /// `b * alpha^(dim/(dim-2))`.
    pub fn ntk(sched: &FrequencySchedule<T>, alpha: T) -> Result<Self> {
        if !(alpha > T::one()) || !alpha.is_finite() {
            return Err(Error::InvalidStretch(format!("stretch must be > 1, got {alpha}")));
        }
        if sched.dim() < 4 {
            return Err(Error::InvalidDimension(format!(
                "base stretch needs dim >= 4, got {}",
                sched.dim()
            )));
        }
        let d = real_usize::<T>(sched.dim());
        let denom = d - real::<T>(2.0);
        let scales = (0..sched.half_dim())
            .map(|i| alpha.powf(real::<T>(2.0) * real_usize::<T>(i) / denom))
            .collect();
        Ok(Self { kind: SchemeKind::Ntk, warp_slope: T::one(), scales: Scales::PerDim(scales) })
    }

    /// The stretched base implied by an NTK scheme: `b * alpha^(dim/(dim-2))`.
    pub fn ntk_stretched_base(sched: &FrequencySchedule<T>, alpha: T) -> Result<T> {
        if !(alpha > T::one()) || !alpha.is_finite() {
            return Err(Error::InvalidStretch(format!("stretch must be > 1, got {alpha}")));
        }
        if sched.dim() < 4 {
            return Err(Error::InvalidDimension(format!(
                "base stretch needs dim >= 4, got {}",
                sched.dim()
            )));
        }
        let d = real_usize::<T>(sched.dim());
        Ok(sched.base() * alpha.powf(d / (d - real::<T>(2.0))))
    }

    /// Band-segmented slowdown: pair `i` gets `s_i = S^(g_i)` with
    /// `S = l / l0` and exponent `g_i` ramping from 0 (short wavelengths)
    /// to 1 (long wavelengths) linearly in log-wavelength.
    ///
    /// `ramp_low` and `ramp_high` are thresholds on `wavelength / l0`.
    pub fn yarn(
        sched: &FrequencySchedule<T>,
        l0: u64,
        l: u64,
        ramp_low: T,
        ramp_high: T,
    ) -> Result<Self> {
        if l0 < 1 || l < l0 {
            return Err(Error::InvalidWindow(format!(
                "yarn needs l >= l0 >= 1, got l0={l0}, l={l}"
            )));
        }
        if !(ramp_low < ramp_high) || !(ramp_low > T::zero()) {
            return Err(Error::InvalidRamp(format!(
                "need 0 < ramp_low < ramp_high, got {ramp_low} and {ramp_high}"
            )));
        }
        let stretch = real::<T>(l as f64) / real::<T>(l0 as f64);
        let l0_t = real::<T>(l0 as f64);
        let ln_low = (ramp_low * l0_t).ln();
        let ln_high = (ramp_high * l0_t).ln();
        let scales = sched
            .wavelengths()
            .iter()
            .map(|&lam| {
                let g = ((lam.ln() - ln_low) / (ln_high - ln_low)).max(T::zero()).min(T::one());
                stretch.powf(g)
            })
            .collect();
        Ok(Self { kind: SchemeKind::Yarn, warp_slope: T::one(), scales: Scales::PerDim(scales) })
    }

    /// Independent per-dimension scaling `s_i >= 1`.
    pub fn longrope(scales: Vec<T>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidScale("per-dimension scales must be non-empty".into()));
        }
        if let Some(bad) = scales.iter().find(|s| !(**s >= T::one()) || !s.is_finite()) {
            return Err(Error::InvalidScale(format!(
                "per-dimension scales must be finite and >= 1, got {bad}"
            )));
        }
        Ok(Self { kind: SchemeKind::LongRope, warp_slope: T::one(), scales: Scales::PerDim(scales) })
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn warp_slope(&self) -> T {
        self.warp_slope
    }

    /// Warped position `f(m) = warp_slope * m`.
    pub fn warp(&self, m: Position<T>) -> T {
        self.warp_slope * m.value()
    }

    /// The scale of dimension `i` for a schedule with `half_dim` pairs.
    pub fn scale_at(&self, i: usize, half_dim: usize) -> Result<T> {
        if i >= half_dim {
            return Err(Error::Shape(format!("dimension index {i} out of range {half_dim}")));
        }
        match &self.scales {
            Scales::Uniform(s) => Ok(*s),
            Scales::PerDim(v) => {
                if v.len() != half_dim {
                    return Err(Error::Shape(format!(
                        "scheme has {} per-dimension scales, schedule has {half_dim} pairs",
                        v.len()
                    )));
                }
                Ok(v[i])
            }
        }
    }

    /// Materialize the per-dimension scales for a schedule with `half_dim` pairs.
    pub fn scales_for(&self, half_dim: usize) -> Result<Vec<T>> {
        (0..half_dim).map(|i| self.scale_at(i, half_dim)).collect()
    }
}

/// Effective phase of pair `i` at position `m`: `freq[i] * f(m) / s_i`.
pub fn scaled_phase<T: Real>(
    scheme: &PiScheme<T>,
    sched: &FrequencySchedule<T>,
    i: usize,
    m: Position<T>,
) -> Result<T> {
    let s = scheme.scale_at(i, sched.half_dim())?;
    Ok(sched.freqs()[i] * scheme.warp(m) / s)
}

/// A schedule paired with a scheme, caching the effective frequencies
/// `freq[i] / s_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSchedule<T> {
    base: FrequencySchedule<T>,
    scheme: PiScheme<T>,
    effective_freqs: Vec<T>,
}

impl<T: Real> ScaledSchedule<T> {
    pub fn new(base: FrequencySchedule<T>, scheme: PiScheme<T>) -> Result<Self> {
        let scales = scheme.scales_for(base.half_dim())?;
        let effective_freqs =
            base.freqs().iter().zip(&scales).map(|(&f, &s)| f / s).collect();
        Ok(Self { base, scheme, effective_freqs })
    }

    pub fn base(&self) -> &FrequencySchedule<T> {
        &self.base
    }

    pub fn scheme(&self) -> &PiScheme<T> {
        &self.scheme
    }

    pub fn effective_freqs(&self) -> &[T] {
        &self.effective_freqs
    }

    /// Effective phase of pair `i` at position `m`.
    pub fn phase(&self, i: usize, m: Position<T>) -> T {
        self.effective_freqs[i] * self.scheme.warp(m)
    }

    /// Rotate `x` at position `m` under the scaled phases.
    pub fn rotate(&self, x: &[T], m: Position<T>) -> Result<Vec<T>> {
        if x.len() != self.base.dim() {
            return Err(Error::Shape(format!(
                "rotate: vector of length {} vs schedule dim {}",
                x.len(),
                self.base.dim()
            )));
        }
        let mut out = x.to_vec();
        self.rotate_in_place(&mut out, m);
        Ok(out)
    }

    /// In-place variant of [`ScaledSchedule::rotate`] for hot loops. The
    /// slice length must equal the schedule dimension.
    pub fn rotate_in_place(&self, x: &mut [T], m: Position<T>) {
        debug_assert_eq!(x.len(), self.base.dim());
        let warped = self.scheme.warp(m);
        rotate_pairs_in_place(x, |i| self.effective_freqs[i] * warped);
    }
}

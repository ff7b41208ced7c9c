//! Rotary position embeddings: frequency schedules and blockwise rotations.
//!
//! A schedule assigns one frequency per adjacent 2D coordinate pair. Rotating
//! a vector at position `p` turns pair `i` by the angle `p * freq[i]`, which
//! preserves the Euclidean norm and makes inner products of rotated queries
//! and keys depend only on the relative offset between their positions.

use crate::error::{Error, Result};
use crate::num::{real, real_usize, Real};

/// Per-pair rotation frequencies and wavelengths for one head dimension.
///
/// Constructed from a base `b`, pair `i` gets frequency `b^(-2i/dim)` and
/// wavelength `2*pi / freq`, the period of that pair's rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySchedule<T> {
    dim: usize,
    base: T,
    freqs: Vec<T>,
    wavelengths: Vec<T>,
}

impl<T: Real> FrequencySchedule<T> {
    /// Build the geometric schedule `freq[i] = base^(-2i/dim)`.
    pub fn new(dim: usize, base: T) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::InvalidDimension(format!(
                "head dimension must be even and >= 2, got {dim}"
            )));
        }
        if !(base > T::one()) || !base.is_finite() {
            return Err(Error::InvalidBase(format!("base must be finite and > 1, got {base}")));
        }
        let half = dim / 2;
        let freqs: Vec<T> = (0..half)
            .map(|i| base.powf(-real::<T>(2.0) * real_usize::<T>(i) / real_usize::<T>(dim)))
            .collect();
        let wavelengths = freqs.iter().map(|&f| T::TAU() / f).collect();
        Ok(Self { dim, base, freqs, wavelengths })
    }

    /// Build a schedule from explicit per-pair frequencies.
    ///
    /// Useful for injecting hand-picked angles in tests and for custom
    /// schedules; `base` is kept as descriptive metadata.
    pub fn from_freqs(freqs: Vec<T>, base: T) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::InvalidDimension("schedule needs at least one pair".into()));
        }
        if freqs.iter().any(|f| !(*f > T::zero()) || !f.is_finite()) {
            return Err(Error::InvalidBase("frequencies must be finite and positive".into()));
        }
        let wavelengths = freqs.iter().map(|&f| T::TAU() / f).collect();
        Ok(Self { dim: freqs.len() * 2, base, freqs, wavelengths })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_dim(&self) -> usize {
        self.dim / 2
    }

    pub fn base(&self) -> T {
        self.base
    }

    pub fn freqs(&self) -> &[T] {
        &self.freqs
    }

    pub fn wavelengths(&self) -> &[T] {
        &self.wavelengths
    }
}

/// A position index. Real-valued and non-negative; warped positions such as
/// `m * L0 / L` are fractional.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Position<T>(T);

impl<T: Real> Position<T> {
    pub fn new(index: T) -> Result<Self> {
        if !index.is_finite() || index < T::zero() {
            return Err(Error::InvalidScale(format!(
                "position must be finite and non-negative, got {index}"
            )));
        }
        Ok(Self(index))
    }

    /// Position at an integer token index.
    pub fn from_index(index: usize) -> Self {
        Self(real_usize(index))
    }

    pub fn value(self) -> T {
        self.0
    }
}

/// Rotate each adjacent pair of `x` in place, pair `i` by `angle(i)`.
pub(crate) fn rotate_pairs_in_place<T: Real>(x: &mut [T], mut angle: impl FnMut(usize) -> T) {
    for (i, pair) in x.chunks_exact_mut(2).enumerate() {
        let a = angle(i);
        let (sin, cos) = a.sin_cos();
        let x0 = pair[0];
        let x1 = pair[1];
        pair[0] = x0 * cos - x1 * sin;
        pair[1] = x0 * sin + x1 * cos;
    }
}

/// Apply the position-`p` rotation of `sched` to `x`.
pub fn rotate<T: Real>(x: &[T], p: Position<T>, sched: &FrequencySchedule<T>) -> Result<Vec<T>> {
    if x.len() != sched.dim() {
        return Err(Error::Shape(format!(
            "rotate: vector of length {} vs schedule dim {}",
            x.len(),
            sched.dim()
        )));
    }
    let mut out = x.to_vec();
    rotate_pairs_in_place(&mut out, |i| p.value() * sched.freqs[i]);
    Ok(out)
}

/// Per-pair angles of the relative rotation between positions `p` and `p_prime`.
///
/// For any `q`, `k`: `rotate(q, p) . rotate(k, p_prime)` equals
/// `q . rotate_by_angles(k, relative_rotation(p, p_prime, sched))`.
pub fn relative_rotation<T: Real>(
    p: Position<T>,
    p_prime: Position<T>,
    sched: &FrequencySchedule<T>,
) -> Vec<T> {
    let delta = p_prime.value() - p.value();
    sched.freqs.iter().map(|&f| delta * f).collect()
}

/// Rotate each adjacent pair of `x` by the corresponding explicit angle.
pub fn rotate_by_angles<T: Real>(x: &[T], angles: &[T]) -> Result<Vec<T>> {
    if x.len() != angles.len() * 2 {
        return Err(Error::Shape(format!(
            "rotate_by_angles: vector of length {} vs {} angles",
            x.len(),
            angles.len()
        )));
    }
    let mut out = x.to_vec();
    rotate_pairs_in_place(&mut out, |i| angles[i]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::{dot, norm2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    }

    #[test]
    fn schedule_dim8_is_powers_of_ten() {
        let s = FrequencySchedule::<f64>::new(8, 10000.0).unwrap();
        let expect = [1.0, 0.1, 0.01, 0.001];
        for (f, e) in s.freqs().iter().zip(expect) {
            assert!((f - e).abs() <= 1e-12 * e, "freq {f} vs {e}");
        }
    }

    #[test]
    fn schedule_dim4() {
        let s = FrequencySchedule::<f64>::new(4, 10000.0).unwrap();
        assert!((s.freqs()[0] - 1.0).abs() < 1e-15);
        assert!((s.freqs()[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(
            FrequencySchedule::<f64>::new(7, 10000.0),
            Err(Error::InvalidDimension(_))
        ));
        assert!(matches!(FrequencySchedule::<f64>::new(0, 10000.0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn bad_base_rejected() {
        assert!(matches!(FrequencySchedule::<f64>::new(8, 1.0), Err(Error::InvalidBase(_))));
        assert!(matches!(FrequencySchedule::<f64>::new(8, 0.5), Err(Error::InvalidBase(_))));
    }

    #[test]
    fn freqs_decrease_wavelengths_increase() {
        let s = FrequencySchedule::<f64>::new(64, 10000.0).unwrap();
        for w in s.freqs().windows(2) {
            assert!(w[0] > w[1]);
        }
        for w in s.wavelengths().windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn position_zero_is_identity() {
        let s = FrequencySchedule::<f64>::new(8, 10000.0).unwrap();
        let x = vec![0.3, -1.2, 0.0, 4.5, 2.0, -0.7, 1.0, 1.0];
        let y = rotate(&x, Position::new(0.0).unwrap(), &s).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn quarter_turn_on_injected_schedule() {
        let s = FrequencySchedule::from_freqs(vec![std::f64::consts::FRAC_PI_2], 10000.0).unwrap();
        let y = rotate(&[1.0, 0.0], Position::new(1.0).unwrap(), &s).unwrap();
        assert!((y[0]).abs() < 1e-15);
        assert!((y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_preserves_norm() {
        let s = FrequencySchedule::<f64>::new(64, 10000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = gauss_vec(&mut rng, 64);
            let p = Position::new(rng.gen::<f64>() * 8192.0).unwrap();
            let y = rotate(&x, p, &s).unwrap();
            assert!((norm2(&x) - norm2(&y)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = FrequencySchedule::<f64>::new(8, 10000.0).unwrap();
        assert!(matches!(
            rotate(&[1.0; 6], Position::new(1.0).unwrap(), &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn relative_rotation_zero_offset() {
        let s = FrequencySchedule::<f64>::new(8, 10000.0).unwrap();
        let angles = relative_rotation(Position::new(5.0).unwrap(), Position::new(5.0).unwrap(), &s);
        assert!(angles.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn relative_rotation_arithmetic() {
        let s = FrequencySchedule::from_freqs(vec![0.1], 10000.0).unwrap();
        let angles = relative_rotation(Position::new(3.0).unwrap(), Position::new(7.0).unwrap(), &s);
        assert!((angles[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn inner_product_depends_only_on_offset() {
        let s = FrequencySchedule::<f64>::new(32, 10000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = gauss_vec(&mut rng, 32);
            let k = gauss_vec(&mut rng, 32);
            let p = Position::new(rng.gen::<f64>() * 4096.0).unwrap();
            let pp = Position::new(rng.gen::<f64>() * 4096.0).unwrap();
            let lhs = dot(&rotate(&q, p, &s).unwrap(), &rotate(&k, pp, &s).unwrap());
            let angles = relative_rotation(p, pp, &s);
            let rhs = dot(&q, &rotate_by_angles(&k, &angles).unwrap());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn rotations_compose_additively() {
        let s = FrequencySchedule::<f64>::new(32, 10000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let x = gauss_vec(&mut rng, 32);
            let p = rng.gen::<f64>() * 2048.0;
            let pp = rng.gen::<f64>() * 2048.0;
            let once = rotate(
                &rotate(&x, Position::new(p).unwrap(), &s).unwrap(),
                Position::new(pp).unwrap(),
                &s,
            )
            .unwrap();
            let joint = rotate(&x, Position::new(p + pp).unwrap(), &s).unwrap();
            for (a, b) in once.iter().zip(&joint) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    // The complex-pair view of the same map, used only as a test oracle:
    // pair i multiplies by exp(j * p * freq[i]).
    #[test]
    fn complex_formulation_agrees() {
        let s = FrequencySchedule::<f64>::new(16, 10000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = gauss_vec(&mut rng, 16);
        let p = 123.456;
        let rotated = rotate(&x, Position::new(p).unwrap(), &s).unwrap();
        for i in 0..8 {
            let (re, im) = (x[2 * i], x[2 * i + 1]);
            let phase = p * s.freqs()[i];
            let out_re = re * phase.cos() - im * phase.sin();
            let out_im = re * phase.sin() + im * phase.cos();
            assert!((rotated[2 * i] - out_re).abs() < 1e-12);
            assert!((rotated[2 * i + 1] - out_im).abs() < 1e-12);
        }
    }

    #[test]
    fn works_in_f32_too() {
        let s = FrequencySchedule::<f32>::new(8, 10000.0).unwrap();
        let x = [1.0f32, 0.5, -0.25, 2.0, 0.0, 1.0, -1.0, 0.5];
        let y = rotate(&x, Position::new(17.0f32).unwrap(), &s).unwrap();
        assert!((norm2(&x) - norm2(&y)).abs() < 1e-5);
    }
}

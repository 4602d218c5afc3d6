//! Unitary 2-D Fourier transforms per frame and the radial band split.
//!
//! A sharp disk mask on the centered frequency grid defines the in-band
//! subspace; projecting through it and through its complement decomposes a
//! field into orthogonal smooth and detail parts. The projections are exact
//! orthogonal projections up to transform round-off, which the tests pin.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{Field, SequenceField};
use crate::real::Real;

/// Complex coefficients of one frame on the (unshifted) frequency grid,
/// under the unitary transform convention.
#[derive(Clone, Debug)]
pub struct Spectrum<T> {
    height: usize,
    width: usize,
    values: Vec<Complex<T>>,
}

impl<T: Real> Spectrum<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.values
    }

    pub fn energy(&self) -> f64 {
        self.values
            .iter()
            .map(|c| c.re.f64() * c.re.f64() + c.im.f64() * c.im.f64())
            .sum()
    }
}

/// Signed centered frequency index for row/column `i` on an `n`-grid.
#[inline]
pub fn centered_index(i: usize, n: usize) -> isize {
    let i = i as isize;
    let n = n as isize;
    if i <= (n - 1) / 2 {
        i
    } else {
        i - n
    }
}

/// Radial indicator mask `|xi| <= cutoff` on the centered frequency grid.
#[derive(Clone, Debug)]
pub struct SpectralMask {
    height: usize,
    width: usize,
    cutoff: f64,
    inside: Vec<bool>,
}

impl SpectralMask {
    /// Builds the disk mask with `cutoff` in frequency-index units.
    pub fn radial(height: usize, width: usize, cutoff: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("mask dimensions must be >= 1"));
        }
        if cutoff < 0.0 {
            return Err(Error::contract("mask cutoff must be >= 0"));
        }
        let mut inside = vec![false; height * width];
        for y in 0..height {
            let fy = centered_index(y, height) as f64;
            for x in 0..width {
                let fx = centered_index(x, width) as f64;
                inside[y * width + x] = (fy * fy + fx * fx).sqrt() <= cutoff;
            }
        }
        Ok(SpectralMask {
            height,
            width,
            cutoff,
            inside,
        })
    }

    /// Cutoff as `rho` times the Nyquist radius `min(h, w) / 2`.
    pub fn from_fraction(height: usize, width: usize, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::contract(format!(
                "cutoff fraction must lie in [0, 1], got {rho}"
            )));
        }
        let nyquist = height.min(width) as f64 / 2.0;
        Self::radial(height, width, rho * nyquist)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    #[inline]
    pub fn is_inside(&self, y: usize, x: usize) -> bool {
        self.inside[y * self.width + x]
    }

    pub fn inside_count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }
}

fn fft2_inner<T: Real>(data: &mut [Complex<T>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    let mut col = vec![Complex::new(T::zero(), T::zero()); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = data[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            data[y * width + x] = col[y];
        }
    }
}

/// Unitary 2-D transform of a single-channel field.
pub fn dft2<T: Real>(field: &Field<T>) -> Result<Spectrum<T>> {
    if field.channels() != 1 {
        return Err(Error::contract(format!(
            "dft2 expects a single-channel frame, got {} channels",
            field.channels()
        )));
    }
    let (h, w) = (field.height(), field.width());
    let mut values: Vec<Complex<T>> = field
        .data()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    fft2_inner(&mut values, h, w, false);
    let norm = T::of(1.0 / ((h * w) as f64).sqrt());
    for v in &mut values {
        *v = *v * norm;
    }
    Ok(Spectrum {
        height: h,
        width: w,
        values,
    })
}

/// Inverse unitary transform. The imaginary residue of a real field's
/// round trip stays below 1e-6 and is discarded.
pub fn idft2<T: Real>(spec: &Spectrum<T>) -> Result<Field<T>> {
    let (h, w) = (spec.height, spec.width);
    let mut values = spec.values.clone();
    fft2_inner(&mut values, h, w, true);
    let norm = T::of(1.0 / ((h * w) as f64).sqrt());
    let data: Vec<T> = values.iter().map(|c| c.re * norm).collect();
    Field::from_vec(1, h, w, data)
}

/// Largest |imaginary part| after inverse transform, for residue checks.
pub fn idft2_imag_residue<T: Real>(spec: &Spectrum<T>) -> f64 {
    let (h, w) = (spec.height, spec.width);
    let mut values = spec.values.clone();
    fft2_inner(&mut values, h, w, true);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    values
        .iter()
        .map(|c| (c.im.f64() * norm).abs())
        .fold(0.0, f64::max)
}

fn check_mask_shape<T: Real>(seq: &SequenceField<T>, mask: &SpectralMask) -> Result<()> {
    let shape = seq.frame_shape();
    if shape.channels != 1 {
        return Err(Error::contract(format!(
            "spectral projection expects single-channel frames, got {} channels",
            shape.channels
        )));
    }
    if shape.height != mask.height || shape.width != mask.width {
        return Err(Error::contract(format!(
            "mask {}x{} does not match frame {}x{}",
            mask.height, mask.width, shape.height, shape.width
        )));
    }
    Ok(())
}

fn project_frame<T: Real>(frame: &Field<T>, mask: &SpectralMask, keep_inside: bool) -> Field<T> {
    let mut spec = dft2(frame).expect("validated single-channel frame");
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.is_inside(y, x) != keep_inside {
                spec.values[y * mask.width + x] = Complex::new(T::zero(), T::zero());
            }
        }
    }
    idft2(&spec).expect("idft2 of a valid spectrum")
}

/// Projection onto the in-band subspace: mask the spectrum, invert.
pub fn project_low<T: Real>(seq: &SequenceField<T>, mask: &SpectralMask) -> Result<SequenceField<T>> {
    check_mask_shape(seq, mask)?;
    Ok(seq.map_frames(|f| project_frame(f, mask, true)))
}

/// Complementary projection: `f - project_low(f)`, computed by keeping the
/// outside coefficients so the two parts stay numerically orthogonal.
pub fn project_high<T: Real>(seq: &SequenceField<T>, mask: &SpectralMask) -> Result<SequenceField<T>> {
    check_mask_shape(seq, mask)?;
    Ok(seq.map_frames(|f| project_frame(f, mask, false)))
}

/// Squared L2 energy inside and outside the band, via the masked spectrum.
pub fn band_energy<T: Real>(seq: &SequenceField<T>, mask: &SpectralMask) -> Result<(f64, f64)> {
    check_mask_shape(seq, mask)?;
    let mut low = 0.0;
    let mut high = 0.0;
    for frame in seq.frames() {
        let spec = dft2(frame)?;
        for y in 0..mask.height {
            for x in 0..mask.width {
                let c = spec.values[y * mask.width + x];
                let e = c.re.f64() * c.re.f64() + c.im.f64() * c.im.f64();
                if mask.is_inside(y, x) {
                    low += e;
                } else {
                    high += e;
                }
            }
        }
    }
    Ok((low, high))
}

/// Fraction of total energy outside the band; 0 for an all-zero sequence.
pub fn high_band_fraction<T: Real>(seq: &SequenceField<T>, mask: &SpectralMask) -> Result<f64> {
    let (low, high) = band_energy(seq, mask)?;
    let total = low + high;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(high / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Field<f64> {
        let data = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Field::from_vec(1, h, w, data).unwrap()
    }

    fn seq_of(frame: Field<f64>) -> SequenceField<f64> {
        SequenceField::new(vec![frame]).unwrap()
    }

    #[test]
    fn constant_field_is_pure_dc() {
        let c = 0.37;
        let f = Field::constant(1, 4, 6, c);
        let spec = dft2(&f).unwrap();
        let expected = c * (24.0f64).sqrt();
        assert!((spec.values()[0].re - expected).abs() < 1e-12);
        for (i, v) in spec.values().iter().enumerate().skip(1) {
            assert!(v.norm() < 1e-12, "bin {i} not empty: {v}");
        }
    }

    #[test]
    fn two_point_transform_matches_hand_values() {
        let f = Field::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap();
        let spec = dft2(&f).unwrap();
        let s = std::f64::consts::SQRT_2;
        assert!((spec.values()[0].re - 7.0 / s).abs() < 1e-12);
        assert!((spec.values()[1].re - (-1.0 / s)).abs() < 1e-12);
        assert!(spec.values()[0].im.abs() < 1e-12);
        assert!((spec.energy() - 25.0).abs() < 1e-10);
    }

    #[test]
    fn roundtrip_and_parseval_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let f = random_frame(&mut rng, 8, 8);
            let spec = dft2(&f).unwrap();
            let back = idft2(&spec).unwrap();
            let max_err = f
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err < 1e-6, "roundtrip error {max_err}");
            assert!(idft2_imag_residue(&spec) < 1e-6);
            let rel = (f.energy() - spec.energy()).abs() / f.energy();
            assert!(rel < 1e-5, "parseval relative error {rel}");
        }
    }

    #[test]
    fn mask_is_symmetric_under_negation() {
        let mask = SpectralMask::radial(8, 6, 2.3).unwrap();
        for y in 0..8 {
            for x in 0..6 {
                let ny = (8 - y) % 8;
                let nx = (6 - x) % 6;
                assert_eq!(mask.is_inside(y, x), mask.is_inside(ny, nx));
            }
        }
    }

    #[test]
    fn constant_field_survives_any_cutoff() {
        let f = seq_of(Field::constant(1, 8, 8, 0.5));
        let mask = SpectralMask::radial(8, 8, 0.0).unwrap();
        let low = project_low(&f, &mask).unwrap();
        let err = f.sub(&low).unwrap().energy().sqrt();
        assert!(err < 1e-9);
        let high = project_high(&f, &mask).unwrap();
        assert!(high.energy().sqrt() < 1e-9);
    }

    #[test]
    fn out_of_band_cosine_is_annihilated() {
        // frequency index 3 on an 8-grid, cutoff 2: entirely out of band
        let mut f = Field::<f64>::zeros(1, 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let v = (2.0 * std::f64::consts::PI * 3.0 * x as f64 / 8.0).cos();
                f.set(0, y, x, v);
            }
        }
        let mask = SpectralMask::radial(8, 8, 2.0).unwrap();
        let low = project_low(&seq_of(f), &mask).unwrap();
        let max = low.frames()[0]
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1e-6, "leaked {max}");
    }

    #[test]
    fn projections_are_idempotent_and_complementary() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mask = SpectralMask::from_fraction(8, 8, 0.4).unwrap();
        for _ in 0..20 {
            let f = seq_of(random_frame(&mut rng, 8, 8));
            let low = project_low(&f, &mask).unwrap();
            let low2 = project_low(&low, &mask).unwrap();
            assert!(low.sub(&low2).unwrap().energy().sqrt() < 1e-6);

            let high = project_high(&f, &mask).unwrap();
            let sum = low.add(&high).unwrap();
            assert!(f.sub(&sum).unwrap().energy().sqrt() < 1e-6);

            // orthogonality and the energy identity
            let inner = low.dot(&high).unwrap();
            assert!(inner.abs() / f.energy() < 1e-5);
            let total = f.energy();
            let parts = low.energy() + high.energy();
            assert!((total - parts).abs() / total < 1e-5);

            // composing the two projections yields the zero field
            let cross = project_low(&high, &mask).unwrap();
            assert!(cross.energy().sqrt() <= 1e-6);
        }
    }

    #[test]
    fn band_energy_matches_projection_energies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = SpectralMask::from_fraction(16, 16, 0.25).unwrap();
        let f = seq_of(random_frame(&mut rng, 16, 16));
        let (lo, hi) = band_energy(&f, &mask).unwrap();
        let lo_direct = project_low(&f, &mask).unwrap().energy();
        let hi_direct = project_high(&f, &mask).unwrap().energy();
        assert!((lo - lo_direct).abs() / lo_direct.max(1e-12) < 1e-6);
        assert!((hi - hi_direct).abs() / hi_direct.max(1e-12) < 1e-6);
        assert!((lo + hi - f.energy()).abs() / f.energy() < 1e-5);
    }

    #[test]
    fn zero_sequence_has_zero_band_energy() {
        let mask = SpectralMask::radial(8, 8, 2.0).unwrap();
        let z = SequenceField::<f64>::zeros(3, 1, 8, 8);
        assert_eq!(band_energy(&z, &mask).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn in_band_cosine_keeps_all_energy() {
        let mut f = Field::<f64>::zeros(1, 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                f.set(0, y, x, (2.0 * std::f64::consts::PI * x as f64 / 8.0).cos());
            }
        }
        let mask = SpectralMask::radial(8, 8, 2.0).unwrap();
        let total = f.energy();
        let (lo, hi) = band_energy(&seq_of(f), &mask).unwrap();
        assert!((lo - total).abs() / total < 1e-10);
        assert!(hi < 1e-10);
    }

    #[test]
    fn mask_shape_mismatch_is_contract_violation() {
        let mask = SpectralMask::radial(8, 8, 2.0).unwrap();
        let f = SequenceField::<f64>::zeros(1, 1, 4, 4);
        assert!(project_low(&f, &mask).is_err());
    }
}

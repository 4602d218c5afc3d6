//! Numerical verification of the spectral-capacity arguments behind the
//! dual-band split: polynomial Fourier decay of bounded-variation kernels,
//! the composite envelope of stacked convolutions, the capacity lower bound
//! against high-band targets, and the orthogonal two-stage error identity.
//!
//! Kernels are analyzed as discrete tap arrays; their transform is sampled
//! densely on the centered frequency grid of a reference data size, so these
//! checks and the projection masks share one frequency coordinate system.

use crate::error::{Error, Result};
use crate::grid::{Field, SequenceField};
use crate::real::Real;
use crate::spectral::{project_high, project_low, SpectralMask};

/// Frequency-sampling context for the kernel analyses.
#[derive(Clone, Copy, Debug)]
pub struct LabConfig {
    /// Data grid size the frequency axis refers to; index units match
    /// [`SpectralMask`] on this grid.
    pub ref_grid: usize,
    /// Samples per frequency axis over one period.
    pub freq_samples: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            ref_grid: 32,
            freq_samples: 128,
        }
    }
}

/// Discrete total variation: absolute first differences along each axis of
/// extent >= 2, with one implicit zero sample on each side (compact
/// support). Singleton axes contribute nothing, so a genuinely 1-D kernel
/// is scored as 1-D regardless of its grid embedding.
pub fn total_variation<T: Real>(kernel: &Field<T>) -> f64 {
    let (c, h, w) = (kernel.channels(), kernel.height(), kernel.width());
    let mut tv = 0.0;
    for ch in 0..c {
        if w >= 2 {
            for y in 0..h {
                let mut prev = 0.0;
                for x in 0..w {
                    let v = kernel.get(ch, y, x).f64();
                    tv += (v - prev).abs();
                    prev = v;
                }
                tv += prev.abs();
            }
        }
        if h >= 2 {
            for x in 0..w {
                let mut prev = 0.0;
                for y in 0..h {
                    let v = kernel.get(ch, y, x).f64();
                    tv += (v - prev).abs();
                    prev = v;
                }
                tv += prev.abs();
            }
        }
    }
    tv
}

/// |k_hat| sampled on the centered frequency grid, together with the radial
/// index distance per sample.
struct SampledTransform {
    magnitudes: Vec<f64>,
    radii: Vec<f64>,
}

fn sample_transform<T: Real>(kernel: &Field<T>, cfg: &LabConfig) -> SampledTransform {
    let s = cfg.freq_samples;
    let n = cfg.ref_grid as f64;
    let (c, h, w) = (kernel.channels(), kernel.height(), kernel.width());
    debug_assert_eq!(c, 1, "kernel analysis expects single-channel planes");
    let cy = (h as isize - 1) / 2;
    let cx = (w as isize - 1) / 2;
    let mut magnitudes = Vec::with_capacity(s * s);
    let mut radii = Vec::with_capacity(s * s);
    let step = n / s as f64;
    for j in 0..s {
        let u = -n / 2.0 + j as f64 * step;
        for i in 0..s {
            let v = -n / 2.0 + i as f64 * step;
            let mut re = 0.0;
            let mut im = 0.0;
            for y in 0..h {
                let dy = (y as isize - cy) as f64;
                for x in 0..w {
                    let kv = kernel.get(0, y, x).f64();
                    if kv == 0.0 {
                        continue;
                    }
                    let dx = (x as isize - cx) as f64;
                    let phase = -2.0 * std::f64::consts::PI * (u * dy + v * dx) / n;
                    re += kv * phase.cos();
                    im += kv * phase.sin();
                }
            }
            magnitudes.push((re * re + im * im).sqrt());
            radii.push((u * u + v * v).sqrt());
        }
    }
    SampledTransform { magnitudes, radii }
}

/// A kernel together with its variation and measured decay constant.
#[derive(Clone, Debug)]
pub struct KernelProfile {
    pub name: String,
    pub tv: f64,
    /// max over sampled frequencies of |k_hat(xi)| * (1 + |xi|).
    pub decay_constant: f64,
    /// Radius (fraction of the max sampled radius) where the constant is
    /// attained. Near 1.0 means the spectrum is not decaying (the flat
    /// single-tap edge case).
    pub peak_radius_fraction: f64,
}

/// Measures the Fourier-decay constant of a compactly supported kernel by
/// dense sampling of |k_hat(xi)| * (1 + |xi|).
pub fn decay_constant<T: Real>(kernel: &Field<T>, cfg: &LabConfig) -> f64 {
    let sampled = sample_transform(kernel, cfg);
    sampled
        .magnitudes
        .iter()
        .zip(&sampled.radii)
        .map(|(m, r)| m * (1.0 + r))
        .fold(0.0, f64::max)
}

pub fn profile_kernel<T: Real>(name: &str, kernel: &Field<T>, cfg: &LabConfig) -> KernelProfile {
    let sampled = sample_transform(kernel, cfg);
    let r_max = sampled.radii.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut best = 0.0;
    let mut best_r = 0.0;
    for (m, r) in sampled.magnitudes.iter().zip(&sampled.radii) {
        let v = m * (1.0 + r);
        if v > best {
            best = v;
            best_r = *r;
        }
    }
    KernelProfile {
        name: name.to_string(),
        tv: total_variation(kernel),
        decay_constant: best,
        peak_radius_fraction: if r_max > 0.0 { best_r / r_max } else { 0.0 },
    }
}

/// Envelope check of a convolution stack's composite frequency response.
#[derive(Clone, Debug)]
pub struct EnvelopeReport {
    pub depth: usize,
    /// Max over layers of the per-layer decay constant.
    pub constant: f64,
    /// Samples where |H_L| * (1+|xi|)^L exceeds constant^L.
    pub violations: usize,
    /// Least-squares slope of log(annulus max of |H_L|) against
    /// log(1 + |xi|) beyond half the Nyquist radius. NaN when the tail is
    /// entirely zero.
    pub tail_slope: f64,
    pub samples_per_axis: usize,
}

/// Multiplies the layers' sampled transforms and checks the product against
/// `C^L (1 + |xi|)^{-L}` with C the max per-layer constant.
pub fn composite_envelope<T: Real>(kernels: &[Field<T>], cfg: &LabConfig) -> Result<EnvelopeReport> {
    if kernels.is_empty() {
        return Err(Error::contract("composite_envelope needs at least one kernel"));
    }
    let depth = kernels.len();
    let sampled: Vec<SampledTransform> = kernels.iter().map(|k| sample_transform(k, cfg)).collect();
    let mut constant = 0.0f64;
    for s in &sampled {
        let c = s
            .magnitudes
            .iter()
            .zip(&s.radii)
            .map(|(m, r)| m * (1.0 + r))
            .fold(0.0, f64::max);
        constant = constant.max(c);
    }

    let n_samples = sampled[0].magnitudes.len();
    let mut product = vec![1.0f64; n_samples];
    for s in &sampled {
        for (p, m) in product.iter_mut().zip(&s.magnitudes) {
            *p *= m;
        }
    }

    let radii = &sampled[0].radii;
    let bound_c = constant.powi(depth as i32);
    let mut violations = 0;
    for (p, r) in product.iter().zip(radii) {
        // tiny relative slack for float rounding of the products
        if p * (1.0 + r).powi(depth as i32) > bound_c * (1.0 + 1e-9) {
            violations += 1;
        }
    }

    // Annulus maxima in integer-radius bins, then a log-log fit on the tail.
    let half_nyquist = cfg.ref_grid as f64 / 4.0;
    let max_r = radii.iter().fold(0.0f64, |a, &b| a.max(b));
    let n_bins = max_r.ceil() as usize + 1;
    let mut bins = vec![0.0f64; n_bins];
    for (p, r) in product.iter().zip(radii) {
        let b = r.floor() as usize;
        bins[b] = bins[b].max(*p);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (b, &m) in bins.iter().enumerate() {
        let r_center = b as f64 + 0.5;
        if r_center > half_nyquist && m > 0.0 {
            xs.push((1.0 + r_center).ln());
            ys.push(m.ln());
        }
    }
    let tail_slope = least_squares_slope(&xs, &ys);

    Ok(EnvelopeReport {
        depth,
        constant,
        violations,
        tail_slope,
        samples_per_axis: cfg.freq_samples,
    })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Empirical out-of-band gain of a model: the supremum over probes of
/// high-band output energy relative to probe energy. Sound only relative to
/// the probe set, so callers must include every input they later certify.
pub fn measure_leakage<T, F>(
    model: F,
    probes: &[SequenceField<T>],
    mask: &SpectralMask,
) -> Result<f64>
where
    T: Real,
    F: Fn(&SequenceField<T>) -> Result<SequenceField<T>>,
{
    if probes.is_empty() {
        return Err(Error::contract("leakage needs at least one probe"));
    }
    let mut eps = 0.0f64;
    for probe in probes {
        let denom = probe.energy();
        if denom == 0.0 {
            return Err(Error::contract("leakage probe has zero energy"));
        }
        let out = model(probe)?;
        let high = project_high(&out, mask)?;
        eps = eps.max(high.energy() / denom);
    }
    Ok(eps)
}

/// The capacity lower bound `[ ||Y_high|| - sqrt(eps) ||Y0|| ]_+` together
/// with an optional measured model error for comparison.
#[derive(Clone, Debug)]
pub struct BottleneckCertificate {
    pub target_high_norm: f64,
    pub input_norm: f64,
    pub leakage: f64,
    pub bound: f64,
    pub measured_error: Option<f64>,
}

impl BottleneckCertificate {
    /// True when either no measurement is attached or it respects the bound.
    pub fn holds(&self) -> bool {
        match self.measured_error {
            Some(m) => m >= self.bound - 1e-12,
            None => true,
        }
    }
}

/// Evaluates the capacity bound for a target/input pair at a measured
/// leakage level.
pub fn bottleneck_bound<T: Real>(
    target: &SequenceField<T>,
    input: &SequenceField<T>,
    mask: &SpectralMask,
    leakage: f64,
) -> Result<BottleneckCertificate> {
    if leakage < 0.0 {
        return Err(Error::contract("leakage must be >= 0"));
    }
    let (_, high_energy) = crate::spectral::band_energy(target, mask)?;
    let high_norm = high_energy.sqrt();
    let input_norm = input.energy().sqrt();
    let bound = (high_norm - leakage.sqrt() * input_norm).max(0.0);
    Ok(BottleneckCertificate {
        target_high_norm: high_norm,
        input_norm,
        leakage,
        bound,
        measured_error: None,
    })
}

/// Both sides of the orthogonal two-stage error identity.
#[derive(Clone, Debug)]
pub struct TwoStageReport {
    /// ||Y - g1 - g2||^2
    pub joint: f64,
    /// ||Y_low - g1||^2 + ||Y_high - g2||^2
    pub split: f64,
}

impl TwoStageReport {
    pub fn relative_gap(&self) -> f64 {
        (self.joint - self.split).abs() / self.joint.max(self.split).max(1e-30)
    }
}

/// Checks that a joint error against `target` splits exactly into per-band
/// errors. The estimates are projected into their subspaces first, which is
/// the identity for compliant inputs.
pub fn two_stage_identity_check<T: Real>(
    target: &SequenceField<T>,
    g1: &SequenceField<T>,
    g2: &SequenceField<T>,
    mask: &SpectralMask,
) -> Result<TwoStageReport> {
    let g1 = project_low(g1, mask)?;
    let g2 = project_high(g2, mask)?;
    let target_low = project_low(target, mask)?;
    let target_high = project_high(target, mask)?;
    let joint = target.sub(&g1.add(&g2)?)?.energy();
    let split = target_low.sub(&g1)?.energy() + target_high.sub(&g2)?.energy();
    Ok(TwoStageReport { joint, split })
}

/// The standard smoothing-kernel battery used by the verification report.
/// All entries are compactly supported with finite total variation.
pub fn kernel_battery() -> Vec<(String, Field<f64>)> {
    let mut battery = Vec::new();
    battery.push(("box3".to_string(), box_kernel(3)));
    battery.push(("box7".to_string(), box_kernel(7)));
    battery.push(("triangle5".to_string(), triangle_kernel(5)));
    battery.push(("gauss_sigma1.2".to_string(), gaussian_kernel(9, 1.2)));
    battery.push(("gauss_sigma2.0".to_string(), gaussian_kernel(9, 2.0)));
    battery.push(("single_tap".to_string(), single_tap()));
    battery
}

/// Smooth members of the battery whose sampled spectra decay monotonically
/// through Nyquist; these carry the tail-slope assertion. Periodic-spectrum
/// kernels (boxes, triangles) satisfy the envelope bound but their sampled
/// transforms ripple near Nyquist, so they are excluded from the slope fit.
pub fn slope_battery() -> Vec<(String, Field<f64>)> {
    vec![
        ("gauss_sigma1.2".to_string(), gaussian_kernel(9, 1.2)),
        ("gauss_sigma1.6".to_string(), gaussian_kernel(9, 1.6)),
        ("gauss_sigma2.0".to_string(), gaussian_kernel(9, 2.0)),
    ]
}

pub fn box_kernel(extent: usize) -> Field<f64> {
    let v = 1.0 / (extent * extent) as f64;
    Field::constant(1, extent, extent, v)
}

pub fn triangle_kernel(extent: usize) -> Field<f64> {
    let r = (extent - 1) / 2;
    let mut f = Field::zeros(1, extent, extent);
    let mut sum = 0.0;
    for y in 0..extent {
        for x in 0..extent {
            let wy = (r + 1) as f64 - (y as isize - r as isize).abs() as f64;
            let wx = (r + 1) as f64 - (x as isize - r as isize).abs() as f64;
            let v = wy * wx;
            f.set(0, y, x, v);
            sum += v;
        }
    }
    f.map(|v| v / sum)
}

pub fn gaussian_kernel(extent: usize, sigma: f64) -> Field<f64> {
    let r = (extent - 1) / 2;
    let mut f = Field::zeros(1, extent, extent);
    let mut sum = 0.0;
    for y in 0..extent {
        for x in 0..extent {
            let dy = y as f64 - r as f64;
            let dx = x as f64 - r as f64;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            f.set(0, y, x, v);
            sum += v;
        }
    }
    f.map(|v| v / sum)
}

pub fn single_tap() -> Field<f64> {
    Field::constant(1, 1, 1, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tv_of_one_dimensional_kernel_by_hand() {
        let k = Field::from_vec(1, 1, 4, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(total_variation(&k), 2.0);
    }

    #[test]
    fn tv_of_zero_kernel_is_zero_and_scales_linearly() {
        let z = Field::<f64>::zeros(1, 3, 3);
        assert_eq!(total_variation(&z), 0.0);
        let k = gaussian_kernel(5, 1.0);
        let tv = total_variation(&k);
        let tv3 = total_variation(&k.scale(3.0));
        assert!((tv3 - 3.0 * tv).abs() < 1e-12);
    }

    #[test]
    fn box_kernel_constant_is_bounded_by_sinc_envelope() {
        // |D(nu)| <= 1 / (w * 2|nu|) for |nu| <= 1/2 per axis, so the
        // decay-weighted magnitude stays under (1 + r_max) / (2 w nu_min ...)
        // in the worst case; a loose explicit cap suffices here.
        let cfg = LabConfig::default();
        let c = decay_constant(&box_kernel(7), &cfg);
        assert!(c.is_finite());
        // DC contributes 1 * (1 + 0) = 1; decay keeps the axis peaks near
        // the first sidelobe, far below the flat-spectrum worst case.
        let flat_worst = 1.0 + (2.0f64).sqrt() * cfg.ref_grid as f64 / 2.0;
        assert!(c < flat_worst, "constant {c} vs flat bound {flat_worst}");
        assert!(c >= 1.0);
    }

    #[test]
    fn single_tap_has_flat_spectrum() {
        let cfg = LabConfig::default();
        let profile = profile_kernel("single", &single_tap(), &cfg);
        // constant grows to the edge of the sampled range
        let r_max_expect = 1.0 + (2.0f64).sqrt() * 16.0;
        assert!(profile.decay_constant > 0.9 * r_max_expect);
        assert!(profile.peak_radius_fraction > 0.95);
    }

    #[test]
    fn doubling_amplitude_doubles_the_constant() {
        let cfg = LabConfig::default();
        let k = gaussian_kernel(7, 1.5);
        let c1 = decay_constant(&k, &cfg);
        let c2 = decay_constant(&k.scale(2.0), &cfg);
        assert!((c2 - 2.0 * c1).abs() < 1e-9 * c1.max(1.0));
    }

    #[test]
    fn constants_are_stable_under_density_doubling() {
        let base = LabConfig::default();
        let dense = LabConfig {
            freq_samples: base.freq_samples * 2,
            ..base
        };
        for (name, k) in kernel_battery() {
            let c1 = decay_constant(&k, &base);
            let c2 = decay_constant(&k, &dense);
            let rel = (c2 - c1).abs() / c1;
            assert!(rel < 0.05, "{name}: {c1} vs {c2} (rel {rel})");
        }
    }

    #[test]
    fn envelope_has_zero_violations_by_construction() {
        let cfg = LabConfig::default();
        for (name, k) in kernel_battery() {
            for depth in 1..=3 {
                let stack: Vec<Field<f64>> = (0..depth).map(|_| k.clone()).collect();
                let report = composite_envelope(&stack, &cfg).unwrap();
                assert_eq!(report.violations, 0, "{name} depth {depth}");
            }
        }
    }

    #[test]
    fn smooth_kernel_stacks_decay_at_least_linearly_per_layer() {
        let cfg = LabConfig::default();
        for (name, k) in slope_battery() {
            for depth in 1..=3usize {
                let stack: Vec<Field<f64>> = (0..depth).map(|_| k.clone()).collect();
                let report = composite_envelope(&stack, &cfg).unwrap();
                let required = -(depth as f64) + 0.25;
                assert!(
                    report.tail_slope <= required,
                    "{name} depth {depth}: slope {} vs {required}",
                    report.tail_slope
                );
            }
        }
    }

    #[test]
    fn triple_stack_is_cube_of_single_transform() {
        let cfg = LabConfig {
            ref_grid: 16,
            freq_samples: 32,
        };
        let k = gaussian_kernel(5, 1.0);
        let single = sample_transform(&k, &cfg);
        let stack: Vec<Field<f64>> = (0..3).map(|_| k.clone()).collect();
        let sampled: Vec<SampledTransform> =
            stack.iter().map(|k| sample_transform(k, &cfg)).collect();
        for i in 0..single.magnitudes.len() {
            let prod = sampled.iter().map(|s| s.magnitudes[i]).product::<f64>();
            let cube = single.magnitudes[i].powi(3);
            assert!((prod - cube).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_layer_annihilates_the_envelope() {
        let cfg = LabConfig {
            ref_grid: 16,
            freq_samples: 32,
        };
        let stack = vec![gaussian_kernel(5, 1.0), Field::zeros(1, 3, 3)];
        let report = composite_envelope(&stack, &cfg).unwrap();
        assert_eq!(report.violations, 0);
        assert!(report.tail_slope.is_nan());
    }

    #[test]
    fn empty_kernel_list_is_rejected() {
        let cfg = LabConfig::default();
        assert!(composite_envelope::<f64>(&[], &cfg).is_err());
    }

    #[test]
    fn leakage_of_projection_is_zero_and_of_identity_matches_band_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mask = SpectralMask::from_fraction(16, 16, 0.25).unwrap();
        let probes: Vec<SequenceField<f64>> = (0..4)
            .map(|_| {
                let data = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
                SequenceField::new(vec![Field::from_vec(1, 16, 16, data).unwrap()]).unwrap()
            })
            .collect();

        let mask_proj = mask.clone();
        let eps_proj =
            measure_leakage(|f| project_low(f, &mask_proj), &probes, &mask).unwrap();
        assert!(eps_proj < 1e-12);

        let eps_id = measure_leakage(|f| Ok(f.clone()), &probes, &mask).unwrap();
        let expected = probes
            .iter()
            .map(|p| {
                let (_, hi) = crate::spectral::band_energy(p, &mask).unwrap();
                hi / p.energy()
            })
            .fold(0.0f64, f64::max);
        assert!((eps_id - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_energy_probe_is_rejected() {
        let mask = SpectralMask::radial(8, 8, 2.0).unwrap();
        let probes = vec![SequenceField::<f64>::zeros(1, 1, 8, 8)];
        assert!(measure_leakage(|f| Ok(f.clone()), &probes, &mask).is_err());
    }

    #[test]
    fn bottleneck_bound_arithmetic() {
        // ||Y_high|| = 3, ||Y0|| = 4, eps = 0.25 -> bound = 3 - 0.5 * 4 = 1
        let mask = SpectralMask::radial(8, 8, 2.0).unwrap();
        // build a target whose high-band norm is exactly 3: out-of-band cosine
        let mut f = Field::<f64>::zeros(1, 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                f.set(0, y, x, (2.0 * std::f64::consts::PI * 3.0 * x as f64 / 8.0).cos());
            }
        }
        let norm = f.energy().sqrt();
        let target = SequenceField::new(vec![f.scale(3.0 / norm)]).unwrap();
        let mut input_frame = Field::<f64>::zeros(1, 8, 8);
        input_frame.set(0, 0, 0, 4.0);
        let input = SequenceField::new(vec![input_frame]).unwrap();

        let cert = bottleneck_bound(&target, &input, &mask, 0.25).unwrap();
        assert!((cert.bound - 1.0).abs() < 1e-9, "bound {}", cert.bound);

        // eps = 0 pins the bound to the high-band norm
        let cert0 = bottleneck_bound(&target, &input, &mask, 0.0).unwrap();
        assert!((cert0.bound - 3.0).abs() < 1e-9);

        // fully in-band target clamps at zero
        let flat = SequenceField::new(vec![Field::constant(1, 8, 8, 0.5)]).unwrap();
        let cert_flat = bottleneck_bound(&flat, &input, &mask, 0.25).unwrap();
        assert_eq!(cert_flat.bound, 0.0);
    }

    #[test]
    fn bottleneck_bound_is_monotone() {
        let mask = SpectralMask::radial(8, 8, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target =
            SequenceField::new(vec![Field::from_vec(1, 8, 8, data.clone()).unwrap()]).unwrap();
        let input = SequenceField::new(vec![Field::constant(1, 8, 8, 0.3)]).unwrap();

        let b1 = bottleneck_bound(&target, &input, &mask, 0.01).unwrap().bound;
        let b2 = bottleneck_bound(&target, &input, &mask, 0.04).unwrap().bound;
        assert!(b2 <= b1);

        // doubling the target's high band never decreases the bound
        let bigger = target.scale(2.0);
        let b3 = bottleneck_bound(&bigger, &input, &mask, 0.01).unwrap().bound;
        assert!(b3 >= b1);
    }

    #[test]
    fn two_stage_identity_on_exact_decomposition_and_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mask = SpectralMask::from_fraction(16, 16, 0.25).unwrap();
        let random_seq = |rng: &mut ChaCha8Rng| {
            let data = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
            SequenceField::new(vec![Field::from_vec(1, 16, 16, data).unwrap()]).unwrap()
        };

        let y = random_seq(&mut rng);
        let y_low = project_low(&y, &mask).unwrap();
        let y_high = project_high(&y, &mask).unwrap();

        // exact decomposition: both sides vanish
        let exact = two_stage_identity_check(&y, &y_low, &y_high, &mask).unwrap();
        assert!(exact.joint < 1e-12);
        assert!(exact.split < 1e-12);

        // g2 = 0: both sides equal ||Y_low - g1||^2 + ||Y_high||^2
        let g1 = project_low(&random_seq(&mut rng), &mask).unwrap();
        let zero = SequenceField::<f64>::zeros(1, 1, 16, 16);
        let r = two_stage_identity_check(&y, &g1, &zero, &mask).unwrap();
        let expect = y_low.sub(&g1).unwrap().energy() + y_high.energy();
        assert!((r.joint - expect).abs() / expect < 1e-9);
        assert!(r.relative_gap() < 1e-5);

        for _ in 0..50 {
            let g1 = random_seq(&mut rng);
            let g2 = random_seq(&mut rng);
            let rep = two_stage_identity_check(&y, &g1, &g2, &mask).unwrap();
            assert!(rep.relative_gap() < 1e-5, "gap {}", rep.relative_gap());
        }
    }
}

//! Noise schedules, the closed-form forward corruption, the noise-matching
//! training objective, and ancestral reverse sampling. Both band branches
//! share this machinery; they differ only in the denoiser they plug in.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{Field, ParamSet, SequenceField, Tape, Var};
use crate::real::Real;

/// Per-step variances and their cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta interpolation over `t_steps` steps.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps < 1 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::contract(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Desk-scale default: 50 steps ending near-noise (final cumulative
    /// signal fraction below 0.05).
    pub fn default_desk() -> Self {
        Self::linear(50, 1e-4, 0.12).expect("valid default schedule")
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    /// 1-based step accessors matching the forward-process indexing.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps() {
            return Err(Error::contract(format!(
                "timestep {t} outside schedule range 1..={}",
                self.t_steps()
            )));
        }
        Ok(())
    }
}

/// One corrupted state with the noise that produced it.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub noised: SequenceField<f64>,
    pub t: usize,
    pub noise: SequenceField<f64>,
}

/// Unit-normal noise with the given sequence shape.
pub fn sample_noise(
    s: usize,
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> SequenceField<f64> {
    let frames = (0..s)
        .map(|_| {
            let data = (0..channels * height * width)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            Field::from_vec(channels, height, width, data).expect("finite noise")
        })
        .collect();
    SequenceField::new(frames).expect("nonempty noise")
}

/// Closed-form forward corruption:
/// `sqrt(abar_t) * y0 + sqrt(1 - abar_t) * noise`.
pub fn q_sample(
    y0: &SequenceField<f64>,
    t: usize,
    noise: &SequenceField<f64>,
    sched: &NoiseSchedule,
) -> Result<SequenceField<f64>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    y0.scale(ab.sqrt()).add(&noise.scale((1.0 - ab).sqrt()))
}

/// A denoiser whose forward pass is recorded on a tape, so the objective
/// below is differentiable with respect to its parameters.
pub trait TapeDenoiser<T: Real> {
    /// Predicts the injected noise for a corrupted state at step `t`.
    /// Returns one variable per frame.
    fn predict_on_tape(
        &self,
        tape: &Tape<T>,
        params: &ParamSet<T>,
        noised: &SequenceField<T>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Vec<Var>>;
}

/// Noise-matching objective at a fixed (t, noise) draw: mean squared error
/// between the injected and predicted noise over all elements.
pub fn denoise_loss_at<T: Real, M: TapeDenoiser<T>>(
    tape: &Tape<T>,
    params: &ParamSet<T>,
    model: &M,
    y0: &SequenceField<f64>,
    t: usize,
    noise: &SequenceField<f64>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let noised = q_sample(y0, t, noise, sched)?.cast::<T>();
    let pred = model.predict_on_tape(tape, params, &noised, t, sched)?;
    if pred.len() != y0.len() {
        return Err(Error::contract(format!(
            "denoiser produced {} frames for a {}-frame target",
            pred.len(),
            y0.len()
        )));
    }
    let joined = tape.concat_channels(&pred)?;
    if !tape.value_raw(joined).iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("denoiser produced non-finite output"));
    }
    let target: Vec<T> = noise
        .frames()
        .iter()
        .flat_map(|f| f.data().iter().map(|v| T::of(v.f64())))
        .collect();
    tape.mse_vs(joined, &target)
}

/// Noise-matching objective with (t, noise) drawn from `rng`.
pub fn denoise_loss<T: Real, M: TapeDenoiser<T>>(
    tape: &Tape<T>,
    params: &ParamSet<T>,
    model: &M,
    y0: &SequenceField<f64>,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Var> {
    let t = rng.gen_range(1..=sched.t_steps());
    let shape = y0.frame_shape();
    let noise = sample_noise(y0.len(), shape.channels, shape.height, shape.width, rng);
    denoise_loss_at(tape, params, model, y0, t, &noise, sched)
}

/// A denoiser evaluated as plain data, for sampling.
pub trait NoisePredictor {
    fn predict(
        &self,
        noised: &SequenceField<f64>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<SequenceField<f64>>;
}

/// Ancestral reverse sampling from pure noise:
/// `y_{t-1} = (y_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t) + sigma_t z`
/// with the posterior `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`
/// and no injection at the final step.
pub fn ddpm_sample<M: NoisePredictor>(
    model: &M,
    sched: &NoiseSchedule,
    s: usize,
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<SequenceField<f64>> {
    let mut y = sample_noise(s, channels, height, width, rng);
    for t in (1..=sched.t_steps()).rev() {
        let eps = model.predict(&y, t, sched)?;
        if !eps.all_finite() {
            return Err(Error::numeric(format!(
                "denoiser produced non-finite noise estimate at step {t}"
            )));
        }
        let ab = sched.alpha_bar(t);
        let coef = sched.beta(t) / (1.0 - ab).sqrt();
        let mean = y
            .sub(&eps.scale(coef))?
            .scale(1.0 / sched.alpha(t).sqrt());
        y = if t > 1 {
            let ab_prev = sched.alpha_bar(t - 1);
            let sigma = (sched.beta(t) * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let z = sample_noise(s, channels, height, width, rng);
            mean.add(&z.scale(sigma))?
        } else {
            mean
        };
    }
    Ok(y)
}

/// Sinusoidal step embedding shared by the branch denoisers.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut emb = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half.max(1) as f64);
        let angle = t as f64 * freq;
        emb[i] = angle.sin();
        emb[half + i] = angle.cos();
    }
    emb
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_seq(s: usize, h: usize, w: usize, v: f64) -> SequenceField<f64> {
        SequenceField::new((0..s).map(|_| Field::constant(1, h, w, v)).collect()).unwrap()
    }

    #[test]
    fn schedule_products_match_hand_values() {
        let one = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1), 0.5);

        let two = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(two.alpha_bar(1), 0.5);
        assert_eq!(two.alpha_bar(2), 0.25);
    }

    #[test]
    fn default_schedule_is_monotone_and_ends_near_noise() {
        let s = NoiseSchedule::default_desk();
        assert_eq!(s.t_steps(), 50);
        for t in 2..=s.t_steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(
            s.alpha_bar(s.t_steps()) < 0.05,
            "final signal fraction {}",
            s.alpha_bar(s.t_steps())
        );
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_affine_combination() {
        // abar = 0.25 at t=2 of the (0.5, 0.5) schedule; zero noise halves y0
        let sched = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let y0 = constant_seq(2, 4, 4, 1.0);
        let zero = constant_seq(2, 4, 4, 0.0);
        let yt = q_sample(&y0, 2, &zero, &sched).unwrap();
        for f in yt.frames() {
            assert!(f.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
        assert!(q_sample(&y0, 3, &zero, &sched).is_err());
        assert!(q_sample(&y0, 0, &zero, &sched).is_err());
    }

    #[test]
    fn near_zero_beta_keeps_y0() {
        let sched = NoiseSchedule::linear(4, 1e-9, 1e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y0 = constant_seq(1, 4, 4, 0.8);
        let noise = sample_noise(1, 1, 4, 4, &mut rng);
        let yt = q_sample(&y0, 4, &noise, &sched).unwrap();
        let err = yt.sub(&y0).unwrap().energy().sqrt();
        assert!(err < 1e-3, "deviation {err}");
    }

    #[test]
    fn stepwise_chain_matches_closed_form_statistics() {
        // Y2 via two single-step transitions vs the closed form, 1e4 trials.
        let sched = NoiseSchedule::linear(2, 0.2, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y0 = 0.7f64;
        let trials = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let z1: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let z2: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let y1 = (1.0 - sched.beta(1)).sqrt() * y0 + sched.beta(1).sqrt() * z1;
            let y2 = (1.0 - sched.beta(2)).sqrt() * y1 + sched.beta(2).sqrt() * z2;
            sum += y2;
            sum_sq += y2 * y2;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        let expect_mean = sched.alpha_bar(2).sqrt() * y0;
        let expect_var = 1.0 - sched.alpha_bar(2);
        let se_mean = expect_var.sqrt() / (trials as f64).sqrt();
        let se_var = expect_var * (2.0 / (trials as f64 - 1.0)).sqrt();
        assert!(
            (mean - expect_mean).abs() < 3.0 * se_mean,
            "mean {mean} vs {expect_mean} (se {se_mean})"
        );
        assert!(
            (var - expect_var).abs() < 3.0 * se_var,
            "var {var} vs {expect_var} (se {se_var})"
        );
    }

    #[test]
    fn corrupted_state_energy_matches_expectation() {
        // E||Y^t||^2 = abar ||Y0||^2 + (1 - abar) N over N elements
        let sched = NoiseSchedule::default_desk();
        let t = 25;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y0 = constant_seq(1, 8, 8, 0.6);
        let n = 64.0;
        let trials = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let noise = sample_noise(1, 1, 8, 8, &mut rng);
            let yt = q_sample(&y0, t, &noise, &sched).unwrap();
            let e = yt.energy();
            sum += e;
            sum_sq += e * e;
        }
        let mean = sum / trials as f64;
        let expect = sched.alpha_bar(t) * y0.energy() + (1.0 - sched.alpha_bar(t)) * n;
        let sample_var = sum_sq / trials as f64 - mean * mean;
        let se = sample_var.sqrt() / (trials as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se,
            "mean {mean} vs {expect} (se {se})"
        );
    }

    /// Oracle stub that returns the exact injected noise.
    struct ExactNoise(SequenceField<f64>);

    impl NoisePredictor for ExactNoise {
        fn predict(
            &self,
            _noised: &SequenceField<f64>,
            _t: usize,
            _sched: &NoiseSchedule,
        ) -> Result<SequenceField<f64>> {
            Ok(self.0.clone())
        }
    }

    struct ZeroNoise;

    impl NoisePredictor for ZeroNoise {
        fn predict(
            &self,
            noised: &SequenceField<f64>,
            _t: usize,
            _sched: &NoiseSchedule,
        ) -> Result<SequenceField<f64>> {
            Ok(noised.scale(0.0))
        }
    }

    #[test]
    fn single_step_oracle_inverts_the_forward_process() {
        // T=1: the update divides out q_sample exactly (sigma_1 = 0 path).
        let sched = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y0 = constant_seq(1, 4, 4, 0.45);
        let noise = sample_noise(1, 1, 4, 4, &mut rng);
        let y1 = q_sample(&y0, 1, &noise, &sched).unwrap();

        // replicate the sampler's single step by hand through the API:
        // the sampler draws its own start, so drive the update directly
        let model = ExactNoise(noise.clone());
        let eps = model.predict(&y1, 1, &sched).unwrap();
        let coef = sched.beta(1) / (1.0 - sched.alpha_bar(1)).sqrt();
        let recovered = y1
            .sub(&eps.scale(coef))
            .unwrap()
            .scale(1.0 / sched.alpha(1).sqrt());
        let err = recovered.sub(&y0).unwrap().energy().sqrt();
        assert!(err < 1e-5, "recovery error {err}");
    }

    #[test]
    fn sampling_is_deterministic_under_a_fixed_seed() {
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            ddpm_sample(&ZeroNoise, &sched, 2, 1, 8, 8, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_predictor_matches_replayed_recursion() {
        let sched = NoiseSchedule::linear(6, 0.05, 0.3).unwrap();
        let seed = 6;
        let sampled = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ddpm_sample(&ZeroNoise, &sched, 1, 1, 4, 4, &mut rng).unwrap()
        };
        // independent replay with the same draw order
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = sample_noise(1, 1, 4, 4, &mut rng);
        for t in (1..=sched.t_steps()).rev() {
            y = y.scale(1.0 / sched.alpha(t).sqrt());
            if t > 1 {
                let sigma = (sched.beta(t) * (1.0 - sched.alpha_bar(t - 1))
                    / (1.0 - sched.alpha_bar(t)))
                .sqrt();
                let z = sample_noise(1, 1, 4, 4, &mut rng);
                y = y.add(&z.scale(sigma)).unwrap();
            }
        }
        let gap = sampled.sub(&y).unwrap().energy().sqrt();
        assert!(gap < 1e-12, "replay gap {gap}");
    }

    #[test]
    fn sinusoidal_embedding_is_unit_bounded_and_distinct() {
        let a = timestep_embedding(3, 16);
        let b = timestep_embedding(4, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}

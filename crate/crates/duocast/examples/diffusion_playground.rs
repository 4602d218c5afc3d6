//! Walks the forward corruption and the ancestral reverse sampler with a
//! perfect-oracle stub, showing exact single-step inversion.

use duocast::diffusion::{q_sample, sample_noise, NoisePredictor, NoiseSchedule};
use duocast::grid::{Field, SequenceField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct OracleStub(SequenceField<f64>);

impl NoisePredictor for OracleStub {
    fn predict(
        &self,
        _noised: &SequenceField<f64>,
        _t: usize,
        _sched: &NoiseSchedule,
    ) -> duocast::Result<SequenceField<f64>> {
        Ok(self.0.clone())
    }
}

fn main() -> duocast::Result<()> {
    let sched = NoiseSchedule::default_desk();
    println!(
        "schedule: {} steps, final signal fraction {:.4}",
        sched.t_steps(),
        sched.alpha_bar(sched.t_steps())
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y0 = SequenceField::new(vec![Field::constant(1, 8, 8, 0.7)])?;
    for &t in &[1, 10, 25, 50] {
        let noise = sample_noise(1, 1, 8, 8, &mut rng);
        let yt = q_sample(&y0, t, &noise, &sched)?;
        println!(
            "t={t:>2}  abar={:.4}  corrupted energy {:.2}",
            sched.alpha_bar(t),
            yt.energy()
        );
    }

    // a single-step schedule with the exact-noise oracle inverts q_sample
    let one = NoiseSchedule::linear(1, 0.3, 0.3)?;
    let noise = sample_noise(1, 1, 8, 8, &mut rng);
    let y1 = q_sample(&y0, 1, &noise, &one)?;
    let oracle = OracleStub(noise);
    let eps = oracle.predict(&y1, 1, &one)?;
    let coef = one.beta(1) / (1.0 - one.alpha_bar(1)).sqrt();
    let recovered = y1.sub(&eps.scale(coef))?.scale(1.0 / one.alpha(1).sqrt());
    println!(
        "single-step oracle inversion error {:.3e}",
        recovered.sub(&y0)?.energy().sqrt()
    );
    Ok(())
}

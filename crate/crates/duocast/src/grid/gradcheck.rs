//! Central finite-difference harness for the tape engine. Runs in double
//! precision so the difference quotients stay meaningful.

use crate::error::{Error, Result};
use crate::grid::params::ParamSet;
use crate::grid::tape::{Tape, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Floor for the relative-discrepancy denominator, so near-zero gradients do
/// not amplify quotient noise.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Max over all checked parameter scalars of
    /// |analytic - fd| / max(|analytic|, |fd|, floor).
    pub max_rel_err: f64,
    /// (tensor name, flat offset, analytic, finite difference) at the max.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Number of parameter scalars checked.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares tape adjoints against central finite differences for every
/// scalar in `params`. The closure must rebuild the same scalar loss
/// deterministically on each call.
pub fn gradcheck<F>(params: &mut ParamSet<f64>, build: F, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let tape = Tape::new();
        let loss = build(&tape, ps)?;
        let v = tape.value_scalar(loss);
        if !v.is_finite() {
            return Err(Error::numeric("gradcheck closure produced non-finite loss"));
        }
        Ok(v)
    };

    // Analytic pass.
    let tape = Tape::new();
    let loss = build(&tape, params)?;
    if !tape.value_scalar(loss).is_finite() {
        return Err(Error::numeric("gradcheck closure produced non-finite loss"));
    }
    let grads = tape.backward(loss)?;

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let len = params.get(id).len();
        let name = params.get(id).name.clone();
        for off in 0..len {
            let original = params.get(id).values[off];
            params.get_mut(id).values[off] = original + FD_STEP;
            let plus = eval(params)?;
            params.get_mut(id).values[off] = original - FD_STEP;
            let minus = eval(params)?;
            params.get_mut(id).values[off] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.get(id).map(|g| g[off]).unwrap_or(0.0);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), off, analytic, fd));
            }
            checked += 1;
        }
    }

    Ok(GradcheckReport {
        max_rel_err,
        worst,
        checked,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::field::Field;
    use crate::grid::tape::{cross_attention, Tape};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn pure_conv_gradients_are_exact_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let probe =
            Field::from_vec(2, 8, 8, random_vec(&mut rng, 2 * 64)).unwrap();
        let mut ps = ParamSet::<f64>::new();
        ps.add("k", vec![2, 1, 3, 3], random_vec(&mut rng, 18));

        let report = gradcheck(
            &mut ps,
            |tape, ps| {
                let x = tape.constant(&probe);
                let k = tape.param(ps, ps.lookup("k").unwrap());
                let y = tape.conv2d(x, k, 1, 2)?;
                Ok(tape.sum_all(y))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "report: {report:?}");
        // Linear loss: central differences have no truncation term.
        assert!(report.max_rel_err < 1e-9, "report: {report:?}");
    }

    #[test]
    fn dilated_depthwise_conv_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let probe =
            Field::from_vec(2, 8, 8, random_vec(&mut rng, 2 * 64)).unwrap();
        let target = random_vec(&mut rng, 2 * 64);
        let mut ps = ParamSet::<f64>::new();
        ps.add("k", vec![2, 1, 3, 3], random_vec(&mut rng, 18));

        let report = gradcheck(
            &mut ps,
            |tape, ps| {
                let x = tape.constant(&probe);
                let k = tape.param(ps, ps.lookup("k").unwrap());
                let y = tape.conv2d(x, k, 3, 2)?;
                tape.mse_vs(y, &target)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "report: {report:?}");
    }

    #[test]
    fn conv_softmax_composition_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let probe =
            Field::from_vec(1, 3, 3, random_vec(&mut rng, 9)).unwrap();
        let mut ps = ParamSet::<f64>::new();
        ps.add("k", vec![2, 1, 3, 3], random_vec(&mut rng, 18));
        let target = random_vec(&mut rng, 9);

        let report = gradcheck(
            &mut ps,
            |tape, ps| {
                let x = tape.constant(&probe);
                let k = tape.param(ps, ps.lookup("k").unwrap());
                let y = tape.conv2d(x, k, 1, 1)?;
                let s = tape.attn_scores(y, y)?;
                let p = tape.softmax_rows(s)?;
                let o = tape.attn_apply(p, y, 3, 3)?;
                // reduce 2 channels to the 9-target length via pooling sum
                let first = tape.sum_all(o);
                let sq = tape.mse_vs(o, &[target.clone(), target.clone()].concat())?;
                let combined = tape.add(first, sq)?;
                Ok(tape.scale(combined, 0.5))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "report: {report:?}");
    }

    #[test]
    fn temporal_conv_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let frames: Vec<Field<f64>> = (0..4)
            .map(|_| Field::from_vec(2, 3, 3, random_vec(&mut rng, 18)).unwrap())
            .collect();
        let target = random_vec(&mut rng, 18);
        let mut ps = ParamSet::<f64>::new();
        ps.add("kt", vec![2, 3], random_vec(&mut rng, 6));

        let report = gradcheck(
            &mut ps,
            |tape, ps| {
                let vars: Vec<_> = frames.iter().map(|f| tape.constant(f)).collect();
                let k = tape.param(ps, ps.lookup("kt").unwrap());
                let out = tape.conv_temporal(&vars, k)?;
                let mut loss = tape.mse_vs(out[0], &target)?;
                for &o in &out[1..] {
                    let l = tape.mse_vs(o, &target)?;
                    loss = tape.add(loss, l)?;
                }
                Ok(loss)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "report: {report:?}");
    }

    #[test]
    fn attention_projection_kernels_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let query = Field::from_vec(2, 3, 3, random_vec(&mut rng, 18)).unwrap();
        let kv = Field::from_vec(2, 3, 3, random_vec(&mut rng, 18)).unwrap();
        let target = random_vec(&mut rng, 18);
        let mut ps = ParamSet::<f64>::new();
        ps.add("wq", vec![2, 1, 3, 3], random_vec(&mut rng, 18));
        ps.add("wk", vec![2, 1, 3, 3], random_vec(&mut rng, 18));
        ps.add("wv", vec![2, 1, 3, 3], random_vec(&mut rng, 18));

        let report = gradcheck(
            &mut ps,
            |tape, ps| {
                let q = tape.constant(&query);
                let s = tape.constant(&kv);
                let wq = tape.param(ps, ps.lookup("wq").unwrap());
                let wk = tape.param(ps, ps.lookup("wk").unwrap());
                let wv = tape.param(ps, ps.lookup("wv").unwrap());
                let out = cross_attention(tape, q, s, wq, wk, wv)?;
                tape.mse_vs(out.output, &target)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "report: {report:?}");
    }

    #[test]
    fn composite_network_ops_pass_gradcheck() {
        // conv -> silu -> pool -> upsample -> bias -> sigmoid -> mse
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let probe = Field::from_vec(1, 4, 4, random_vec(&mut rng, 16)).unwrap();
        let target = random_vec(&mut rng, 2 * 16);
        let mut ps = ParamSet::<f64>::new();
        ps.add("k", vec![2, 1, 3, 3], random_vec(&mut rng, 18));
        ps.add("b", vec![2], random_vec(&mut rng, 2));

        let report = gradcheck(
            &mut ps,
            |tape, ps| {
                let x = tape.constant(&probe);
                let k = tape.param(ps, ps.lookup("k").unwrap());
                let b = tape.param(ps, ps.lookup("b").unwrap());
                let y = tape.conv2d(x, k, 1, 1)?;
                let y = tape.silu(y);
                let y = tape.avg_pool2(y)?;
                let y = tape.upsample_nearest2(y)?;
                let y = tape.broadcast_add(y, b)?;
                let y = tape.sigmoid(y);
                tape.mse_vs(y, &target)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "report: {report:?}");
    }

    #[test]
    fn nonfinite_loss_is_a_diagnostic_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("k", vec![1], vec![1.0]);
        let err = gradcheck(
            &mut ps,
            |tape, _| {
                Ok(tape.constant_raw(vec![1], vec![f64::NAN]))
            },
            1e-4,
        );
        assert!(matches!(err, Err(crate::error::Error::Numeric(_))));
    }
}

//! Verifies tape adjoints against central finite differences for a plain
//! convolution and for a composed attention closure.

use duocast::grid::tape::cross_attention;
use duocast::grid::{gradcheck, Field, ParamSet, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> duocast::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut rand_vec = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };

    let probe = Field::from_vec(2, 8, 8, rand_vec(128))?;
    let target = rand_vec(128);
    let mut params = ParamSet::<f64>::new();
    params.add("conv.w", vec![2, 1, 3, 3], rand_vec(18));

    let report = gradcheck(
        &mut params,
        |tape: &Tape<f64>, ps| {
            let x = tape.constant(&probe);
            let k = tape.param(ps, ps.lookup("conv.w").unwrap());
            let y = tape.conv2d(x, k, 3, 2)?;
            tape.mse_vs(y, &target)
        },
        1e-4,
    )?;
    println!(
        "dilated depth-wise conv: {} scalars, max rel err {:.3e} -> {}",
        report.checked,
        report.max_rel_err,
        if report.passed() { "pass" } else { "FAIL" }
    );

    let query = Field::from_vec(2, 4, 4, rand_vec(32))?;
    let memory = Field::from_vec(2, 4, 4, rand_vec(32))?;
    let attn_target = rand_vec(32);
    let mut attn_params = ParamSet::<f64>::new();
    attn_params.add("wq", vec![2, 1, 3, 3], rand_vec(18));
    attn_params.add("wk", vec![2, 1, 3, 3], rand_vec(18));
    attn_params.add("wv", vec![2, 1, 3, 3], rand_vec(18));

    let report = gradcheck(
        &mut attn_params,
        |tape, ps| {
            let q = tape.constant(&query);
            let kv = tape.constant(&memory);
            let out = cross_attention(
                tape,
                q,
                kv,
                tape.param(ps, ps.lookup("wq").unwrap()),
                tape.param(ps, ps.lookup("wk").unwrap()),
                tape.param(ps, ps.lookup("wv").unwrap()),
            )?;
            tape.mse_vs(out.output, &attn_target)
        },
        1e-4,
    )?;
    println!(
        "cross-attention:         {} scalars, max rel err {:.3e} -> {}",
        report.checked,
        report.max_rel_err,
        if report.passed() { "pass" } else { "FAIL" }
    );
    Ok(())
}

//! Splits a synthetic frame into orthogonal smooth/detail parts and checks
//! the projection identities numerically.

use duocast::spectral::{band_energy, project_high, project_low, SpectralMask};
use duocast::synthdata::{generate_event, EventSpec};

fn main() -> duocast::Result<()> {
    let pair = generate_event(&EventSpec {
        seed: 7,
        ..EventSpec::default()
    })?;
    let y = pair.y.cast::<f64>();
    let mask = SpectralMask::from_fraction(32, 32, 0.25)?;

    let low = project_low(&y, &mask)?;
    let high = project_high(&y, &mask)?;

    let total = y.energy();
    let (e_low, e_high) = band_energy(&y, &mask)?;
    println!("total energy          {total:.6}");
    println!("in-band energy        {e_low:.6} ({:.1}%)", 100.0 * e_low / total);
    println!("detail-band energy    {e_high:.6} ({:.1}%)", 100.0 * e_high / total);

    // complement, idempotence, orthogonality
    let recombined = low.add(&high)?;
    println!(
        "|f - (low + high)|     {:.3e}",
        y.sub(&recombined)?.energy().sqrt()
    );
    let low2 = project_low(&low, &mask)?;
    println!(
        "|P(P f) - P f|         {:.3e}",
        low.sub(&low2)?.energy().sqrt()
    );
    println!("<low, high>            {:.3e}", low.dot(&high)?);
    println!(
        "energy split residual  {:.3e}",
        (total - low.energy() - high.energy()).abs() / total
    );
    Ok(())
}

//! Synthesizes a seeded storm-event dataset, reports how much energy the
//! detail band carries, round-trips it through the DUO1 container, and
//! renders one event as PGM frames.

use duocast::render::render_sequence;
use duocast::spectral::{high_band_fraction, SpectralMask};
use duocast::synthdata::{generate_dataset, read_duo1, write_duo1, EventSpec};

fn main() -> duocast::Result<()> {
    let template = EventSpec::default();
    let dataset = generate_dataset(16, &template, 42)?;
    println!(
        "{} events, split {}/{}/{}",
        dataset.len(),
        dataset.train().len(),
        dataset.val().len(),
        dataset.test().len()
    );

    let mask = SpectralMask::from_fraction(32, 32, 0.25)?;
    for (i, event) in dataset.events.iter().take(4).enumerate() {
        let frac = high_band_fraction(&event.y.cast::<f64>(), &mask)?;
        println!("event {i}: detail-band energy fraction {frac:.3}");
    }

    let dir = std::env::temp_dir().join("duocast_generate_events");
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("events.duo1");
    write_duo1(&path, &dataset)?;
    let back = read_duo1(&path)?;
    assert_eq!(dataset, back);
    println!("container round trip exact: {}", path.display());

    let frames = render_sequence(&dataset.events[0].y.cast::<f64>(), &dir.join("frames"))?;
    println!("rendered {} frames under {}", frames.len(), dir.join("frames").display());
    Ok(())
}

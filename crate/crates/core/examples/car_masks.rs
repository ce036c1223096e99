//! Random rectangle masks for the reconstruction task, drawn as text.
//!
//! cargo run --example car_masks -- [seed]

use attnas::car::{generate_masks, CarConfig, MAX_COVERAGE};
use attnas::data::stream_rng;

fn main() -> attnas::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = CarConfig::default();
    let size = 16;
    for i in 0..3 {
        let mut rng = stream_rng(seed, 0, i);
        let m = generate_masks(&mut rng, size, cfg.count_range, cfg.side_range(size))?;
        println!(
            "mask {i}: {} rectangles, coverage {:.3} (limit {MAX_COVERAGE})",
            m.rects.len(),
            m.coverage()
        );
        let grid = m.grid();
        for row in grid.chunks(size) {
            println!("  {}", row.iter().map(|&on| if on { '#' } else { '.' }).collect::<String>());
        }
    }
    Ok(())
}

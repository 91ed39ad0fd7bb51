//! Patch grids for a few image sizes, and coverage labels for one part.
//!
//! cargo run --example patch_grid

use partguide::dataset::BitMask;
use partguide::patchgrid::{build_grid, label_patches, DEFAULT_COVERAGE, DEFAULT_DIVISOR, DEFAULT_OVERLAP};

fn main() -> Result<(), partguide::Error> {
    for (w, h) in [(84, 84), (640, 480), (1024, 768), (30, 200)] {
        let g = build_grid("img", w, h, DEFAULT_DIVISOR, DEFAULT_OVERLAP)?;
        println!(
            "{w}x{h}: patch {}px, stride {}px, {} patches{}",
            g.patch_size,
            g.stride,
            g.patches.len(),
            if g.degenerate { " (degenerate)" } else { "" }
        );
    }

    let grid = build_grid("img", 84, 84, DEFAULT_DIVISOR, DEFAULT_OVERLAP)?;
    let disc = BitMask::from_fn(84, 84, |x, y| (x as i64 - 40).pow(2) + (y as i64 - 30).pow(2) <= 14 * 14);
    let labels = label_patches(&grid, &disc, "disc", DEFAULT_COVERAGE)?;
    let positive = labels.iter().filter(|l| l.label).count();
    println!("\n'disc' covers {} pixels; {positive} of {} patches are positive", disc.count(), labels.len());

    let side = (grid.patches.len() as f64).sqrt() as usize;
    for row in labels.chunks(side) {
        let line: String = row.iter().map(|l| if l.label { '#' } else { '.' }).collect();
        println!("{line}");
    }
    Ok(())
}

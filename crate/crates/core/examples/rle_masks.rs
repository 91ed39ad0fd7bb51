//! Round trip of a binary mask through the run-length JSON sidecar format.
//!
//! cargo run --example rle_masks

use partguide::dataset::{BitMask, SegmentMask};

fn main() -> Result<(), partguide::Error> {
    let mask = BitMask::from_fn(12, 6, |x, y| (x as i32 - 5).pow(2) + (y as i32 - 3).pow(2) <= 6);
    for y in 0..mask.height() {
        let row: String = (0..mask.width()).map(|x| if mask.get(x, y) { '#' } else { '.' }).collect();
        println!("{row}");
    }

    let encoded = SegmentMask::from_bitmask("demo", "wheel", &mask);
    println!("{} foreground pixels in {} runs", encoded.popcount(), encoded.rle.len());
    println!("{}", serde_json::to_string(&encoded).expect("plain data"));

    let dir = std::env::temp_dir().join("partguide-rle-example");
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("demo_wheel.json");
    encoded.write_json(&path)?;
    let decoded = SegmentMask::read_json(&path)?.decode()?;
    assert_eq!(decoded, mask);
    println!("decoded mask matches ({})", path.display());
    Ok(())
}

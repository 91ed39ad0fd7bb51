//! Learning curve on the synthetic benchmark: IoU against the number of
//! annotated training images, for every variant and the fused selection.
//!
//! cargo run --release --example label_efficiency -- [repetitions] [seed]

use partguide::evaluation::{label_efficiency_curve, CurveConfig};
use partguide::synthetic::{SyntheticBenchmark, SyntheticConfig};

fn main() -> Result<(), partguide::Error> {
    let mut args = std::env::args().skip(1);
    let repetitions = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(7);

    let bench = SyntheticBenchmark::generate(&SyntheticConfig { seed, ..Default::default() })?;
    let config = CurveConfig { repetitions, seed, ..Default::default() };
    let started = std::time::Instant::now();
    let curve = label_efficiency_curve(&bench, &bench.prompt_oracle_backends(), &config)?;

    print!("{:>5}", "size");
    let names: Vec<&str> = curve.points.iter().filter(|p| p.size == config.sizes[0]).map(|p| p.variant.as_str()).collect();
    for n in &names {
        print!(" {n:>11}");
    }
    println!();
    for &size in &config.sizes {
        print!("{size:>5}");
        for n in &names {
            let p = curve.point(size, n).expect("every cell is present");
            print!(" {:>6.3}±{:.3}", p.mean, p.std_error);
        }
        println!();
    }
    println!("{} repetitions in {:.1?}", repetitions, started.elapsed());
    Ok(())
}

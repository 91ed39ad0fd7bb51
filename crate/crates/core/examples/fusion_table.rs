//! Per-part variant selection on a results table, then the sampled
//! selection experiment on per-image counts from the synthetic benchmark.
//!
//! cargo run --release --example fusion_table -- [table.csv]

use partguide::classifier::{train_on_patches, TrainConfig};
use partguide::evaluation::{evaluate_models, fuse_best_per_part, selection_experiment, SelectionData, VariantTable};
use partguide::guidance::Variant;
use partguide::synthetic::{SyntheticBenchmark, SyntheticConfig, PARTS};
use std::collections::BTreeMap;

fn main() -> Result<(), partguide::Error> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/table3.csv").to_string());
    let table = VariantTable::read_csv(path.as_ref())?;
    print!("{}", table.to_text(3));
    let fused = fuse_best_per_part(&table, &["GGSAM", "CGSAM", "LGSAM"])?;
    for (part, v) in &fused.picks {
        println!("  {part:<10} -> {v}");
    }
    println!("fused {:.3} (worst per part {:.3})\n", fused.average, fused.lower);

    let bench = SyntheticBenchmark::generate(&SyntheticConfig { train_images: 1, eval_images: 16, seed: 3, ..Default::default() })?;
    let config = TrainConfig { max_samples: Some(1000), ..Default::default() };
    let mut models = BTreeMap::new();
    for part in PARTS {
        let mut labels = Vec::new();
        for img in bench.train_images() {
            labels.extend(bench.patch_labels(img, part)?);
        }
        models.insert(part.to_string(), train_on_patches(part, &labels, &bench.features, &config)?);
    }
    let eval: Vec<_> = bench.eval_images().iter().map(|img| (&img.grid, &img.masks)).collect();
    let runs = evaluate_models(&eval, &bench.features, &models, &Variant::ROI, 0.5, &bench.prompt_oracle_backends(), 4)?;
    let data = SelectionData::from_runs(&runs, &["GGSAM", "CGSAM", "LGSAM"])?;
    let curve = selection_experiment(&data, &[1, 2, 4, 8, 16], 10, 0)?;
    print!("{}", curve.to_text());
    Ok(())
}

//! Every guidance variant on one held-out image: thresholded patches become
//! regions with prompts, and a prompt-aware oracle backend segments them.
//!
//! cargo run --release --example guided_segmentation -- [part] [threshold]

use partguide::classifier::{train_on_patches, TrainConfig};
use partguide::evaluation::IouCounts;
use partguide::guidance::{segment_variants, BackendRouter, Variant};
use partguide::synthetic::{SyntheticBenchmark, SyntheticConfig};

fn main() -> Result<(), partguide::Error> {
    let mut args = std::env::args().skip(1);
    let part = args.next().unwrap_or_else(|| "wedge".to_string());
    let threshold: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.5);

    let bench = SyntheticBenchmark::generate(&SyntheticConfig { train_images: 8, eval_images: 1, ..Default::default() })?;
    let mut labels = Vec::new();
    for img in bench.train_images() {
        labels.extend(bench.patch_labels(img, &part)?);
    }
    let model = train_on_patches(&part, &labels, &bench.features, &TrainConfig { max_samples: Some(1500), ..Default::default() })?;

    let image = &bench.eval_images()[0];
    let routes = bench.prompt_oracle_backends();
    let backend = routes.backend_for(&part)?;
    let outcomes = segment_variants(&image.grid, &bench.features, &part, &model, &Variant::ALL, threshold, backend, 4)?;
    let truth = &image.masks[&part];
    println!("image {} part {part}: {} ground-truth pixels", image.id, truth.count());
    for (variant, regions, outcome) in outcomes {
        let iou = IouCounts::of(&outcome.mask, truth)?.iou();
        println!("\n{variant}: {} regions, IoU {iou:.3}", regions.len());
        for r in regions.iter().take(4) {
            let prompt = r.prompt.as_ref().map(|p| serde_json::to_string(p).expect("plain data")).unwrap_or_default();
            println!(
                "  roi ({},{})-({},{})  {} patches  peak {:.2}  {prompt}",
                r.roi.x0,
                r.roi.y0,
                r.roi.x1,
                r.roi.y1,
                r.member_patches.len(),
                r.peak_confidence
            );
        }
    }
    Ok(())
}

//! Train a per-part RBF classifier on patch labels from a few images and
//! measure its ranking quality on held-out patches.
//!
//! cargo run --release --example guidance_classifier -- [train_images]

use partguide::classifier::{auc, train_on_patches, TrainConfig};
use partguide::synthetic::{SyntheticBenchmark, SyntheticConfig, PARTS};

fn main() -> Result<(), partguide::Error> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let bench = SyntheticBenchmark::generate(&SyntheticConfig { train_images: n, eval_images: 8, ..Default::default() })?;
    let config = TrainConfig { max_samples: Some(1500), ..Default::default() };

    println!("part    labels  positive  support  gamma    auc");
    for part in PARTS {
        let mut labels = Vec::new();
        for img in bench.train_images() {
            labels.extend(bench.patch_labels(img, part)?);
        }
        let model = train_on_patches(part, &labels, &bench.features, &config)?;

        let mut scored = Vec::new();
        for img in bench.eval_images() {
            for (key, label) in bench.patch_labels(img, part)? {
                let x = bench.features.require(&key.image_id, key.index)?;
                scored.push((model.predict(x)?, label));
            }
        }
        println!(
            "{part:<6}  {:>6}  {:>8}  {:>7}  {:.3}  {:.4}",
            labels.len(),
            labels.iter().filter(|l| l.1).count(),
            model.support_count(),
            model.kernel_gamma,
            auc(&scored)?
        );
    }
    Ok(())
}

//! Serves the annotation API over a small synthetic dataset.
//!
//! cargo run --example annotation_service -- [addr]
//!
//! curl 'http://127.0.0.1:8080/api/prototypes?part=disc'
//! curl -X POST -H 'content-type: application/json' \
//!   -d '{"prototype_id":3,"part_class":"disc","bulk_label":true,"exceptions":[0]}' \
//!   http://127.0.0.1:8080/api/labels

use std::sync::Arc;

use partguide::dataset::Manifest;
use partguide::prototypes::{attach_scores, cluster_prototypes, KMeansConfig, LabelStore};
use partguide::service::{serve, store_path, AppState};
use partguide::synthetic::{SyntheticBenchmark, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8080".to_string()).parse()?;
    let config = SyntheticConfig { train_images: 8, eval_images: 0, ..Default::default() };
    let bench = SyntheticBenchmark::generate(&config)?;
    let dir = std::env::temp_dir().join("partguide-service-example");
    let manifest = Manifest::load(&bench.write_dataset(&dir)?)?;

    let mut protos = cluster_prototypes(&bench.features, 32, 0, &KMeansConfig::default())?;
    attach_scores(&mut protos, &bench.scores);
    let store = LabelStore::new(store_path(dir.join("labels.jsonl")));
    println!("dataset in {}, labels go to {}", dir.display(), store.path().display());
    println!("listening on http://{addr} (Ctrl-C to stop)");

    let state = AppState::new(manifest, protos, config.divisor, config.overlap, store)?;
    tokio::runtime::Runtime::new()?.block_on(serve(Arc::new(state), addr))?;
    Ok(())
}

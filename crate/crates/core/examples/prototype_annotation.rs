//! Cluster patch features into prototypes, rank them for one part and label
//! them with the click model. Compares clicks with polygon tracing and
//! prototype ranking with raw patch ranking.
//!
//! cargo run --release --example prototype_annotation -- [k] [part]

use std::collections::{BTreeMap, HashMap, HashSet};

use partguide::prototypes::{
    annotation_cost_comparison, approximate_polygon_vertices, attach_scores, cluster_prototypes, prototype_patch_order,
    rank_patches_by_score, rank_prototypes, retrieval_efficacy, simulate_annotation, KMeansConfig,
};
use partguide::synthetic::{SyntheticBenchmark, SyntheticConfig};

fn main() -> Result<(), partguide::Error> {
    let mut args = std::env::args().skip(1);
    let k = args.next().and_then(|a| a.parse().ok()).unwrap_or(64);
    let part = args.next().unwrap_or_else(|| "disc".to_string());

    let bench = SyntheticBenchmark::generate(&SyntheticConfig { train_images: 24, eval_images: 0, ..Default::default() })?;
    let mut protos = cluster_prototypes(&bench.features, k, 0, &KMeansConfig::default())?;
    attach_scores(&mut protos, &bench.scores);

    let mut truth = HashMap::new();
    for img in bench.train_images() {
        truth.extend(bench.patch_labels(img, &part)?);
    }
    let ranked = rank_prototypes(&protos, &part)?;
    let records: Vec<_> = ranked.iter().map(|p| simulate_annotation(p, &truth, &part)).collect::<Result<_, _>>()?;

    println!("rank  proto  members  score   label  clicks");
    for (rank, (p, r)) in ranked.iter().zip(&records).enumerate().take(10) {
        println!(
            "{rank:>4}  {:>5}  {:>7}  {:.3}  {:>5}  {:>6}",
            p.id,
            p.members.len(),
            p.score_per_class[&part],
            if r.bulk_label { "yes" } else { "no" },
            r.clicks
        );
    }

    let vertices: Vec<usize> =
        bench.train_images().iter().map(|img| approximate_polygon_vertices(&img.masks[&part])).collect();
    let costs = annotation_cost_comparison(&records, &BTreeMap::from([(part.clone(), (vertices, true))]))?;
    print!("\n{}", costs.to_csv());

    let scores: HashMap<_, _> = truth.keys().map(|key| (key.clone(), bench.scores.get(&part, key).unwrap_or(0.0))).collect();
    let positives: HashSet<_> = truth.iter().filter(|(_, l)| **l).map(|(key, _)| key.clone()).collect();
    let raw = rank_patches_by_score(&scores);
    let by_proto = prototype_patch_order(&ranked);
    let (raw_p, proto_p) = retrieval_efficacy(&raw, &by_proto, &positives, positives.len())?;
    println!("\nprecision at {}: raw ranking {raw_p:.3}, prototype ranking {proto_p:.3}", positives.len());
    Ok(())
}

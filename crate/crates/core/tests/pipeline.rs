mod common;

use std::collections::HashMap;
use std::io::BufReader;
use std::net::TcpListener;
use std::time::Duration;

use proptest::prelude::*;

use partguide::classifier::{auc, train_on_patches, GuidanceModel, TrainConfig};
use partguide::dataset::{load_features, BitMask, Manifest, SimilarityScores};
use partguide::evaluation::{iou, IouCounts};
use partguide::guidance::{
    group_rois, regions_from_confidences, run_guidance, segment_regions, serve_lines, BoxFillBackend, Prompt,
    PromptOracleBackend, SegmentationBackend, TcpBackend, Variant,
};
use partguide::patchgrid::{build_grid, label_patches, PatchGrid, DEFAULT_COVERAGE};
use partguide::prototypes::{
    attach_scores, cluster_prototypes, rank_prototypes, records_to_labels, simulate_annotation, KMeansConfig,
};
use partguide::synthetic::{SyntheticBenchmark, SyntheticConfig};
use partguide::PixelBox;

#[test]
fn dataset_on_disk_to_masks_over_tcp() {
    let config = SyntheticConfig { train_images: 6, eval_images: 2, seed: 21, ..Default::default() };
    let bench = SyntheticBenchmark::generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(&bench.write_dataset(dir.path()).unwrap()).unwrap();
    assert_eq!(manifest.images.len(), 8);

    let grids: Vec<PatchGrid> = manifest
        .images
        .iter()
        .map(|i| build_grid(&i.id, i.width, i.height, config.divisor, config.overlap).unwrap())
        .collect();
    let features = load_features(&dir.path().join("features.gsfv"), &grids).unwrap();
    assert_eq!(features, bench.features);
    let scores = SimilarityScores::read_csv(&dir.path().join("similarity.csv")).unwrap();
    scores.check_against(&grids).unwrap();

    let part = "bar";
    let mut truth = HashMap::new();
    for (img, g) in manifest.images.iter().zip(&grids).take(6) {
        let mask = manifest.load_mask(img, part).unwrap();
        assert_eq!(mask, bench.images.iter().find(|b| b.id == img.id).unwrap().masks[part]);
        for lp in label_patches(g, &mask, part, DEFAULT_COVERAGE).unwrap() {
            truth.insert(g.key(lp.patch.index), lp.label);
        }
    }
    let train_keys: std::collections::HashSet<_> = truth.keys().cloned().collect();
    let mut train_features = partguide::dataset::FeatureBlob::new(features.dim());
    for k in features.keys() {
        if train_keys.contains(k) {
            train_features.push(k.clone(), features.row(&k.image_id, k.index).unwrap()).unwrap();
        }
    }
    let mut protos = cluster_prototypes(&train_features, 48, 1, &KMeansConfig::default()).unwrap();
    attach_scores(&mut protos, &scores);
    let records: Vec<_> = rank_prototypes(&protos, part)
        .unwrap()
        .into_iter()
        .map(|p| simulate_annotation(p, &truth, part).unwrap())
        .collect();
    let labels = records_to_labels(&records, &protos, part).unwrap();
    assert_eq!(labels.len(), truth.len());
    assert!(labels.iter().all(|(k, l)| truth[k] == *l));

    let model = train_on_patches(part, &labels, &features, &TrainConfig { max_samples: Some(1200), ..Default::default() }).unwrap();
    let path = dir.path().join("bar.model.json");
    model.save(&path).unwrap();
    let model = GuidanceModel::load(&path).unwrap();

    let mut held_out = Vec::new();
    for (img, g) in manifest.images.iter().zip(&grids).skip(6) {
        let mask = manifest.load_mask(img, part).unwrap();
        for lp in label_patches(g, &mask, part, DEFAULT_COVERAGE).unwrap() {
            held_out.push((model.predict(features.require(&g.image_id, lp.patch.index).unwrap()).unwrap(), lp.label));
        }
    }
    let a = auc(&held_out).unwrap();
    assert!(a > 0.85, "held-out AUC {a}");

    let masks: HashMap<String, BitMask> = manifest
        .images
        .iter()
        .map(|i| (i.id.clone(), manifest.load_mask(i, part).unwrap()))
        .collect();
    let oracle = std::sync::Arc::new(PromptOracleBackend { masks: masks.clone() });
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let oracle = oracle.clone();
            std::thread::spawn(move || {
                let _ = serve_lines(oracle.as_ref(), BufReader::new(stream.try_clone().unwrap()), stream);
            });
        }
    });
    let backend = TcpBackend::new(addr, Some(Duration::from_secs(10))).unwrap();

    let mut pooled = IouCounts::default();
    for g in &grids[6..] {
        let regions = run_guidance(g, &features, part, &model, Variant::Lgsam, 0.5).unwrap();
        let remote = segment_regions(&g.image_id, g.width, g.height, &regions, Variant::Lgsam, &backend, 3);
        let local = segment_regions(&g.image_id, g.width, g.height, &regions, Variant::Lgsam, &PromptOracleBackend { masks: masks.clone() }, 1);
        assert!(remote.failures.is_empty(), "{:?}", remote.failures);
        assert_eq!(remote.mask, local.mask);
        pooled.add(IouCounts::of(&remote.mask, &masks[&g.image_id]).unwrap());
    }
    assert!(pooled.iou() > 0.6, "LGSAM pooled IoU {}", pooled.iou());
}

#[test]
fn patch_naive_fills_thresholded_patches() {
    let grid = build_grid("img", 84, 84, 14, 0.5).unwrap();
    let conf: Vec<f64> = (0..grid.patches.len()).map(|i| if i % 97 == 0 { 0.9 } else { 0.1 }).collect();
    let regions = regions_from_confidences(&grid, &conf, "p", Variant::PatchNaive, 0.5).unwrap();
    let out = segment_regions("img", 84, 84, &regions, Variant::PatchNaive, &BoxFillBackend, 1);
    let mut want = BitMask::new(84, 84);
    for (i, c) in conf.iter().enumerate() {
        if *c > 0.5 {
            want.fill_box(grid.patches[i].bbox);
        }
    }
    assert_eq!(out.mask, want);
}

#[test]
fn failing_backend_leaves_other_regions_intact() {
    struct Flaky;
    impl SegmentationBackend for Flaky {
        fn segment(
            &self,
            r: &partguide::guidance::SegmentationRequest,
        ) -> Result<partguide::guidance::SegmentationResponse, partguide::guidance::GuidanceError> {
            if r.roi.x0 == 0 {
                Err(partguide::guidance::GuidanceError::Backend("down".into()))
            } else {
                BoxFillBackend.segment(r)
            }
        }
    }
    let regions = group_rois(&[(0, PixelBox::new(0, 0, 4, 4)), (1, PixelBox::new(10, 10, 14, 14))]);
    let out = segment_regions("img", 20, 20, &regions, Variant::Ggsam, &Flaky, 2);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.mask.count(), 16);
    assert!(out.mask.get(10, 10) && !out.mask.get(0, 0));
}

fn box_strategy() -> impl Strategy<Value = PixelBox> {
    (0u32..40, 0u32..40, 1u32..12, 1u32..12).prop_map(|(x, y, w, h)| PixelBox::new(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn grouping_matches_closure(boxes in prop::collection::vec(box_strategy(), 0..24)) {
        let input: Vec<(u32, PixelBox)> = boxes.iter().copied().enumerate().map(|(i, b)| (i as u32, b)).collect();
        let regions = group_rois(&input);
        let mut got: Vec<Vec<usize>> = regions.iter().map(|r| {
            let mut m: Vec<usize> = r.member_patches.iter().map(|&i| i as usize).collect();
            m.sort_unstable();
            m
        }).collect();
        got.sort();
        let mut want = common::closure_groups(&boxes);
        want.sort();
        prop_assert_eq!(got, want);
        for r in &regions {
            prop_assert!(r.prompt.is_none());
            for &m in &r.member_patches {
                let b = boxes[m as usize];
                prop_assert!(r.roi.x0 <= b.x0 && r.roi.y0 <= b.y0 && r.roi.x1 >= b.x1 && r.roi.y1 >= b.y1);
            }
        }
    }

    #[test]
    fn prompts_lie_inside_their_roi(seed in 0u64..500, variant in prop::sample::select(Variant::ALL.to_vec())) {
        use rand::Rng;
        let grid = build_grid("img", 64, 48, 8, 0.5).unwrap();
        let mut rng = common::rng(seed);
        let conf: Vec<f64> = (0..grid.patches.len()).map(|_| rng.random::<f64>()).collect();
        let regions = regions_from_confidences(&grid, &conf, "p", variant, 0.7).unwrap();
        let selected = conf.iter().filter(|c| **c > 0.7).count();
        prop_assert_eq!(regions.iter().map(|r| r.member_patches.len()).sum::<usize>(), selected);
        for r in &regions {
            match &r.prompt {
                Some(Prompt::Point([x, y])) => prop_assert!(r.roi.contains(*x, *y)),
                Some(Prompt::Text(t)) => prop_assert_eq!(t.as_str(), "p"),
                None => prop_assert_eq!(variant, Variant::PatchNaive),
            }
        }
    }

    #[test]
    fn iou_of_masks_matches_pixel_loop(seed in 0u64..1000, w in 1u32..20, h in 1u32..20) {
        let mut rng = common::rng(seed);
        let a = common::random_mask(&mut rng, w, h, 0.3);
        let b = common::random_mask(&mut rng, w, h, 0.6);
        prop_assert_eq!(iou(&a, &b).unwrap(), common::pixel_loop_iou(&a, &b));
    }
}

#[test]
fn http_transport_matches_in_process_backend() {
    use partguide::guidance::{HttpBackend, SegmentationRequest};
    let truth = BitMask::from_fn(40, 30, |x, y| (5..25).contains(&x) && (4..12).contains(&y) || (30..36).contains(&x) && y > 20);
    let local = PromptOracleBackend { masks: [("img".to_string(), truth.clone())].into() };
    let shared: std::sync::Arc<dyn SegmentationBackend> = std::sync::Arc::new(PromptOracleBackend { masks: local.masks.clone() });

    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = partguide::service::segment_router(shared);
    std::thread::spawn(move || rt.block_on(async { axum::serve(listener, app).await.unwrap() }));

    let remote = HttpBackend::new(format!("http://{addr}/segment"), Some(Duration::from_secs(10))).unwrap();
    let prompts = [Some(Prompt::Point([10, 6])), Some(Prompt::Point([2, 28])), Some(Prompt::Text("p".into())), None];
    for (id, prompt) in prompts.into_iter().enumerate() {
        let req = SegmentationRequest { id: id as u64, image_id: "img".into(), roi: PixelBox::new(0, 0, 40, 30), prompt };
        assert_eq!(remote.segment(&req).unwrap(), local.segment(&req).unwrap());
    }
    let missing = SegmentationRequest { id: 9, image_id: "other".into(), roi: PixelBox::new(0, 0, 4, 4), prompt: None };
    let resp = remote.segment(&missing).unwrap();
    assert_eq!(resp.id, 9);
    assert!(resp.error.is_some());
}

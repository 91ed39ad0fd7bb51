use std::path::Path;
use std::process::{Command, Output, Stdio};

const TABLE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/table3.csv");
const SWEEP: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/vlpart_thresholds.csv");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partguide"))
        .args(args)
        .current_dir(dir)
        .env_remove(partguide::service::STORE_ENV)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let o = run(Path::new("."), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in [
        "grid",
        "prototypes",
        "annotate-sim",
        "train",
        "infer",
        "eval",
        "fuse",
        "curve",
        "serve",
        "export-features-spec",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let o = run(
        Path::new("."),
        &["infer", "--manifest", "m", "--features", "f", "--model", "x", "--out", "o", "--variant", "SuperSAM"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown variant"));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["grid", "--manifest", "absent.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fixture_fusion_prints_the_fused_average() {
    let o = run(Path::new("."), &["eval", "--fixture", TABLE, "--fuse"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("fused average IoU: 0.493"), "{text}");
    assert!(text.contains("best average column: LGSAM"));

    let o = run(Path::new("."), &["fuse", "--fixture", TABLE]);
    assert!(stdout(&o).contains("fused average IoU: 0.493"));
}

#[test]
fn threshold_fixture_peaks_at_one_half() {
    let o = run(Path::new("."), &["eval", "--fixture", SWEEP]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("best average column: 0.5"));
    assert!(text.contains("0.370*"));
}

#[test]
fn export_features_spec_lists_patches() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["synth", "--out", "ds", "--train-images", "2", "--eval-images", "0"]).status.success());
    let o = run(dir.path(), &["export-features-spec", "--manifest", "ds/manifest.json", "--out", "patches.csv"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("GSFV"));
    let csv = std::fs::read_to_string(dir.path().join("patches.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 729);
    assert!(csv.starts_with("image_id,patch_index,x0,y0,x1,y1\nsyn000,0,0,0,6,6\n"));
}

#[test]
fn pipeline_with_process_backend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = run(d, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(&["synth", "--out", "ds", "--train-images", "3", "--eval-images", "1", "--seed", "2"]);
    ok(&["grid", "--manifest", "ds/manifest.json", "--part", "disc", "--labels-out", "labels.csv"]);
    ok(&[
        "prototypes", "--manifest", "ds/manifest.json", "--features", "ds/features.gsfv", "--scores", "ds/similarity.csv",
        "--k", "16", "--out", "protos.json",
    ]);
    let text = ok(&[
        "annotate-sim", "--manifest", "ds/manifest.json", "--prototypes", "protos.json", "--part", "disc", "--store",
        "store.jsonl", "--cost-out", "cost.csv",
    ]);
    assert!(text.contains("16 prototypes annotated"));
    ok(&[
        "train", "--features", "ds/features.gsfv", "--prototypes", "protos.json", "--store", "store.jsonl", "--part",
        "disc", "--max-samples", "500", "--out", "disc.json",
    ]);

    let exe = env!("CARGO_BIN_EXE_partguide");
    let backend = format!("exec:{exe} backend --kind prompt-oracle --manifest ds/manifest.json --part disc");
    let text = ok(&[
        "infer", "--manifest", "ds/manifest.json", "--features", "ds/features.gsfv", "--model", "disc.json",
        "--images", "syn003", "--backend", &backend, "--out", "masks",
    ]);
    assert!(text.contains("0 failed regions"), "{text}");
    let mask = partguide::dataset::SegmentMask::read_json(&d.join("masks/syn003.disc.LGSAM.mask.json")).unwrap();
    assert_eq!((mask.width, mask.height), (84, 84));

    ok(&[
        "eval", "--manifest", "ds/manifest.json", "--features", "ds/features.gsfv", "--model", "disc.json", "--images",
        "syn003", "--variants", "LGSAM,PatchNaive", "--backend", &backend, "--out", "rep",
    ]);
    let report = std::fs::read_to_string(d.join("rep/report.csv")).unwrap();
    assert!(report.starts_with("# seed=0\n# config="));
    assert!(report.contains("part,LGSAM,PatchNaive\ndisc,"));

    let o = run(d, &["infer", "--manifest", "ds/manifest.json", "--features", "ds/features.gsfv", "--model", "disc.json", "--backend", "carrier-pigeon", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn backend_speaks_json_lines() {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_partguide"))
        .args(["backend", "--kind", "box"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, r#"{{"id":4,"image_id":"a","roi":[1,1,3,2],"prompt":null}}"#).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["id"], 4);
    assert_eq!((line["width"].as_u64(), line["height"].as_u64()), (Some(2), Some(1)));
    assert_eq!(line["rle"], serde_json::json!([[0, 2]]));
}

#[test]
fn backend_serves_http() {
    use partguide::guidance::{HttpBackend, SegmentationBackend, SegmentationRequest};
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_partguide"))
        .args(["backend", "--kind", "boxfill", "--http", &addr])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let started = std::time::Instant::now();
    while std::net::TcpStream::connect(&addr).is_err() {
        assert!(started.elapsed() < std::time::Duration::from_secs(20), "backend did not start");
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    let backend = HttpBackend::new(format!("http://{addr}/segment"), None).unwrap();
    let req = SegmentationRequest { id: 3, image_id: "x".into(), roi: partguide::PixelBox::new(2, 2, 5, 4), prompt: None };
    let resp = backend.segment(&req);
    child.kill().unwrap();
    let _ = child.wait();
    let resp = resp.unwrap();
    assert_eq!((resp.id, resp.width, resp.height), (3, 3, 2));
    assert_eq!(resp.rle, [(0, 6)]);
}

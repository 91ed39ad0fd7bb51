//! Talks to a segmentation backend over TCP with the JSON-lines protocol.
//! A thread plays the backend here; any process that reads one request per
//! line and answers one response per line can take its place.
//!
//! cargo run --example external_backend

use std::io::BufReader;
use std::net::TcpListener;
use std::time::Duration;

use partguide::dataset::BitMask;
use partguide::guidance::{
    segment_regions, serve_lines, Prompt, PromptOracleBackend, PromptedRegion, SegmentationBackend,
    SegmentationRequest, TcpBackend, Variant,
};
use partguide::PixelBox;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = BitMask::from_fn(64, 48, |x, y| (10..30).contains(&x) && (8..20).contains(&y) || (44..56).contains(&x) && (30..40).contains(&y));
    let oracle = PromptOracleBackend { masks: [("img".to_string(), truth.clone())].into() };

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let oracle = std::sync::Arc::new(oracle);
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let oracle = oracle.clone();
            std::thread::spawn(move || {
                let reader = BufReader::new(stream.try_clone().expect("socket clone"));
                let _ = serve_lines(oracle.as_ref(), reader, stream);
            });
        }
    });

    let backend = TcpBackend::new(addr, Some(Duration::from_secs(5)))?;
    let request = SegmentationRequest {
        id: 1,
        image_id: "img".into(),
        roi: PixelBox::new(4, 4, 36, 24),
        prompt: Some(Prompt::Point([20, 12])),
    };
    println!("request  {}", serde_json::to_string(&request)?);
    let response = backend.segment(&request)?;
    println!("response {}", serde_json::to_string(&response)?);

    let regions = vec![
        PromptedRegion { roi: PixelBox::new(4, 4, 36, 24), prompt: Some(Prompt::Point([20, 12])), member_patches: vec![], peak_confidence: 0.9 },
        PromptedRegion { roi: PixelBox::new(40, 28, 60, 44), prompt: Some(Prompt::Point([50, 35])), member_patches: vec![], peak_confidence: 0.8 },
    ];
    let outcome = segment_regions("img", 64, 48, &regions, Variant::Lgsam, &backend, 2);
    println!("{} of {} pixels recovered, {} failures", outcome.mask.count(), truth.count(), outcome.failures.len());
    for f in &outcome.failures {
        println!("  region {}: {}", f.region, f.message);
    }
    Ok(())
}

//! Segmentation backends and the line-delimited JSON protocol used to talk
//! to external ones.
//!
//! One request per line:
//! `{"id":7,"image_id":"img","roi":[x0,y0,x1,y1],"prompt":{"point":[x,y]}}`
//! and one response per line:
//! `{"id":7,"rle":[[start,run],...],"width":w,"height":h,"score":0.9}`.
//! The response mask is ROI-local. A server may answer `{"id":7,"error":"..."}`
//! instead.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GuidanceError, Prompt, PromptedRegion, Variant};
use crate::dataset::{BitMask, SegmentMask};
use crate::geometry::PixelBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRequest {
    pub id: u64,
    pub image_id: String,
    pub roi: PixelBox,
    pub prompt: Option<Prompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResponse {
    pub id: u64,
    #[serde(default)]
    pub rle: Vec<(u32, u32)>,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    #[serde(default)]
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SegmentationResponse {
    pub fn from_mask(id: u64, local: &BitMask, score: f64) -> Self {
        let m = SegmentMask::from_bitmask("", "", local);
        Self { id, rle: m.rle, width: m.width, height: m.height, score, error: None }
    }

    pub fn failure(id: u64, message: impl Into<String>) -> Self {
        Self { id, rle: Vec::new(), width: 0, height: 0, score: 0.0, error: Some(message.into()) }
    }

    /// Validates the response against its request and decodes the ROI-local mask.
    pub fn into_local_mask(self, request: &SegmentationRequest) -> Result<BitMask, GuidanceError> {
        if let Some(e) = self.error {
            return Err(GuidanceError::Backend(e));
        }
        if self.id != request.id {
            return Err(GuidanceError::Protocol(format!("response id {} for request {}", self.id, request.id)));
        }
        let (rw, rh) = (request.roi.width(), request.roi.height());
        if self.width > rw || self.height > rh {
            return Err(GuidanceError::Protocol(format!(
                "mask {}x{} larger than roi {}x{}",
                self.width, self.height, rw, rh
            )));
        }
        let seg = SegmentMask {
            image_id: request.image_id.clone(),
            class: String::new(),
            width: self.width,
            height: self.height,
            rle: self.rle,
        };
        let decoded = seg.decode().map_err(|e| GuidanceError::Protocol(e.to_string()))?;
        let mut local = BitMask::new(rw, rh);
        local.paste_or(&decoded, 0, 0)?;
        Ok(local)
    }
}

/// Anything that turns a prompted region into a ROI-local mask.
pub trait SegmentationBackend: Send + Sync {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError>;
}

impl<T: SegmentationBackend + ?Sized> SegmentationBackend for Box<T> {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        (**self).segment(request)
    }
}

/// Chooses the backend for a part class. Every backend serves all parts;
/// [`PerPart`] routes to one backend per part, which is what the
/// ground-truth oracles need.
pub trait BackendRouter: Sync {
    fn backend_for(&self, part_class: &str) -> Result<&dyn SegmentationBackend, GuidanceError>;
}

impl<B: SegmentationBackend> BackendRouter for B {
    fn backend_for(&self, _: &str) -> Result<&dyn SegmentationBackend, GuidanceError> {
        Ok(self)
    }
}

/// One backend per part class.
pub struct PerPart<B> {
    pub backends: std::collections::BTreeMap<String, B>,
}

impl<B: SegmentationBackend> BackendRouter for PerPart<B> {
    fn backend_for(&self, part_class: &str) -> Result<&dyn SegmentationBackend, GuidanceError> {
        self.backends
            .get(part_class)
            .map(|b| b as &dyn SegmentationBackend)
            .ok_or_else(|| GuidanceError::Backend(format!("no backend for part '{part_class}'")))
    }
}

/// Returns the whole ROI.
#[derive(Debug, Default, Clone, Copy)]
pub struct BoxFillBackend;

impl SegmentationBackend for BoxFillBackend {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        let mut m = BitMask::new(request.roi.width(), request.roi.height());
        m.fill_box(PixelBox::new(0, 0, request.roi.width(), request.roi.height()));
        Ok(SegmentationResponse::from_mask(request.id, &m, 1.0))
    }
}

fn lookup<'a>(masks: &'a HashMap<String, BitMask>, image_id: &str) -> Result<&'a BitMask, GuidanceError> {
    masks
        .get(image_id)
        .ok_or_else(|| GuidanceError::Backend(format!("no image '{image_id}'")))
}

/// Returns the ground truth inside the ROI, ignoring the prompt. An upper
/// bound for any ROI-restricted segmenter.
#[derive(Debug, Default, Clone)]
pub struct OracleBackend {
    pub masks: HashMap<String, BitMask>,
}

impl SegmentationBackend for OracleBackend {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        let gt = lookup(&self.masks, &request.image_id)?;
        Ok(SegmentationResponse::from_mask(request.id, &gt.crop(request.roi), 1.0))
    }
}

/// A prompt-sensitive stand-in for a promptable segmenter.
///
/// A point prompt selects the 4-connected ground-truth component under the
/// point, within the ROI; a point off the part yields an empty mask. Text
/// and missing prompts return the ground truth inside the ROI.
#[derive(Debug, Default, Clone)]
pub struct PromptOracleBackend {
    pub masks: HashMap<String, BitMask>,
}

fn component_at(local: &BitMask, x: u32, y: u32) -> BitMask {
    let (w, h) = local.dims();
    let mut out = BitMask::new(w, h);
    if x >= w || y >= h || !local.get(x, y) {
        return out;
    }
    let mut stack = vec![(x, y)];
    out.set(x, y, true);
    while let Some((cx, cy)) = stack.pop() {
        let mut visit = |nx: u32, ny: u32| {
            if local.get(nx, ny) && !out.get(nx, ny) {
                out.set(nx, ny, true);
                stack.push((nx, ny));
            }
        };
        if cx > 0 {
            visit(cx - 1, cy);
        }
        if cx + 1 < w {
            visit(cx + 1, cy);
        }
        if cy > 0 {
            visit(cx, cy - 1);
        }
        if cy + 1 < h {
            visit(cx, cy + 1);
        }
    }
    out
}

impl SegmentationBackend for PromptOracleBackend {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        let gt = lookup(&self.masks, &request.image_id)?;
        let local = gt.crop(request.roi);
        let out = match &request.prompt {
            Some(Prompt::Point([x, y])) => {
                component_at(&local, x.wrapping_sub(request.roi.x0), y.wrapping_sub(request.roi.y0))
            }
            _ => local,
        };
        let score = if out.is_empty() { 0.0 } else { 1.0 };
        Ok(SegmentationResponse::from_mask(request.id, &out, score))
    }
}

fn exchange<R: BufRead, W: Write>(
    reader: &mut R,
    writer: &mut W,
    request: &SegmentationRequest,
) -> Result<SegmentationResponse, GuidanceError> {
    let mut line = serde_json::to_string(request).map_err(|e| GuidanceError::Protocol(e.to_string()))?;
    line.push('\n');
    writer
        .write_all(line.as_bytes())
        .and_then(|_| writer.flush())
        .map_err(|e| GuidanceError::Backend(format!("write failed: {e}")))?;
    let mut reply = String::new();
    match reader.read_line(&mut reply) {
        Ok(0) => Err(GuidanceError::Backend("backend closed the stream".into())),
        Ok(_) => serde_json::from_str(reply.trim_end()).map_err(|e| GuidanceError::Protocol(e.to_string())),
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
            Err(GuidanceError::Backend("backend timed out".into()))
        }
        Err(e) => Err(GuidanceError::Backend(format!("read failed: {e}"))),
    }
}

/// A backend reached over any reader/writer pair. Requests are serialized.
pub struct StreamBackend<R, W> {
    inner: Mutex<(R, W)>,
}

impl<R: BufRead + Send, W: Write + Send> StreamBackend<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { inner: Mutex::new((reader, writer)) }
    }
}

impl<R: BufRead + Send, W: Write + Send> SegmentationBackend for StreamBackend<R, W> {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        let mut guard = self.inner.lock().map_err(|_| GuidanceError::Backend("poisoned stream".into()))?;
        let (r, w) = &mut *guard;
        exchange(r, w, request)
    }
}

/// A backend at a TCP address. Connections are pooled, so concurrent
/// callers each get their own stream.
pub struct TcpBackend {
    addr: std::net::SocketAddr,
    timeout: Option<Duration>,
    idle: Mutex<Vec<(BufReader<TcpStream>, TcpStream)>>,
}

impl TcpBackend {
    pub fn new(addr: impl ToSocketAddrs, timeout: Option<Duration>) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        Ok(Self { addr, timeout, idle: Mutex::new(Vec::new()) })
    }

    fn connect(&self) -> io::Result<(BufReader<TcpStream>, TcpStream)> {
        let stream = match self.timeout {
            Some(t) => TcpStream::connect_timeout(&self.addr, t)?,
            None => TcpStream::connect(self.addr)?,
        };
        stream.set_read_timeout(self.timeout)?;
        stream.set_nodelay(true)?;
        Ok((BufReader::new(stream.try_clone()?), stream))
    }
}

impl SegmentationBackend for TcpBackend {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        let pooled = self.idle.lock().ok().and_then(|mut v| v.pop());
        let (mut r, mut w) = match pooled {
            Some(c) => c,
            None => self.connect().map_err(|e| GuidanceError::Backend(format!("connect {}: {e}", self.addr)))?,
        };
        let result = exchange(&mut r, &mut w, request);
        // A stream that failed mid-exchange may hold a stale reply; drop it.
        if result.is_ok() {
            if let Ok(mut v) = self.idle.lock() {
                v.push((r, w));
            }
        }
        result
    }
}

/// A backend answering `POST {url}` with one request per call, JSON in and
/// JSON out.
pub struct HttpBackend {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, timeout: Option<Duration>) -> Result<Self, GuidanceError> {
        let mut builder = reqwest::blocking::Client::builder();
        if let Some(t) = timeout {
            builder = builder.timeout(t);
        }
        let client = builder.build().map_err(|e| GuidanceError::Backend(e.to_string()))?;
        Ok(Self { url: url.into(), client })
    }
}

impl SegmentationBackend for HttpBackend {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        let backend_err = |e: reqwest::Error| GuidanceError::Backend(format!("{}: {e}", self.url));
        let resp = self.client.post(&self.url).json(request).send().map_err(backend_err)?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(GuidanceError::Backend(format!("{}: HTTP {status}: {body}", self.url)));
        }
        resp.json().map_err(|e| GuidanceError::Protocol(format!("{}: {e}", self.url)))
    }
}

/// A backend running as a child process speaking the protocol on
/// stdin/stdout. The child is killed on drop.
pub struct ProcessBackend {
    child: Child,
    stream: StreamBackend<BufReader<ChildStdout>, ChildStdin>,
}

impl ProcessBackend {
    pub fn spawn(command: &mut Command) -> io::Result<Self> {
        let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| io::Error::other("no stdin"))?;
        let stdout = child.stdout.take().ok_or_else(|| io::Error::other("no stdout"))?;
        Ok(Self { child, stream: StreamBackend::new(BufReader::new(stdout), stdin) })
    }
}

impl SegmentationBackend for ProcessBackend {
    fn segment(&self, request: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
        self.stream.segment(request)
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Serves `backend` over a line stream until EOF. Returns the number of
/// requests answered. Malformed lines get an error response with id 0.
pub fn serve_lines<R: BufRead, W: Write>(
    backend: &dyn SegmentationBackend,
    reader: R,
    mut writer: W,
) -> io::Result<usize> {
    let mut served = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<SegmentationRequest>(&line) {
            Ok(req) => backend
                .segment(&req)
                .unwrap_or_else(|e| SegmentationResponse::failure(req.id, e.to_string())),
            Err(e) => SegmentationResponse::failure(0, format!("bad request: {e}")),
        };
        let mut out = serde_json::to_string(&response).map_err(io::Error::other)?;
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Segments one region and returns its ROI-local mask.
pub fn segment(
    image_id: &str,
    request_id: u64,
    region: &PromptedRegion,
    variant: Variant,
    backend: &dyn SegmentationBackend,
) -> Result<BitMask, GuidanceError> {
    let roi = region.roi;
    if !variant.uses_backend() {
        let mut m = BitMask::new(roi.width(), roi.height());
        m.fill_box(PixelBox::new(0, 0, roi.width(), roi.height()));
        return Ok(m);
    }
    let request = SegmentationRequest {
        id: request_id,
        image_id: image_id.to_string(),
        roi,
        prompt: region.prompt.clone(),
    };
    backend.segment(&request)?.into_local_mask(&request)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionFailure {
    pub region: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SegmentationOutcome {
    /// Union of all successfully segmented regions, image-sized.
    pub mask: BitMask,
    pub failures: Vec<RegionFailure>,
}

/// Segments every region with at most `max_in_flight` concurrent backend
/// calls and unions the results. A failing region is recorded and skipped.
///
/// Request ids are region positions, so results do not depend on
/// completion order.
pub fn segment_regions(
    image_id: &str,
    width: u32,
    height: u32,
    regions: &[PromptedRegion],
    variant: Variant,
    backend: &dyn SegmentationBackend,
    max_in_flight: usize,
) -> SegmentationOutcome {
    let results: Vec<Mutex<Option<Result<BitMask, GuidanceError>>>> =
        regions.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = max_in_flight.clamp(1, regions.len().max(1));
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= regions.len() {
            break;
        }
        let r = segment(image_id, i as u64, &regions[i], variant, backend);
        *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
    };
    if workers == 1 || !variant.uses_backend() {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let mut mask = BitMask::new(width, height);
    let mut failures = Vec::new();
    for (i, slot) in results.into_iter().enumerate() {
        let roi = regions[i].roi;
        let outcome = slot.into_inner().unwrap_or_else(|e| e.into_inner());
        match outcome {
            Some(Ok(local)) => {
                if roi.x1 > width || roi.y1 > height {
                    failures.push(RegionFailure { region: i, message: format!("roi {roi:?} outside image") });
                    continue;
                }
                if let Err(e) = mask.paste_or(&local, roi.x0, roi.y0) {
                    failures.push(RegionFailure { region: i, message: e.to_string() });
                }
            }
            Some(Err(e)) => failures.push(RegionFailure { region: i, message: e.to_string() }),
            None => failures.push(RegionFailure { region: i, message: "not attempted".into() }),
        }
    }
    for f in &failures {
        log::warn!("{image_id}: region {} failed: {}", f.region, f.message);
    }
    SegmentationOutcome { mask, failures }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(roi: PixelBox, prompt: Option<Prompt>) -> PromptedRegion {
        PromptedRegion { roi, prompt, member_patches: vec![0], peak_confidence: 1.0 }
    }

    #[test]
    fn wire_format_is_exact() {
        let req = SegmentationRequest {
            id: 3,
            image_id: "img".into(),
            roi: PixelBox::new(1, 2, 5, 6),
            prompt: Some(Prompt::Point([3, 4])),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":3,"image_id":"img","roi":[1,2,5,6],"prompt":{"point":[3,4]}}"#
        );
        let text = SegmentationRequest { prompt: Some(Prompt::Text("door".into())), ..req.clone() };
        assert!(serde_json::to_string(&text).unwrap().ends_with(r#""prompt":{"text":"door"}}"#));
        let none = SegmentationRequest { prompt: None, ..req };
        assert!(serde_json::to_string(&none).unwrap().ends_with(r#""prompt":null}"#));
        let resp = SegmentationResponse { id: 3, rle: vec![(0, 2)], width: 4, height: 4, score: 0.5, error: None };
        assert_eq!(
            serde_json::to_string(&resp).unwrap(),
            r#"{"id":3,"rle":[[0,2]],"width":4,"height":4,"score":0.5}"#
        );
    }

    #[test]
    fn oracle_masks_stay_inside_roi() {
        let gt = BitMask::from_fn(20, 20, |x, y| (x + y) % 3 == 0);
        let backend = OracleBackend { masks: HashMap::from([("a".to_string(), gt.clone())]) };
        let roi = PixelBox::new(4, 5, 12, 9);
        let out = segment_regions("a", 20, 20, &[region(roi, None)], Variant::Lgsam, &backend, 1);
        assert!(out.failures.is_empty());
        assert_eq!(out.mask, gt.clipped_to(roi));
    }

    #[test]
    fn oversize_response_is_a_protocol_error() {
        struct Big;
        impl SegmentationBackend for Big {
            fn segment(&self, r: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
                let m = BitMask::new(r.roi.width() + 1, r.roi.height());
                Ok(SegmentationResponse::from_mask(r.id, &m, 1.0))
            }
        }
        let r = region(PixelBox::new(0, 0, 4, 4), None);
        assert!(matches!(segment("a", 0, &r, Variant::Lgsam, &Big), Err(GuidanceError::Protocol(_))));
        let out = segment_regions("a", 8, 8, &[r.clone(), r], Variant::Lgsam, &Big, 2);
        assert_eq!(out.failures.len(), 2);
        assert!(out.mask.is_empty());
    }

    #[test]
    fn naive_fills_without_backend() {
        struct Never;
        impl SegmentationBackend for Never {
            fn segment(&self, _: &SegmentationRequest) -> Result<SegmentationResponse, GuidanceError> {
                panic!("backend must not be called")
            }
        }
        let roi = PixelBox::new(2, 2, 6, 4);
        let out = segment_regions("a", 10, 10, &[region(roi, None)], Variant::PatchNaive, &Never, 4);
        assert_eq!(out.mask.count(), 8);
    }

    #[test]
    fn point_prompt_selects_component() {
        let gt = BitMask::from_fn(10, 10, |x, _| !(3..=6).contains(&x));
        let backend = PromptOracleBackend { masks: HashMap::from([("a".to_string(), gt)]) };
        let roi = PixelBox::new(0, 0, 10, 10);
        let left = segment("a", 0, &region(roi, Some(Prompt::Point([1, 1]))), Variant::Lgsam, &backend).unwrap();
        assert_eq!(left.count(), 30);
        let off = segment("a", 0, &region(roi, Some(Prompt::Point([5, 5]))), Variant::Cgsam, &backend).unwrap();
        assert!(off.is_empty());
        let text = segment("a", 0, &region(roi, Some(Prompt::Text("x".into()))), Variant::Ggsam, &backend).unwrap();
        assert_eq!(text.count(), 60);
    }

    #[test]
    fn stream_round_trip_through_server() {
        let gt = BitMask::from_fn(16, 16, |x, y| x > y);
        let oracle = OracleBackend { masks: HashMap::from([("a".to_string(), gt.clone())]) };
        let regions: Vec<PromptedRegion> = (0..4)
            .map(|i| region(PixelBox::new(i * 4, 0, i * 4 + 4, 16), Some(Prompt::Point([i * 4, 0]))))
            .collect();
        let mut input = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            let req = SegmentationRequest { id: i as u64, image_id: "a".into(), roi: r.roi, prompt: r.prompt.clone() };
            input.extend(serde_json::to_vec(&req).unwrap());
            input.push(b'\n');
        }
        let mut output = Vec::new();
        assert_eq!(serve_lines(&oracle, io::Cursor::new(input), &mut output).unwrap(), 4);
        // Replay the recorded replies through a client.
        let client = StreamBackend::new(io::Cursor::new(output), io::sink());
        let out = segment_regions("a", 16, 16, &regions, Variant::Lgsam, &client, 1);
        assert!(out.failures.is_empty());
        assert_eq!(out.mask, gt);
    }

    #[test]
    fn closed_stream_reports_per_region() {
        let client = StreamBackend::new(io::Cursor::new(Vec::new()), io::sink());
        let r = region(PixelBox::new(0, 0, 2, 2), None);
        let out = segment_regions("a", 4, 4, &[r], Variant::Lgsam, &client, 1);
        assert_eq!(out.failures.len(), 1);
        assert!(out.failures[0].message.contains("closed"));
    }
}

//! Remote wire-protocol clients.
//!
//! HTTP POST with JSON bodies, images as base64 PNG:
//!
//! - `POST /v1/detect`  `{"image": "<b64 png>"}` ->
//!   `{"boxes": [{"box": [x_min,y_min,x_max,y_max], "score": s, "label": "optional"}]}`
//! - `POST /v1/segment` `{"image": "<b64 png>", "box": [x_min,y_min,x_max,y_max]}` ->
//!   `{"mask": {"size": [h, w], "counts": [...]}}`
//! - `POST /v1/chat`    `{"messages": [{"role": "user", "parts": [{"text": ...} | {"image": "<b64 png>"}]}]}` ->
//!   `{"text": "<response>"}`
//!
//! Every response is validated before it can reach the pipeline:
//! out-of-bounds boxes, bad scores, and wrong-dimension masks are protocol
//! errors, never silently repaired. Transport and 5xx failures retry with
//! exponential backoff; 4xx failures do not.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::maskcore::{BinaryMask, BoundingBox, RleMask};
use crate::pipeline::{DetectedBox, DetectionResult};
use crate::vqa::{render_overlay, PromptSegment, RawAnswer, VqaPrompt};

use super::{
    BackendError, DetectorBackend, EpisodeContext, ResponseCache, SegmenterBackend, VlmBackend,
};

/// Wire-format bodies, shared with the stub server.
pub mod wire {
    use super::*;

    #[derive(Debug, Serialize, Deserialize)]
    pub struct DetectRequest {
        pub image: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct DetectResponse {
        pub boxes: Vec<WireBox>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct WireBox {
        #[serde(rename = "box")]
        pub bbox: [f64; 4],
        pub score: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub label: Option<String>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SegmentRequest {
        pub image: String,
        #[serde(rename = "box")]
        pub bbox: [f64; 4],
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SegmentResponse {
        pub mask: RleMask,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ChatRequest {
        pub messages: Vec<ChatMessage>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub params: Option<serde_json::Value>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ChatMessage {
        pub role: String,
        pub parts: Vec<ChatPart>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(untagged)]
    pub enum ChatPart {
        Text { text: String },
        Image { image: String },
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ChatResponse {
        pub text: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ErrorResponse {
        pub error: String,
    }
}

/// One POST attempt. `retryable` marks transport-level and 5xx failures.
#[derive(Debug)]
pub struct TransportFailure {
    pub retryable: bool,
    pub message: String,
}

pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, body: &[u8]) -> Result<Vec<u8>, TransportFailure>;
}

/// Blocking reqwest transport with optional bearer-token pass-through.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
    bearer: Option<String>,
}

impl ReqwestTransport {
    pub fn new(bearer: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self { client, bearer })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, body: &[u8]) -> Result<Vec<u8>, TransportFailure> {
        let mut request = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(token) = &self.bearer {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| TransportFailure {
            retryable: true,
            message: e.to_string(),
        })?;
        let status = response.status();
        let bytes = response
            .bytes()
            .map_err(|e| TransportFailure {
                retryable: true,
                message: e.to_string(),
            })?
            .to_vec();
        if status.is_success() {
            Ok(bytes)
        } else {
            Err(TransportFailure {
                retryable: status.is_server_error(),
                message: format!("status {status}: {}", String::from_utf8_lossy(&bytes)),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// Total attempts per request.
    pub attempts: u32,
    /// First backoff delay; doubles per retry.
    pub backoff_initial: Duration,
    /// Bound on concurrent in-flight requests across all workers.
    pub inflight_limit: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff_initial: Duration::from_secs(1),
            inflight_limit: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteEndpoints {
    pub detect: String,
    pub segment: String,
    pub chat: String,
}

impl RemoteEndpoints {
    pub fn from_base(base: &str) -> Self {
        let base = base.trim_end_matches('/');
        Self {
            detect: format!("{base}/v1/detect"),
            segment: format!("{base}/v1/segment"),
            chat: format!("{base}/v1/chat"),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    state: Mutex<usize>,
    cv: Condvar,
    limit: usize,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            state: Mutex::new(0),
            cv: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut inflight = self.state.lock().expect("gate poisoned");
        while *inflight >= self.limit {
            inflight = self.cv.wait(inflight).expect("gate poisoned");
        }
        *inflight += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut inflight = self.gate.state.lock().expect("gate poisoned");
        *inflight -= 1;
        self.gate.cv.notify_one();
    }
}

/// Shared request machinery: in-flight gating, optional response cache,
/// bounded retries with exponential backoff on retryable failures.
pub struct RemoteClient {
    transport: Arc<dyn HttpTransport>,
    options: RemoteOptions,
    gate: Gate,
    cache: Option<Arc<ResponseCache>>,
}

impl RemoteClient {
    pub fn new(
        transport: Arc<dyn HttpTransport>,
        options: RemoteOptions,
        cache: Option<Arc<ResponseCache>>,
    ) -> Self {
        let gate = Gate::new(options.inflight_limit);
        Self {
            transport,
            options,
            gate,
            cache,
        }
    }

    fn call(&self, url: &str, body: &[u8]) -> Result<Vec<u8>, BackendError> {
        let key = self.cache.as_ref().map(|c| {
            let key = ResponseCache::key(url, body);
            (c.clone(), key)
        });
        if let Some((cache, key)) = &key {
            if let Some(payload) = cache.get(key) {
                return Ok(payload);
            }
        }
        let _guard = self.gate.enter();
        let mut last = String::new();
        for attempt in 1..=self.options.attempts {
            match self.transport.post_json(url, body) {
                Ok(payload) => {
                    if let Some((cache, k)) = &key {
                        if let Err(e) = cache.put(k, &payload) {
                            log::warn!("cache write failed for {url}: {e}");
                        }
                    }
                    return Ok(payload);
                }
                Err(failure) => {
                    last = failure.message;
                    if !failure.retryable || attempt == self.options.attempts {
                        return Err(BackendError::Transport {
                            endpoint: url.to_string(),
                            attempts: attempt,
                            reason: last,
                        });
                    }
                    let delay = self.options.backoff_initial * 2u32.pow(attempt - 1);
                    std::thread::sleep(delay);
                }
            }
        }
        Err(BackendError::Transport {
            endpoint: url.to_string(),
            attempts: self.options.attempts,
            reason: last,
        })
    }
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn parse_response<T: serde::de::DeserializeOwned>(
    url: &str,
    payload: &[u8],
) -> Result<T, BackendError> {
    serde_json::from_slice(payload).map_err(|e| {
        BackendError::Protocol(format!(
            "{url}: invalid response payload: {e}: {}",
            String::from_utf8_lossy(&payload[..payload.len().min(200)])
        ))
    })
}

pub struct RemoteDetector {
    client: RemoteClient,
    url: String,
}

impl RemoteDetector {
    pub fn new(url: String, transport: Arc<dyn HttpTransport>, options: RemoteOptions,
               cache: Option<Arc<ResponseCache>>) -> Self {
        Self {
            client: RemoteClient::new(transport, options, cache),
            url,
        }
    }
}

impl DetectorBackend for RemoteDetector {
    fn detect(&self, ctx: &EpisodeContext) -> Result<DetectionResult, BackendError> {
        let (width, height) = (ctx.episode.query.width, ctx.episode.query.height);
        let body = serde_json::to_vec(&wire::DetectRequest {
            image: b64(ctx.query_png_bytes()?),
        })
        .expect("request encodes");
        let payload = self.client.call(&self.url, &body)?;
        let response: wire::DetectResponse = parse_response(&self.url, &payload)?;

        let mut boxes = Vec::with_capacity(response.boxes.len());
        for (i, wb) in response.boxes.into_iter().enumerate() {
            if !(0.0..=1.0).contains(&wb.score) || !wb.score.is_finite() {
                return Err(BackendError::Protocol(format!(
                    "{}: box {i} score {} outside [0,1]",
                    self.url, wb.score
                )));
            }
            let bbox = BoundingBox::from_f64_in_image(wb.bbox, width, height).map_err(|e| {
                BackendError::Protocol(format!(
                    "{}: box {i} {:?} rejected for {width}x{height} image: {e}",
                    self.url, wb.bbox
                ))
            })?;
            boxes.push(DetectedBox {
                display_id: (i + 1) as u32,
                bbox,
                score: wb.score,
                hint: wb.label,
            });
        }
        Ok(DetectionResult {
            boxes,
            source: "remote".into(),
        })
    }
}

pub struct RemoteSegmenter {
    client: RemoteClient,
    url: String,
}

impl RemoteSegmenter {
    pub fn new(url: String, transport: Arc<dyn HttpTransport>, options: RemoteOptions,
               cache: Option<Arc<ResponseCache>>) -> Self {
        Self {
            client: RemoteClient::new(transport, options, cache),
            url,
        }
    }
}

impl SegmenterBackend for RemoteSegmenter {
    fn segment(
        &self,
        bbox: BoundingBox,
        ctx: &EpisodeContext,
    ) -> Result<BinaryMask, BackendError> {
        let (width, height) = (ctx.episode.query.width, ctx.episode.query.height);
        let body = serde_json::to_vec(&wire::SegmentRequest {
            image: b64(ctx.query_png_bytes()?),
            bbox: [
                bbox.x_min as f64,
                bbox.y_min as f64,
                bbox.x_max as f64,
                bbox.y_max as f64,
            ],
        })
        .expect("request encodes");
        let payload = self.client.call(&self.url, &body)?;
        let response: wire::SegmentResponse = parse_response(&self.url, &payload)?;
        if response.mask.width != width || response.mask.height != height {
            return Err(BackendError::Protocol(format!(
                "{}: mask is {}x{}, image is {width}x{height}",
                self.url, response.mask.width, response.mask.height
            )));
        }
        response
            .mask
            .to_mask()
            .map_err(|e| BackendError::Protocol(format!("{}: mask decode: {e}", self.url)))
    }
}

pub struct RemoteVlm {
    client: RemoteClient,
    url: String,
    /// Opaque generation parameters forwarded verbatim (temperature 0 is
    /// the only default).
    params: serde_json::Value,
    overlay_line_width: u32,
}

impl RemoteVlm {
    pub fn new(url: String, transport: Arc<dyn HttpTransport>, options: RemoteOptions,
               cache: Option<Arc<ResponseCache>>, params: Option<serde_json::Value>) -> Self {
        let mut merged = serde_json::json!({ "temperature": 0 });
        if let Some(serde_json::Value::Object(extra)) = params {
            let target = merged.as_object_mut().expect("object literal");
            for (k, v) in extra {
                target.insert(k, v);
            }
        }
        Self {
            client: RemoteClient::new(transport, options, cache),
            url,
            params: merged,
            overlay_line_width: 2,
        }
    }

    fn build_parts(
        &self,
        prompt: &VqaPrompt,
        ctx: &EpisodeContext,
    ) -> Result<Vec<wire::ChatPart>, BackendError> {
        let mut parts = Vec::with_capacity(prompt.segments.len());
        for segment in &prompt.segments {
            match segment {
                PromptSegment::Text(text) => parts.push(wire::ChatPart::Text {
                    text: text.clone(),
                }),
                PromptSegment::SupportImage(i) => parts.push(wire::ChatPart::Image {
                    image: b64(&ctx.support_png_bytes(*i)?),
                }),
                PromptSegment::QueryImage { overlay } => {
                    let image = if *overlay {
                        let annotated =
                            render_overlay(ctx.query_pixels()?, &prompt.overlay, self.overlay_line_width)
                                .map_err(|e| BackendError::Image(e.to_string()))?;
                        let mut bytes = Vec::new();
                        annotated
                            .write_to(
                                &mut std::io::Cursor::new(&mut bytes),
                                image::ImageFormat::Png,
                            )
                            .map_err(|e| BackendError::Image(e.to_string()))?;
                        b64(&bytes)
                    } else {
                        b64(ctx.query_png_bytes()?)
                    };
                    parts.push(wire::ChatPart::Image { image });
                }
            }
        }
        Ok(parts)
    }
}

impl VlmBackend for RemoteVlm {
    fn chat(&self, prompt: &VqaPrompt, ctx: &EpisodeContext) -> Result<RawAnswer, BackendError> {
        let body = serde_json::to_vec(&wire::ChatRequest {
            messages: vec![wire::ChatMessage {
                role: "user".into(),
                parts: self.build_parts(prompt, ctx)?,
            }],
            params: Some(self.params.clone()),
        })
        .expect("request encodes");
        let payload = self.client.call(&self.url, &body)?;
        let response: wire::ChatResponse = parse_response(&self.url, &payload)?;
        Ok(RawAnswer::new(response.text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Transport that replays a fixed response and counts calls.
    struct FixedTransport {
        response: Vec<u8>,
        calls: AtomicU32,
    }

    impl FixedTransport {
        fn new(response: &str) -> Arc<Self> {
            Arc::new(Self {
                response: response.as_bytes().to_vec(),
                calls: AtomicU32::new(0),
            })
        }
    }

    impl HttpTransport for FixedTransport {
        fn post_json(&self, _url: &str, _body: &[u8]) -> Result<Vec<u8>, TransportFailure> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.response.clone())
        }
    }

    struct FailingTransport {
        retryable: bool,
        calls: AtomicU32,
    }

    impl HttpTransport for FailingTransport {
        fn post_json(&self, _url: &str, _body: &[u8]) -> Result<Vec<u8>, TransportFailure> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Err(TransportFailure {
                retryable: self.retryable,
                message: "boom".into(),
            })
        }
    }

    fn fast_options() -> RemoteOptions {
        RemoteOptions {
            attempts: 3,
            backoff_initial: Duration::from_millis(1),
            inflight_limit: 4,
        }
    }

    fn episode_ctx() -> (tempfile::TempDir, crate::dataset::Episode) {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::dataset::SceneSpec {
            num_classes: 2,
            num_images: 8,
            classes_per_image: [2, 2],
            ..Default::default()
        };
        let manifest =
            crate::dataset::generate_synthetic_dataset(&spec, 3, dir.path()).unwrap();
        let index = crate::dataset::DatasetIndex::load_manifest(&manifest).unwrap();
        let episode = crate::dataset::EpisodeSampler::new(
            &index,
            crate::dataset::SamplerParams {
                n_ways: 2,
                k_shots: 1,
                seed: 1,
                negative_query_rate: 0.0,
            },
        )
        .sample(0, 0)
        .unwrap();
        (dir, episode)
    }

    #[test]
    fn detector_rejects_out_of_bounds_box() {
        let (_d, episode) = episode_ctx();
        let ctx = EpisodeContext::new(&episode);
        let w = episode.query.width;
        let body = format!(
            "{{\"boxes\": [{{\"box\": [0.0, 0.0, {}.0, 10.0], \"score\": 0.9}}]}}",
            w + 5
        );
        let transport = FixedTransport::new(&body);
        let det = RemoteDetector::new("http://t/v1/detect".into(), transport, fast_options(), None);
        let err = det.detect(&ctx).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)), "{err}");
    }

    #[test]
    fn detector_rejects_bad_score() {
        let (_d, episode) = episode_ctx();
        let ctx = EpisodeContext::new(&episode);
        let transport =
            FixedTransport::new("{\"boxes\": [{\"box\": [0,0,2,2], \"score\": 1.5}]}");
        let det = RemoteDetector::new("http://t/v1/detect".into(), transport, fast_options(), None);
        assert!(matches!(
            det.detect(&ctx),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn detector_rounds_fractional_coords() {
        let (_d, episode) = episode_ctx();
        let ctx = EpisodeContext::new(&episode);
        let transport =
            FixedTransport::new("{\"boxes\": [{\"box\": [1.3, 1.9, 4.1, 5.0], \"score\": 0.8, \"label\": \"blob\"}]}");
        let det = RemoteDetector::new("http://t/v1/detect".into(), transport, fast_options(), None);
        let result = det.detect(&ctx).unwrap();
        assert_eq!(result.boxes.len(), 1);
        assert_eq!(result.boxes[0].bbox, BoundingBox::new(1, 1, 5, 5).unwrap());
        assert_eq!(result.boxes[0].hint.as_deref(), Some("blob"));
    }

    #[test]
    fn segmenter_rejects_wrong_size_mask() {
        let (_d, episode) = episode_ctx();
        let ctx = EpisodeContext::new(&episode);
        let (w, h) = (episode.query.width + 1, episode.query.height);
        let body = format!(
            "{{\"mask\": {{\"size\": [{h}, {w}], \"counts\": [{}]}}}}",
            w as u64 * h as u64
        );
        let transport = FixedTransport::new(&body);
        let seg =
            RemoteSegmenter::new("http://t/v1/segment".into(), transport, fast_options(), None);
        let bbox = BoundingBox::new(0, 0, 2, 2).unwrap();
        assert!(matches!(
            seg.segment(bbox, &ctx),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn retry_then_exhaust_names_endpoint() {
        let (_d, episode) = episode_ctx();
        let ctx = EpisodeContext::new(&episode);
        let transport = Arc::new(FailingTransport {
            retryable: true,
            calls: AtomicU32::new(0),
        });
        let det = RemoteDetector::new(
            "http://down.example/v1/detect".into(),
            transport.clone(),
            fast_options(),
            None,
        );
        let err = det.detect(&ctx).unwrap_err();
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
        assert!(err.to_string().contains("http://down.example/v1/detect"));
        assert!(err.is_transport());
    }

    #[test]
    fn non_retryable_fails_fast() {
        let (_d, episode) = episode_ctx();
        let ctx = EpisodeContext::new(&episode);
        let transport = Arc::new(FailingTransport {
            retryable: false,
            calls: AtomicU32::new(0),
        });
        let det = RemoteDetector::new(
            "http://t/v1/detect".into(),
            transport.clone(),
            fast_options(),
            None,
        );
        assert!(det.detect(&ctx).is_err());
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_avoids_second_call() {
        let (_d, episode) = episode_ctx();
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let transport = FixedTransport::new("{\"text\": \"ANSWER: {}\"}");
        let vlm = RemoteVlm::new(
            "http://t/v1/chat".into(),
            transport.clone(),
            fast_options(),
            Some(cache),
            None,
        );
        let ctx = EpisodeContext::new(&episode);
        let prompt = crate::vqa::build_prompt(
            &episode,
            &crate::pipeline::DetectionResult::empty("t"),
            &crate::vqa::PromptTemplate::default(),
        )
        .unwrap();
        let a = vlm.chat(&prompt, &ctx).unwrap();
        let b = vlm.chat(&prompt, &ctx).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(
            transport.calls.load(Ordering::SeqCst),
            1,
            "second identical prompt must be served from cache"
        );
    }
}

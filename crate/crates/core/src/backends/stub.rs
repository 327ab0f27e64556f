//! Bundled stub server: the three wire-protocol endpoints served over the
//! simulated backends, for contract tests and desk-scale remote runs.
//!
//! The stub is constructed from a dataset manifest and resolves incoming
//! detect/segment images by content hash, so clients that send the
//! original file bytes get ground-truth-backed answers. Chat requests are
//! answered by reading the box colors out of the annotated query image,
//! which works on synthetic scenes where every class has a distinct flat
//! fill color.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::Json;
use axum::routing::post;
use axum::Router;
use base64::Engine;
use serde_json::{json, Value};

use crate::dataset::{class_color, DatasetIndex};
use crate::maskcore::{BinaryMask, BoundingBox};
use crate::seeding::rng_from_parts;

use super::remote::{wire, RemoteEndpoints};
use super::sim::{sim_detect_boxes, sim_segment, SimInstance};
use super::{BackendError, NoiseProfile};

struct StubImage {
    width: u32,
    height: u32,
    /// (global class id, box, decoded mask)
    instances: Vec<(u32, BoundingBox, BinaryMask)>,
}

struct StubState {
    /// sha256 of the PNG file bytes -> image record
    images: HashMap<String, StubImage>,
    /// exact fill color -> global class id
    colors: HashMap<[u8; 3], u32>,
    labels: HashMap<u32, String>,
    profile: NoiseProfile,
}

/// In-process HTTP server bound to an ephemeral localhost port.
pub struct StubServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn spawn(index: &DatasetIndex, profile: NoiseProfile) -> Result<Self, BackendError> {
        let mut images = HashMap::new();
        for record in &index.images {
            let path = index.resolve_path(record);
            let bytes = std::fs::read(&path)
                .map_err(|e| BackendError::Image(format!("{}: {e}", path.display())))?;
            let mut instances = Vec::with_capacity(record.instances.len());
            for inst in &record.instances {
                let mask = inst
                    .mask
                    .to_mask()
                    .map_err(|e| BackendError::Config(e.to_string()))?;
                instances.push((inst.class_id, inst.bbox, mask));
            }
            images.insert(
                crate::seeding::sha256_hex(&bytes),
                StubImage {
                    width: record.width,
                    height: record.height,
                    instances,
                },
            );
        }
        let n = index.classes.len();
        let colors = index
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (class_color(i, n), c.id))
            .collect();
        let labels = index
            .classes
            .iter()
            .map(|c| (c.id, c.label.clone()))
            .collect();
        let state = Arc::new(StubState {
            images,
            colors,
            labels,
            profile,
        });

        let app = Router::new()
            .route("/v1/detect", post(handle_detect))
            .route("/v1/segment", post(handle_segment))
            .route("/v1/chat", post(handle_chat))
            .with_state(state);

        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
                    .await
                    .expect("bind stub listener");
                let addr = listener.local_addr().expect("local addr");
                let _ = addr_tx.send(addr);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = shutdown_rx.await;
                    })
                    .await
                    .expect("stub server");
            });
        });
        let addr = addr_rx
            .recv_timeout(std::time::Duration::from_secs(10))
            .map_err(|_| BackendError::Config("stub server failed to start".into()))?;
        Ok(Self {
            addr,
            shutdown: Some(shutdown_tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn endpoints(&self) -> RemoteEndpoints {
        RemoteEndpoints::from_base(&self.base_url())
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

type Reply = (StatusCode, Json<Value>);

fn bad_request(msg: impl Into<String>) -> Reply {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": msg.into() })))
}

fn unprocessable(msg: impl Into<String>) -> Reply {
    (
        StatusCode::UNPROCESSABLE_ENTITY,
        Json(json!({ "error": msg.into() })),
    )
}

fn decode_image(b64: &str) -> Result<(Vec<u8>, String), Reply> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| bad_request(format!("image is not valid base64: {e}")))?;
    if image::guess_format(&bytes).is_err() {
        return Err(bad_request("image bytes are not a decodable image"));
    }
    let hash = crate::seeding::sha256_hex(&bytes);
    Ok((bytes, hash))
}

fn lookup<'a>(state: &'a StubState, hash: &str) -> Result<&'a StubImage, Reply> {
    state
        .images
        .get(hash)
        .ok_or_else(|| unprocessable("image content does not match any manifest image"))
}

async fn handle_detect(State(state): State<Arc<StubState>>, body: axum::body::Bytes) -> Reply {
    let request: wire::DetectRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("invalid detect body: {e}")),
    };
    let (_bytes, hash) = match decode_image(&request.image) {
        Ok(v) => v,
        Err(reply) => return reply,
    };
    let img = match lookup(&state, &hash) {
        Ok(img) => img,
        Err(reply) => return reply,
    };
    let instances: Vec<SimInstance> = img
        .instances
        .iter()
        .map(|(class, bbox, mask)| SimInstance {
            bbox: *bbox,
            mask,
            class: *class,
        })
        .collect();
    let mut rng = rng_from_parts(
        "vise.stub",
        &[&state.profile.seed.to_le_bytes(), hash.as_bytes(), b"detect"],
    );
    let boxes = sim_detect_boxes(&instances, img.width, img.height, &state.profile, &mut rng);
    let response = wire::DetectResponse {
        boxes: boxes
            .into_iter()
            .map(|b| wire::WireBox {
                bbox: [
                    b.bbox.x_min as f64,
                    b.bbox.y_min as f64,
                    b.bbox.x_max as f64,
                    b.bbox.y_max as f64,
                ],
                score: b.score,
                label: None,
            })
            .collect(),
    };
    (StatusCode::OK, Json(serde_json::to_value(response).expect("encodes")))
}

async fn handle_segment(State(state): State<Arc<StubState>>, body: axum::body::Bytes) -> Reply {
    let request: wire::SegmentRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("invalid segment body: {e}")),
    };
    let (_bytes, hash) = match decode_image(&request.image) {
        Ok(v) => v,
        Err(reply) => return reply,
    };
    let img = match lookup(&state, &hash) {
        Ok(img) => img,
        Err(reply) => return reply,
    };
    let bbox = match BoundingBox::from_f64_in_image(request.bbox, img.width, img.height) {
        Ok(b) => b,
        Err(e) => return unprocessable(format!("box rejected: {e}")),
    };
    let instances: Vec<SimInstance> = img
        .instances
        .iter()
        .map(|(class, b, mask)| SimInstance {
            bbox: *b,
            mask,
            class: *class,
        })
        .collect();
    let mut rng = rng_from_parts(
        "vise.stub",
        &[
            &state.profile.seed.to_le_bytes(),
            hash.as_bytes(),
            format!("segment:{},{},{},{}", bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max)
                .as_bytes(),
        ],
    );
    match sim_segment(&instances, bbox, img.width, img.height, &state.profile, &mut rng) {
        Ok(mask) => {
            let response = wire::SegmentResponse { mask: mask.to_rle() };
            (StatusCode::OK, Json(serde_json::to_value(response).expect("encodes")))
        }
        Err(e) => unprocessable(e.to_string()),
    }
}

async fn handle_chat(State(state): State<Arc<StubState>>, body: axum::body::Bytes) -> Reply {
    let request: wire::ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("invalid chat body: {e}")),
    };
    let Some(message) = request.messages.first() else {
        return bad_request("chat body carries no messages");
    };
    if message.parts.is_empty() {
        return bad_request("chat message carries no parts");
    }
    let mut text = String::new();
    let mut image_parts: Vec<&str> = Vec::new();
    for part in &message.parts {
        match part {
            wire::ChatPart::Text { text: t } => text.push_str(t),
            wire::ChatPart::Image { image } => image_parts.push(image),
        }
    }

    let allowed = quoted_after(&text, "The support classes are: ");
    let reply = if text.contains("\"boxes\"") {
        propose_boxes_reply(&state, &image_parts, &allowed)
    } else {
        classify_reply(&state, &text, &image_parts, &allowed)
    };
    match reply {
        Ok(answer) => (StatusCode::OK, Json(json!({ "text": answer }))),
        Err(reply) => reply,
    }
}

/// Box-proposal mode: the query arrives as original bytes, so resolve it
/// by hash and emit the boxes of instances whose class is in the support
/// set, with the profile's coordinate noise.
fn propose_boxes_reply(
    state: &StubState,
    image_parts: &[&str],
    allowed: &[String],
) -> Result<String, Reply> {
    let mut found: Option<(&StubImage, String)> = None;
    for part in image_parts {
        let (_bytes, hash) = decode_image(part)?;
        if let Some(img) = state.images.get(&hash) {
            found = Some((img, hash));
        }
    }
    let Some((img, hash)) = found else {
        return Err(unprocessable(
            "no chat image matches a manifest image to propose boxes for",
        ));
    };
    let mut rng = rng_from_parts(
        "vise.stub",
        &[
            &state.profile.seed.to_le_bytes(),
            hash.as_bytes(),
            b"propose",
        ],
    );
    use rand::Rng;
    let noise = state.profile.box_proposal_noise;
    let boxes: Vec<[f64; 4]> = img
        .instances
        .iter()
        .filter(|(class, _, _)| {
            state
                .labels
                .get(class)
                .map(|l| allowed.iter().any(|a| a.eq_ignore_ascii_case(l)))
                .unwrap_or(false)
        })
        .map(|(_, bbox, _)| {
            let mut coords = [
                bbox.x_min as f64,
                bbox.y_min as f64,
                bbox.x_max as f64,
                bbox.y_max as f64,
            ];
            if noise > 0.0 {
                for (i, c) in coords.iter_mut().enumerate() {
                    let extent = if i % 2 == 0 { img.width } else { img.height };
                    *c += rng.random_range(-noise..=noise) * extent as f64;
                }
            }
            coords
        })
        .collect();
    Ok(format!(
        "Proposing candidate regions.\nANSWER: {}",
        json!({ "boxes": boxes })
    ))
}

/// Classification mode: parse the choice lines, read the dominant class
/// fill color inside each region of the annotated query image, and answer
/// with that class's label when it belongs to the support set.
fn classify_reply(
    state: &StubState,
    text: &str,
    image_parts: &[&str],
    allowed: &[String],
) -> Result<String, Reply> {
    let boxes = parse_choice_lines(text);
    if boxes.is_empty() {
        return Ok("Nothing to classify.\nANSWER: {}".into());
    }
    let Some(last_image) = image_parts.last() else {
        return Err(bad_request("classification chat carries no query image"));
    };
    let (bytes, _hash) = decode_image(last_image)?;
    let Ok(decoded) = image::load_from_memory(&bytes) else {
        return Err(bad_request("query image does not decode"));
    };
    let rgb = decoded.to_rgb8();

    let mut entries = Vec::with_capacity(boxes.len());
    for (id, [x0, y0, x1, y1]) in boxes {
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for y in y0..y1.min(rgb.height()) {
            for x in x0..x1.min(rgb.width()) {
                if let Some(class) = state.colors.get(&rgb.get_pixel(x, y).0) {
                    *counts.entry(*class).or_insert(0) += 1;
                }
            }
        }
        let best = counts
            .into_iter()
            .max_by_key(|&(class, count)| (count, std::cmp::Reverse(class)))
            .map(|(class, _)| class);
        let label = best
            .and_then(|class| state.labels.get(&class))
            .filter(|label| allowed.iter().any(|a| a.eq_ignore_ascii_case(label)))
            .map(|l| l.as_str())
            .unwrap_or("none");
        entries.push(format!(
            "{}: {}",
            serde_json::to_string(&id.to_string()).expect("encodes"),
            serde_json::to_string(label).expect("encodes")
        ));
    }
    Ok(format!(
        "Reading the annotated regions.\nANSWER: {{{}}}",
        entries.join(", ")
    ))
}

/// Extract `Box <id>: region (x0,y0)-(x1,y1)` lines.
fn parse_choice_lines(text: &str) -> Vec<(u32, [u32; 4])> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.trim().strip_prefix("Box ") else {
            continue;
        };
        let Some((id_text, rest)) = rest.split_once(": region (") else {
            continue;
        };
        let Ok(id) = id_text.trim().parse::<u32>() else {
            continue;
        };
        let Some((pair1, rest)) = rest.split_once(")-(") else {
            continue;
        };
        let Some((pair2, _)) = rest.split_once(')') else {
            continue;
        };
        let nums: Vec<u32> = pair1
            .split(',')
            .chain(pair2.split(','))
            .filter_map(|c| c.trim().parse().ok())
            .collect();
        if nums.len() == 4 {
            out.push((id, [nums[0], nums[1], nums[2], nums[3]]));
        }
    }
    out
}

/// Collect the quoted strings that follow `marker` on its line.
fn quoted_after(text: &str, marker: &str) -> Vec<String> {
    let Some(pos) = text.find(marker) else {
        return Vec::new();
    };
    let rest = &text[pos + marker.len()..];
    let line = rest.lines().next().unwrap_or("");
    let mut out = Vec::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '"' {
            continue;
        }
        let mut current = String::new();
        let mut escaped = false;
        for c in chars.by_ref() {
            if escaped {
                current.push(c);
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                break;
            } else {
                current.push(c);
            }
        }
        out.push(current);
    }
    out
}

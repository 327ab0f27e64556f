//! Uniform interfaces to the three external tools, plus deterministic
//! simulators, remote wire-protocol clients, a content-addressed response
//! cache, and a bundled stub server.
//!
//! The pipeline only ever talks to the three traits here. The simulated
//! family answers from episode ground truth (exactly, or through a
//! parameterized noise model); the remote family speaks a small JSON/HTTP
//! protocol and validates every payload before it can reach the pipeline.

mod cache;
mod remote;
mod sim;
mod stub;

pub use cache::ResponseCache;
pub use remote::{
    wire, HttpTransport, RemoteDetector, RemoteEndpoints, RemoteOptions, RemoteSegmenter,
    RemoteVlm, ReqwestTransport, TransportFailure,
};
pub use sim::{BoxFillSegmenter, ScriptedVlm, SimulatedDetector, SimulatedSegmenter, SimulatedVlm};
pub use stub::StubServer;

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Episode;
use crate::maskcore::{BinaryMask, BoundingBox};
use crate::pipeline::DetectionResult;
use crate::vqa::{RawAnswer, VqaPrompt};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport to {endpoint} failed after {attempts} attempt(s): {reason}")]
    Transport {
        endpoint: String,
        attempts: u32,
        reason: String,
    },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("fixture: {0}")]
    Fixture(String),
    #[error("image: {0}")]
    Image(String),
    #[error("backend config: {0}")]
    Config(String),
}

impl BackendError {
    /// Transport failures abort the run but leave it resumable.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

/// Per-episode view handed to every backend call. Oracles read the ground
/// truth; remote clients read the image bytes (lazily, cached per episode).
pub struct EpisodeContext<'a> {
    pub episode: &'a Episode,
    query_bytes: OnceLock<Result<Vec<u8>, String>>,
    query_pixels: OnceLock<Result<image::RgbImage, String>>,
}

impl<'a> EpisodeContext<'a> {
    pub fn new(episode: &'a Episode) -> Self {
        Self {
            episode,
            query_bytes: OnceLock::new(),
            query_pixels: OnceLock::new(),
        }
    }

    pub fn episode_index(&self) -> u64 {
        self.episode.episode_index
    }

    /// Raw PNG file bytes of the query image (content-hash stable).
    pub fn query_png_bytes(&self) -> Result<&[u8], BackendError> {
        self.query_bytes
            .get_or_init(|| read_bytes(&self.episode.query.path))
            .as_deref()
            .map_err(|e| BackendError::Image(e.clone()))
    }

    /// Decoded query pixels, for overlay rendering.
    pub fn query_pixels(&self) -> Result<&image::RgbImage, BackendError> {
        self.query_pixels
            .get_or_init(|| {
                let bytes = read_bytes(&self.episode.query.path)?;
                image::load_from_memory(&bytes)
                    .map(|img| img.to_rgb8())
                    .map_err(|e| format!("{}: {e}", self.episode.query.path.display()))
            })
            .as_ref()
            .map_err(|e| BackendError::Image(e.clone()))
    }

    /// Raw PNG file bytes of one support exemplar.
    pub fn support_png_bytes(&self, index: usize) -> Result<Vec<u8>, BackendError> {
        let path: &PathBuf = &self
            .episode
            .support
            .get(index)
            .ok_or_else(|| BackendError::Config(format!("support index {index} out of range")))?
            .path;
        read_bytes(path).map_err(BackendError::Image)
    }
}

fn read_bytes(path: &std::path::Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

pub trait DetectorBackend: Send + Sync {
    fn detect(&self, ctx: &EpisodeContext) -> Result<DetectionResult, BackendError>;
}

pub trait VlmBackend: Send + Sync {
    fn chat(&self, prompt: &VqaPrompt, ctx: &EpisodeContext) -> Result<RawAnswer, BackendError>;
}

pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, bbox: BoundingBox, ctx: &EpisodeContext)
        -> Result<BinaryMask, BackendError>;
}

/// The three tools an episode needs, shareable across workers.
#[derive(Clone)]
pub struct BackendSet {
    pub detector: Arc<dyn DetectorBackend>,
    pub vlm: Arc<dyn VlmBackend>,
    pub segmenter: Arc<dyn SegmenterBackend>,
}

impl BackendSet {
    /// Exact oracles: identity confusion, no jitter, no boundary noise.
    pub fn oracle() -> Self {
        Self::noisy(NoiseProfile::default())
    }

    pub fn noisy(profile: NoiseProfile) -> Self {
        Self {
            detector: Arc::new(SimulatedDetector::new(profile.clone())),
            vlm: Arc::new(SimulatedVlm::new(profile.clone())),
            segmenter: Arc::new(SimulatedSegmenter::new(profile)),
        }
    }
}

/// Error-model parameters for the simulated backends, mirroring the
/// observed failure taxonomy: detector misses/jitter/spurious boxes, VLM
/// class confusion, segmenter boundary noise, and annotation noise in the
/// dataset ground truth itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Detector per-instance miss probability.
    pub p_miss: f64,
    /// Max fractional expansion/contraction of each box edge.
    pub box_jitter: f64,
    /// Expected spurious boxes per image (Poisson mean).
    pub p_spurious: f64,
    /// Row-stochastic N x (N+1) matrix: true class -> answered class or
    /// none (last column). `None` means identity.
    pub confusion: Option<Vec<Vec<f64>>>,
    /// Segmenter erode/dilate radius in pixels.
    pub boundary_noise: u32,
    /// Ground-truth flip rate: a present class's annotation is dropped
    /// with this probability while the scene itself keeps the object.
    pub p_label_noise: f64,
    /// Uniform coordinate noise for VLM-proposed boxes, as a fraction of
    /// the image size (0.1 models string-format box imprecision).
    pub box_proposal_noise: f64,
    pub seed: u64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            p_miss: 0.0,
            box_jitter: 0.0,
            p_spurious: 0.0,
            confusion: None,
            boundary_noise: 0,
            p_label_noise: 0.0,
            box_proposal_noise: 0.0,
            seed: 0,
        }
    }
}

impl NoiseProfile {
    pub fn validate(&self, n_ways: u32) -> Result<(), BackendError> {
        for (name, p) in [
            ("p_miss", self.p_miss),
            ("p_label_noise", self.p_label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::Config(format!("{name} {p} outside [0,1]")));
            }
        }
        for (name, p) in [
            ("box_jitter", self.box_jitter),
            ("p_spurious", self.p_spurious),
            ("box_proposal_noise", self.box_proposal_noise),
        ] {
            if !p.is_finite() || p < 0.0 {
                return Err(BackendError::Config(format!("{name} {p} must be >= 0")));
            }
        }
        if let Some(confusion) = &self.confusion {
            if confusion.len() != n_ways as usize {
                return Err(BackendError::Config(format!(
                    "confusion has {} rows, need N={n_ways}",
                    confusion.len()
                )));
            }
            for (i, row) in confusion.iter().enumerate() {
                if row.len() != n_ways as usize + 1 {
                    return Err(BackendError::Config(format!(
                        "confusion row {i} has {} entries, need N+1={}",
                        row.len(),
                        n_ways + 1
                    )));
                }
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(BackendError::Config(format!(
                        "confusion row {i} has entries outside [0,1]"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(BackendError::Config(format!(
                        "confusion row {i} sums to {sum}, need 1 within 1e-9"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Row for `true_class` (1-based); identity when no matrix is set.
    pub fn confusion_row(&self, true_class: u32, n_ways: u32) -> Vec<f64> {
        match &self.confusion {
            Some(m) => m[(true_class - 1) as usize].clone(),
            None => {
                let mut row = vec![0.0; n_ways as usize + 1];
                row[(true_class - 1) as usize] = 1.0;
                row
            }
        }
    }
}

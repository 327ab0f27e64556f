//! Episode orchestration: detect, filter, ask, segment, aggregate.
//!
//! One call to [`run_episode`] executes a full detection -> multi-choice
//! VQA -> per-box segmentation pass and returns the prediction together
//! with the metric ingredients and a persistable transcript. Episodes are
//! independent units: everything here is a pure function of the episode,
//! the backend set, and the config, so the runner may execute them with
//! bounded parallelism.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSet, EpisodeContext};
use crate::dataset::Episode;
use crate::maskcore::{mask_from_box, BinaryMask, BoundingBox, MaskError, RleMask};
use crate::vqa::{
    build_box_proposal_prompt, build_prompt, parse_answer, parse_box_proposals, repair_prompt,
    PromptTemplate, VqaError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("mask: {0}")]
    Mask(#[from] MaskError),
    #[error("vqa: {0}")]
    Vqa(#[from] VqaError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// The box set proposed for one query image, ids 1..M after filtering.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub boxes: Vec<DetectedBox>,
    /// Detector identity tag, carried into transcripts.
    pub source: String,
}

impl DetectionResult {
    pub fn empty(source: &str) -> Self {
        Self {
            boxes: Vec::new(),
            source: source.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectedBox {
    /// 1-based display id; consecutive after filtering.
    pub display_id: u32,
    pub bbox: BoundingBox,
    pub score: f64,
    pub hint: Option<String>,
}

/// The VLM's verdict per box: class position 1..N or none.
///
/// Canonical form always carries every display id 1..M as a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    verdicts: BTreeMap<u32, Option<u32>>,
    pub flags: Vec<String>,
}

impl Assignment {
    /// All-`None` assignment over ids 1..=m_boxes.
    pub fn empty(m_boxes: u32) -> Self {
        Self {
            verdicts: (1..=m_boxes).map(|id| (id, None)).collect(),
            flags: Vec::new(),
        }
    }

    pub fn assign(&mut self, display_id: u32, class_position: Option<u32>) -> Result<(), String> {
        match self.verdicts.get_mut(&display_id) {
            Some(slot) => {
                *slot = class_position;
                Ok(())
            }
            None => Err(format!("display id {display_id} outside 1..=M")),
        }
    }

    pub fn verdict(&self, display_id: u32) -> Option<u32> {
        self.verdicts.get(&display_id).copied().flatten()
    }

    pub fn verdicts(&self) -> &BTreeMap<u32, Option<u32>> {
        &self.verdicts
    }

    pub fn assigned_ids(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.verdicts
            .iter()
            .filter_map(|(&id, &v)| v.map(|class| (id, class)))
    }
}

/// Final per-episode prediction: label set plus per-class union masks.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub predicted_set: BTreeSet<u32>,
    /// Index `n-1` holds the class-n mask; empty when the class was not
    /// predicted.
    pub class_masks: Vec<BinaryMask>,
    /// Per-box masks kept for audit.
    pub per_box_masks: BTreeMap<u32, BinaryMask>,
}

impl Prediction {
    pub fn empty(n_ways: u32, width: u32, height: u32) -> Result<Self, MaskError> {
        let mut class_masks = Vec::with_capacity(n_ways as usize);
        for _ in 0..n_ways {
            class_masks.push(BinaryMask::empty(width, height)?);
        }
        Ok(Self {
            predicted_set: BTreeSet::new(),
            class_masks,
            per_box_masks: BTreeMap::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// detector -> VLM -> segmenter
    Full,
    /// the VLM proposes boxes in string form; no detector
    VlmBoxes,
    /// segmenter replaced by a box fill
    BoxFill,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::VlmBoxes => "vlm_boxes",
            Variant::BoxFill => "box_fill",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub confidence_threshold: f64,
    pub variant: Variant,
    /// Cap on M, bounding prompt length.
    pub max_boxes: u32,
    /// Strict: an unparseable answer fails the episode. Lenient (default):
    /// offending entries become None and a warning flag is recorded.
    pub strict_parse: bool,
    /// Re-issue the classification prompt once, with a repair reminder,
    /// when the answer carried no parseable ANSWER payload.
    pub reask_on_parse_failure: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            variant: Variant::Full,
            max_boxes: 20,
            strict_parse: false,
            reask_on_parse_failure: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(PipelineError::Contract(format!(
                "confidence_threshold {} outside [0,1]",
                self.confidence_threshold
            )));
        }
        if self.max_boxes == 0 {
            return Err(PipelineError::Contract("max_boxes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Keep boxes scoring at or above `threshold`, sort by descending score
/// (original order breaks ties), truncate to `max_boxes`, renumber 1..M.
pub fn filter_detections(raw: DetectionResult, threshold: f64, max_boxes: u32) -> DetectionResult {
    let mut kept: Vec<DetectedBox> = raw
        .boxes
        .into_iter()
        .filter(|b| b.score >= threshold)
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(max_boxes as usize);
    for (i, b) in kept.iter_mut().enumerate() {
        b.display_id = (i + 1) as u32;
    }
    DetectionResult {
        boxes: kept,
        source: raw.source,
    }
}

/// Union the per-box masks grouped by assigned class; the predicted label
/// set is exactly the set of classes with at least one assigned box.
pub fn aggregate_masks(
    assignment: &Assignment,
    per_box_masks: &BTreeMap<u32, BinaryMask>,
    n_ways: u32,
    width: u32,
    height: u32,
) -> Result<Prediction, PipelineError> {
    let mut prediction = Prediction::empty(n_ways, width, height)?;
    for (id, class) in assignment.assigned_ids() {
        if class == 0 || class > n_ways {
            return Err(PipelineError::Contract(format!(
                "assigned class {class} outside 1..={n_ways}"
            )));
        }
        let mask = per_box_masks.get(&id).ok_or_else(|| {
            PipelineError::Contract(format!("assigned box {id} has no segmentation mask"))
        })?;
        if mask.width() != width || mask.height() != height {
            return Err(PipelineError::Mask(MaskError::ShapeMismatch(
                mask.width(),
                mask.height(),
                width,
                height,
            )));
        }
        let slot = &mut prediction.class_masks[(class - 1) as usize];
        *slot = slot.union(mask)?;
        prediction.predicted_set.insert(class);
    }
    prediction.per_box_masks = per_box_masks.clone();
    Ok(prediction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeStatus {
    Ok,
    Failed,
}

/// One line of the results JSONL file. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub episode: u64,
    pub fold: u32,
    pub n: u32,
    pub k: u32,
    pub y_true: Vec<u32>,
    pub y_pred: Vec<u32>,
    pub per_class: Vec<ClassCounts>,
    pub status: EpisodeStatus,
    /// Path of the transcript file, relative to the run directory.
    pub transcript: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: u32,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Full audit record persisted beside the results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transcript {
    pub episode: u64,
    pub fold: u32,
    pub n: u32,
    pub k: u32,
    pub query_image: String,
    pub width: u32,
    pub height: u32,
    pub class_labels: Vec<String>,
    pub detections: Vec<TranscriptBox>,
    pub proposal_prompt: Option<String>,
    pub proposal_answer: Option<String>,
    pub prompt: String,
    pub raw_answer: String,
    /// display id -> assigned class position (absent entries were none).
    pub assignment: BTreeMap<u32, u32>,
    pub warnings: Vec<String>,
    pub per_box_masks: BTreeMap<u32, RleMask>,
    pub predicted_masks: Vec<RleMask>,
    pub truth_masks: Vec<RleMask>,
    pub per_class: Vec<ClassCounts>,
    pub status: EpisodeStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptBox {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub hint: Option<String>,
}

/// Everything `run_episode` produces; the runner fills in the transcript
/// path and persists both halves.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub line: ResultLine,
    pub transcript: Transcript,
}

/// Execute one episode end to end under the configured variant.
pub fn run_episode(
    episode: &Episode,
    backends: &BackendSet,
    config: &PipelineConfig,
    template: &PromptTemplate,
) -> Result<EpisodeOutcome, PipelineError> {
    config.validate()?;
    let ctx = EpisodeContext::new(episode);
    let (width, height) = (episode.query.width, episode.query.height);
    let n_ways = episode.n_ways;

    let mut warnings: Vec<String> = Vec::new();
    let mut proposal_prompt = None;
    let mut proposal_answer = None;

    // stage 1: a box set, from the detector or from a VLM proposal exchange
    let raw = match config.variant {
        Variant::Full | Variant::BoxFill => backends.detector.detect(&ctx)?,
        Variant::VlmBoxes => {
            let prompt = build_box_proposal_prompt(episode, template, config.max_boxes)?;
            let answer = backends.vlm.chat(&prompt, &ctx)?;
            proposal_prompt = Some(prompt.text.clone());
            proposal_answer = Some(answer.text.clone());
            match parse_box_proposals(&answer.text, width, height, config.strict_parse) {
                Ok((boxes, flags)) => {
                    warnings.extend(flags);
                    DetectionResult {
                        boxes: boxes
                            .into_iter()
                            .enumerate()
                            .map(|(i, bbox)| DetectedBox {
                                display_id: (i + 1) as u32,
                                bbox,
                                score: 1.0,
                                hint: None,
                            })
                            .collect(),
                        source: "vlm-proposal".into(),
                    }
                }
                Err(e) => {
                    return finish_failed(
                        episode,
                        DetectionResult::empty("vlm-proposal"),
                        proposal_prompt,
                        proposal_answer,
                        String::new(),
                        String::new(),
                        vec![format!("box proposal parse failed: {e}")],
                    );
                }
            }
        }
    };
    for b in &raw.boxes {
        if !b.bbox.fits_in(width, height) {
            return Err(PipelineError::Contract(format!(
                "detector emitted out-of-bounds box {:?} for {}x{} image",
                b.bbox, width, height
            )));
        }
    }
    let detections = filter_detections(raw, config.confidence_threshold, config.max_boxes);
    let m_boxes = detections.boxes.len() as u32;

    // stage 2: multi-choice VQA, with at most one repair exchange
    let prompt = build_prompt(episode, &detections, template)?;
    let mut answer = backends.vlm.chat(&prompt, &ctx)?;
    let mut parsed = parse_answer(&answer.text, m_boxes, &episode.labels, config.strict_parse);
    let payload_missing = match &parsed {
        Err(_) => true,
        Ok(a) => a
            .flags
            .iter()
            .any(|f| f.contains("unparseable") || f.contains("no ANSWER line")),
    };
    if config.reask_on_parse_failure && payload_missing {
        warnings.push("re-asked after an unparseable answer".into());
        answer = backends.vlm.chat(&repair_prompt(&prompt), &ctx)?;
        parsed = parse_answer(&answer.text, m_boxes, &episode.labels, config.strict_parse);
    }
    let assignment = match parsed {
        Ok(a) => a,
        Err(e) => {
            warnings.push(format!("answer parse failed: {e}"));
            return finish_failed(
                episode,
                detections,
                proposal_prompt,
                proposal_answer,
                prompt.text.clone(),
                answer.text.clone(),
                warnings,
            );
        }
    };
    warnings.extend(assignment.flags.iter().cloned());

    // stage 3: per-box segmentation of assigned boxes only
    let mut per_box_masks: BTreeMap<u32, BinaryMask> = BTreeMap::new();
    for (id, _class) in assignment.assigned_ids() {
        let bbox = detections
            .boxes
            .iter()
            .find(|b| b.display_id == id)
            .expect("assignment ids come from detections")
            .bbox;
        let mask = match config.variant {
            Variant::BoxFill => mask_from_box(bbox, width, height)?,
            Variant::Full | Variant::VlmBoxes => {
                let m = backends.segmenter.segment(bbox, &ctx)?;
                if m.width() != width || m.height() != height {
                    return Err(PipelineError::Mask(MaskError::ShapeMismatch(
                        m.width(),
                        m.height(),
                        width,
                        height,
                    )));
                }
                m
            }
        };
        per_box_masks.insert(id, mask);
    }

    // stage 4: per-class aggregation (union over same-class boxes)
    let prediction = aggregate_masks(&assignment, &per_box_masks, n_ways, width, height)?;
    let per_class = class_counts(&prediction, episode)?;

    Ok(build_outcome(
        episode,
        detections,
        proposal_prompt,
        proposal_answer,
        prompt.text,
        answer.text,
        assignment,
        prediction,
        per_class,
        warnings,
        EpisodeStatus::Ok,
    ))
}

/// Pixel bookkeeping per class: TP against the truth mask plus both
/// difference counts, re-checked against independent popcounts.
fn class_counts(
    prediction: &Prediction,
    episode: &Episode,
) -> Result<Vec<ClassCounts>, PipelineError> {
    let mut out = Vec::with_capacity(episode.n_ways as usize);
    for n in 1..=episode.n_ways {
        let predicted = &prediction.class_masks[(n - 1) as usize];
        let truth = &episode.query.truth_masks[(n - 1) as usize];
        let tp = predicted.intersection_area(truth)?;
        let fp = predicted.difference_area(truth)?;
        let fn_ = truth.difference_area(predicted)?;
        if tp + fn_ != truth.area() || tp + fp != predicted.area() {
            return Err(PipelineError::Contract(format!(
                "pixel bookkeeping broken for class {n}: tp={tp} fp={fp} fn={fn_} |truth|={} |pred|={}",
                truth.area(),
                predicted.area()
            )));
        }
        out.push(ClassCounts { class: n, tp, fp, fn_ });
    }
    Ok(out)
}

fn finish_failed(
    episode: &Episode,
    detections: DetectionResult,
    proposal_prompt: Option<String>,
    proposal_answer: Option<String>,
    prompt: String,
    raw_answer: String,
    warnings: Vec<String>,
) -> Result<EpisodeOutcome, PipelineError> {
    let (width, height) = (episode.query.width, episode.query.height);
    let prediction = Prediction::empty(episode.n_ways, width, height)?;
    let per_class = class_counts(&prediction, episode)?;
    Ok(build_outcome(
        episode,
        detections,
        proposal_prompt,
        proposal_answer,
        prompt,
        raw_answer,
        Assignment::empty(0),
        prediction,
        per_class,
        warnings,
        EpisodeStatus::Failed,
    ))
}

#[allow(clippy::too_many_arguments)]
fn build_outcome(
    episode: &Episode,
    detections: DetectionResult,
    proposal_prompt: Option<String>,
    proposal_answer: Option<String>,
    prompt: String,
    raw_answer: String,
    assignment: Assignment,
    prediction: Prediction,
    per_class: Vec<ClassCounts>,
    warnings: Vec<String>,
    status: EpisodeStatus,
) -> EpisodeOutcome {
    let line = ResultLine {
        episode: episode.episode_index,
        fold: episode.fold,
        n: episode.n_ways,
        k: episode.k_shots,
        y_true: episode.query.true_label_set.iter().copied().collect(),
        y_pred: prediction.predicted_set.iter().copied().collect(),
        per_class: per_class.clone(),
        status,
        transcript: String::new(),
    };
    let transcript = Transcript {
        episode: episode.episode_index,
        fold: episode.fold,
        n: episode.n_ways,
        k: episode.k_shots,
        query_image: episode.query.path.to_string_lossy().into_owned(),
        width: episode.query.width,
        height: episode.query.height,
        class_labels: episode.labels.clone(),
        detections: detections
            .boxes
            .iter()
            .map(|b| TranscriptBox {
                id: b.display_id,
                bbox: b.bbox,
                score: b.score,
                hint: b.hint.clone(),
            })
            .collect(),
        proposal_prompt,
        proposal_answer,
        prompt,
        raw_answer,
        assignment: assignment.assigned_ids().collect(),
        warnings,
        per_box_masks: prediction
            .per_box_masks
            .iter()
            .map(|(&id, m)| (id, m.to_rle()))
            .collect(),
        predicted_masks: prediction.class_masks.iter().map(BinaryMask::to_rle).collect(),
        truth_masks: episode
            .query
            .truth_masks
            .iter()
            .map(BinaryMask::to_rle)
            .collect(),
        per_class,
        status,
    };
    EpisodeOutcome { line, transcript }
}

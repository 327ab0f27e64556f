//! Deterministic prompt assembly from an episode, a box set, and an
//! editable template.

use std::path::Path;

use crate::dataset::Episode;
use crate::maskcore::BoundingBox;
use crate::pipeline::DetectionResult;
use crate::seeding::sha256_hex;

use super::overlay::OverlaySpec;
use super::VqaError;

const PLACEHOLDERS: [&str; 4] = ["{{preamble}}", "{{exemplars}}", "{{choices}}", "{{schema}}"];

/// Prompt skeleton with `{{preamble}} {{exemplars}} {{choices}} {{schema}}`
/// placeholders. Ships as an external file so prompt engineering does not
/// require rebuilds.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: include_str!("../../templates/default_prompt.txt").to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn from_text(text: impl Into<String>) -> Result<Self, VqaError> {
        let text = text.into();
        for placeholder in PLACEHOLDERS {
            if !text.contains(placeholder) {
                return Err(VqaError::Template(format!(
                    "template is missing the {placeholder} placeholder"
                )));
            }
        }
        Ok(Self { text })
    }

    pub fn load(path: &Path) -> Result<Self, VqaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VqaError::Template(format!("{}: {e}", path.display())))?;
        Self::from_text(text)
    }

    fn fill(&self, preamble: &str, exemplars: &str, choices: &str, schema: &str) -> String {
        self.text
            .replace("{{preamble}}", preamble)
            .replace("{{exemplars}}", exemplars)
            .replace("{{choices}}", choices)
            .replace("{{schema}}", schema)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    /// Multi-choice box classification against the support classes.
    Classify,
    /// Ask the VLM to propose bounding boxes in string form.
    ProposeBoxes,
}

/// One piece of the prompt in transmission order. Text pieces keep their
/// inline image markers so the rendered `text` stays self-describing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptSegment {
    Text(String),
    /// Index into the episode's support list.
    SupportImage(usize),
    QueryImage {
        overlay: bool,
    },
}

#[derive(Debug, Clone)]
pub struct VqaPrompt {
    pub kind: PromptKind,
    /// Fully rendered prompt text, identical to the concatenated segments.
    pub text: String,
    pub segments: Vec<PromptSegment>,
    /// Structured copy of the choice boxes: (display id, box).
    pub boxes: Vec<(u32, BoundingBox)>,
    /// Episode class labels in position order.
    pub class_labels: Vec<String>,
    pub overlay: OverlaySpec,
    pub m_boxes: u32,
}

impl VqaPrompt {
    /// Stable content hash; scripted backends key canned replies on it.
    pub fn text_sha256(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }
}

fn quoted_labels(labels: &[String]) -> String {
    labels
        .iter()
        .map(|l| format!("{l:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn support_marker(n: u32, k: u32) -> String {
    format!("[support image {n}.{k}]")
}

const QUERY_OVERLAY_MARKER: &str = "[query image with numbered box overlay]";
const QUERY_PLAIN_MARKER: &str = "[query image]";

/// Build the multi-choice classification prompt: exemplar blocks first
/// (in-context order), then the annotated query with one choice line per
/// box, then the chain-of-thought instruction and the strict answer schema.
pub fn build_prompt(
    episode: &Episode,
    detections: &DetectionResult,
    template: &PromptTemplate,
) -> Result<VqaPrompt, VqaError> {
    let n = episode.n_ways;
    let k = episode.k_shots;
    let m = detections.boxes.len() as u32;

    let preamble = format!(
        "This is a {n}-way few-shot recognition task. The support classes are: {labels}. \
         You will see {k} labeled support example(s) per class, then one query image with \
         {m} candidate box(es) drawn on it, each tagged with its numeric id in the box's \
         top-left corner.",
        labels = quoted_labels(&episode.labels),
    );

    let exemplars = exemplar_section(episode);

    let mut choices = String::new();
    if m == 0 {
        choices.push_str("No candidate boxes were proposed on the query image.\n");
        choices.push_str(QUERY_PLAIN_MARKER);
    } else {
        choices.push_str(&format!("Query image with {m} numbered box(es) overlaid:\n"));
        choices.push_str(QUERY_OVERLAY_MARKER);
        for b in &detections.boxes {
            choices.push_str(&format!(
                "\nBox {}: region ({},{})-({},{})",
                b.display_id, b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max
            ));
            if let Some(hint) = &b.hint {
                choices.push_str(&format!(", detector hint: {hint:?}"));
            }
        }
    }

    let schema = if m == 0 {
        "There is nothing to classify. Finish with exactly one final line reading:\nANSWER: {}"
            .to_string()
    } else {
        format!(
            "Describe the object inside each numbered box briefly and reason step by step \
             about which support class it matches. Then finish with exactly one final line \
             of the form:\nANSWER: {{\"1\": \"<class label or none>\", \"2\": \"<class label or none>\", ...}}\n\
             Use every box id from 1 to {m} exactly once. Quote class labels verbatim from: \
             {labels}. Answer \"none\" for a box that matches no support class.",
            labels = quoted_labels(&episode.labels),
        )
    };

    let text = template.fill(&preamble, &exemplars, &choices, &schema);
    let segments = split_segments(&text, episode, m > 0);

    Ok(VqaPrompt {
        kind: PromptKind::Classify,
        text,
        segments,
        boxes: detections
            .boxes
            .iter()
            .map(|b| (b.display_id, b.bbox))
            .collect(),
        class_labels: episode.labels.clone(),
        overlay: OverlaySpec::from_detections(detections),
        m_boxes: m,
    })
}

/// Build the box-proposal prompt for the detector-free ablation variant.
pub fn build_box_proposal_prompt(
    episode: &Episode,
    template: &PromptTemplate,
    max_boxes: u32,
) -> Result<VqaPrompt, VqaError> {
    let n = episode.n_ways;
    let (w, h) = (episode.query.width, episode.query.height);

    let preamble = format!(
        "This is a {n}-way few-shot recognition task. The support classes are: {labels}. \
         Your job is to propose bounding boxes around every object in the query image that \
         could belong to one of the support classes. Propose at most {max_boxes} boxes.",
        labels = quoted_labels(&episode.labels),
    );
    let exemplars = exemplar_section(episode);
    let choices = format!("Query image ({w}x{h} pixels):\n{QUERY_PLAIN_MARKER}");
    let schema = format!(
        "Reason briefly about what you see, then finish with exactly one final line of the \
         form:\nANSWER: {{\"boxes\": [[x_min, y_min, x_max, y_max], ...]}}\n\
         Coordinates are pixels with the origin at the top-left corner; max coordinates are \
         exclusive and must not exceed {w} and {h}. Emit ANSWER: {{\"boxes\": []}} when \
         nothing matches."
    );

    let text = template.fill(&preamble, &exemplars, &choices, &schema);
    let segments = split_segments(&text, episode, false);

    Ok(VqaPrompt {
        kind: PromptKind::ProposeBoxes,
        text,
        segments,
        boxes: Vec::new(),
        class_labels: episode.labels.clone(),
        overlay: OverlaySpec::default(),
        m_boxes: 0,
    })
}

/// One-shot repair exchange after an unparseable answer: the same prompt
/// with a terse reminder appended.
pub fn repair_prompt(prompt: &VqaPrompt) -> VqaPrompt {
    let reminder = "\n\nYour previous reply did not end with a parseable ANSWER line. \
                    Answer again now, finishing with exactly one line that matches the schema."
        .to_string();
    let mut repaired = prompt.clone();
    repaired.text.push_str(&reminder);
    repaired.segments.push(PromptSegment::Text(reminder));
    repaired
}

fn exemplar_section(episode: &Episode) -> String {
    let k = episode.k_shots;
    let mut out = String::new();
    for (i, s) in episode.support.iter().enumerate() {
        let shot = (i as u32 % k) + 1;
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!(
            "Support example {shot} of {k} for class {n} ({label:?}):\n{marker}",
            n = s.class_position,
            label = s.label,
            marker = support_marker(s.class_position, shot),
        ));
    }
    out
}

/// Split the rendered text into text/image segments at the (unique) image
/// markers, keeping the marker strings inside the text stream.
fn split_segments(text: &str, episode: &Episode, overlay_query: bool) -> Vec<PromptSegment> {
    let k = episode.k_shots;
    let mut markers: Vec<(usize, usize, PromptSegment)> = Vec::new();
    for (i, s) in episode.support.iter().enumerate() {
        let marker = support_marker(s.class_position, (i as u32 % k) + 1);
        if let Some(pos) = text.find(&marker) {
            markers.push((pos, marker.len(), PromptSegment::SupportImage(i)));
        }
    }
    let query_marker = if overlay_query {
        QUERY_OVERLAY_MARKER
    } else {
        QUERY_PLAIN_MARKER
    };
    if let Some(pos) = text.find(query_marker) {
        markers.push((
            pos,
            query_marker.len(),
            PromptSegment::QueryImage {
                overlay: overlay_query,
            },
        ));
    }
    markers.sort_by_key(|(pos, _, _)| *pos);

    let mut segments = Vec::with_capacity(markers.len() * 2 + 1);
    let mut cursor = 0;
    for (pos, len, seg) in markers {
        let end = pos + len;
        if cursor < end {
            segments.push(PromptSegment::Text(text[cursor..end].to_string()));
        }
        segments.push(seg);
        cursor = end;
    }
    if cursor < text.len() {
        segments.push(PromptSegment::Text(text[cursor..].to_string()));
    }
    segments
}

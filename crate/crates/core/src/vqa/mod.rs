//! Multi-choice VQA prompt construction, box overlay rendering, and
//! structured answer parsing.
//!
//! The exchange with the VLM is deliberately narrow: one composite prompt
//! carrying the support exemplars in-context, the overlaid query image,
//! and per-box choice lines; one response whose last `ANSWER:` line is a
//! strict single-line JSON map. Free-text parsing is the documented
//! failure mode this schema avoids.

mod overlay;
mod parse;
mod prompt;

pub use overlay::{render_overlay, OverlayEntry, OverlaySpec, OVERLAY_PALETTE};
pub use parse::{parse_answer, parse_box_proposals, serialize_assignment};
pub use prompt::{
    build_box_proposal_prompt, build_prompt, repair_prompt, PromptKind, PromptSegment,
    PromptTemplate, VqaPrompt,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("template: {0}")]
    Template(String),
    #[error("answer parse: {0}")]
    Parse(String),
    #[error("overlay bounds: {0}")]
    Bounds(String),
}

/// Verbatim model output plus the extracted final-answer segment.
#[derive(Debug, Clone)]
pub struct RawAnswer {
    pub text: String,
}

impl RawAnswer {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    /// Content after the last `ANSWER:` marker, when present.
    pub fn final_answer_segment(&self) -> Option<&str> {
        parse::locate_answer(&self.text).map(|(line, _)| line)
    }
}

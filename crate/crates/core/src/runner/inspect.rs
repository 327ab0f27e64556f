//! Transcript inspection: a human-readable dump plus overlay and
//! predicted-mask PNGs written beside the transcript for visual audit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::pipeline::Transcript;
use crate::vqa::{render_overlay, OverlayEntry, OverlaySpec};

use super::RunnerError;

#[derive(Debug)]
pub struct InspectReport {
    /// Printable dump of the episode exchange.
    pub text: String,
    /// Image files written beside the transcript.
    pub written: Vec<PathBuf>,
}

pub fn cmd_inspect(transcript_path: &Path) -> Result<InspectReport, RunnerError> {
    let raw = std::fs::read_to_string(transcript_path).map_err(|e| {
        RunnerError::Config(format!("{}: {e}", transcript_path.display()))
    })?;
    let transcript: Transcript = serde_json::from_str(&raw).map_err(|e| {
        RunnerError::Verification(format!(
            "{}: corrupt transcript: {e}",
            transcript_path.display()
        ))
    })?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "episode {} / fold {} ({}-way {}-shot), status: {:?}",
        transcript.episode, transcript.fold, transcript.n, transcript.k, transcript.status
    );
    let _ = writeln!(text, "query image: {}", transcript.query_image);
    let _ = writeln!(text, "classes: {}", transcript.class_labels.join(", "));

    if transcript.detections.is_empty() {
        let _ = writeln!(text, "\nno boxes proposed");
    } else {
        let _ = writeln!(text, "\nboxes:");
        for b in &transcript.detections {
            let _ = writeln!(
                text,
                "  box {}: ({},{})-({},{}) score {:.3}{}",
                b.id,
                b.bbox.x_min,
                b.bbox.y_min,
                b.bbox.x_max,
                b.bbox.y_max,
                b.score,
                b.hint
                    .as_ref()
                    .map(|h| format!(" hint {h:?}"))
                    .unwrap_or_default()
            );
        }
    }

    if let Some(proposal) = &transcript.proposal_prompt {
        let _ = writeln!(text, "\n--- box proposal prompt ---\n{proposal}");
    }
    if let Some(answer) = &transcript.proposal_answer {
        let _ = writeln!(text, "\n--- box proposal answer ---\n{answer}");
    }
    let _ = writeln!(text, "\n--- prompt ---\n{}", transcript.prompt);
    let _ = writeln!(text, "\n--- raw answer ---\n{}", transcript.raw_answer);

    let _ = writeln!(text, "\nparsed assignment:");
    if transcript.assignment.is_empty() {
        let _ = writeln!(text, "  (no box assigned any class)");
    }
    for (id, class) in &transcript.assignment {
        let label = transcript
            .class_labels
            .get((*class - 1) as usize)
            .map(String::as_str)
            .unwrap_or("?");
        let _ = writeln!(text, "  box {id} -> class {class} ({label})");
    }
    if !transcript.warnings.is_empty() {
        let _ = writeln!(text, "\nwarnings:");
        for w in &transcript.warnings {
            let _ = writeln!(text, "  {w}");
        }
    }

    let _ = writeln!(text, "\nper-class pixels:");
    for c in &transcript.per_class {
        let denominator = c.tp + c.fp + c.fn_;
        let iou = if denominator == 0 {
            "n/a (absent and not predicted)".to_string()
        } else {
            format!("{:.4}", c.tp as f64 / denominator as f64)
        };
        let _ = writeln!(
            text,
            "  class {}: tp {} fp {} fn {} -> IoU {iou}",
            c.class, c.tp, c.fp, c.fn_
        );
    }

    let written = write_visuals(transcript_path, &transcript)?;
    for path in &written {
        let _ = writeln!(text, "wrote {}", path.display());
    }
    Ok(InspectReport { text, written })
}

fn write_visuals(
    transcript_path: &Path,
    transcript: &Transcript,
) -> Result<Vec<PathBuf>, RunnerError> {
    let stem = transcript_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "transcript".into());
    let dir = transcript_path.parent().unwrap_or(Path::new("."));
    let mut written = Vec::new();

    // overlay on the query image; fall back to a black canvas when the
    // image has moved since the run
    let base = match image::open(&transcript.query_image) {
        Ok(img) => img.to_rgb8(),
        Err(_) => {
            log::warn!(
                "query image {} unavailable; drawing boxes on a blank canvas",
                transcript.query_image
            );
            image::RgbImage::new(transcript.width, transcript.height)
        }
    };
    let spec = OverlaySpec {
        entries: transcript
            .detections
            .iter()
            .map(|b| OverlayEntry {
                display_id: b.id,
                bbox: b.bbox,
                color_index: ((b.id - 1) % 8) as u8,
                label: b.id.to_string(),
            })
            .collect(),
    };
    let overlay = render_overlay(&base, &spec, 1)
        .map_err(|e| RunnerError::Verification(format!("overlay: {e}")))?;
    let overlay_path = dir.join(format!("{stem}_overlay.png"));
    overlay
        .save(&overlay_path)
        .map_err(|e| RunnerError::Verification(format!("overlay write: {e}")))?;
    written.push(overlay_path);

    for (i, rle) in transcript.predicted_masks.iter().enumerate() {
        let mask = rle
            .to_mask()
            .map_err(|e| RunnerError::Verification(e.to_string()))?;
        let mut img = image::GrayImage::new(mask.width(), mask.height());
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) {
                    img.put_pixel(x, y, image::Luma([255]));
                }
            }
        }
        let path = dir.join(format!("{stem}_mask_c{}.png", i + 1));
        img.save(&path)
            .map_err(|e| RunnerError::Verification(format!("mask write: {e}")))?;
        written.push(path);
    }
    Ok(written)
}

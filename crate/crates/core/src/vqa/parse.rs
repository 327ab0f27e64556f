//! Structured answer parsing.
//!
//! The model may reason freely; only the last `ANSWER:` line counts. In
//! strict mode any deviation from the schema is a parse error carrying
//! diagnostics; in lenient mode offending entries become `None` with a
//! warning flag. Neither mode can abort the process on any input.

use serde_json::Value;

use crate::maskcore::BoundingBox;
use crate::pipeline::Assignment;

use super::VqaError;

/// Find the last line whose trimmed form starts with `ANSWER:`. Returns
/// the content after the marker on that line and everything after the
/// marker to the end of the text (for multi-line lenient recovery).
pub(super) fn locate_answer(raw: &str) -> Option<(&str, &str)> {
    let mut found: Option<(usize, usize)> = None;
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if trimmed.starts_with("ANSWER:") {
            let content_start = offset + (line.len() - trimmed.len()) + "ANSWER:".len();
            let stripped = line.strip_suffix('\n').unwrap_or(line);
            let stripped = stripped.strip_suffix('\r').unwrap_or(stripped);
            found = Some((content_start, offset + stripped.len()));
        }
        offset += line.len();
    }
    found.map(|(start, line_end)| (&raw[start..line_end], &raw[start..]))
}

/// Extract the answer map. The boolean marks a lenient recovery (the
/// strict single-line grammar was violated but a map was still found).
fn json_object(
    line_rest: &str,
    tail_rest: &str,
    strict: bool,
) -> Result<Option<(serde_json::Map<String, Value>, bool)>, String> {
    match serde_json::from_str::<Value>(line_rest.trim()) {
        Ok(Value::Object(map)) => return Ok(Some((map, false))),
        Ok(other) => {
            if strict {
                return Err(format!("ANSWER payload is {} rather than a map", kind(&other)));
            }
        }
        Err(e) => {
            if strict {
                return Err(format!("ANSWER line is not valid JSON: {e}"));
            }
        }
    }
    // lenient recovery: the first complete JSON value after the marker,
    // which tolerates pretty-printed maps and trailing prose
    let mut stream = serde_json::Deserializer::from_str(tail_rest).into_iter::<Value>();
    match stream.next() {
        Some(Ok(Value::Object(map))) => Ok(Some((map, true))),
        _ => Ok(None),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "a map",
    }
}

/// Parse the id -> label map of the final `ANSWER:` line into an
/// [`Assignment`] over ids `1..=m_boxes`. Labels match the episode's
/// class list case-insensitively after trimming; `"none"` or an absent id
/// means no class.
pub fn parse_answer(
    raw: &str,
    m_boxes: u32,
    episode_labels: &[String],
    strict: bool,
) -> Result<Assignment, VqaError> {
    let mut assignment = Assignment::empty(m_boxes);

    let Some((line_rest, tail_rest)) = locate_answer(raw) else {
        if strict {
            return Err(VqaError::Parse("no ANSWER line in response".into()));
        }
        assignment
            .flags
            .push("no ANSWER line in response; every box treated as none".into());
        return Ok(assignment);
    };

    let map = match json_object(line_rest, tail_rest, strict) {
        Ok(Some((map, recovered))) => {
            if recovered {
                assignment
                    .flags
                    .push("ANSWER payload violated the single-line grammar; recovered leniently".into());
            }
            map
        }
        Ok(None) => {
            assignment
                .flags
                .push("ANSWER payload unparseable; every box treated as none".into());
            return Ok(assignment);
        }
        Err(diag) => return Err(VqaError::Parse(diag)),
    };

    let lowered: Vec<String> = episode_labels
        .iter()
        .map(|l| l.trim().to_lowercase())
        .collect();
    for (key, value) in map {
        let id: u32 = match key.trim().parse() {
            Ok(id) => id,
            Err(_) => {
                if strict {
                    return Err(VqaError::Parse(format!("key {key:?} is not a box id")));
                }
                assignment.flags.push(format!("ignored non-id key {key:?}"));
                continue;
            }
        };
        if id == 0 || id > m_boxes {
            if strict {
                return Err(VqaError::Parse(format!(
                    "box id {id} outside 1..={m_boxes}"
                )));
            }
            assignment
                .flags
                .push(format!("ignored out-of-range box id {id}"));
            continue;
        }
        let Some(text) = value.as_str() else {
            if strict {
                return Err(VqaError::Parse(format!(
                    "value for box {id} is {} rather than a label string",
                    kind(&value)
                )));
            }
            assignment
                .flags
                .push(format!("box {id} value is not a string; treated as none"));
            continue;
        };
        let needle = text.trim().to_lowercase();
        if needle == "none" {
            continue; // already None
        }
        match lowered.iter().position(|l| *l == needle) {
            Some(pos) => {
                assignment
                    .assign(id, Some((pos + 1) as u32))
                    .expect("id validated above");
            }
            None => {
                if strict {
                    return Err(VqaError::Parse(format!(
                        "box {id} names unknown label {text:?}"
                    )));
                }
                assignment
                    .flags
                    .push(format!("box {id} names unknown label {text:?}; treated as none"));
            }
        }
    }
    Ok(assignment)
}

/// Canonical serialization of an assignment: every id present in numeric
/// order, class labels verbatim, `"none"` for unassigned boxes. Inverse of
/// [`parse_answer`] on schema-conforming text.
pub fn serialize_assignment(assignment: &Assignment, episode_labels: &[String]) -> String {
    let entries: Vec<String> = assignment
        .verdicts()
        .iter()
        .map(|(&id, &verdict)| {
            let value = match verdict {
                Some(n) => episode_labels[(n - 1) as usize].as_str(),
                None => "none",
            };
            format!(
                "{}: {}",
                serde_json::to_string(&id.to_string()).expect("string encodes"),
                serde_json::to_string(value).expect("string encodes")
            )
        })
        .collect();
    format!("ANSWER: {{{}}}", entries.join(", "))
}

/// Parse `ANSWER: {"boxes": [[x_min,y_min,x_max,y_max], ...]}` from a
/// box-proposal exchange. Fractional coordinates get conservative-cover
/// rounding; boxes are clamped into the image and degenerate or fully
/// outside proposals are dropped with a flag.
pub fn parse_box_proposals(
    raw: &str,
    width: u32,
    height: u32,
    strict: bool,
) -> Result<(Vec<BoundingBox>, Vec<String>), VqaError> {
    let mut flags = Vec::new();

    let Some((line_rest, tail_rest)) = locate_answer(raw) else {
        if strict {
            return Err(VqaError::Parse("no ANSWER line in response".into()));
        }
        flags.push("no ANSWER line in response; no boxes proposed".into());
        return Ok((Vec::new(), flags));
    };
    let map = match json_object(line_rest, tail_rest, strict) {
        Ok(Some((map, recovered))) => {
            if recovered {
                flags.push("ANSWER payload violated the single-line grammar; recovered leniently".into());
            }
            map
        }
        Ok(None) => {
            flags.push("ANSWER payload unparseable; no boxes proposed".into());
            return Ok((Vec::new(), flags));
        }
        Err(diag) => return Err(VqaError::Parse(diag)),
    };
    let Some(Value::Array(items)) = map.get("boxes") else {
        if strict {
            return Err(VqaError::Parse("ANSWER map has no \"boxes\" array".into()));
        }
        flags.push("ANSWER map has no \"boxes\" array; no boxes proposed".into());
        return Ok((Vec::new(), flags));
    };

    let mut boxes = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let coords: Option<Vec<f64>> = item
            .as_array()
            .filter(|a| a.len() == 4)
            .map(|a| a.iter().filter_map(Value::as_f64).collect());
        let Some(coords) = coords.filter(|c| c.len() == 4 && c.iter().all(|v| v.is_finite()))
        else {
            if strict {
                return Err(VqaError::Parse(format!(
                    "proposal {i} is not a 4-number array"
                )));
            }
            flags.push(format!("dropped malformed proposal {i}"));
            continue;
        };
        let [x0, y0, x1, y1] = [coords[0], coords[1], coords[2], coords[3]];
        if x1 <= 0.0 || y1 <= 0.0 || x0 >= width as f64 || y0 >= height as f64 {
            flags.push(format!("dropped proposal {i} lying outside the image"));
            continue;
        }
        // conservative cover, then clamp into the image
        let cx0 = (x0.floor().max(0.0)) as u32;
        let cy0 = (y0.floor().max(0.0)) as u32;
        let cx1 = (x1.ceil().min(width as f64)) as u32;
        let cy1 = (y1.ceil().min(height as f64)) as u32;
        if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
            flags.push(format!("clamped proposal {i} into the image"));
        }
        match BoundingBox::new(cx0, cy0, cx1, cy1) {
            Ok(b) => boxes.push(b),
            Err(_) => flags.push(format!("dropped degenerate proposal {i}")),
        }
    }
    Ok((boxes, flags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn grammar_example() {
        let raw = "The first box clearly shows a bus.\nThe third one too.\n\
                   ANSWER: {\"1\": \"bus\", \"2\": \"none\", \"3\": \"bus\"}";
        let a = parse_answer(raw, 3, &labels(&["bus", "bench"]), true).unwrap();
        assert_eq!(a.verdict(1), Some(1));
        assert_eq!(a.verdict(2), None);
        assert_eq!(a.verdict(3), Some(1));
        assert!(a.flags.is_empty());
    }

    #[test]
    fn empty_answer() {
        let a = parse_answer("ANSWER: {}", 0, &labels(&["bus"]), true).unwrap();
        assert!(a.verdicts().is_empty());
    }

    #[test]
    fn missing_answer_line() {
        let raw = "The bus is box 1";
        assert!(parse_answer(raw, 2, &labels(&["bus"]), true).is_err());
        let a = parse_answer(raw, 2, &labels(&["bus"]), false).unwrap();
        assert_eq!(a.verdict(1), None);
        assert_eq!(a.verdict(2), None);
        assert!(!a.flags.is_empty());
    }

    #[test]
    fn last_answer_line_wins() {
        let raw = "ANSWER: {\"1\": \"bench\"}\nwait, let me reconsider\nANSWER: {\"1\": \"bus\"}";
        let a = parse_answer(raw, 1, &labels(&["bus", "bench"]), true).unwrap();
        assert_eq!(a.verdict(1), Some(1));
    }

    #[test]
    fn case_insensitive_label_match() {
        let a = parse_answer(
            "ANSWER: {\"1\": \" BUS \"}",
            1,
            &labels(&["bus", "bench"]),
            true,
        )
        .unwrap();
        assert_eq!(a.verdict(1), Some(1));
    }

    #[test]
    fn strict_rejects_what_lenient_flags() {
        let labels2 = labels(&["bus", "bench"]);
        for bad in [
            "ANSWER: {\"7\": \"bus\"}",          // id out of range
            "ANSWER: {\"1\": \"tram\"}",         // unknown label
            "ANSWER: {\"x\": \"bus\"}",          // non-id key
            "ANSWER: {\"1\": 4}",                // non-string value
            "ANSWER: [1, 2]",                    // not a map
            "ANSWER: {\"1\": \"bus\"} trailing", // junk on the line
        ] {
            assert!(parse_answer(bad, 2, &labels2, true).is_err(), "{bad}");
            let a = parse_answer(bad, 2, &labels2, false).unwrap();
            assert!(!a.flags.is_empty(), "{bad}");
        }
    }

    #[test]
    fn lenient_recovers_multiline_map() {
        let raw = "ANSWER: {\n  \"1\": \"bus\",\n  \"2\": \"none\"\n}\nthanks!";
        let a = parse_answer(raw, 2, &labels(&["bus"]), false).unwrap();
        assert_eq!(a.verdict(1), Some(1));
        assert_eq!(a.verdict(2), None);
    }

    #[test]
    fn roundtrip_canonical() {
        let mut a = crate::pipeline::Assignment::empty(3);
        a.assign(1, Some(2)).unwrap();
        a.assign(3, Some(1)).unwrap();
        let ls = labels(&["bus", "bench"]);
        let text = serialize_assignment(&a, &ls);
        assert_eq!(text, "ANSWER: {\"1\": \"bench\", \"2\": \"none\", \"3\": \"bus\"}");
        let back = parse_answer(&text, 3, &ls, true).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn double_digit_ids_keep_numeric_order() {
        let mut a = crate::pipeline::Assignment::empty(12);
        a.assign(2, Some(1)).unwrap();
        a.assign(10, Some(1)).unwrap();
        let ls = labels(&["bus"]);
        let text = serialize_assignment(&a, &ls);
        let pos2 = text.find("\"2\"").unwrap();
        let pos10 = text.find("\"10\"").unwrap();
        assert!(pos2 < pos10);
        assert_eq!(parse_answer(&text, 12, &ls, true).unwrap(), a);
    }

    #[test]
    fn proposals_parse_round_and_clamp() {
        let raw = "Boxes coming.\nANSWER: {\"boxes\": [[1.2, 1.9, 6.1, 7.0], [-3.0, 2.0, 4.0, 5.0], [90.0, 90.0, 99.0, 99.0]]}";
        let (boxes, flags) = parse_box_proposals(raw, 10, 10, false).unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0], BoundingBox::new(1, 1, 7, 7).unwrap());
        assert_eq!(boxes[1], BoundingBox::new(0, 2, 4, 5).unwrap());
        assert!(flags.iter().any(|f| f.contains("outside")));
    }

    #[test]
    fn proposals_empty_and_missing() {
        let (boxes, flags) = parse_box_proposals("ANSWER: {\"boxes\": []}", 10, 10, true).unwrap();
        assert!(boxes.is_empty() && flags.is_empty());
        assert!(parse_box_proposals("ANSWER: {}", 10, 10, true).is_err());
        let (boxes, flags) = parse_box_proposals("nothing here", 10, 10, false).unwrap();
        assert!(boxes.is_empty() && !flags.is_empty());
    }

    #[test]
    fn fuzz_smoke_never_panics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let ls = labels(&["bus", "bench"]);
        for _ in 0..2000 {
            let len = rng.random_range(0..200);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_answer(&text, 3, &ls, false);
            let _ = parse_answer(&text, 3, &ls, true);
            let _ = parse_box_proposals(&text, 16, 16, false);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn serialize_parse_roundtrip(
                m in 0u32..15,
                picks in proptest::collection::vec(proptest::option::of(0usize..3), 0..15)
            ) {
                let ls = labels(&["bus", "bench", "traffic light"]);
                let mut a = crate::pipeline::Assignment::empty(m);
                for (i, pick) in picks.iter().enumerate().take(m as usize) {
                    a.assign((i + 1) as u32, pick.map(|p| (p + 1) as u32)).unwrap();
                }
                let text = serialize_assignment(&a, &ls);
                let back = parse_answer(&text, m, &ls, true).unwrap();
                prop_assert_eq!(back.verdicts(), a.verdicts());
                // canonical echo: re-serializing reproduces the same line
                prop_assert_eq!(serialize_assignment(&back, &ls), text);
            }
        }
    }
}

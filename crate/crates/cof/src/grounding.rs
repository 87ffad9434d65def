//! Stage-1 location grounding: build the grounding prompt and parse the
//! model's free-form reply into a [`NormBox`].
//!
//! Real models answer the grounding prompt in wildly different shapes —
//! `{"bbox": [...]}` buried in chatter, a bare 4-array, pixel coordinates,
//! 0–1000 normalized integers — so the parser scans for the first balanced
//! JSON candidate and classifies the coordinate convention, recording which
//! one was inferred.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::NormBox;

/// Default stage-1 template. `{question}` (or the short form `{q}`) is
/// replaced verbatim by the user question.
pub const DEFAULT_GROUNDING_TEMPLATE: &str = "{question} According to the information in the image and the question, detail the bounding box of the region in the image that contains the answer in JSON format.";

#[derive(Debug, Error, PartialEq)]
pub enum GroundingError {
    #[error("question must be nonempty")]
    EmptyQuestion,
    #[error("template contains no {{question}} or {{q}} placeholder: {template:?}")]
    MissingPlaceholder { template: String },
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    InvalidImageSize { width: u32, height: u32 },
}

/// The assembled stage-1 input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    /// The user question, untouched.
    pub question: String,
    /// The grounding instruction carried by the template (template text with
    /// the placeholder removed and surrounding whitespace trimmed).
    pub grounding_prompt: String,
    /// The rendered template sent to the model.
    pub combined: String,
}

/// Coordinate convention inferred for a parsed box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordConvention {
    /// Values already in `[0,1]`.
    NormalizedUnit,
    /// Integer values on a 0–1000 scale, divided by 1000.
    NormalizedThousand,
    /// Pixel values, divided by the image dimensions.
    Pixel,
}

/// Why a reply yielded no box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseFailure {
    /// No balanced JSON group with exactly four numbers anywhere in the text.
    NoBoxFound,
    /// A candidate was found but its values are unusable.
    MalformedBox(String),
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseFailure::NoBoxFound => write!(f, "no bounding box found in response"),
            ParseFailure::MalformedBox(detail) => write!(f, "malformed bounding box: {detail}"),
        }
    }
}

/// Outcome of parsing one stage-1 reply.
///
/// Exactly one of `parsed_box` and `failure` is populated. A failed parse is
/// data, not an error: the pipeline downgrades it to the full-image fallback
/// instead of aborting a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResponse {
    pub raw_text: String,
    pub parsed_box: Option<NormBox>,
    pub coord_convention: Option<CoordConvention>,
    pub failure: Option<ParseFailure>,
}

impl GroundingResponse {
    fn parsed(raw: &str, box_: NormBox, convention: CoordConvention) -> Self {
        Self {
            raw_text: raw.to_owned(),
            parsed_box: Some(box_),
            coord_convention: Some(convention),
            failure: None,
        }
    }

    fn failed(raw: &str, failure: ParseFailure) -> Self {
        Self {
            raw_text: raw.to_owned(),
            parsed_box: None,
            coord_convention: None,
            failure: Some(failure),
        }
    }
}

/// Render the stage-1 prompt by splicing `question` into `template`.
///
/// Substitution is a single pass over the template: placeholder text inside
/// the question itself is preserved literally, never re-expanded.
pub fn build_grounding_prompt(
    question: &str,
    template: &str,
) -> Result<PromptBundle, GroundingError> {
    if question.trim().is_empty() {
        return Err(GroundingError::EmptyQuestion);
    }

    let mut combined = String::with_capacity(template.len() + question.len());
    let mut instruction = String::with_capacity(template.len());
    let mut rest = template;
    let mut substituted = false;
    while let Some((pos, len)) = next_placeholder(rest) {
        combined.push_str(&rest[..pos]);
        combined.push_str(question);
        instruction.push_str(&rest[..pos]);
        rest = &rest[pos + len..];
        substituted = true;
    }
    combined.push_str(rest);
    instruction.push_str(rest);

    if !substituted {
        return Err(GroundingError::MissingPlaceholder {
            template: template.to_owned(),
        });
    }

    Ok(PromptBundle {
        question: question.to_owned(),
        grounding_prompt: instruction.trim().to_owned(),
        combined,
    })
}

fn next_placeholder(s: &str) -> Option<(usize, usize)> {
    let long = s.find("{question}").map(|p| (p, "{question}".len()));
    let short = s.find("{q}").map(|p| (p, "{q}".len()));
    match (long, short) {
        (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    }
}

/// Scan a stage-1 reply for its bounding box.
///
/// The first balanced JSON object or array containing exactly four numbers
/// wins (accepted shapes: a `"bbox"`/`"bounding_box"` key at any depth, or a
/// bare 4-array); anything after it is ignored. Values are mapped to `[0,1]`
/// according to the inferred [`CoordConvention`], and corners are reordered
/// so `x1 ≤ x2`, `y1 ≤ y2`.
pub fn parse_bbox_response(
    raw: &str,
    image_w: u32,
    image_h: u32,
) -> Result<GroundingResponse, GroundingError> {
    if image_w == 0 || image_h == 0 {
        return Err(GroundingError::InvalidImageSize {
            width: image_w,
            height: image_h,
        });
    }

    let bytes = raw.as_bytes();
    for start in 0..bytes.len() {
        if bytes[start] != b'{' && bytes[start] != b'[' {
            continue;
        }
        let Some(end) = balanced_extent(bytes, start) else {
            continue;
        };
        let Ok(value) = serde_json::from_str::<Value>(&raw[start..end]) else {
            continue;
        };
        let Some(values) = find_four_numbers(&value) else {
            continue;
        };
        return Ok(normalize_candidate(raw, values, image_w, image_h));
    }
    Ok(GroundingResponse::failed(raw, ParseFailure::NoBoxFound))
}

/// End (exclusive) of the balanced bracket group starting at `start`, or
/// `None` if the group never closes. String contents, including escaped
/// quotes, do not count toward nesting.
fn balanced_extent(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn find_four_numbers(value: &Value) -> Option<[f64; 4]> {
    match value {
        Value::Array(items) => as_four_numbers(items),
        Value::Object(map) => find_in_object(map),
        _ => None,
    }
}

fn find_in_object(map: &serde_json::Map<String, Value>) -> Option<[f64; 4]> {
    for key in ["bbox", "bounding_box"] {
        if let Some(Value::Array(items)) = map.get(key) {
            if let Some(found) = as_four_numbers(items) {
                return Some(found);
            }
        }
    }
    for value in map.values() {
        match value {
            Value::Object(inner) => {
                if let Some(found) = find_in_object(inner) {
                    return Some(found);
                }
            }
            Value::Array(items) => {
                for item in items {
                    if let Value::Object(inner) = item {
                        if let Some(found) = find_in_object(inner) {
                            return Some(found);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    None
}

fn as_four_numbers(items: &[Value]) -> Option<[f64; 4]> {
    if items.len() != 4 {
        return None;
    }
    let mut out = [0.0; 4];
    for (slot, item) in out.iter_mut().zip(items) {
        *slot = item.as_f64()?;
    }
    Some(out)
}

fn normalize_candidate(
    raw: &str,
    values: [f64; 4],
    image_w: u32,
    image_h: u32,
) -> GroundingResponse {
    let convention = classify_convention(&values, image_w, image_h);
    let (dx, dy) = match convention {
        CoordConvention::NormalizedUnit => (1.0, 1.0),
        CoordConvention::NormalizedThousand => (1000.0, 1000.0),
        CoordConvention::Pixel => (f64::from(image_w), f64::from(image_h)),
    };
    let xs = [values[0] / dx, values[2] / dx];
    let ys = [values[1] / dy, values[3] / dy];

    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return GroundingResponse::failed(
            raw,
            ParseFailure::MalformedBox(format!("non-finite coordinates in {values:?}")),
        );
    }
    if xs.iter().chain(&ys).any(|v| *v < 0.0) {
        return GroundingResponse::failed(
            raw,
            ParseFailure::MalformedBox(format!(
                "negative coordinates after normalization in {values:?}"
            )),
        );
    }

    let (x1, x2) = ordered(xs[0], xs[1]);
    let (y1, y2) = ordered(ys[0], ys[1]);
    // Sloppy model output can run slightly past the far edge; snap it back.
    match NormBox::new(x1.min(1.0), y1.min(1.0), x2.min(1.0), y2.min(1.0)) {
        Ok(box_) => GroundingResponse::parsed(raw, box_, convention),
        Err(err) => GroundingResponse::failed(raw, ParseFailure::MalformedBox(err.to_string())),
    }
}

/// Convention heuristic. Unit when everything already fits in `[0,1]`.
/// The 0–1000 scale is assumed only when reading the values as pixels is
/// impossible (some value exceeds its image dimension) yet they are integers
/// within 1000; when both readings are feasible, pixels win.
fn classify_convention(values: &[f64; 4], image_w: u32, image_h: u32) -> CoordConvention {
    if values.iter().all(|v| *v <= 1.0) {
        return CoordConvention::NormalizedUnit;
    }
    let within_thousand = values.iter().all(|v| *v <= 1000.0);
    let integral = values.iter().all(|v| v.fract() == 0.0 && v.is_finite());
    let pixel_infeasible = values[0] > f64::from(image_w)
        || values[2] > f64::from(image_w)
        || values[1] > f64::from(image_h)
        || values[3] > f64::from(image_h);
    if within_thousand && integral && pixel_infeasible {
        CoordConvention::NormalizedThousand
    } else {
        CoordConvention::Pixel
    }
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

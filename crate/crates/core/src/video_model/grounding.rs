use std::fmt::Write as _;

use serde::Deserialize;

use super::{BoundingBox, EditSpec, FrameSequence, GroundingEntity, ModelError, VideoGrounding};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    frames: Vec<FrameDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    index: i64,
    entities: Vec<EntityDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityDoc {
    phrase: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// Parses the groundings JSON document:
/// `{"frames": [{"index": 0, "entities": [{"phrase": "rabbit", "box": [x0,y0,x1,y1]}]}]}`.
pub fn parse_groundings(text: &str) -> Result<VideoGrounding, ModelError> {
    let mut doc: Document =
        serde_json::from_str(text).map_err(|e| ModelError::MalformedGroundings(e.to_string()))?;
    doc.frames.sort_by_key(|f| f.index);
    let indices: Vec<i64> = doc.frames.iter().map(|f| f.index).collect();
    if indices.iter().enumerate().any(|(i, &idx)| idx != i as i64) {
        return Err(ModelError::NonContiguousIndices(indices));
    }
    let frames = doc
        .frames
        .into_iter()
        .map(|f| {
            f.entities
                .into_iter()
                .map(|e| {
                    let [x0, y0, x1, y1] = e.bbox;
                    GroundingEntity { phrase: e.phrase, bbox: BoundingBox { x0, y0, x1, y1 } }
                })
                .collect()
        })
        .collect();
    VideoGrounding::new(frames)
}

/// Writes the groundings document with boxes at six decimal places.
pub fn serialize_groundings(g: &VideoGrounding) -> String {
    let mut out = String::from("{\"frames\":[");
    for (i, ents) in g.frames().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{{\"index\":{i},\"entities\":[").unwrap();
        for (j, e) in ents.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let phrase = serde_json::to_string(&e.phrase).expect("string serialization");
            let b = &e.bbox;
            write!(
                out,
                "{{\"phrase\":{phrase},\"box\":[{:.6},{:.6},{:.6},{:.6}]}}",
                b.x0, b.y0, b.x1, b.y1
            )
            .unwrap();
        }
        out.push_str("]}");
    }
    out.push_str("]}");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub grounding: VideoGrounding,
    /// Source phrases from the edit map that matched no entity.
    pub unmatched: Vec<String>,
}

/// Replaces each entity phrase that appears in the edit map; boxes are
/// carried over untouched. Unmatched map entries are logged, not fatal.
pub fn apply_edit_spec(g: &VideoGrounding, spec: &EditSpec) -> EditOutcome {
    let frames = g
        .frames()
        .iter()
        .map(|ents| {
            ents.iter()
                .map(|e| GroundingEntity {
                    phrase: spec.lookup(&e.phrase).unwrap_or(&e.phrase).to_string(),
                    bbox: e.bbox,
                })
                .collect()
        })
        .collect();
    let unmatched: Vec<String> = spec
        .phrase_map()
        .iter()
        .filter(|m| !g.frames().iter().flatten().any(|e| e.phrase == m.from))
        .map(|m| m.from.clone())
        .collect();
    for phrase in &unmatched {
        log::warn!("edit map phrase {phrase:?} does not appear in the grounding");
    }
    EditOutcome { grounding: VideoGrounding::new_unchecked(frames), unmatched }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    FrameCountMismatch { grounding: usize, frames: usize },
    EntityCountMismatch { frame: usize, expected: usize, found: usize },
    EmptyPhrase { frame: usize, entity: usize },
    DegenerateBox { frame: usize, entity: usize, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for issue in &self.issues {
            writeln!(f, "{issue:?}")?;
        }
        Ok(())
    }
}

/// Lists every invariant violation; never fails.
pub fn validate_grounding(g: &VideoGrounding, frames: &FrameSequence) -> ValidationReport {
    let mut issues = Vec::new();
    if g.frame_count() != frames.len() {
        issues.push(ValidationIssue::FrameCountMismatch { grounding: g.frame_count(), frames: frames.len() });
    }
    let expected = g.entity_count();
    for (fi, ents) in g.frames().iter().enumerate() {
        if ents.len() != expected {
            issues.push(ValidationIssue::EntityCountMismatch { frame: fi, expected, found: ents.len() });
        }
        for (ei, e) in ents.iter().enumerate() {
            if e.phrase.is_empty() {
                issues.push(ValidationIssue::EmptyPhrase { frame: fi, entity: ei });
            }
            if let Some(reason) = e.bbox.violation() {
                issues.push(ValidationIssue::DegenerateBox { frame: fi, entity: ei, reason });
            }
        }
    }
    ValidationReport { issues }
}

//! Frames, latents, groundings and edit specifications.

mod frames;
mod grounding;

pub use frames::{load_frames, save_frames};
pub use grounding::{
    apply_edit_spec, parse_groundings, serialize_groundings, validate_grounding, EditOutcome,
    ValidationIssue, ValidationReport,
};

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("missing path: {0}")]
    MissingPath(String),
    #[error("no frames found in {0}")]
    NoFrames(String),
    #[error("inconsistent resolutions: frame {index} is {found:?}, expected {expected:?}")]
    InconsistentResolutions { index: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("image error in {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("frame values must be finite and in [0,1] (frame {0})")]
    ValueOutOfRange(usize),
    #[error("malformed groundings document: {0}")]
    MalformedGroundings(String),
    #[error("frame indices must be contiguous 0..N-1 (found {0:?})")]
    NonContiguousIndices(Vec<i64>),
    #[error("invalid box in frame {frame}, entity {entity}: {reason}")]
    InvalidBox { frame: usize, entity: usize, reason: String },
    #[error("empty phrase in frame {frame}, entity {entity}")]
    EmptyPhrase { frame: usize, entity: usize },
    #[error("entity counts differ: frame 0 has {expected}, frame {frame} has {found}")]
    EntityCountsDiffer { frame: usize, expected: usize, found: usize },
    #[error("duplicate source phrase in edit map: {0:?}")]
    DuplicateSourcePhrase(String),
    #[error("target prompt must be non-empty")]
    EmptyTargetPrompt,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `N` RGB frames `[N, H, W, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Array4<f64>,
    fps: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Array4<f64>, fps: Option<f64>) -> Result<Self, ModelError> {
        let (n, _, _, c) = frames.dim();
        if n == 0 {
            return Err(ModelError::NoFrames("<memory>".into()));
        }
        if c != 3 {
            return Err(ModelError::Shape(format!("expected 3 channels, got {c}")));
        }
        for (i, f) in frames.outer_iter().enumerate() {
            if f.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(ModelError::ValueOutOfRange(i));
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn fps(&self) -> Option<f64> {
        self.fps
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(0), i)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn into_data(self) -> Array4<f64> {
        self.frames
    }
}

/// Per-frame latents `[N, h, w, c]` at one diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatents {
    pub data: Array4<f64>,
    pub timestep: usize,
}

impl VideoLatents {
    pub fn new(data: Array4<f64>, timestep: usize) -> Result<Self, ModelError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Shape("latents contain non-finite values".into()));
        }
        Ok(Self { data, timestep })
    }

    pub fn frame_count(&self) -> usize {
        self.data.dim().0
    }
}

/// A box in normalized frame coordinates, `0 ≤ x0 < x1 ≤ 1`, `0 ≤ y0 < y1 ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, String> {
        let b = Self { x0, y0, x1, y1 };
        match b.violation() {
            Some(reason) => Err(reason),
            None => Ok(b),
        }
    }

    pub const FULL: BoundingBox = BoundingBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Describes the first broken invariant, if any.
    pub fn violation(&self) -> Option<String> {
        let c = self.coords();
        if c.iter().any(|v| !v.is_finite()) {
            return Some("non-finite coordinate".into());
        }
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Some(format!("coordinates {c:?} outside [0,1]"));
        }
        if self.x0 >= self.x1 {
            return Some(format!("degenerate box: x0 {} >= x1 {}", self.x0, self.x1));
        }
        if self.y0 >= self.y1 {
            return Some(format!("degenerate box: y0 {} >= y1 {}", self.y0, self.y1));
        }
        None
    }

    /// Half-open containment test for a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingEntity {
    pub phrase: String,
    pub bbox: BoundingBox,
}

/// Per-frame grounding lists. Entity `j` denotes the same tracked object in
/// every frame; alignment is by index, never by phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoGrounding {
    frames: Vec<Vec<GroundingEntity>>,
}

impl VideoGrounding {
    pub fn new(frames: Vec<Vec<GroundingEntity>>) -> Result<Self, ModelError> {
        let g = Self { frames };
        g.check()?;
        Ok(g)
    }

    /// Builds without validation; use [`validate_grounding`] to inspect.
    pub fn new_unchecked(frames: Vec<Vec<GroundingEntity>>) -> Self {
        Self { frames }
    }

    /// The same entities repeated on every one of `n` frames.
    pub fn static_over(n: usize, entities: Vec<GroundingEntity>) -> Result<Self, ModelError> {
        Self::new(vec![entities; n])
    }

    fn check(&self) -> Result<(), ModelError> {
        let expected = self.frames.first().map_or(0, Vec::len);
        for (fi, ents) in self.frames.iter().enumerate() {
            if ents.len() != expected {
                return Err(ModelError::EntityCountsDiffer { frame: fi, expected, found: ents.len() });
            }
            for (ei, e) in ents.iter().enumerate() {
                if e.phrase.is_empty() {
                    return Err(ModelError::EmptyPhrase { frame: fi, entity: ei });
                }
                if let Some(reason) = e.bbox.violation() {
                    return Err(ModelError::InvalidBox { frame: fi, entity: ei, reason });
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn entity_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn frames(&self) -> &[Vec<GroundingEntity>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[GroundingEntity] {
        &self.frames[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseEdit {
    pub from: String,
    pub to: String,
}

/// The requested attribute changes: phrase substitutions plus prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEditSpec")]
pub struct EditSpec {
    phrase_map: Vec<PhraseEdit>,
    source_prompt: String,
    target_prompt: String,
}

#[derive(Deserialize)]
struct RawEditSpec {
    #[serde(default)]
    phrase_map: Vec<PhraseEdit>,
    #[serde(default)]
    source_prompt: String,
    target_prompt: String,
}

impl TryFrom<RawEditSpec> for EditSpec {
    type Error = ModelError;
    fn try_from(raw: RawEditSpec) -> Result<Self, ModelError> {
        EditSpec::new(raw.phrase_map, raw.source_prompt, raw.target_prompt)
    }
}

impl EditSpec {
    pub fn new(
        phrase_map: Vec<PhraseEdit>,
        source_prompt: impl Into<String>,
        target_prompt: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let target_prompt = target_prompt.into();
        if target_prompt.is_empty() {
            return Err(ModelError::EmptyTargetPrompt);
        }
        let mut seen = std::collections::HashSet::new();
        for e in &phrase_map {
            if !seen.insert(e.from.as_str()) {
                return Err(ModelError::DuplicateSourcePhrase(e.from.clone()));
            }
        }
        Ok(Self { phrase_map, source_prompt: source_prompt.into(), target_prompt })
    }

    /// Convenience constructor from `(from, to)` pairs.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        source_prompt: &str,
        target_prompt: &str,
    ) -> Result<Self, ModelError> {
        let map = pairs
            .into_iter()
            .map(|(f, t)| PhraseEdit { from: f.to_string(), to: t.to_string() })
            .collect();
        Self::new(map, source_prompt, target_prompt)
    }

    /// No phrase edits; target prompt equal to the source prompt.
    pub fn identity(prompt: &str) -> Result<Self, ModelError> {
        Self::new(Vec::new(), prompt, prompt)
    }

    pub fn phrase_map(&self) -> &[PhraseEdit] {
        &self.phrase_map
    }

    pub fn source_prompt(&self) -> &str {
        &self.source_prompt
    }

    pub fn target_prompt(&self) -> &str {
        &self.target_prompt
    }

    pub fn lookup(&self, phrase: &str) -> Option<&str> {
        self.phrase_map.iter().find(|e| e.from == phrase).map(|e| e.to.as_str())
    }
}

/// Per-frame depth maps `[N, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSequence {
    maps: Array3<f64>,
}

impl DepthSequence {
    pub fn new(maps: Array3<f64>) -> Result<Self, ModelError> {
        if maps.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(ModelError::Shape("depth values must be finite and in [0,1]".into()));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Array3<f64> {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

//! Shared domain types for trajectories, tools, rewards, and datasets.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. Trajectory records persist as single-line JSON; images are
//! referenced by `source_id` plus a content hash ([`ImageRef`]) and never
//! inlined — the pixel payload ([`ChartImage`]) lives in PNG asset stores
//! and at the tool/engine boundary.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};

pub mod store;

/// Errors raised by domain-type construction and (de)serialization.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    /// Record text is not valid single-line JSON in the expected schema.
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    /// Record parsed but violates a type invariant.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    /// Image construction or decoding failed.
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An 8-bit RGB raster with an opaque source identifier.
///
/// Pixels are row-major, three bytes per pixel. `source_id` addresses the
/// image in PNG asset stores and trajectory records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChartImage {
    source_id: String,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl ChartImage {
    /// Builds an image from row-major RGB bytes. Dimensions must be at least
    /// 1×1 and the buffer exactly `width * height * 3` bytes.
    pub fn new(
        source_id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
    ) -> Result<Self, ModelError> {
        if width == 0 || height == 0 {
            return Err(ModelError::InvalidImage(format!(
                "dimensions must be >= 1, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ModelError::InvalidImage(format!(
                "pixel buffer holds {} bytes, expected {expected} for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            source_id: source_id.into(),
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        source_id: impl Into<String>,
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self, ModelError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(source_id, width, height, pixels)
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// RGB triple at (x, y). Panics if out of bounds.
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        assert!(x < self.width && y < self.height, "pixel out of bounds");
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// SHA-256 over dimensions and pixel bytes, hex-encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.width.to_be_bytes());
        hasher.update(self.height.to_be_bytes());
        hasher.update(&self.pixels);
        hex::encode(hasher.finalize())
    }

    /// The compact reference persisted in trajectory records.
    pub fn make_ref(&self) -> ImageRef {
        ImageRef {
            source_id: self.source_id.clone(),
            content_hash: self.content_hash(),
            width: self.width,
            height: self.height,
        }
    }

    /// Encodes to PNG bytes. Encoding a valid image cannot fail.
    pub fn to_png(&self) -> Vec<u8> {
        let buf: image::RgbImage = image::ImageBuffer::from_raw(
            self.width,
            self.height,
            self.pixels.clone(),
        )
        .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        image::DynamicImage::ImageRgb8(buf)
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }

    /// Decodes PNG (or any supported raster) bytes into an RGB image.
    pub fn from_png(source_id: impl Into<String>, bytes: &[u8]) -> Result<Self, ModelError> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| ModelError::InvalidImage(e.to_string()))?
            .to_rgb8();
        let (width, height) = img.dimensions();
        Self::new(source_id, width, height, img.into_raw())
    }

    pub fn load_png(source_id: impl Into<String>, path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        Self::from_png(source_id, &bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_png())?;
        Ok(())
    }
}

/// Reference to an image by source id and content hash; the form in which
/// images appear inside persisted trajectory records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub source_id: String,
    pub content_hash: String,
    pub width: u32,
    pub height: u32,
}

/// Pixel-space bounding box, origin top-left, end-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    /// Requires `x0 < x1` and `y0 < y1`.
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, ModelError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(ModelError::InvariantViolation(format!(
                "bbox must satisfy x0 < x1 and y0 < y1, got [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }
    pub fn y0(&self) -> u32 {
        self.y0
    }
    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = ModelError;

    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        let as_u32 = |n: i64, name: &str| -> Result<u32, ModelError> {
            u32::try_from(n).map_err(|_| {
                ModelError::InvariantViolation(format!(
                    "bbox coordinate {name} = {n} out of range"
                ))
            })
        };
        BBox::new(
            as_u32(v[0], "x0")?,
            as_u32(v[1], "y0")?,
            as_u32(v[2], "x1")?,
            as_u32(v[3], "y1")?,
        )
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0 as i64, b.y0 as i64, b.x1 as i64, b.y1 as i64]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x0, self.y0, self.x1, self.y1)
    }
}

/// One of the two tool invocations a policy turn may request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolAction {
    Crop { bbox: BBox },
    CodeExec { source: String },
}

impl ToolAction {
    pub fn code(source: impl Into<String>) -> Result<Self, ModelError> {
        let source = source.into();
        if source.is_empty() {
            return Err(ModelError::InvariantViolation(
                "code action requires non-empty source".into(),
            ));
        }
        Ok(ToolAction::CodeExec { source })
    }
}

/// Why a tool execution failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolErrorKind {
    Timeout,
    ExecFailure,
    InvalidArgs,
    ResourceLimit,
}

impl fmt::Display for ToolErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ToolErrorKind::Timeout => "timeout",
            ToolErrorKind::ExecFailure => "exec_failure",
            ToolErrorKind::InvalidArgs => "invalid_args",
            ToolErrorKind::ResourceLimit => "resource_limit",
        };
        f.write_str(s)
    }
}

/// What a tool execution produced: text output, a processed image, or an
/// error. Images are recorded by reference; pixels travel separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Text {
        content: String,
        truncated: bool,
    },
    Image {
        image: ImageRef,
    },
    ToolError {
        error_kind: ToolErrorKind,
        message: String,
    },
}

impl Observation {
    pub fn is_error(&self) -> bool {
        matches!(self, Observation::ToolError { .. })
    }
}

/// One completed reasoning/action/observation step. Steps are only persisted
/// once their observation exists; a half-executed step never reaches a
/// trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub reasoning: String,
    pub action: ToolAction,
    pub observation: Observation,
}

/// How a trajectory ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Answer,
    TurnLimit,
    ParseFailureLimit,
}

/// The full record of one tool-integrated reasoning episode: input image and
/// question, interleaved steps, closing reasoning, and the final answer when
/// one was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub image: ImageRef,
    pub question: String,
    pub steps: Vec<Step>,
    pub final_reasoning: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub terminated_by: TerminatedBy,
}

impl Trajectory {
    /// Checks the intrinsic invariant: an answer is present exactly when the
    /// trajectory terminated by answering.
    pub fn validate(&self) -> Result<(), ModelError> {
        let answered = self.terminated_by == TerminatedBy::Answer;
        if answered != self.answer.is_some() {
            return Err(ModelError::InvariantViolation(format!(
                "answer presence ({}) inconsistent with terminated_by ({:?})",
                self.answer.is_some(),
                self.terminated_by
            )));
        }
        Ok(())
    }
}

/// Serializes a trajectory as one single-line JSON record.
///
/// The output round-trips through [`deserialize_trajectory`] to a
/// structurally equal value.
pub fn serialize_trajectory(t: &Trajectory) -> String {
    serde_json::to_string(t).expect("trajectory serialization cannot fail")
}

/// Parses a single-line JSON trajectory record, validating invariants.
pub fn deserialize_trajectory(record: &str) -> Result<Trajectory, ModelError> {
    let t: Trajectory =
        serde_json::from_str(record).map_err(|e| ModelError::MalformedRecord(e.to_string()))?;
    t.validate()?;
    Ok(t)
}

/// Reward components of one trajectory and their gated combination.
///
/// `total` is always `acc + lambda1 * format + lambda2 * gate * tool` with
/// `gate = 1` iff the answer was correct, evaluated in exactly that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub format: f64,
    pub tool: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Combines binary components under the correctness gate on the tool
    /// term. Components must be 0.0 or 1.0.
    pub fn compose(acc: f64, format: f64, tool: f64, lambda1: f64, lambda2: f64) -> Self {
        debug_assert!(acc == 0.0 || acc == 1.0);
        debug_assert!(format == 0.0 || format == 1.0);
        debug_assert!(tool == 0.0 || tool == 1.0);
        let gate = if acc > 0.0 { 1.0 } else { 0.0 };
        let total = acc + lambda1 * format + lambda2 * gate * tool;
        Self {
            acc,
            format,
            tool,
            lambda1,
            lambda2,
            total,
        }
    }

    /// Re-derives the total from the stored components; bit-identical to the
    /// stored value for any breakdown built by [`RewardBreakdown::compose`].
    pub fn recompute_total(&self) -> f64 {
        let gate = if self.acc > 0.0 { 1.0 } else { 0.0 };
        self.acc + self.lambda1 * self.format + self.lambda2 * gate * self.tool
    }
}

/// A group of G trajectories sampled from the same prompt, with their
/// trajectory-level rewards and group-normalized advantages. Rewards and
/// advantages are filled in by later pipeline stages and are empty until
/// then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupSample {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self {
            trajectories,
            rewards: Vec::new(),
            advantages: Vec::new(),
        }
    }

    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    /// Validates a fully populated group: equal lengths, G >= 2, and mean
    /// advantage within 1e-9 of zero for non-degenerate groups.
    pub fn validate_complete(&self, std_floor: f64) -> Result<(), ModelError> {
        let g = self.trajectories.len();
        if g < 2 {
            return Err(ModelError::InvariantViolation(format!(
                "group size must be >= 2, got {g}"
            )));
        }
        if self.rewards.len() != g || self.advantages.len() != g {
            return Err(ModelError::InvariantViolation(format!(
                "group lists disagree: {g} trajectories, {} rewards, {} advantages",
                self.rewards.len(),
                self.advantages.len()
            )));
        }
        let mean = self.rewards.iter().sum::<f64>() / g as f64;
        let var = self.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
        if var.sqrt() > std_floor {
            let adv_mean = self.advantages.iter().sum::<f64>() / g as f64;
            if adv_mean.abs() > 1e-9 {
                return Err(ModelError::InvariantViolation(format!(
                    "non-degenerate group has advantage mean {adv_mean}, expected within 1e-9 of 0"
                )));
            }
        }
        Ok(())
    }
}

/// Per-trajectory token-level inputs to the clipped objective: old/new
/// log-probabilities, the trainable-token mask, and the broadcast advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedTokenBatch {
    pub old_logprobs: Vec<f64>,
    pub new_logprobs: Vec<f64>,
    pub mask: Vec<bool>,
    pub advantage: f64,
}

impl MaskedTokenBatch {
    pub fn masked_in(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Question category: element identification vs. multi-step analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Recognition,
    Reasoning,
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuestionType::Recognition => f.write_str("recognition"),
            QuestionType::Reasoning => f.write_str("reasoning"),
        }
    }
}

/// Shape of the expected answer, which selects the matching rule used by the
/// accuracy reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Text,
    Numeric,
    Binary,
    ListRange,
}

/// Where a QA item came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synth,
    ArxivMined,
}

/// One question-answer pair grounded in a chart image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub qtype: QuestionType,
    pub aspect: String,
    pub answer_type: AnswerType,
    pub difficulty: u8,
    pub provenance: Provenance,
}

impl QAItem {
    /// Checks difficulty range and membership of `aspect` in the pool
    /// configured for this item's question type.
    pub fn validate(&self, aspect_pool: &AspectPools) -> Result<(), ModelError> {
        if !(1..=5).contains(&self.difficulty) {
            return Err(ModelError::InvariantViolation(format!(
                "difficulty must be 1-5, got {}",
                self.difficulty
            )));
        }
        let pool = aspect_pool.for_qtype(self.qtype);
        if !pool.iter().any(|a| a == &self.aspect) {
            return Err(ModelError::InvariantViolation(format!(
                "aspect {:?} not in the configured {} pool",
                self.aspect, self.qtype
            )));
        }
        Ok(())
    }
}

/// The analytical-aspect pools questions are conditioned on, per question
/// type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectPools {
    pub recognition: Vec<String>,
    pub reasoning: Vec<String>,
}

impl AspectPools {
    pub fn for_qtype(&self, qtype: QuestionType) -> &[String] {
        match qtype {
            QuestionType::Recognition => &self.recognition,
            QuestionType::Reasoning => &self.reasoning,
        }
    }
}

impl Default for AspectPools {
    fn default() -> Self {
        let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            recognition: owned(&[
                "Axis Label Extraction",
                "Color Extraction",
                "Title Extraction",
                "Tick Extraction",
                "Numerical Value Extraction",
                "Counting",
                "Pattern Recognition",
                "Enumeration",
            ]),
            reasoning: owned(&[
                "Extreme Value Analysis",
                "Conditional Reasoning",
                "Comparative Analysis",
                "Trend Analysis",
                "Aggregation & Calculation",
                "Ranking & Ordering",
                "Proportional & Distributional Analysis",
                "Pattern & Correlation",
            ]),
        }
    }
}

/// Sampled attributes a synthetic chart is generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub persona: String,
    pub num_subplots: u32,
    pub layout: (u32, u32),
    pub chart_types: Vec<String>,
    pub difficulty: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
}

impl ChartSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_subplots < 1 {
            return Err(ModelError::InvariantViolation(
                "num_subplots must be >= 1".into(),
            ));
        }
        let (rows, cols) = self.layout;
        if (rows as u64) * (cols as u64) < u64::from(self.num_subplots) {
            return Err(ModelError::InvariantViolation(format!(
                "layout {rows}x{cols} cannot hold {} subplots",
                self.num_subplots
            )));
        }
        if self.chart_types.len() != self.num_subplots as usize {
            return Err(ModelError::InvariantViolation(format!(
                "chart_types has {} entries for {} subplots",
                self.chart_types.len(),
                self.num_subplots
            )));
        }
        Ok(())
    }
}

/// Directory of PNG assets addressed by source id.
#[derive(Debug, Clone)]
pub struct AssetStore {
    dir: PathBuf,
}

impl AssetStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, source_id: &str) -> Result<PathBuf, ModelError> {
        if source_id.is_empty()
            || !source_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        {
            return Err(ModelError::InvalidImage(format!(
                "source_id {source_id:?} is not filesystem-safe"
            )));
        }
        Ok(self.dir.join(format!("{source_id}.png")))
    }

    pub fn save(&self, image: &ChartImage) -> Result<PathBuf, ModelError> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path_for(image.source_id())?;
        image.save_png(&path)?;
        Ok(path)
    }

    pub fn load(&self, source_id: &str) -> Result<ChartImage, ModelError> {
        let path = self.path_for(source_id)?;
        ChartImage::load_png(source_id, &path)
    }

    pub fn contains(&self, source_id: &str) -> bool {
        self.path_for(source_id).map(|p| p.exists()).unwrap_or(false)
    }
}

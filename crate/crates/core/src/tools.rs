//! The two tools: image cropping and code computation.
//!
//! `crop` clamps the requested box to the image, rejects boxes that collapse
//! below `min_crop_side` after clamping, and optionally upscales the result
//! with nearest-neighbor. `code` runs the program in the sandbox with the
//! chart seeded read-only as `chart.png` in the working directory.
//!
//! Both are total: every action yields exactly one observation; failures
//! surface as `Observation::ToolError`, never as an error the rollout loop
//! has to handle.

use crate::model::{BBox, ChartImage, Observation, ToolAction, ToolErrorKind};
use crate::sandbox::{ExecLimits, ExitStatusKind, Sandbox, SeedFile};
use serde::{Deserialize, Serialize};

/// Name of the image file seeded into code-tool workdirs.
pub const CHART_FILE_NAME: &str = "chart.png";

const ERROR_EXCERPT_BYTES: usize = 512;

/// Tool behavior knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolConfig {
    /// Minimum side length a clamped crop may have, in pixels.
    pub min_crop_side: u32,
    /// Uniform nearest-neighbor upscale factor applied to crops, >= 1.
    pub crop_resize_factor: f64,
    pub exec_limits: ExecLimits,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            min_crop_side: 8,
            crop_resize_factor: 1.0,
            exec_limits: ExecLimits::default(),
        }
    }
}

/// What one tool invocation produced: the observation to record, plus the
/// concrete cropped image when the observation is visual (records keep only
/// the reference; the engine needs pixels to feed back to the policy).
#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutcome {
    pub observation: Observation,
    pub image: Option<ChartImage>,
}

impl ToolOutcome {
    fn error(kind: ToolErrorKind, message: impl Into<String>) -> Self {
        Self {
            observation: Observation::ToolError {
                error_kind: kind,
                message: message.into(),
            },
            image: None,
        }
    }
}

/// Crops `bbox` out of `image`.
///
/// The box is clamped to image bounds first; a clamped box with any side
/// shorter than `min_crop_side` is rejected as `InvalidArgs`. Output pixel
/// (x, y) equals input pixel (x0 + x, y0 + y) before upscaling.
pub fn crop(image: &ChartImage, bbox: &BBox, cfg: &ToolConfig) -> ToolOutcome {
    let x0 = bbox.x0().min(image.width());
    let y0 = bbox.y0().min(image.height());
    let x1 = bbox.x1().min(image.width());
    let y1 = bbox.y1().min(image.height());
    let w = x1.saturating_sub(x0);
    let h = y1.saturating_sub(y0);
    if w < cfg.min_crop_side || h < cfg.min_crop_side {
        return ToolOutcome::error(
            ToolErrorKind::InvalidArgs,
            format!(
                "crop {bbox} clamps to {w}x{h} on a {}x{} image (minimum side {})",
                image.width(),
                image.height(),
                cfg.min_crop_side
            ),
        );
    }

    let factor = cfg.crop_resize_factor.max(1.0);
    let out_w = scaled_dim(w, factor);
    let out_h = scaled_dim(h, factor);
    let source_id = format!(
        "{}.crop.{x0}_{y0}_{x1}_{y1}",
        image.source_id()
    );
    let cropped = ChartImage::from_fn(source_id, out_w, out_h, |x, y| {
        let src_x = x0 + (x as f64 / factor).floor() as u32;
        let src_y = y0 + (y as f64 / factor).floor() as u32;
        image.pixel(src_x.min(x1 - 1), src_y.min(y1 - 1))
    })
    .expect("crop dimensions are >= min_crop_side >= 1");

    ToolOutcome {
        observation: Observation::Image {
            image: cropped.make_ref(),
        },
        image: Some(cropped),
    }
}

/// Output dimension law: `round(side * factor)`, never below 1.
pub fn scaled_dim(side: u32, factor: f64) -> u32 {
    ((side as f64 * factor).round() as u32).max(1)
}

/// Dispatches one action to its tool. Total over `ToolAction`: sandbox and
/// argument failures come back as `ToolError` observations.
pub fn run_tool(
    image: &ChartImage,
    action: &ToolAction,
    cfg: &ToolConfig,
    sandbox: &Sandbox,
) -> ToolOutcome {
    match action {
        ToolAction::Crop { bbox } => crop(image, bbox, cfg),
        ToolAction::CodeExec { source } => run_code(image, source, cfg, sandbox),
    }
}

fn run_code(image: &ChartImage, source: &str, cfg: &ToolConfig, sandbox: &Sandbox) -> ToolOutcome {
    if source.trim().is_empty() {
        return ToolOutcome::error(ToolErrorKind::InvalidArgs, "empty code source");
    }
    let seed = vec![SeedFile::readonly(CHART_FILE_NAME, image.to_png())];
    let result = match sandbox.execute(source, &cfg.exec_limits, &seed) {
        Ok(r) => r,
        Err(e) => return ToolOutcome::error(ToolErrorKind::ExecFailure, e.to_string()),
    };
    match result.exit_status {
        ExitStatusKind::Ok => ToolOutcome {
            observation: Observation::Text {
                content: result.stdout,
                truncated: result.truncated,
            },
            image: None,
        },
        ExitStatusKind::Timeout => ToolOutcome::error(
            ToolErrorKind::Timeout,
            format!(
                "execution exceeded {:.1}s wall timeout; stderr: {}",
                cfg.exec_limits.wall_timeout_s,
                excerpt(&result.stderr)
            ),
        ),
        ExitStatusKind::NonZero { code } => ToolOutcome::error(
            ToolErrorKind::ExecFailure,
            format!("exit code {code}; stderr: {}", excerpt(&result.stderr)),
        ),
        ExitStatusKind::Killed => ToolOutcome::error(
            ToolErrorKind::ResourceLimit,
            format!("killed by resource limit; stderr: {}", excerpt(&result.stderr)),
        ),
    }
}

fn excerpt(text: &str) -> &str {
    if text.len() <= ERROR_EXCERPT_BYTES {
        return text;
    }
    let mut end = ERROR_EXCERPT_BYTES;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::LocalSandbox;

    fn gradient_image(w: u32, h: u32) -> ChartImage {
        ChartImage::from_fn("base", w, h, |x, y| {
            [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]
        })
        .unwrap()
    }

    #[test]
    fn identity_crop_is_byte_identical() {
        let img = gradient_image(100, 100);
        let out = crop(&img, &BBox::new(0, 0, 100, 100).unwrap(), &ToolConfig::default());
        let cropped = out.image.unwrap();
        assert_eq!(cropped.width(), 100);
        assert_eq!(cropped.height(), 100);
        assert_eq!(cropped.pixels(), img.pixels());
    }

    #[test]
    fn offset_crop_semantics() {
        let img = gradient_image(100, 100);
        let out = crop(&img, &BBox::new(10, 20, 60, 50).unwrap(), &ToolConfig::default());
        let cropped = out.image.unwrap();
        assert_eq!((cropped.width(), cropped.height()), (50, 30));
        assert_eq!(cropped.pixel(0, 0), img.pixel(10, 20));
        assert_eq!(cropped.pixel(49, 29), img.pixel(59, 49));
    }

    #[test]
    fn corner_overshoot_clamps_to_ten_square() {
        let img = gradient_image(100, 100);
        let out = crop(&img, &BBox::new(90, 90, 150, 150).unwrap(), &ToolConfig::default());
        let cropped = out.image.unwrap();
        assert_eq!((cropped.width(), cropped.height()), (10, 10));
        assert_eq!(cropped.pixel(0, 0), img.pixel(90, 90));
    }

    #[test]
    fn fully_outside_box_is_invalid_args() {
        let img = gradient_image(100, 100);
        let out = crop(&img, &BBox::new(100, 100, 200, 200).unwrap(), &ToolConfig::default());
        assert!(matches!(
            out.observation,
            Observation::ToolError { error_kind: ToolErrorKind::InvalidArgs, .. }
        ));
        assert!(out.image.is_none());
    }

    #[test]
    fn sliver_below_min_side_rejected() {
        let img = gradient_image(100, 100);
        let out = crop(&img, &BBox::new(0, 0, 5, 50).unwrap(), &ToolConfig::default());
        assert!(matches!(
            out.observation,
            Observation::ToolError { error_kind: ToolErrorKind::InvalidArgs, .. }
        ));
    }

    #[test]
    fn upscale_factor_two() {
        let img = gradient_image(32, 32);
        let cfg = ToolConfig { crop_resize_factor: 2.0, ..ToolConfig::default() };
        let out = crop(&img, &BBox::new(0, 0, 10, 8).unwrap(), &cfg);
        let cropped = out.image.unwrap();
        assert_eq!((cropped.width(), cropped.height()), (20, 16));
        for (x, y) in [(0, 0), (1, 1), (7, 3), (19, 15)] {
            assert_eq!(cropped.pixel(x, y), img.pixel(x / 2, y / 2), "at ({x},{y})");
        }
    }

    #[test]
    fn crop_is_pure() {
        let img = gradient_image(64, 64);
        let bbox = BBox::new(3, 4, 40, 30).unwrap();
        let a = crop(&img, &bbox, &ToolConfig::default());
        let b = crop(&img, &bbox, &ToolConfig::default());
        assert_eq!(a, b);
        assert_eq!(a.observation, b.observation);
    }

    #[test]
    fn code_tool_returns_stdout() {
        let sandbox = Sandbox::local(LocalSandbox::default(), 2);
        let img = gradient_image(16, 16);
        let action = ToolAction::code("print(2 + 3)").unwrap();
        let out = run_tool(&img, &action, &ToolConfig::default(), &sandbox);
        assert_eq!(
            out.observation,
            Observation::Text { content: "5\n".into(), truncated: false }
        );
    }

    #[test]
    fn code_tool_sees_chart_file() {
        let sandbox = Sandbox::local(LocalSandbox::default(), 2);
        let img = gradient_image(16, 16);
        let action = ToolAction::code(
            "import struct\nraw = open('chart.png','rb').read()\nw, h = struct.unpack('>II', raw[16:24])\nprint(w, h)",
        )
        .unwrap();
        let out = run_tool(&img, &action, &ToolConfig::default(), &sandbox);
        assert_eq!(
            out.observation,
            Observation::Text { content: "16 16\n".into(), truncated: false }
        );
    }

    #[test]
    fn code_runtime_error_maps_to_exec_failure() {
        let sandbox = Sandbox::local(LocalSandbox::default(), 2);
        let img = gradient_image(16, 16);
        let action = ToolAction::code("raise RuntimeError('nope')").unwrap();
        let out = run_tool(&img, &action, &ToolConfig::default(), &sandbox);
        match out.observation {
            Observation::ToolError { error_kind, message } => {
                assert_eq!(error_kind, ToolErrorKind::ExecFailure);
                assert!(!message.is_empty());
            }
            other => panic!("expected ToolError, got {other:?}"),
        }
    }

    #[test]
    fn code_timeout_maps_to_timeout() {
        let sandbox = Sandbox::local(LocalSandbox::default(), 2);
        let img = gradient_image(8, 8);
        let cfg = ToolConfig {
            exec_limits: ExecLimits { wall_timeout_s: 1.0, ..ExecLimits::default() },
            ..ToolConfig::default()
        };
        let action = ToolAction::code("while True: pass").unwrap();
        let out = run_tool(&img, &action, &cfg, &sandbox);
        assert!(matches!(
            out.observation,
            Observation::ToolError { error_kind: ToolErrorKind::Timeout, .. }
        ));
    }
}

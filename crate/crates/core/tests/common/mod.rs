#![allow(dead_code)]

use gvedit::pipeline::PipelineConfig;
use gvedit::video_model::{BoundingBox, FrameSequence, GroundingEntity, VideoGrounding};
use ndarray::Array4;

/// Soft colour gradient with a bright square drifting right by `speed`
/// pixels per frame.
pub fn moving_square(n: usize, h: usize, w: usize, speed: usize) -> FrameSequence {
    let data = Array4::from_shape_fn((n, h, w, 3), |(i, y, x, c)| {
        let bg = 0.2 + 0.5 * (x as f64 / w as f64) * (c as f64 + 1.0) / 3.0 + 0.1 * y as f64 / h as f64;
        let (x0, y0) = (2 + i * speed, h / 4);
        if (y0..y0 + h / 4).contains(&y) && (x0..x0 + w / 4).contains(&x) {
            0.9 - 0.2 * c as f64
        } else {
            bg
        }
    });
    FrameSequence::new(data, Some(8.0)).unwrap()
}

pub fn entity(phrase: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> GroundingEntity {
    GroundingEntity { phrase: phrase.into(), bbox: BoundingBox::new(x0, y0, x1, y1).unwrap() }
}

pub fn left_half(n: usize, phrase: &str) -> VideoGrounding {
    VideoGrounding::static_over(n, vec![entity(phrase, 0.0, 0.0, 0.5, 1.0)]).unwrap()
}

/// Default config shrunk to a few inference steps.
pub fn small_config(steps: usize, guidance: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.diffusion.num_inference_steps = steps;
    cfg.diffusion.guidance_scale = guidance;
    cfg
}

pub fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Like [`moving_square`] but constant over `block x block` pixel cells, so a
/// codec that works at `block` resolution represents it without loss. The
/// square moves one cell per frame.
pub fn blocky_square(n: usize, cells: usize, block: usize) -> FrameSequence {
    let data = Array4::from_shape_fn((n, cells * block, cells * block, 3), |(i, y, x, c)| {
        let (cy, cx) = (y / block, x / block);
        if (cells / 4..cells / 2).contains(&cy) && (i..i + cells / 4).contains(&cx) {
            0.9 - 0.2 * c as f64
        } else {
            0.2 + 0.5 * (cx as f64 / cells as f64) * (c as f64 + 1.0) / 3.0 + 0.1 * cy as f64 / cells as f64
        }
    });
    FrameSequence::new(data, Some(8.0)).unwrap()
}

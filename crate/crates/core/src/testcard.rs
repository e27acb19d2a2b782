//! Synthetic inputs: smooth images and face-like cards with known landmarks.
//!
//! Used by the tests and by the CLI to produce demo inputs. Everything is
//! generated from a seed, so runs are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affine::{BaseTemplate, LandmarkSet, Point2, SimilarityTransform};
use crate::imaging::{ImageBuffer, ImageError};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
}

/// Smooth image: a gentle linear ramp plus a few wide gaussian blobs, kept
/// inside `[0, 255]`. Widths are at least `min_sigma` pixels.
pub fn smooth_image(
    seed: u64,
    width: usize,
    height: usize,
    channels: usize,
    min_sigma: f64,
) -> Result<ImageBuffer, ImageError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_channel: Vec<(f64, f64, f64, Vec<Blob>)> = (0..channels)
        .map(|_| {
            let gx = rng.random_range(-0.15..0.15);
            let gy = rng.random_range(-0.15..0.15);
            let base = rng.random_range(80.0..120.0);
            let blobs = (0..6)
                .map(|_| Blob {
                    x: rng.random_range(0.0..width as f64),
                    y: rng.random_range(0.0..height as f64),
                    sigma: rng.random_range(min_sigma..min_sigma * 3.0),
                    amplitude: rng.random_range(-40.0..40.0),
                })
                .collect();
            (gx, gy, base, blobs)
        })
        .collect();
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    ImageBuffer::from_fn(width, height, channels, |x, y, c| {
        let (gx, gy, base, blobs) = &per_channel[c];
        let (xf, yf) = (x as f64, y as f64);
        let mut v = base + gx * (xf - cx) + gy * (yf - cy);
        for b in blobs {
            let r2 = (xf - b.x).powi(2) + (yf - b.y).powi(2);
            v += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        v.clamp(0.0, 255.0) as f32
    })
}

/// A face placed in a source image: canvas → source transform and the
/// landmarks it produces.
#[derive(Debug, Clone)]
pub struct FacePlacement {
    pub canvas_to_source: SimilarityTransform,
    pub landmarks: LandmarkSet,
}

/// Places `base` into a `size × size` source image with a random scale in
/// `[0.8, 1.1]`, rotation within ±15° and a small offset from the centre,
/// then jitters each landmark by up to `jitter` pixels.
pub fn random_placement(seed: u64, base: &BaseTemplate, size: usize, jitter: f64) -> FacePlacement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_face);
    let scale = rng.random_range(0.8..1.1) * size as f64 / 400.0 * 300.0 / base.canvas as f64;
    let angle = rng.random_range(-15f64..15.0).to_radians();
    let centre = size as f64 / 2.0;
    let (ox, oy) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    let rot = SimilarityTransform::from_scale_rotation(scale, angle, 0.0, 0.0);
    let anchor = rot.apply(base.anchor());
    let t = SimilarityTransform::new(rot.a, rot.b, centre + ox - anchor.x, centre + oy - anchor.y);
    let pts = base
        .landmarks
        .points()
        .iter()
        .map(|p| {
            let q = t.apply(*p);
            Point2::new(q.x + rng.random_range(-jitter..=jitter), q.y + rng.random_range(-jitter..=jitter))
        })
        .collect();
    FacePlacement { canvas_to_source: t, landmarks: LandmarkSet::new(pts).expect("finite landmarks") }
}

/// Dark card with a gaussian dot of width `sigma` at every landmark; the
/// dot at `marker` is brighter than the rest.
pub fn landmark_card(
    width: usize,
    height: usize,
    landmarks: &LandmarkSet,
    marker: usize,
    sigma: f64,
) -> Result<ImageBuffer, ImageError> {
    ImageBuffer::from_fn(width, height, 1, |x, y, _| {
        let (xf, yf) = (x as f64, y as f64);
        let v: f64 = landmarks
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let amp = if i == marker { 200.0 } else { 60.0 };
                amp * (-((xf - p.x).powi(2) + (yf - p.y).powi(2)) / (2.0 * sigma * sigma)).exp()
            })
            .sum();
        (20.0 + v).min(255.0) as f32
    })
}

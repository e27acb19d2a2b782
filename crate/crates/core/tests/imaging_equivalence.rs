use faps_core::affine::{compose, policy_transform, BaseTemplate, LandmarkSet, Point2};
use faps_core::geometry::{enumerate_space, AlignmentPolicy, SearchSpace};
use faps_core::imaging::{align_direct, align_via_canvas, AlignedCanvas, ImageBuffer};
use faps_core::testcard::{landmark_card, random_placement, smooth_image};

const SOURCE: usize = 400;

/// Worst max and worst mean absolute difference between the two paths over
/// `policies`, for one seeded image.
fn two_path_residual(seed: u64, base: &BaseTemplate, policies: &[AlignmentPolicy]) -> (f32, f32) {
    let img = smooth_image(seed, SOURCE, SOURCE, 1, 6.0).unwrap();
    let placement = random_placement(seed, base, SOURCE, 0.0);
    let mut canvas = AlignedCanvas::new(&img, &placement.landmarks, base).unwrap();
    let mut worst = (0f32, 0f32);
    for &p in policies {
        let direct = align_direct(&img, &placement.landmarks, p, base).unwrap();
        let via = canvas.crop(p).unwrap();
        let (max, mean) = direct.abs_diff_stats(&via).unwrap();
        worst = (worst.0.max(max), worst.1.max(mean));
    }
    assert_eq!(canvas.crops_served(), policies.len());
    worst
}

#[test]
fn two_paths_agree_on_smooth_images() {
    let base = BaseTemplate::default();
    let all = enumerate_space(&SearchSpace::default());
    for seed in 0..10 {
        let (max, mean) = two_path_residual(seed, &base, &all);
        assert!(max <= 2.0 && mean <= 0.5, "seed {seed}: max {max}, mean {mean}");
    }
}

#[test]
fn residual_shrinks_on_doubled_canvas() {
    let base = BaseTemplate::default();
    let all = enumerate_space(&SearchSpace::default());
    let doubled: Vec<AlignmentPolicy> = all.iter().map(|p| AlignmentPolicy::new(2 * p.m, 2 * p.delta)).collect();
    for seed in 0..3 {
        let (max300, mean300) = two_path_residual(seed, &base, &all);
        let (max600, mean600) = two_path_residual(seed, &base.scaled(2), &doubled);
        assert!(mean600 < mean300 && max600 <= max300, "seed {seed}: {max300}/{mean300} vs {max600}/{mean600}");
    }
}

/// Background-subtracted intensity centroid in a window around the brightest pixel.
fn peak_centroid(img: &ImageBuffer, radius: usize) -> (f64, f64) {
    let (mut px, mut py, mut best) = (0, 0, f32::MIN);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(x, y, 0) > best {
                (px, py, best) = (x, y, img.get(x, y, 0));
            }
        }
    }
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in py.saturating_sub(radius)..=(py + radius).min(img.height() - 1) {
        for x in px.saturating_sub(radius)..=(px + radius).min(img.width() - 1) {
            let w = (img.get(x, y, 0) as f64 - 20.0).max(0.0);
            sx += w * x as f64;
            sy += w * y as f64;
            sw += w;
        }
    }
    (sx / sw, sy / sw)
}

#[test]
fn anchor_marker_lands_at_output_centre() {
    let base = BaseTemplate::default();
    let nose = base.landmarks.points().iter().position(|p| *p == base.anchor()).unwrap();
    let super_roi = SearchSpace::default().super_roi();
    let centre = base.output_size as f64 / 2.0;
    for seed in 0..5 {
        let placement = random_placement(seed, &base, SOURCE, 0.0);
        let only_nose = LandmarkSet::new(vec![placement.landmarks[nose], Point2::new(-1e3, -1e3)]).unwrap();
        let card = landmark_card(SOURCE, SOURCE, &only_nose, 0, 6.0).unwrap();
        for img in [
            align_direct(&card, &placement.landmarks, super_roi, &base).unwrap(),
            align_via_canvas(&card, &placement.landmarks, super_roi, &base).unwrap(),
        ] {
            let (x, y) = peak_centroid(&img, 8);
            assert!((x - centre).abs() <= 0.5 && (y - centre).abs() <= 0.5, "seed {seed}: ({x}, {y})");
        }
    }
}

#[test]
fn gradient_through_canvas_matches_analytic_output() {
    let base = BaseTemplate::default();
    let ramp = ImageBuffer::from_fn(SOURCE, SOURCE, 1, |x, _, _| 0.5 * x as f32).unwrap();
    let placement = random_placement(11, &base, SOURCE, 0.0);
    let source_to_canvas = placement.canvas_to_source.inverse();
    for p in [AlignmentPolicy::new(232, 0), AlignmentPolicy::new(192, 4), AlignmentPolicy::new(160, -32)] {
        let out = align_via_canvas(&ramp, &placement.landmarks, p, &base).unwrap();
        let back = compose(&policy_transform(p, &base).unwrap(), &source_to_canvas).inverse();
        let mut worst = 0f64;
        for y in 2..out.height() - 2 {
            for x in 2..out.width() - 2 {
                let src = back.apply(Point2::new(x as f64, y as f64));
                worst = worst.max((out.get(x, y, 0) as f64 - 0.5 * src.x).abs());
            }
        }
        assert!(worst <= 1.0, "{p}: {worst}");
    }
}

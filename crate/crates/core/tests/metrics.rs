use embnav_core::generator::ImageTensor;
use embnav_core::metrics::{aesthetic, blurriness, sharpness, Metric, MetricKind};
use embnav_core::rng::RngStream;
use proptest::prelude::*;

fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut s = RngStream::derive(seed, "image");
    let data = (0..h * w * 3).map(|_| s.uniform()).collect();
    ImageTensor::new(h, w, 3, data).unwrap()
}

/// Straight nested loops over the luma image; no shared code with the crate.
fn reference_blurriness(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let d = img.data();
    let luma = |y: usize, x: usize| {
        let p = (y * w + x) * 3;
        0.2126 * d[p] + 0.7152 * d[p + 1] + 0.0722 * d[p + 2]
    };
    let mut values = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = -9.0 * luma(y, x);
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += luma(y + dy - 1, x + dx - 1);
                }
            }
            values.push(acc);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn blurriness_matches_nested_loops() {
    for seed in 0..50 {
        let img = random_image(8, 8, seed);
        let got = blurriness(&img).unwrap();
        let want = reference_blurriness(&img);
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn constant_images_score_zero() {
    for v in [0.0, 0.25, 0.5, 1.0] {
        assert_eq!(blurriness(&ImageTensor::filled(8, 8, v)).unwrap(), 0.0);
        assert_eq!(blurriness(&ImageTensor::filled(32, 32, v)).unwrap(), 0.0);
    }
}

#[test]
fn sharpness_negates_exactly() {
    let sharp = Metric::new(MetricKind::Sharpness, 32, 32).unwrap();
    let blur = Metric::new(MetricKind::Blurriness, 32, 32).unwrap();
    for seed in 0..20 {
        let img = random_image(32, 32, seed);
        assert_eq!(sharpness(&img).unwrap(), -blurriness(&img).unwrap());
        assert_eq!(sharp.evaluate(&img).unwrap(), -blur.evaluate(&img).unwrap());
    }
}

#[test]
fn aesthetic_extremes_stay_inside() {
    for v in [0.0, 1.0] {
        let s = aesthetic(&ImageTensor::filled(32, 32, v)).unwrap();
        assert!(s > 1.0 && s < 10.0, "{s}");
    }
}

#[test]
fn aesthetic_rejects_unpoolable_sizes() {
    assert!(aesthetic(&ImageTensor::filled(12, 16, 0.5)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aesthetic_is_bounded(seed in any::<u64>(), contrast in 0.0f64..=1.0) {
        let base = random_image(32, 32, seed);
        let data = base.data().iter().map(|v| 0.5 + contrast * (v - 0.5)).collect();
        let img = ImageTensor::new(32, 32, 3, data).unwrap();
        let s = aesthetic(&img).unwrap();
        prop_assert!(s > 1.0 && s < 10.0);
    }

    #[test]
    fn blurriness_is_non_negative(seed in any::<u64>(), h in 3usize..12, w in 3usize..12) {
        prop_assert!(blurriness(&random_image(h, w, seed)).unwrap() >= 0.0);
    }
}

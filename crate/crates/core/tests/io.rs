use std::io::Cursor;

use embnav_core::encode::{encode, sample_latent, GeneratorConfig, PromptText, REFERENCE_PROMPTS};
use embnav_core::generator::{Generator, ImageTensor};
use embnav_core::io::{
    interpolation_strip, png_bytes, read_emb, read_emb_for, read_trajectory_dir, write_emb,
    write_evaluation_csv, write_image_png, write_image_ppm, write_trajectory_dir, InterpMethod,
};
use embnav_core::metrics::MetricKind;
use embnav_core::optimize::{evaluate_across_seeds, optimize_metric, OptimizeConfig};
use embnav_core::{Error, PromptEmbedding};
use proptest::prelude::*;

fn decode_png(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.color_type, png::ColorType::Rgb);
    assert_eq!(info.bit_depth, png::BitDepth::Eight);
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn emb_round_trip_at_single_precision(rows in 1usize..10, dim in 1usize..20, seed in any::<u64>()) {
        let mut s = embnav_core::rng::RngStream::derive(seed, "emb");
        let data: Vec<f64> = s.gaussians(rows * dim).into_iter().map(|v| v * 3.0).collect();
        let e = PromptEmbedding::new(rows, dim, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        write_emb(&path, &e).unwrap();
        prop_assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 12 + 4 * rows * dim);
        let back = read_emb(&path).unwrap();
        prop_assert_eq!((back.rows(), back.dim()), (rows, dim));
        for (a, b) in back.data().iter().zip(e.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}

#[test]
fn emb_shape_check_against_generator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.emb");
    write_emb(&path, &PromptEmbedding::new(2, 3, vec![1.0; 6]).unwrap()).unwrap();
    let err = read_emb_for(&path, &GeneratorConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmbDims { rows: 2, dim: 3, .. }));
}

#[test]
fn png_extremes_decode_to_black_and_white() {
    for (v, byte) in [(0.0, 0u8), (1.0, 255u8)] {
        let (w, h, pixels) = decode_png(&png_bytes(&ImageTensor::filled(32, 32, v)).unwrap());
        assert_eq!((w, h), (32, 32));
        assert_eq!(pixels.len(), 3072);
        assert!(pixels.iter().all(|&p| p == byte));
    }
}

#[test]
fn png_pixels_match_quantised_values() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let c = encode(&PromptText::new(REFERENCE_PROMPTS[1]), gen.config()).unwrap();
    let img = gen.generate(&c, &sample_latent(4, gen.config())).unwrap();
    let (_, _, pixels) = decode_png(&png_bytes(&img).unwrap());
    for (p, v) in pixels.iter().zip(img.data()) {
        assert_eq!(*p, (v * 255.0).round() as u8);
    }
}

#[test]
fn image_files_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::filled(8, 8, 0.3);
    for name in ["a", "b"] {
        write_image_png(dir.path().join(format!("{name}.png")), &img).unwrap();
        write_image_ppm(dir.path().join(format!("{name}.ppm")), &img).unwrap();
    }
    for ext in ["png", "ppm"] {
        let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
        assert_eq!(a, b);
    }
}

fn strip_setup() -> (Generator, PromptEmbedding, PromptEmbedding) {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let a = encode(&PromptText::new(REFERENCE_PROMPTS[0]), gen.config()).unwrap();
    let b = encode(&PromptText::new(REFERENCE_PROMPTS[2]), gen.config()).unwrap();
    (gen, a, b)
}

#[test]
fn two_step_strips_are_the_endpoints() {
    let (gen, a, b) = strip_setup();
    let z = sample_latent(9, gen.config());
    let ia = gen.generate(&a, &z).unwrap();
    let ib = gen.generate(&b, &z).unwrap();
    for m in [InterpMethod::Lerp, InterpMethod::Nlerp, InterpMethod::Slerp] {
        let strip = interpolation_strip(&gen, &a, &b, &z, 2, m).unwrap();
        assert_eq!(strip, vec![ia.clone(), ib.clone()]);
    }
    assert!(interpolation_strip(&gen, &a, &b, &z, 1, InterpMethod::Slerp).is_err());
}

#[test]
fn slerp_strip_is_smooth() {
    let (gen, a, b) = strip_setup();
    let z = sample_latent(0, gen.config());
    let strip = interpolation_strip(&gen, &a, &b, &z, 51, InterpMethod::Slerp).unwrap();
    let mut deltas: Vec<f64> = strip
        .windows(2)
        .map(|w| {
            let d = w[0].data().iter().zip(w[1].data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
            d / w[0].data().len() as f64
        })
        .collect();
    deltas.sort_by(f64::total_cmp);
    let (median, max) = (deltas[deltas.len() / 2], deltas[deltas.len() - 1]);
    assert!(max <= 3.0 * median, "max {max} median {median}");
}

#[test]
fn trajectory_directory_round_trip() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let mut cfg = OptimizeConfig::new(MetricKind::Sharpness);
    cfg.max_iters = 20;
    cfg.snapshot_every = 5;
    let traj = optimize_metric(&gen, &PromptText::new(REFERENCE_PROMPTS[0]), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_trajectory_dir(dir.path(), &traj).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("iteration,sharpness\n0,"));
    assert_eq!(csv.lines().count(), 1 + 5);

    let back = read_trajectory_dir(dir.path()).unwrap();
    assert_eq!(back.config, traj.config);
    assert_eq!(back.snapshots.len(), traj.snapshots.len());
    for (x, y) in back.snapshots.iter().zip(&traj.snapshots) {
        assert_eq!(x.iteration, y.iteration);
        assert_eq!(x.value, y.value);
        for (p, q) in x.embedding.data().iter().zip(y.embedding.data()) {
            assert_eq!(*p, *q as f32 as f64);
        }
    }

    let eval = evaluate_across_seeds(&gen, &back, &[3, 1]).unwrap();
    let out = dir.path().join("eval.csv");
    write_evaluation_csv(&out, &eval).unwrap();
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iteration,seed_3,seed_1,mean,std");
    assert_eq!(text.lines().count(), 1 + 5);
}

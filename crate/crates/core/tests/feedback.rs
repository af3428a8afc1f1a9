use embnav_core::feedback::{pca_coordinates, replay, SessionLog};
use embnav_core::geometry::cosine;
use embnav_core::io::{read_session_log, write_session_dir};
use embnav_core::rng::RngStream;
use embnav_core::{FeedbackConfig, Generator, GeneratorConfig, PromptText, Session};
use nalgebra::{DMatrix, SymmetricEigen};

fn scripted(gen: &Generator, steps: usize) -> Session {
    let mut s = Session::create(
        gen,
        "scripted",
        PromptText::new("single color ball"),
        11,
        FeedbackConfig::default(),
    )
    .unwrap();
    let mut script = RngStream::derive(42, "script");
    for i in 0..steps {
        s.generate_choices(gen).unwrap();
        if i % 7 == 6 {
            s.undo(gen).unwrap();
            continue;
        }
        let choice = script.below(5);
        let alpha = [0.0, 0.3, 0.5, 1.0][script.below(4)];
        s.apply_choice(gen, choice, alpha).unwrap();
    }
    s
}

#[test]
fn twenty_step_session_replays_from_jsonl() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let s = scripted(&gen, 20);
    let text = s.log().to_jsonl().unwrap();
    let events = SessionLog::parse_jsonl(&text).unwrap();
    let r = replay(&gen, &events).unwrap();
    assert_eq!(r.current().content_hash(), s.current().content_hash());
    assert_eq!(r.step(), s.step());
    assert_eq!(r.image(), s.image());
}

#[test]
fn candidates_sit_at_kappa_before_the_modifier() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let mut s = Session::create(&gen, "k", PromptText::new("blue single color ball"), 3, FeedbackConfig::default()).unwrap();
    let kappa = s.config().kappa;
    for _ in 0..10 {
        let set = s.generate_choices(&gen).unwrap().clone();
        for c in &set.candidates {
            let cos = cosine(s.current().data(), c.constrained.data());
            if c.clamped {
                assert!(cos >= kappa - 1e-6);
            } else {
                assert!((cos - kappa).abs() <= 1e-6, "cos {cos}");
            }
        }
        s.apply_choice(&gen, 0, 0.5).unwrap();
    }
}

#[test]
fn written_session_dir_replays() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let s = scripted(&gen, 4);
    let dir = tempfile::tempdir().unwrap();
    let files = write_session_dir(dir.path(), s.log()).unwrap();
    assert!(files.iter().any(|p| p.ends_with("log.jsonl")));
    assert!(files.len() > 1);
    let events = read_session_log(dir.path().join("log.jsonl")).unwrap();
    let r = replay(&gen, &events).unwrap();
    assert_eq!(r.current(), s.current());
}

#[test]
fn pca_matches_dense_eigensolver() {
    for seed in 0..5u64 {
        let mut rng = RngStream::derive(seed, "pca");
        let rows: Vec<Vec<f64>> = (0..6).map(|_| rng.gaussians(12)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let ours = pca_coordinates(&refs, 2);

        let mut m = DMatrix::from_fn(6, 12, |i, j| rows[i][j]);
        let mean = m.row_mean();
        for mut r in m.row_iter_mut() {
            r -= &mean;
        }
        let eig = SymmetricEigen::new(m.transpose() * &m);
        let mut order: Vec<usize> = (0..12).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axes = eig.eigenvectors.select_columns(&order[..2]);
        let theirs = &m * axes;

        // Axis signs are arbitrary, so compare pairwise distances.
        for i in 0..6 {
            for j in i + 1..6 {
                let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                let a = d([ours[i][0], ours[i][1]], [ours[j][0], ours[j][1]]);
                let b = d([theirs[(i, 0)], theirs[(i, 1)]], [theirs[(j, 0)], theirs[(j, 1)]]);
                assert!((a - b).abs() <= 1e-8, "seed {seed} pair ({i},{j}): {a} vs {b}");
            }
        }
    }
}

#[test]
fn arbitrary_alphas_survive_the_text_log() {
    let gen = Generator::new(GeneratorConfig::default()).unwrap();
    let mut s = Session::create(&gen, "a", PromptText::new("single color ball"), 5, FeedbackConfig::default()).unwrap();
    let mut script = RngStream::derive(5, "alphas");
    for _ in 0..20 {
        s.generate_choices(&gen).unwrap();
        let (i, alpha) = (script.below(5), script.uniform());
        s.apply_choice(&gen, i, alpha).unwrap();
    }
    let events = SessionLog::parse_jsonl(&s.log().to_jsonl().unwrap()).unwrap();
    assert_eq!(replay(&gen, &events).unwrap().current(), s.current());
}

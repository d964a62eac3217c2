mod common;

use common::{moments, var_se, within};
use frameslide::codec::*;
use frameslide::denoiser::GaussianWorldSpec;
use frameslide::eval::*;
use frameslide::rng::{seeded, stream};
use frameslide::tensor::FrameShape;
use frameslide::toyworld::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn corpus(count: usize, frames: usize, seed: u64) -> Vec<ShapeVideo> {
    shape_corpus_plan(count, seed)
        .iter()
        .map(|e| gen_shape_video(MotionClass::from_id(e.class.unwrap()).unwrap(), e.seed, frames, 32).unwrap())
        .collect()
}

fn mae(a: &PixelFrame, b: &PixelFrame) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

#[test]
fn shape_frames_survive_factor_four_round_trip() {
    let mut worst: f64 = 0.0;
    for clip in corpus(40, 16, 1) {
        for f in &clip.video.frames {
            let back = decode(&encode(f, 4).unwrap(), 4).unwrap();
            worst = worst.max(mae(f, &back));
        }
    }
    assert!(worst < 0.1, "worst round-trip MAE {worst}");
}

#[test]
fn encode_is_linear_after_offset() {
    let mut rng = seeded(3);
    let mut frame = |rng: &mut rand_chacha::ChaCha8Rng| {
        PixelFrame::new(8, 8, (0..192).map(|_| rng.random::<f64>()).collect()).unwrap()
    };
    let (x, y) = (frame(&mut rng), frame(&mut rng));
    let (a, b) = (0.3, 0.6);
    let mix = PixelFrame::new(8, 8, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
    let (zx, zy, zm) = (encode(&x, 2).unwrap(), encode(&y, 2).unwrap(), encode(&mix, 2).unwrap());
    for i in 0..zm.data().len() {
        let expect = a * (zx.data()[i] + 1.0) + b * (zy.data()[i] + 1.0);
        assert!((zm.data()[i] + 1.0 - expect).abs() < 1e-12);
    }
}

#[test]
fn lag_one_correlation() {
    for rho in [0.0, 0.99] {
        let world = GaussianWorldSpec::new(FrameShape::new(1, 1, 1), rho, 1.0, 0.0).unwrap();
        let n = 20_000;
        let mut rng = seeded(17);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let c = sample_ar1_with(&world, 2, &mut rng);
                (c.data()[0], c.data()[1])
            })
            .collect();
        let (ma, va, _) = moments(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let (mb, vb, _) = moments(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let cov = pairs.iter().map(|(a, b)| (a - ma) * (b - mb)).sum::<f64>() / (n as f64 - 1.0);
        let r = cov / (va * vb).sqrt();
        // large-sample standard error of a Pearson correlation
        let se = (1.0 - rho * rho) / (n as f64).sqrt();
        assert!(within(r, rho, se.max(1e-4), 3.0), "rho {rho}: r {r}");
    }
}

#[test]
fn ar1_marginals_are_stationary() {
    let world = GaussianWorldSpec::new(FrameShape::new(1, 1, 1), 0.8, 2.0, -0.5).unwrap();
    let clips = ar1_corpus(&world, 10_000, 8, 4).unwrap();
    // six checks share one corpus, so each gets a 4 SE band
    for k in [0, 3, 7] {
        let xs: Vec<f64> = clips.iter().map(|c| c.data()[k]).collect();
        let (m, v, se) = moments(&xs);
        assert!(within(m, -0.5, se, 4.0), "frame {k} mean {m}");
        assert!(within(v, 2.0, var_se(2.0, xs.len()), 4.0), "frame {k} var {v}");
    }
}

#[test]
fn centroid_motion_matches_class() {
    let clips = corpus(200, 16, 9);
    let mut segments = 0;
    for clip in &clips {
        let (vx, vy) = clip.class.velocity();
        let track: Vec<(f64, f64)> = clip.video.frames.iter().map(centroid).collect();
        for k in 1..track.len() {
            let (p, q) = (clip.positions[k - 1], clip.positions[k]);
            let moved = (q.0 as i64 - p.0 as i64, q.1 as i64 - p.1 as i64);
            if moved != (vx, vy) {
                continue; // a bounce
            }
            segments += 1;
            let (dx, dy) = (track[k].0 - track[k - 1].0, track[k].1 - track[k - 1].1);
            assert_eq!(dx.signum() as i64 * (dx.abs() > 1e-12) as i64, vx, "{:?}", clip.class);
            assert_eq!(dy.signum() as i64 * (dy.abs() > 1e-12) as i64, vy, "{:?}", clip.class);
        }
    }
    assert_eq!(segments, 200 * 15);
}

#[test]
fn horizontal_classes_separate_on_velocity() {
    let clips = corpus(200, 16, 10);
    let horizontal: Vec<_> = clips
        .iter()
        .filter(|c| matches!(c.class, MotionClass::Right | MotionClass::Left))
        .collect();
    let correct = horizontal
        .iter()
        .filter(|c| {
            let f = extract_features(&c.video).unwrap();
            (f[8] > 0.0) == (c.class == MotionClass::Right)
        })
        .count();
    assert!(correct * 100 >= 95 * horizontal.len(), "{correct}/{}", horizontal.len());
}

#[test]
fn features_are_deterministic_and_time_sensitive() {
    let clip = gen_shape_video(MotionClass::Down, 5, 10, 32).unwrap();
    let f = extract_features(&clip.video).unwrap();
    assert_eq!(f, extract_features(&clip.video.clone()).unwrap());
    let mut reversed = clip.video.clone();
    reversed.frames.reverse();
    assert_ne!(f, extract_features(&reversed).unwrap());
}

#[test]
fn roughness_grows_as_correlation_drops() {
    let mut previous = 0.0;
    for rho in [0.99, 0.9, 0.5] {
        let world = GaussianWorldSpec::new(FrameShape::new(4, 4, 3), rho, 0.1, 0.0).unwrap();
        let clips = ar1_corpus(&world, 200, 8, 2).unwrap();
        let mean = clips
            .iter()
            .map(|c| {
                let v = PixelVideo::new(c.to_frames().iter().map(|f| decode(f, 4).unwrap()).collect()).unwrap();
                temporal_roughness(&v).unwrap()
            })
            .sum::<f64>()
            / 200.0;
        assert!(mean > previous, "rho {rho}: {mean} <= {previous}");
        previous = mean;
    }
}

#[test]
fn frechet_closed_forms() {
    let n01 = FeatureMoments::scalar(0.0, 1.0);
    assert!(frechet_distance(&n01, &n01).unwrap() < 1e-8);
    assert!((frechet_distance(&n01, &FeatureMoments::scalar(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-8);
    assert!((frechet_distance(&n01, &FeatureMoments::scalar(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
}

fn random_spd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.01
}

#[test]
fn frechet_diagonal_cross_check_and_symmetry() {
    let mut rng = stream(1, 2);
    for _ in 0..50 {
        let d = rng.random_range(1..8);
        let va: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..3.0)).collect();
        let vb: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..3.0)).collect();
        let ma: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mb: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = FeatureMoments::new(DVector::from_vec(ma.clone()), DMatrix::from_diagonal(&DVector::from_vec(va.clone())), 0).unwrap();
        let b = FeatureMoments::new(DVector::from_vec(mb.clone()), DMatrix::from_diagonal(&DVector::from_vec(vb.clone())), 0).unwrap();
        let scalar: f64 = (0..d)
            .map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2))
            .sum();
        assert!((frechet_distance(&a, &b).unwrap() - scalar).abs() < 1e-6);

        let full_a = FeatureMoments::new(DVector::from_vec(ma), random_spd(&mut rng, d), 0).unwrap();
        let full_b = FeatureMoments::new(DVector::from_vec(mb), random_spd(&mut rng, d), 0).unwrap();
        let (ab, ba) = (frechet_distance(&full_a, &full_b).unwrap(), frechet_distance(&full_b, &full_a).unwrap());
        assert!((ab - ba).abs() < 1e-8 && ab >= 0.0);
        assert!(frechet_distance(&full_a, &full_a).unwrap() < 1e-8);
    }
}

#[test]
fn identical_group_sides_score_zero() {
    let videos: Vec<PixelVideo> = corpus(8, 6, 3).into_iter().map(|c| c.video).collect();
    let mut groups = std::collections::BTreeMap::new();
    groups.insert("all".to_string(), (videos.clone(), videos));
    let r = grouped_fvd(&groups).unwrap();
    assert!(r.mean.abs() < 1e-8 && r.std == 0.0);
}

#[test]
fn clip_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = gen_shape_video(MotionClass::Up, 2, 5, 16).unwrap();
    save_video(&clip.video, dir.path()).unwrap();
    assert!(dir.path().join("frame_0004.ppm").exists());
    // PPM stores 8 bits per channel
    let back = load_video(dir.path()).unwrap();
    assert_eq!(back.len(), clip.video.len());
    for (a, b) in back.frames.iter().zip(&clip.video.frames) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
    assert!(load_video(&dir.path().join("missing")).unwrap_err().is_io());
}

proptest! {
    #[test]
    fn latents_stay_in_range_and_round_trip_is_idempotent(
        values in proptest::collection::vec(0.0f64..=1.0, 16 * 3),
        factor in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let x = PixelFrame::new(4, 4, values).unwrap();
        let z = encode(&x, factor).unwrap();
        prop_assert!(z.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let once = decode(&z, factor).unwrap();
        let twice = decode(&encode(&once, factor).unwrap(), factor).unwrap();
        prop_assert_eq!(once, twice);
    }
}

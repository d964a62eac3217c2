mod common;

use common::{moments, var_se, within};
use frameslide::codec::encode;
use frameslide::controller::{GenerationConfig, Sampler};
use frameslide::denoiser::*;
use frameslide::rng::{seeded, standard_normal, stream};
use frameslide::schedule::{forward_jump, make_linear_schedule, NoiseSchedule};
use frameslide::tensor::{FrameShape, LatentClip};
use frameslide::toyworld::{gen_shape_video, sample_ar1_with, shape_corpus_plan, MotionClass};
use nalgebra::{DMatrix, DVector};

fn sched50() -> NoiseSchedule {
    make_linear_schedule(50, 1e-3, 0.2).unwrap()
}

fn random_clip(shape: FrameShape, frames: usize, seed: u64) -> LatentClip {
    LatentClip::randn(shape, frames, &mut seeded(seed))
}

#[test]
fn analytic_prediction_is_affine() {
    let sched = sched50();
    let world = GaussianWorldSpec::new(FrameShape::new(2, 1, 2), 0.8, 1.7, 0.4).unwrap();
    let (a, b) = (random_clip(world.frame_shape, 4, 1), random_clip(world.frame_shape, 4, 2));
    for t in [1, 20, 50] {
        let w = 0.35;
        let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        let mix = LatentClip::from_data(world.frame_shape, 4, mix).unwrap();
        let (ea, eb) = (
            analytic_denoise(&a, t, &world, &sched).unwrap(),
            analytic_denoise(&b, t, &world, &sched).unwrap(),
        );
        let em = analytic_denoise(&mix, t, &world, &sched).unwrap();
        for i in 0..em.data().len() {
            let expect = w * ea.data()[i] + (1.0 - w) * eb.data()[i];
            assert!((em.data()[i] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn white_world_factorizes_over_frames() {
    let sched = sched50();
    let world = GaussianWorldSpec::new(FrameShape::new(2, 2, 1), 0.0, 0.6, -0.3).unwrap();
    let clip = random_clip(world.frame_shape, 5, 3);
    let joint = analytic_denoise(&clip, 17, &world, &sched).unwrap();
    for k in 0..5 {
        let single = LatentClip::from_frames(&[clip.latent_frame(k)]).unwrap();
        let alone = analytic_denoise(&single, 17, &world, &sched).unwrap();
        for (x, y) in alone.data().iter().zip(joint.frame(k)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn posterior_mean_matches_explicit_inverse() {
    let sched = sched50();
    let world = GaussianWorldSpec::new(FrameShape::new(1, 1, 1), 0.9, 1.3, 0.2).unwrap();
    let t = 25;
    let ab = sched.alpha_bar(t);
    let z = LatentClip::from_data(world.frame_shape, 4, vec![0.3, -0.8, 1.1, 0.05]).unwrap();
    let eps = analytic_denoise(&z, t, &world, &sched).unwrap();

    // m_post = μ + √ᾱ Σ (ᾱΣ + (1−ᾱ)I)⁻¹ (z − √ᾱ μ), by explicit inversion
    let sigma = DMatrix::from_fn(4, 4, |i, j| 1.3 * 0.9f64.powi(i.abs_diff(j) as i32));
    let c = &sigma * ab + DMatrix::identity(4, 4) * (1.0 - ab);
    let c_inv = c.try_inverse().unwrap();
    let zv = DVector::from_column_slice(z.data());
    let mu = DVector::from_element(4, 0.2);
    let m_post = &mu + (&sigma * &c_inv * (&zv - &mu * ab.sqrt())) * ab.sqrt();
    let expect = (&zv - m_post * ab.sqrt()) / (1.0 - ab).sqrt();
    for (e, x) in eps.data().iter().zip(expect.iter()) {
        assert!((e - x).abs() < 1e-10, "{e} vs {x}");
    }
}

#[test]
fn prediction_is_unbiased_near_clean_end() {
    // tiny β: ᾱ_1 ≈ 1, where ε̂ divides by a small √(1−ᾱ)
    let sched = make_linear_schedule(10, 1e-6, 1e-5).unwrap();
    let world = GaussianWorldSpec::new(FrameShape::new(1, 1, 1), 0.7, 1.0, 0.5).unwrap();
    let mut rng = seeded(8);
    let n = 20_000;
    let (mut err, mut orth) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let z0 = sample_ar1_with(&world, 3, &mut rng);
        let noise = LatentClip::randn(world.frame_shape, 3, &mut rng);
        let z = forward_jump(&z0, 1, &noise, &sched).unwrap();
        let eps = analytic_denoise(&z, 1, &world, &sched).unwrap();
        assert!(eps.is_finite());
        let (e, n0) = (eps.data()[1], noise.data()[1]);
        err.push(n0 - e);
        orth.push((n0 - e) * e);
    }
    let (m, _, se) = moments(&err);
    assert!(within(m, 0.0, se, 3.0), "mean error {m}");
    // the Bayes residual is orthogonal to the prediction
    let (m, _, se) = moments(&orth);
    assert!(within(m, 0.0, se, 3.0), "residual correlation {m}");
}

#[test]
fn ancestral_chain_recovers_prior() {
    let sched = sched50();
    let world = GaussianWorldSpec::new(FrameShape::new(1, 1, 1), 0.5, 0.8, 0.3).unwrap();
    let den = AnalyticDenoiser::new(world, &sched, 4).unwrap();
    let cfg = GenerationConfig { queue_len: 3, ..Default::default() };
    let mut s = Sampler::new(&den, &sched, cfg).unwrap();
    let n = 10_000;
    let samples: Vec<LatentClip> = (0..n)
        .map(|i| s.sample_t2v(ConditionLabel::Null, &mut stream(12, i)).unwrap())
        .collect();
    for k in 0..4 {
        let xs: Vec<f64> = samples.iter().map(|c| c.data()[k]).collect();
        let (m, v, se) = moments(&xs);
        assert!(within(m, 0.3, se, 3.0), "frame {k} mean {m}");
        assert!(within(v, 0.8, var_se(0.8, n as usize), 3.0), "frame {k} var {v}");
    }
    let lag: Vec<f64> = samples.iter().map(|c| (c.data()[1] - 0.3) * (c.data()[2] - 0.3)).collect();
    let (m, _, se) = moments(&lag);
    assert!(within(m, 0.5 * 0.8, se, 3.0), "lag-one covariance {m}");
}

/// Per-frame output variance of a deterministic DDIM chain started from
/// z_T ~ N(0, I), by propagating the linear step maps exactly.
fn ddim_output_variance(world: &GaussianWorldSpec, sched: &NoiseSchedule, frames: usize, steps: usize) -> Vec<f64> {
    let t_max = sched.steps();
    let mut taus = vec![0];
    taus.extend((1..=steps).map(|i| i * t_max / steps));
    let sigma = world.frame_covariance(frames);
    let eye = DMatrix::<f64>::identity(frames, frames);
    let mut g = eye.clone();
    for i in (1..=steps).rev() {
        let (ai, ap) = (sched.alpha_bar(taus[i]), sched.alpha_bar(taus[i - 1]));
        let c = (&sigma * ai + &eye * (1.0 - ai)).try_inverse().unwrap() * (1.0 - ai).sqrt();
        let x0 = (&eye - &c * (1.0 - ai).sqrt()) / ai.sqrt();
        g = (x0 * ap.sqrt() + c * (1.0 - ap).sqrt()) * g;
    }
    let cov = &g * g.transpose();
    (0..frames).map(|k| cov[(k, k)]).collect()
}

#[test]
fn ten_step_ddim_recovers_prior() {
    // The only randomness is z_T. Ten coarse steps leave a discretization
    // error that shrinks the variance (exactly 0.773 at 10 steps, 0.943 at
    // 50 for this world), so the sampler is checked against the exact chain
    // and the chain against the prior with a stated 25% variance band.
    let sched = sched50();
    let world = GaussianWorldSpec::new(FrameShape::new(1, 1, 1), 0.9, 1.0, 0.0).unwrap();
    let den = AnalyticDenoiser::new(world, &sched, 4).unwrap();
    let cfg = GenerationConfig { queue_len: 3, ddim_steps: 10, ..Default::default() };
    let mut s = Sampler::new(&den, &sched, cfg).unwrap();
    let n = 10_000;
    let samples: Vec<LatentClip> = (0..n)
        .map(|i| s.sample_t2v(ConditionLabel::Null, &mut stream(13, i)).unwrap())
        .collect();
    assert_eq!(s.stats().denoise_calls, 10 * n as usize);
    let exact = ddim_output_variance(&world, &sched, 4, 10);
    for k in 0..4 {
        let xs: Vec<f64> = samples.iter().map(|c| c.data()[k]).collect();
        let (m, v, se) = moments(&xs);
        assert!(within(m, 0.0, se, 3.0), "frame {k} mean {m}");
        assert!(within(v, exact[k], var_se(exact[k], n as usize), 3.0), "frame {k} var {v} vs {}", exact[k]);
        assert!((v - 1.0).abs() < 0.25, "frame {k} var {v}");
    }
    let fine = ddim_output_variance(&world, &sched, 4, 50);
    assert!(fine.iter().zip(&exact).all(|(f, e)| (f - 1.0).abs() < (e - 1.0).abs()));
}

#[test]
fn unit_guidance_is_the_conditional_branch() {
    let cfg = MicroConfig::default();
    let mut model = MicroDenoiser::new(cfg, 3).unwrap();
    model.randomize_head(&mut seeded(4), 0.1);
    let z = random_clip(cfg.shape, cfg.frames, 5);
    let cond = model.predict(&z, 12, ConditionLabel::Class(2)).unwrap();
    let (guided, evals) = guided_predict(&model, &z, 12, ConditionLabel::Class(2), 1.0).unwrap();
    assert_eq!(evals, 1);
    assert_eq!(guided.data(), cond.data());

    let uncond = model.predict(&z, 12, ConditionLabel::Null).unwrap();
    let (g0, _) = guided_predict(&model, &z, 12, ConditionLabel::Class(2), 0.0).unwrap();
    assert_eq!(g0.data(), uncond.data());
    let (g9, evals) = guided_predict(&model, &z, 12, ConditionLabel::Class(2), 9.0).unwrap();
    assert_eq!(evals, 2);
    for i in 0..g9.data().len() {
        let expect = uncond.data()[i] + 9.0 * (cond.data()[i] - uncond.data()[i]);
        assert!((g9.data()[i] - expect).abs() < 1e-12);
    }
    assert_ne!(cond.data(), uncond.data());
}

#[test]
fn training_on_shapes_reduces_loss() {
    let cfg = MicroConfig::default();
    let clips = shape_corpus_plan(200, 5)
        .iter()
        .map(|e| {
            let class = MotionClass::from_id(e.class.unwrap()).unwrap();
            let v = gen_shape_video(class, e.seed, 16, 32).unwrap();
            TrainingClip {
                frames: v.video.frames.iter().map(|f| encode(f, 4).unwrap()).collect(),
                label: class.id(),
            }
        })
        .collect();
    let mut model = MicroDenoiser::new(cfg, 1).unwrap();
    let trace = train_micro(&mut model, &TrainingSet { clips }, &sched50(), &TrainConfig::default()).unwrap();
    assert_eq!(trace.len(), 2000);
    let s = smooth(&trace, 200);
    assert!(s[1999] < 0.9 * s[199], "smoothed loss {} -> {}", s[199], s[1999]);
}

#[test]
fn persisted_model_predicts_identically() {
    let cfg = MicroConfig::default();
    let mut model = MicroDenoiser::new(cfg, 9).unwrap();
    model.randomize_head(&mut seeded(1), 0.2);
    model.quantize_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = MicroDenoiser::load(&path).unwrap();
    let z = random_clip(cfg.shape, cfg.frames, 2);
    assert_eq!(
        back.predict(&z, 30, ConditionLabel::Class(1)).unwrap(),
        model.predict(&z, 30, ConditionLabel::Class(1)).unwrap()
    );
    assert_eq!(back.id(), model.id());
}

#[test]
fn noise_regression_slope_is_one() {
    // E[ε | ε̂] = ε̂ for the Bayes predictor: regressing ε on ε̂ gives slope 1
    let sched = sched50();
    let world = GaussianWorldSpec::new(FrameShape::new(1, 1, 1), 0.9, 1.0, 0.0).unwrap();
    let mut rng = seeded(31);
    let (mut num, mut den) = (0.0, 0.0);
    let mut pairs = Vec::new();
    for _ in 0..20_000 {
        let z0 = sample_ar1_with(&world, 4, &mut rng);
        let noise = LatentClip::randn(world.frame_shape, 4, &mut rng);
        let z = forward_jump(&z0, 30, &noise, &sched).unwrap();
        let e = analytic_denoise(&z, 30, &world, &sched).unwrap().data()[2];
        let n = noise.data()[2];
        num += n * e;
        den += e * e;
        pairs.push((n, e));
    }
    let slope = num / den;
    let resid: Vec<f64> = pairs.iter().map(|(n, e)| (n - slope * e) * e).collect();
    let (_, v, _) = moments(&resid);
    let se = (v * pairs.len() as f64).sqrt() / den;
    assert!(within(slope, 1.0, se, 3.0), "slope {slope} ± {se}");
    let _ = standard_normal(&mut rng);
}

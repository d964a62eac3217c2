//! Closed-form diffusion math: variance schedules, forward noising, the
//! ancestral reverse step, deterministic skip-step (DDIM, η = 0) updates and
//! classifier-free guidance.
//!
//! Steps are 1-based: `betas[0]` is β₁. The cumulative product ᾱ_t runs over
//! i = 1..t and ᾱ₀ = 1 denotes the clean latent. Reverse-step variances are
//! the constant choice σ_t² = β_t.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentClip;

/// Endpoints of the default linear schedule.
///
/// Fifty steps from 1e-3 to 0.2 leave ᾱ_T ≈ 4.5e-3, the same terminal signal
/// level as the common 1000-step backbones, so a chain started from N(0, I)
/// sees the marginal it was built for.
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Immutable per-step variances and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit β₁..β_T.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step (T >= 1)"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::config(format!(
                "beta_{} = {b} must lie in (0, 1)",
                i + 1
            )));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alpha_bars,
            sigmas,
        })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// β_t for 1 ≤ t ≤ T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// ᾱ_t for 0 ≤ t ≤ T, with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::range("t", t, 1, self.steps()))
        } else {
            Ok(())
        }
    }

    /// DDIM timestep subsequence τ₁ < … < τ_N = T by uniform stride, τ_i = ⌊iT/N⌋.
    ///
    /// `count == 0` selects every step.
    pub fn ddim_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if count == 0 {
            return Ok((1..=t_max).collect());
        }
        if count > t_max {
            return Err(Error::config(format!(
                "ddim step count {count} exceeds schedule length {t_max}"
            )));
        }
        Ok((1..=count).map(|i| i * t_max / count).collect())
    }

    /// Audit dump: header `t,beta,alpha_bar,sigma`, one row per step.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,beta,alpha_bar,sigma")?;
        for t in 1..=self.steps() {
            writeln!(
                out,
                "{t},{:e},{:e},{:e}",
                self.beta(t),
                self.alpha_bar(t),
                self.sigma(t)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

/// Linear β from `beta_start` to `beta_end` inclusive over `steps` steps.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("steps: T must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::config(format!(
            "beta_start = {beta_start} must lie in (0, 1)"
        )));
    }
    if !(beta_end < 1.0 && beta_end >= beta_start) {
        return Err(Error::config(format!(
            "beta_end = {beta_end} must lie in [beta_start, 1)"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        let denom = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / denom)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `out = a·x + b·n` elementwise.
#[inline]
pub(crate) fn axpby(a: f64, x: &[f64], b: f64, n: &[f64], out: &mut [f64]) {
    for ((o, xi), ni) in out.iter_mut().zip(x).zip(n) {
        *o = a * xi + b * ni;
    }
}

/// One forward noising step t−1 → t: `√(1−β_t)·z + √β_t·noise`.
pub fn forward_step(
    z_prev: &LatentClip,
    t: usize,
    noise: &LatentClip,
    sched: &NoiseSchedule,
) -> Result<LatentClip> {
    sched.check_step(t)?;
    z_prev.check_layout(noise, "forward_step noise")?;
    let beta = sched.beta(t);
    let mut out = z_prev.clone();
    axpby(
        (1.0 - beta).sqrt(),
        z_prev.data(),
        beta.sqrt(),
        noise.data(),
        out.data_mut(),
    );
    out.set_step(t);
    Ok(out)
}

/// Single-jump noising 0 → t: `√ᾱ_t·z0 + √(1−ᾱ_t)·noise`.
pub fn forward_jump(
    z0: &LatentClip,
    t: usize,
    noise: &LatentClip,
    sched: &NoiseSchedule,
) -> Result<LatentClip> {
    sched.check_step(t)?;
    z0.check_layout(noise, "forward_jump noise")?;
    let mut out = z0.clone();
    jump_into(z0.data(), t, noise.data(), sched, out.data_mut());
    out.set_step(t);
    Ok(out)
}

#[inline]
pub(crate) fn jump_into(z0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule, out: &mut [f64]) {
    let ab = sched.alpha_bar(t);
    axpby(ab.sqrt(), z0, (1.0 - ab).sqrt(), noise, out);
}

/// Ancestral reverse step t → t−1: `μ_θ + σ_t·noise` with
/// `μ_θ = (z_t − β_t/√(1−ᾱ_t)·ε̂) / √(1−β_t)`. At t = 1 the noise term is
/// dropped so the final latent is deterministic given the chain.
pub fn reverse_step(
    z_t: &LatentClip,
    eps_hat: &LatentClip,
    t: usize,
    noise: &LatentClip,
    sched: &NoiseSchedule,
) -> Result<LatentClip> {
    sched.check_step(t)?;
    z_t.check_layout(eps_hat, "reverse_step eps_hat")?;
    z_t.check_layout(noise, "reverse_step noise")?;
    let mut out = z_t.clone();
    reverse_into(
        z_t.data(),
        eps_hat.data(),
        t,
        Some(noise.data()),
        sched,
        out.data_mut(),
    );
    out.set_step(t - 1);
    Ok(out)
}

pub(crate) fn reverse_into(
    z: &[f64],
    eps: &[f64],
    t: usize,
    noise: Option<&[f64]>,
    sched: &NoiseSchedule,
    out: &mut [f64],
) {
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let eps_coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    for ((o, zi), ei) in out.iter_mut().zip(z).zip(eps) {
        *o = inv_sqrt_alpha * (zi - eps_coef * ei);
    }
    if t > 1 {
        if let Some(noise) = noise {
            let sigma = sched.sigma(t);
            for (o, n) in out.iter_mut().zip(noise) {
                *o += sigma * n;
            }
        }
    }
}

/// Deterministic (η = 0) skip step τ_i → τ_prev with τ_prev < τ_i.
pub fn ddim_step(
    z: &LatentClip,
    eps_hat: &LatentClip,
    tau_i: usize,
    tau_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentClip> {
    check_ddim_pair(tau_i, tau_prev, sched)?;
    z.check_layout(eps_hat, "ddim_step eps_hat")?;
    let mut out = z.clone();
    ddim_into(z.data(), eps_hat.data(), tau_i, tau_prev, sched, out.data_mut());
    out.set_step(tau_prev);
    Ok(out)
}

pub(crate) fn check_ddim_pair(tau_i: usize, tau_prev: usize, sched: &NoiseSchedule) -> Result<()> {
    sched.check_step(tau_i)?;
    if tau_prev >= tau_i {
        return Err(Error::Range {
            what: "tau_prev",
            value: tau_prev as i64,
            range: format!("[0, {})", tau_i),
        });
    }
    Ok(())
}

pub(crate) fn ddim_into(
    z: &[f64],
    eps: &[f64],
    tau_i: usize,
    tau_prev: usize,
    sched: &NoiseSchedule,
    out: &mut [f64],
) {
    let ab_i = sched.alpha_bar(tau_i);
    let ab_p = sched.alpha_bar(tau_prev);
    let (sa_i, sn_i) = (ab_i.sqrt(), (1.0 - ab_i).sqrt());
    let (sa_p, sn_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    for ((o, zi), ei) in out.iter_mut().zip(z).zip(eps) {
        let x0 = (zi - sn_i * ei) / sa_i;
        *o = sa_p * x0 + sn_p * ei;
    }
}

/// Classifier-free guidance: `ε_∅ + g·(ε_y − ε_∅)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], g: f64) -> Result<Vec<f64>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(Error::shape(format!(
            "guidance inputs differ in length: {} vs {}",
            eps_uncond.len(),
            eps_cond.len()
        )));
    }
    if !(g >= 0.0) {
        return Err(Error::config(format!("guidance scale g = {g} must be >= 0")));
    }
    // the endpoints are returned verbatim; u + (c − u) need not round to c
    if g == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    if g == 0.0 {
        return Ok(eps_uncond.to_vec());
    }
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + g * (c - u))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FrameShape;

    fn clip(values: &[f64]) -> LatentClip {
        LatentClip::from_data(FrameShape::new(1, 1, values.len()), 1, values.to_vec()).unwrap()
    }

    fn sched_two() -> NoiseSchedule {
        make_linear_schedule(2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn two_step_products() {
        let s = sched_two();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.sigmas(), &[0.5f64.sqrt()]);
    }

    #[test]
    fn fifty_step_terminal_product_matches_loop() {
        let s = make_linear_schedule(50, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..50 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 49.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(50) - prod).abs() < 1e-14);
        for t in 2..=50 {
            let rec = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            assert_eq!(s.alpha_bar(t), rec);
        }
    }

    #[test]
    fn invalid_parameters_are_named() {
        let msg = |e: Error| e.to_string();
        assert!(msg(make_linear_schedule(0, 0.1, 0.2).unwrap_err()).contains("steps"));
        assert!(msg(make_linear_schedule(5, 0.0, 0.2).unwrap_err()).contains("beta_start"));
        assert!(msg(make_linear_schedule(5, 0.1, 1.0).unwrap_err()).contains("beta_end"));
        assert!(msg(make_linear_schedule(5, 0.3, 0.2).unwrap_err()).contains("beta_end"));
    }

    #[test]
    fn forward_step_cases() {
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let z = clip(&[1.0, -2.0]);
        let out = forward_step(&z, 1, &clip(&[0.0, 0.0]), &s).unwrap();
        assert!((out.data()[0] - 0.9).abs() < 1e-15);
        assert!((out.data()[1] + 1.8).abs() < 1e-15);
        let out = forward_step(&clip(&[0.0, 0.0]), 1, &clip(&[1.0, 2.0]), &s).unwrap();
        assert!((out.data()[1] - 2.0 * 0.19f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            forward_step(&z, 2, &z, &s),
            Err(Error::Range { .. })
        ));
        assert!(matches!(
            forward_step(&z, 0, &z, &s),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn forward_jump_cases() {
        let s = sched_two();
        let out = forward_jump(&clip(&[1.0]), 2, &clip(&[1.0]), &s).unwrap();
        // √0.72 + √0.28 = 0.848528… + 0.529150… = 1.377678…
        assert!((out.data()[0] - 1.377_678_4).abs() < 1e-6);
        assert!((out.data()[0] - 1.377_66).abs() < 1e-4);
        assert_eq!(out.step(), 2);
        let out = forward_jump(&clip(&[2.0]), 1, &clip(&[0.0]), &s).unwrap();
        assert!((out.data()[0] - 2.0 * 0.9f64.sqrt()).abs() < 1e-15);
        let out = forward_jump(&clip(&[0.0]), 2, &clip(&[3.0]), &s).unwrap();
        assert!((out.data()[0] - 3.0 * 0.28f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn reverse_step_cases() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.19]).unwrap();
        let z = clip(&[0.45]);
        let zero = clip(&[0.0]);
        let out = reverse_step(&z, &zero, 2, &zero, &s).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(out.step(), 1);

        let eps = clip(&[0.3]);
        let noise = clip(&[5.0]);
        let mu = (0.45 - 0.19 / (1.0 - s.alpha_bar(2)).sqrt() * 0.3) / 0.9;
        let out = reverse_step(&z, &eps, 2, &zero, &s).unwrap();
        assert!((out.data()[0] - mu).abs() < 1e-15);
        let out = reverse_step(&z, &eps, 2, &noise, &s).unwrap();
        assert!((out.data()[0] - mu - 5.0 * 0.19f64.sqrt()).abs() < 1e-14);
        // t = 1 ignores the supplied noise
        let a = reverse_step(&z, &eps, 1, &noise, &s).unwrap();
        let b = reverse_step(&z, &eps, 1, &zero, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_cases() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let z = clip(&[0.7, -0.2]);
        let eps = clip(&[0.1, 0.4]);
        let out = ddim_step(&z, &eps, 6, 0, &s).unwrap();
        for k in 0..2 {
            let x0 = (z.data()[k] - (1.0 - s.alpha_bar(6)).sqrt() * eps.data()[k])
                / s.alpha_bar(6).sqrt();
            assert!((out.data()[k] - x0).abs() < 1e-14);
        }
        let zero = clip(&[0.0, 0.0]);
        let out = ddim_step(&z, &zero, 6, 3, &s).unwrap();
        let ratio = (s.alpha_bar(3) / s.alpha_bar(6)).sqrt();
        assert!((out.data()[0] - ratio * 0.7).abs() < 1e-14);
        assert!(ddim_step(&z, &eps, 3, 3, &s).is_err());
        assert!(ddim_step(&z, &eps, 3, 5, &s).is_err());
    }

    #[test]
    fn ddim_subsequence_has_uniform_stride() {
        let s = make_linear_schedule(50, 1e-3, 0.2).unwrap();
        assert_eq!(
            s.ddim_timesteps(10).unwrap(),
            vec![5, 10, 15, 20, 25, 30, 35, 40, 45, 50]
        );
        let seq = s.ddim_timesteps(7).unwrap();
        assert_eq!(*seq.last().unwrap(), 50);
        assert!(seq.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.ddim_timesteps(0).unwrap().len(), 50);
        assert!(s.ddim_timesteps(51).is_err());
    }

    #[test]
    fn guidance_cases() {
        let u = [0.2, -1.0];
        let c = [0.5, 3.0];
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u.to_vec());
        assert_eq!(cfg_combine(&[0.0], &[1.0], 9.0).unwrap(), vec![9.0]);
        assert!(matches!(
            cfg_combine(&u, &[1.0], 1.0),
            Err(Error::Shape(_))
        ));
        assert!(cfg_combine(&u, &c, -1.0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let mut buf = Vec::new();
        sched_two().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha_bar,sigma");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,"));
    }
}

//! Noise schedules, the closed-form forward process and DDIM sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_beta" | "linear-beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(Error::validation("schedule", format!("unknown schedule kind {s:?}"))),
        }
    }
}

/// Per-step `α_t` and `ᾱ_t` for `t = 1..=T` (stored at index `t - 1`).
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::validation("diffusion_steps", "must be at least 1"));
    }
    let alphas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                1.0 - (BETA_START + f * (BETA_END - BETA_START))
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps)
                .map(|t| {
                    let beta = (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999);
                    1.0 - beta
                })
                .collect()
        }
    };
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::validation("t", format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t z_0 + √(1-ᾱ_t) ε`.
    pub fn forward_diffuse(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::shape(z0.shape(), eps.shape()));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.zip_map(eps, |z, e| a * z + b * e))
    }

    /// Ascending sub-schedule of `steps` timesteps, evenly spaced and ending at `T`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::validation("steps", format!("{steps} outside 1..={total}")));
        }
        Ok((1..=steps).map(|i| i * total / steps).collect())
    }
}

/// Anything that predicts the noise in a batch of noisy latents.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> NoisePredictor for F {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self(z_t, t)
    }
}

/// Overwrites frames (axis 1 of `[B, T, ...]`) where `mask` is true.
pub fn overwrite_frames(z: &mut Tensor, mask: &[bool], cond: &Tensor) {
    for (f, &m) in mask.iter().enumerate() {
        if m {
            z.assign_narrow(1, f, &cond.narrow(1, f, 1));
        }
    }
}

/// Deterministic DDIM (η = 0) from pure noise of `shape` (`[B, T, H, W, C]`).
/// Frames under `mask` are pinned to `cond` before every prediction and in
/// the result.
pub fn ddim_sample_from(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_start: Tensor,
    mask: &[bool],
    cond: Option<&Tensor>,
    steps: usize,
) -> Result<Tensor> {
    let ts = schedule.ddim_timesteps(steps)?;
    if mask.len() != z_start.dim(1) {
        return Err(Error::validation("mask", format!("{} entries for {} frames", mask.len(), z_start.dim(1))));
    }
    let cond = match (mask.iter().any(|&m| m), cond) {
        (true, None) => return Err(Error::validation("cond_latents", "mask selects frames but no latents given")),
        (true, Some(c)) if c.shape() != z_start.shape() => return Err(Error::shape(z_start.shape(), c.shape())),
        (true, Some(c)) => Some(c),
        (false, _) => None,
    };
    let mut z = z_start;
    for (i, &t) in ts.iter().enumerate().rev() {
        if let Some(c) = cond {
            overwrite_frames(&mut z, mask, c);
        }
        let eps = predictor.predict(&z, t)?;
        let ab = schedule.alpha_bar(t);
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let ab_prev = schedule.alpha_bar(prev);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        z = z.zip_map(&eps, |x, e| {
            let x0 = (x - sb * e) / sa;
            pa * x0 + pb * e
        });
    }
    if let Some(c) = cond {
        overwrite_frames(&mut z, mask, c);
    }
    Ok(z)
}

pub fn ddim_sample(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    mask: &[bool],
    cond: Option<&Tensor>,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(shape, 1.0, &mut rng);
    ddim_sample_from(predictor, schedule, z, mask, cond, steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_monotone_and_endpoints() {
        let s = build_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 1e-4);
        let one = build_schedule(ScheduleKind::LinearBeta, 1).unwrap();
        assert_eq!(one.alpha_bar(1), one.alphas[0]);
        let c = build_schedule(ScheduleKind::Cosine, 100).unwrap();
        assert!(c.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(c.alpha_bars.iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn closed_form_example() {
        let mut s = build_schedule(ScheduleKind::LinearBeta, 10).unwrap();
        s.alpha_bars[3] = 0.25;
        let z = s.forward_diffuse(&Tensor::scalar(1.0), 4, &Tensor::scalar(1.0)).unwrap();
        assert!((z.to_scalar() - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!(s.forward_diffuse(&Tensor::scalar(1.0), 11, &Tensor::scalar(1.0)).is_err());
        assert!(s.forward_diffuse(&Tensor::scalar(1.0), 0, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn ddim_timesteps_are_even_and_end_at_t() {
        let s = build_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        assert_eq!(s.ddim_timesteps(5).unwrap(), vec![200, 400, 600, 800, 1000]);
        assert_eq!(s.ddim_timesteps(1000).unwrap().len(), 1000);
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn zero_noise_predictor_scales_toward_x0() {
        let s = build_schedule(ScheduleKind::LinearBeta, 50).unwrap();
        let pred = |z: &Tensor, _t: usize| Ok(Tensor::zeros(z.shape()));
        let z = Tensor::full(&[1, 2, 1, 1, 1], 0.5);
        let out = ddim_sample_from(&pred, &s, z, &[false, false], None, 1).unwrap();
        let expect = 0.5 / s.alpha_bar(50).sqrt();
        assert!((out.data()[0] - expect).abs() < 1e-12);
    }
}

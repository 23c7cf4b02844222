//! Forward diffusion process, angular masking and masked-denoising training.

mod optim;
mod train;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, OptimizerConfig};
pub use train::{
    load_checkpoint, save_checkpoint, stack_batch, train, train_step, validation_loss, MaskingConfig, StepRecord, TrainConfig, TrainState,
};

use crate::error::{Error, Result};
use crate::phantom::stream_rng;
use crate::volume::AngularMask;

/// Smallest masked ratio of the training ramp.
pub const K_MIN: f64 = 0.5;
/// Largest masked ratio of the training ramp.
pub const K_MAX: f64 = 0.94;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_min, self.beta_max)
    }
}

/// Variance schedule β₁…β_T with `α_t = 1 − β_t` and `ᾱ_t = Π α_s`
/// (ᾱ₀ = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β interpolation from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if timesteps == 0 || !(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got T={timesteps}, [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// ᾱ_t for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Uniform-stride subset of `steps` timesteps in decreasing order, always
    /// containing `T` and `1`.
    pub fn respace(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.timesteps();
        if steps == 0 || steps > t_max {
            return Err(Error::InvalidParameter(format!("cannot respace {t_max} timesteps into {steps}")));
        }
        if steps == 1 {
            return Ok(vec![t_max]);
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| 1 + ((i * (t_max - 1)) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if x0.len() != noise.len() {
        return Err(Error::DimensionMismatch(format!("x0 has {} values, noise {}", x0.len(), noise.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &e)| a * x + b * e).collect())
}

/// Linear masked-ratio ramp from [`K_MIN`] at iteration 0 to [`K_MAX`] at
/// `total_iters`.
pub fn mask_ratio_schedule(iter: usize, total_iters: usize) -> f64 {
    ramp(iter, total_iters, K_MIN, K_MAX)
}

pub(crate) fn ramp(iter: usize, total_iters: usize, k_min: f64, k_max: f64) -> f64 {
    if total_iters == 0 {
        return k_max;
    }
    let f = (iter.min(total_iters)) as f64 / total_iters as f64;
    k_min + (k_max - k_min) * f
}

/// Masks a uniformly random subset of `round(k·n)` whole directions.
pub fn sample_mask_with(k: f64, n: usize, rng: &mut impl Rng) -> Result<AngularMask> {
    let masked = (k * n as f64).round();
    if !(k > 0.0 && k < 1.0) || masked < 1.0 || masked > n as f64 - 1.0 {
        return Err(Error::InvalidParameter(format!(
            "mask ratio {k} over {n} directions masks {masked}, need between 1 and {}",
            n.saturating_sub(1)
        )));
    }
    let chosen = index::sample(rng, n, masked as usize);
    let mut observed = vec![true; n];
    for i in chosen {
        observed[i] = false;
    }
    Ok(AngularMask::new(observed))
}

pub fn sample_mask(k: f64, n: usize, seed: u64) -> Result<AngularMask> {
    sample_mask_with(k, n, &mut stream_rng(seed, 0))
}

/// `M⊙x0 + (1−M)⊙x_t` on direction-fastest data.
pub fn build_masked_input(x0: &[f64], x_t: &[f64], mask: &AngularMask) -> Result<Vec<f64>> {
    select_by_mask(x0, x_t, mask)
}

/// Per-direction selection: observed directions from `observed`, the rest
/// from `missing`.
pub fn select_by_mask(observed: &[f64], missing: &[f64], mask: &AngularMask) -> Result<Vec<f64>> {
    let n = mask.len();
    if observed.len() != missing.len() || n == 0 || observed.len() % n != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} and {} values for a {n}-direction mask",
            observed.len(),
            missing.len()
        )));
    }
    Ok(observed
        .iter()
        .zip(missing)
        .enumerate()
        .map(|(i, (&o, &m))| if mask.is_observed(i % n) { o } else { m })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let oracle: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - oracle).abs() < 1e-15);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 0.1e-5, "{}", s.alpha_bar(1000));
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn respacing() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let ts = s.respace(100).unwrap();
        assert_eq!(ts.len(), 100);
        assert_eq!((ts[0], ts[99]), (1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.respace(1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
        assert!(s.respace(1001).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = NoiseSchedule::linear(10, 1e-9, 1e-9).unwrap();
        let x = forward_diffuse(&s, &[0.3, -1.0], 1, &[1.0, 1.0]).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-4 && (x[1] + 1.0).abs() < 1e-4);
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x = forward_diffuse(&s, &[0.0, 0.0], 500, &[1.0, -2.0]).unwrap();
        let c = (1.0 - s.alpha_bar(500)).sqrt();
        assert_eq!(x, vec![c, -2.0 * c]);
        assert!(forward_diffuse(&s, &[0.0], 1001, &[0.0]).is_err());
    }

    #[test]
    fn forward_matches_iterated_single_steps_in_distribution() {
        // x_t by t single-step corruptions has the same first two moments.
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let mut rng = stream_rng(1, 2);
        let (x0, t, n) = (0.8, 30, 20_000);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let mut x = x0;
            for k in 1..=t {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = s.alpha(k).sqrt() * x + s.beta(k).sqrt() * e;
            }
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        let sd_mean = ((1.0 - ab) / n as f64).sqrt();
        assert!((mean - ab.sqrt() * x0).abs() < 4.0 * sd_mean);
        assert!((var - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn ratio_schedule() {
        assert_eq!(mask_ratio_schedule(0, 2000), 0.5);
        assert!((mask_ratio_schedule(2000, 2000) - 0.94).abs() < 1e-15);
        assert!((mask_ratio_schedule(1000, 2000) - 0.72).abs() < 1e-15);
        assert!((0..100).all(|i| mask_ratio_schedule(i, 99) <= mask_ratio_schedule(i + 1, 99)));
    }

    #[test]
    fn mask_counts_and_errors() {
        assert_eq!(sample_mask(0.5, 2, 3).unwrap().n_masked(), 1);
        assert_eq!(sample_mask(0.94, 60, 3).unwrap().n_masked(), 56);
        assert!(sample_mask(0.1, 4, 3).is_err());
        assert!(sample_mask(0.9, 4, 3).is_err());
        assert!(sample_mask(1.0, 4, 3).is_err());
    }

    #[test]
    fn mask_uniformity() {
        let (n, draws, k) = (10, 10_000, 0.3);
        let mut counts = vec![0usize; n];
        let mut rng = stream_rng(5, 0);
        for _ in 0..draws {
            for i in sample_mask_with(k, n, &mut rng).unwrap().missing_indices() {
                counts[i] += 1;
            }
        }
        let p = 0.3;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn masked_input_selection() {
        let x0: Vec<f64> = (0..12).map(f64::from).collect();
        let xt: Vec<f64> = (0..12).map(|v| -f64::from(v)).collect();
        assert_eq!(build_masked_input(&x0, &xt, &AngularMask::all_observed(3)).unwrap(), x0);
        assert_eq!(build_masked_input(&x0, &xt, &AngularMask::all_missing(3)).unwrap(), xt);
        let m = AngularMask::from_observed_indices(3, &[1]).unwrap();
        let out = build_masked_input(&x0, &xt, &m).unwrap();
        for (i, v) in out.iter().enumerate() {
            let expect = if i % 3 == 1 { x0[i] } else { xt[i] };
            assert_eq!(*v, expect);
        }
        assert!(build_masked_input(&x0, &xt[..11], &m).is_err());
    }
}

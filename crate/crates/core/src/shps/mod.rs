//! Spherical-harmonics guided posterior sampling.
//!
//! Guidance combines two losses on the Tweedie estimate `x_{0|t}`:
//! observation consistency (distance of `x_{0|t}` from the SH projection of
//! the fused signal) and SH-coefficient consistency (distance between the
//! fused signal's coefficients and those fitted to the observed directions
//! alone).

mod sampler;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use sampler::{
    grid_search_weights, guidance_gradients, guided_step, masked_psnr, sample, sample_with, select_best,
    GridSearchResult, GuidanceEval, SampleOutput, SamplerTrace, SamplingContext, TraceRecord,
};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::sphere_sh::{eval_sh_basis, max_order_for, Direction, ShFitter, DEFAULT_LAMBDA_REG};
use crate::volume::AngularMask;

/// Guidance strengths λ_OC and λ_SCC.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceWeights {
    pub lambda_oc: f64,
    pub lambda_scc: f64,
}

impl GuidanceWeights {
    pub fn new(lambda_oc: f64, lambda_scc: f64) -> Result<Self> {
        let w = Self { lambda_oc, lambda_scc };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_oc >= 0.0 && self.lambda_oc.is_finite() && self.lambda_scc >= 0.0 && self.lambda_scc.is_finite()) {
            return Err(Error::InvalidParameter(format!("guidance weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_oc == 0.0 && self.lambda_scc == 0.0
    }
}

/// How `∂x_{0|t}/∂x_t` is obtained for the guidance gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Reverse mode through the noise network.
    Full,
    /// ε̂ treated as constant: `∂x_{0|t}/∂x_t = I/√ᾱ_t`.
    Fast,
}

/// Coefficient of ε̂ in the clean-signal estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TweedieForm {
    /// `√(1−ᾱ_t)`, the exact inverse of the forward process.
    Standard,
    /// `β_t/√(1−ᾱ_t)`.
    Literal,
}

/// Scaling of the guidance step applied to `x_{t−1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceScaling {
    /// `x_{t−1} −= λ·∇_{x_t} L`.
    Plain,
    /// `x_{t−1} −= ᾱ_t·λ·∇_{x_t} L`, which makes λ act on the clean-signal
    /// scale at every noise level.
    SignalScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub weights: GuidanceWeights,
    /// Shared SH order of both losses; `None` picks the largest even order
    /// the observed directions support.
    pub sh_order: Option<usize>,
    pub lambda_reg: f64,
    pub jacobian: JacobianMode,
    pub tweedie: TweedieForm,
    pub scaling: GuidanceScaling,
    /// Range the clean-signal estimate is clipped to before the ancestral
    /// update (the guidance losses see the unclipped estimate).
    pub clip_denoised: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            weights: GuidanceWeights::default(),
            sh_order: None,
            lambda_reg: DEFAULT_LAMBDA_REG,
            jacobian: JacobianMode::Full,
            tweedie: TweedieForm::Standard,
            scaling: GuidanceScaling::SignalScaled,
            clip_denoised: Some([0.0, 1.0]),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidParameter("sampler needs at least one step".into()));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda_reg {} must be >= 0", self.lambda_reg)));
        }
        if let Some([lo, hi]) = self.clip_denoised {
            if !(lo < hi) {
                return Err(Error::InvalidParameter(format!("empty clip range [{lo}, {hi}]")));
            }
        }
        if let Some(l) = self.sh_order {
            if l % 2 != 0 {
                return Err(Error::InvalidShOrder(l as i64));
            }
        }
        Ok(())
    }
}

/// Coefficient of ε̂ in the clean-signal estimate at `t`.
pub fn tweedie_coefficient(schedule: &NoiseSchedule, t: usize, form: TweedieForm) -> f64 {
    let ab = schedule.alpha_bar(t);
    match form {
        TweedieForm::Standard => (1.0 - ab).sqrt(),
        TweedieForm::Literal => schedule.beta(t) / (1.0 - ab).sqrt(),
    }
}

/// `x_{0|t} = (x_t − c·ε̂)/√ᾱ_t` with `c` from [`tweedie_coefficient`].
pub fn tweedie_denoise(x_t: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule, form: TweedieForm) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if x_t.len() != eps.len() {
        return Err(Error::DimensionMismatch(format!("x_t has {} values, eps {}", x_t.len(), eps.len())));
    }
    let c = tweedie_coefficient(schedule, t, form);
    let s = schedule.alpha_bar(t).sqrt();
    Ok(x_t.iter().zip(eps).map(|(&x, &e)| (x - c * e) / s).collect())
}

/// `x̂_0 = M⊙x_obs + (1−M)⊙x_{0|t}` on direction-fastest data.
pub fn hybrid_fuse(x_obs: &[f64], x0t: &[f64], mask: &AngularMask) -> Result<Vec<f64>> {
    crate::diffusion::select_by_mask(x_obs, x0t, mask)
}

/// SH operators shared by both guidance losses.
#[derive(Debug, Clone)]
pub struct GuidanceOperators {
    order: usize,
    n_dirs: usize,
    mask: AngularMask,
    /// `N × C` basis at every direction.
    y_full: DMatrix<f64>,
    /// `C × N` regularised fit over every direction.
    fit_full: DMatrix<f64>,
    /// `C × N_obs` regularised fit over the observed directions.
    fit_obs: DMatrix<f64>,
}

impl GuidanceOperators {
    pub fn new(bvecs: &[Direction], mask: &AngularMask, order: Option<usize>, lambda_reg: f64) -> Result<Self> {
        if mask.len() != bvecs.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask over {} directions, table has {}",
                mask.len(),
                bvecs.len()
            )));
        }
        let observed = mask.observed_indices();
        let order = match order {
            Some(l) => l,
            None => max_order_for(observed.len()).ok_or_else(|| Error::SingularFit {
                order: 0,
                directions: observed.len(),
                required: 1,
            })?,
        };
        let basis = eval_sh_basis(bvecs, order as i64)?;
        let fit_full = ShFitter::new(&basis, lambda_reg)?.operator().clone();
        let fit_obs = ShFitter::new(&basis.select_rows(&observed), lambda_reg)?.operator().clone();
        Ok(Self {
            order,
            n_dirs: bvecs.len(),
            mask: mask.clone(),
            y_full: basis.values().clone(),
            fit_full,
            fit_obs,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_coeffs(&self) -> usize {
        self.y_full.ncols()
    }

    pub fn mask(&self) -> &AngularMask {
        &self.mask
    }

    /// Coefficients fitted per voxel to the observed directions of `x_obs`
    /// (direction-fastest, all `N` directions present), `[V, C]`.
    pub fn observed_coeffs(&self, x_obs: &[f64]) -> Vec<f64> {
        let obs = self.mask.observed_indices();
        let c = self.n_coeffs();
        let mut out = Vec::with_capacity(x_obs.len() / self.n_dirs * c);
        for v in x_obs.chunks(self.n_dirs) {
            for i in 0..c {
                out.push(obs.iter().enumerate().map(|(j, &d)| self.fit_obs[(i, j)] * v[d]).sum());
            }
        }
        out
    }

    fn fit_full_voxel(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_coeffs())
            .map(|i| (0..self.n_dirs).map(|j| self.fit_full[(i, j)] * v[j]).sum())
            .collect()
    }

    /// `Σ_voxels ‖Y_full·fit(x̂_0) − x_{0|t}‖²`.
    pub fn oc_loss(&self, x_hat0: &[f64], x0t: &[f64]) -> Result<f64> {
        self.check_len(x_hat0, x0t)?;
        let mut total = 0.0;
        for (vh, v0) in x_hat0.chunks(self.n_dirs).zip(x0t.chunks(self.n_dirs)) {
            let c = self.fit_full_voxel(vh);
            for (d, &x) in v0.iter().enumerate() {
                let r: f64 = (0..c.len()).map(|i| self.y_full[(d, i)] * c[i]).sum::<f64>() - x;
                total += r * r;
            }
        }
        Ok(total)
    }

    /// `Σ_voxels ‖C_obs − fit(x̂_0)‖²`.
    pub fn scc_loss(&self, x_hat0: &[f64], c_obs: &[f64]) -> Result<f64> {
        let c = self.n_coeffs();
        if x_hat0.len() % self.n_dirs != 0 || c_obs.len() != x_hat0.len() / self.n_dirs * c {
            return Err(Error::DimensionMismatch(format!(
                "{} signal values and {} coefficients",
                x_hat0.len(),
                c_obs.len()
            )));
        }
        Ok(x_hat0
            .chunks(self.n_dirs)
            .zip(c_obs.chunks(c))
            .map(|(v, co)| self.fit_full_voxel(v).iter().zip(co).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum())
    }

    fn check_len(&self, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() || a.len() % self.n_dirs != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} and {} values for {} directions",
                a.len(),
                b.len(),
                self.n_dirs
            )));
        }
        Ok(())
    }

    /// Records both losses on `x0t` (`[V, N]`) in `g`. `x_obs` is `[V, N]`
    /// and `c_obs` `[V, C]`. Returns `(L_OC, L_SCC)`.
    pub fn losses<T: Scalar>(&self, g: &mut Graph<T>, x0t: Var, x_obs: Var, c_obs: Var) -> Result<(Var, Var)> {
        let s = g.shape(x0t).to_vec();
        if s.len() != 2 || s[1] != self.n_dirs {
            return Err(Error::shape("guidance", format!("{s:?} for {} directions", self.n_dirs)));
        }
        let n = self.n_dirs;
        let c = self.n_coeffs();
        let obs: Vec<f64> = (0..n).map(|d| if self.mask.is_observed(d) { 1.0 } else { 0.0 }).collect();
        let miss: Vec<f64> = obs.iter().map(|v| 1.0 - v).collect();
        let obs = g.constant(Tensor::from_f64(&[1, n], &obs)?);
        let obs = g.expand(obs, &s)?;
        let miss = g.constant(Tensor::from_f64(&[1, n], &miss)?);
        let miss = g.expand(miss, &s)?;
        let a = g.mul(obs, x_obs)?;
        let b = g.mul(miss, x0t)?;
        let fused = g.add(a, b)?;
        let fit_t: Vec<f64> = (0..n).flat_map(|j| (0..c).map(move |i| (i, j))).map(|(i, j)| self.fit_full[(i, j)]).collect();
        let fit_t = g.constant(Tensor::from_f64(&[n, c], &fit_t)?);
        let y_t: Vec<f64> = (0..c).flat_map(|i| (0..n).map(move |d| (d, i))).map(|(d, i)| self.y_full[(d, i)]).collect();
        let y_t = g.constant(Tensor::from_f64(&[c, n], &y_t)?);
        let coeffs = g.matmul(fused, fit_t)?;
        let recon = g.matmul(coeffs, y_t)?;
        let r = g.sub(recon, x0t)?;
        let r2 = g.mul(r, r)?;
        let l_oc = g.sum(r2);
        let dc = g.sub(coeffs, c_obs)?;
        let dc2 = g.mul(dc, dc)?;
        let l_scc = g.sum(dc2);
        Ok((l_oc, l_scc))
    }
}

/// Observation-consistency loss of a fused signal against `x_{0|t}`, both
/// direction-fastest over `bvecs`.
pub fn oc_loss(
    x_hat0: &[f64],
    x0t: &[f64],
    bvecs: &[Direction],
    mask: &AngularMask,
    order: usize,
    lambda_reg: f64,
) -> Result<f64> {
    GuidanceOperators::new(bvecs, mask, Some(order), lambda_reg)?.oc_loss(x_hat0, x0t)
}

/// SH-coefficient consistency loss between the fused signal and the
/// observed directions of `x_obs`.
pub fn scc_loss(
    x_hat0: &[f64],
    x_obs: &[f64],
    bvecs: &[Direction],
    mask: &AngularMask,
    order: usize,
    lambda_reg: f64,
) -> Result<f64> {
    let ops = GuidanceOperators::new(bvecs, mask, Some(order), lambda_reg)?;
    let c_obs = ops.observed_coeffs(x_obs);
    ops.scc_loss(x_hat0, &c_obs)
}

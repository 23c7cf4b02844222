use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How self-attention spans the `N × P` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayout {
    /// Every head attends over all `N·P` tokens of a sample.
    Joint,
    /// The first half of the heads attend over the `P` patches of one
    /// direction, the second half over the `N` directions of one patch.
    Axial,
}

/// Weight initialisation of dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with variance `2 / (fan_in + fan_out)`.
    Xavier,
    /// Unit normal.
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    /// Token width `D`.
    pub dim: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    /// Integer frequencies `1..=K` of the (θ, φ) angular encoding; uses `4K`
    /// channels.
    pub angular_freqs: usize,
    /// Number of diffusion timesteps `T` the model is conditioned on.
    pub timesteps: usize,
    /// `false` forces every modulation to its neutral value (ablation).
    pub qgam: bool,
    pub attention: AttentionLayout,
    pub init: InitScheme,
    /// Affine map from signal values to the diffusion domain.
    pub signal_norm: SignalNorm,
    pub seed: u64,
}

/// `y = (x − offset)·scale` between b0-normalised signal and the values the
/// diffusion process runs on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalNorm {
    pub offset: f64,
    pub scale: f64,
}

impl Default for SignalNorm {
    /// Maps `[0, 1]` onto `[−1, 1]`.
    fn default() -> Self {
        Self { offset: 0.5, scale: 2.0 }
    }
}

impl SignalNorm {
    pub fn identity() -> Self {
        Self { offset: 0.0, scale: 1.0 }
    }

    /// Centres the values and sets their standard deviation to 0.5.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n < 2 {
            return Err(Error::InvalidParameter("normalisation needs at least 2 values".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::InvalidParameter(format!("cannot normalise values with variance {var}")));
        }
        Ok(Self {
            offset: mean,
            scale: 0.5 / var.sqrt(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.offset.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid signal normalisation {self:?}")));
        }
        Ok(())
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.offset) * self.scale
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y / self.scale + self.offset
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            dim: 128,
            patch: 8,
            mlp_ratio: 4,
            angular_freqs: 8,
            timesteps: 1000,
            qgam: true,
            attention: AttentionLayout::Joint,
            init: InitScheme::Xavier,
            signal_norm: SignalNorm::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidParameter(m));
        if self.depth == 0 || self.heads == 0 || self.dim == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return fail("model depth, heads, dim, patch and mlp_ratio must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return fail(format!("dim {} must be a multiple of 4 for the spatial encoding", self.dim));
        }
        if 4 * self.angular_freqs > self.dim {
            return fail(format!("angular_freqs {} needs {} > dim channels", self.angular_freqs, 4 * self.angular_freqs));
        }
        if self.attention == AttentionLayout::Axial && self.heads % 2 != 0 {
            return fail(format!("axial attention needs an even head count, got {}", self.heads));
        }
        if self.timesteps == 0 {
            return fail("timesteps must be positive".into());
        }
        self.signal_norm.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Number of scalar parameters:
    /// `2p²D + p² + 3D + depth·(12D² + 9D)` for the backbone, embeddings
    /// and head, plus `(3 + D)D + D + D² + D + depth·(6D² + 6D)` when the
    /// QGAM pathway is enabled (with `mlp_ratio = 4`; the MLP terms scale as
    /// `2rD² + rD + D`).
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let p2 = self.patch * self.patch;
        let hidden = self.mlp_ratio * d;
        let embed = p2 * d + d + 2 * d;
        let head = d * p2 + p2;
        let attn = d * 3 * d + 3 * d + d * d + d;
        let mlp = d * hidden + hidden + hidden * d + d;
        let mut total = embed + head + self.depth * (attn + mlp);
        if self.qgam {
            let encoder = (3 + d) * d + d + d * d + d;
            let modulation = d * 6 * d + 6 * d;
            total += encoder + self.depth * modulation;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            attention: AttentionLayout::Axial,
            heads: 1,
            dim: 64,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            angular_freqs: 40,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"dim": 64, "attention": "axial"}"#).unwrap();
        assert_eq!(cfg.dim, 64);
        assert_eq!(cfg.attention, AttentionLayout::Axial);
        assert_eq!(cfg.depth, 4);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"dimm": 64}"#).is_err());
    }

    #[test]
    fn closed_form_count_for_mlp_ratio_four() {
        for &(d, p, depth, qgam) in &[(64, 8, 4, true), (32, 4, 2, false), (128, 8, 4, true)] {
            let cfg = ModelConfig {
                dim: d,
                patch: p,
                depth,
                qgam,
                ..ModelConfig::default()
            };
            let p2 = p * p;
            let mut expect = 2 * p2 * d + p2 + 3 * d + depth * (12 * d * d + 9 * d);
            if qgam {
                expect += (3 + d) * d + d + d * d + d + depth * (6 * d * d + 6 * d);
            }
            assert_eq!(cfg.param_count(), expect);
        }
    }
}

//! Bounding latent vectors before noise is added.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::latent::LatentVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    ByNorm,
    ByValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub mode: ClipMode,
    pub c: f64,
    pub c_min: f64,
    pub c_max: f64,
}

impl ClipSpec {
    pub fn by_value(c: f64) -> Result<Self> {
        Self::checked(ClipMode::ByValue, c, -c, c)
    }

    pub fn by_norm(c: f64) -> Result<Self> {
        Self::checked(ClipMode::ByNorm, c, -c, c)
    }

    /// Value clipping to `[c_min, c_max]`; `c` is set to the larger magnitude.
    pub fn asymmetric(c_min: f64, c_max: f64) -> Result<Self> {
        Self::checked(ClipMode::ByValue, c_min.abs().max(c_max.abs()), c_min, c_max)
    }

    fn checked(mode: ClipMode, c: f64, c_min: f64, c_max: f64) -> Result<Self> {
        let spec = ClipSpec {
            mode,
            c,
            c_min,
            c_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return invalid_arg(format!("clip constant must be positive, got {}", self.c));
        }
        if !(self.c_min < self.c_max) || !self.c_min.is_finite() || !self.c_max.is_finite() {
            return invalid_arg(format!(
                "clip bounds must satisfy c_min < c_max, got [{}, {}]",
                self.c_min, self.c_max
            ));
        }
        Ok(())
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self.mode {
            ClipMode::ByNorm => clip_by_norm(z, self.c),
            ClipMode::ByValue => clip_by_value(z, self),
        }
    }

    pub fn apply_latent(&self, z: &LatentVector) -> LatentVector {
        LatentVector {
            tokens: z.tokens,
            width: z.width,
            data: self.apply(&z.data),
        }
    }
}

/// `z · min(1, C / ‖z‖₂)`. The zero vector is returned unchanged.
pub fn clip_by_norm(z: &[f64], c: f64) -> Vec<f64> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= c {
        return z.to_vec();
    }
    let s = c / norm;
    z.iter().map(|v| v * s).collect()
}

/// Per-coordinate clamp to `[c_min, c_max]`.
pub fn clip_by_value(z: &[f64], spec: &ClipSpec) -> Vec<f64> {
    z.iter().map(|v| v.clamp(spec.c_min, spec.c_max)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipRule {
    /// `C = μ + 2σ`, covering about 95% of a Gaussian.
    TwoSigma,
    /// `C = σ / 2`.
    HalfSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipEstimate {
    pub mu: f64,
    pub sigma: f64,
    pub recommended_c: f64,
    pub rule: ClipRule,
}

/// Fits a Gaussian to every coordinate of every latent (maximum likelihood, so
/// the variance uses `1/N`) and derives a clipping constant from it.
pub fn estimate_clip_constant(latents: &[LatentVector], rule: ClipRule) -> Result<ClipEstimate> {
    if latents.len() < 2 {
        return invalid_arg(format!(
            "need at least 2 latent vectors to estimate a clip constant, got {}",
            latents.len()
        ));
    }
    let count: usize = latents.iter().map(LatentVector::dimension).sum();
    if count == 0 {
        return invalid_arg("latent vectors are empty");
    }
    let values = || latents.iter().flat_map(|z| z.data.iter().copied());
    let mu = values().sum::<f64>() / count as f64;
    let var = values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
    let sigma = var.sqrt();
    let recommended_c = match rule {
        ClipRule::TwoSigma => mu + 2.0 * sigma,
        ClipRule::HalfSigma => sigma / 2.0,
    };
    if !(recommended_c > 0.0 && recommended_c.is_finite()) {
        return invalid_arg(format!(
            "degenerate latent distribution (mu = {mu}, sigma = {sigma}) gives no usable clip constant"
        ));
    }
    Ok(ClipEstimate {
        mu,
        sigma,
        recommended_c,
        rule,
    })
}

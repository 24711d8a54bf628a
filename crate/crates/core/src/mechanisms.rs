//! Sensitivities, noise calibration and sampling for latent-space local DP.
//!
//! A rewrite releases `ż = z̄ + (Y₁, …, Yₙ)` where `z̄` is the clipped encoder
//! output and each `Yᵢ` is drawn i.i.d. from `Lap(Δ₁/ε)` or from a Gaussian with
//! standard deviation `σ = √(2 ln(1.25/δ)) · Δ₂ / ε`.
//!
//! For clipping by value to `[-C, C]ⁿ` the sensitivities are `Δ₁ = 2Cn` and
//! `Δ₂ = 2C√n`. For clipping by norm to radius `C`, `Δ₂ = 2C` and the ℓ₁
//! sensitivity is `2C√n` (any two vectors in the ℓ₂ ball differ by at most `2C`
//! in ℓ₂, hence by at most `2C√n` in ℓ₁).
//!
//! `σ` is always a standard deviation. Reports carry both `σ` and `σ²`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clipping::{ClipMode, ClipSpec};
use crate::error::{invalid_arg, Error, Result};
use crate::latent::LatentVector;
use crate::pruning::PruneMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Laplace,
    Gaussian,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Laplace => "laplace",
            Mechanism::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(Mechanism::Laplace),
            "gaussian" => Ok(Mechanism::Gaussian),
            other => invalid_arg(format!("unknown mechanism `{other}`")),
        }
    }
}

/// A privacy budget. `Infinite` disables noise entirely instead of pushing an
/// infinity through the scale formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Finite(f64),
    Infinite,
}

impl Epsilon {
    pub fn finite(&self) -> Option<f64> {
        match self {
            Epsilon::Finite(e) => Some(*e),
            Epsilon::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Epsilon::Infinite)
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(e) => write!(f, "{e}"),
            Epsilon::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Epsilon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if matches!(t.as_str(), "inf" | "infinity" | "∞") {
            return Ok(Epsilon::Infinite);
        }
        match t.parse::<f64>() {
            Ok(v) if v.is_infinite() && v > 0.0 => Ok(Epsilon::Infinite),
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Epsilon::Finite(v)),
            Ok(v) => invalid_arg(format!("epsilon must be positive, got {v}")),
            Err(_) => invalid_arg(format!("cannot parse epsilon `{s}`")),
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::Finite(e) => s.serialize_f64(*e),
            Epsilon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Epsilon::from_str(&v.to_string()),
            Raw::Text(t) => Epsilon::from_str(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: Epsilon,
    pub delta: f64,
    pub mechanism: Mechanism,
}

impl PrivacyParams {
    pub fn laplace(epsilon: Epsilon) -> Result<Self> {
        let p = PrivacyParams {
            epsilon,
            delta: 0.0,
            mechanism: Mechanism::Laplace,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(epsilon: Epsilon, delta: f64) -> Result<Self> {
        let p = PrivacyParams {
            epsilon,
            delta,
            mechanism: Mechanism::Gaussian,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if let Epsilon::Finite(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return invalid_arg(format!("epsilon must be positive and finite, got {e}"));
            }
        }
        match self.mechanism {
            Mechanism::Laplace if self.delta != 0.0 => {
                invalid_arg("the Laplace mechanism is pure DP; delta must be 0")
            }
            Mechanism::Gaussian if !(self.delta > 0.0 && self.delta < 1.0) => invalid_arg(format!(
                "the Gaussian mechanism needs 0 < delta < 1, got {}",
                self.delta
            )),
            _ => Ok(()),
        }
    }
}

/// Sensitivity of a clipping function on `dimension` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub l1: f64,
    pub l2: f64,
    pub clip_constant: f64,
    pub dimension: usize,
}

impl Sensitivity {
    /// Clipping by value to `[-C, C]` on every coordinate.
    pub fn value_clip(c: f64, n: usize) -> Result<Self> {
        Ok(Sensitivity {
            l1: l1_sensitivity_clv(c, n)?,
            l2: l2_sensitivity_clv(c, n)?,
            clip_constant: c,
            dimension: n,
        })
    }

    /// Clipping by ℓ₂ norm to radius `C`.
    pub fn norm_clip(c: f64, n: usize) -> Result<Self> {
        Ok(Sensitivity {
            l1: l1_sensitivity_norm_clip(c, n)?,
            l2: 2.0 * c,
            clip_constant: c,
            dimension: n,
        })
    }

    /// Sensitivity of `spec` applied to `n` coordinates. An asymmetric value box
    /// `[c_min, c_max]` has per-coordinate range `c_max - c_min` in place of `2C`.
    pub fn for_clip(spec: &ClipSpec, n: usize) -> Result<Self> {
        match spec.mode {
            ClipMode::ByNorm => Sensitivity::norm_clip(spec.c, n),
            ClipMode::ByValue => {
                check_positive(spec.c, n)?;
                let range = spec.c_max - spec.c_min;
                Ok(Sensitivity {
                    l1: range * n as f64,
                    l2: range * (n as f64).sqrt(),
                    clip_constant: spec.c,
                    dimension: n,
                })
            }
        }
    }
}

fn check_positive(c: f64, n: usize) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return invalid_arg(format!("clip constant must be positive, got {c}"));
    }
    if n == 0 {
        return invalid_arg("dimension must be at least 1");
    }
    Ok(())
}

/// ℓ₁ sensitivity of clipping by value: `2·C·n`.
pub fn l1_sensitivity_clv(c: f64, n: usize) -> Result<f64> {
    check_positive(c, n)?;
    Ok(2.0 * c * n as f64)
}

/// ℓ₂ sensitivity of clipping by value: `2·C·√n`.
pub fn l2_sensitivity_clv(c: f64, n: usize) -> Result<f64> {
    check_positive(c, n)?;
    Ok(2.0 * c * (n as f64).sqrt())
}

/// ℓ₁ sensitivity of clipping by norm: `2·C·√n`.
pub fn l1_sensitivity_norm_clip(c: f64, n: usize) -> Result<f64> {
    check_positive(c, n)?;
    Ok(2.0 * c * (n as f64).sqrt())
}

fn finite_epsilon(params: &PrivacyParams) -> Result<f64> {
    params.validate()?;
    params
        .epsilon
        .finite()
        .ok_or_else(|| Error::InvalidArgument("an infinite budget has no noise scale".into()))
}

/// Standard deviation of the Gaussian mechanism, `√(2 ln(1.25/δ)) · Δ₂ / ε`.
pub fn gaussian_sigma(delta2: f64, params: &PrivacyParams) -> Result<f64> {
    if params.mechanism != Mechanism::Gaussian {
        return invalid_arg("gaussian_sigma needs Gaussian privacy parameters");
    }
    if !(delta2 > 0.0 && delta2.is_finite()) {
        return invalid_arg(format!("l2 sensitivity must be positive, got {delta2}"));
    }
    let eps = finite_epsilon(params)?;
    Ok((2.0 * (1.25 / params.delta).ln()).sqrt() * delta2 / eps)
}

/// Laplace scale `b = Δ₁ / ε`.
pub fn laplace_scale(delta1: f64, params: &PrivacyParams) -> Result<f64> {
    if params.mechanism != Mechanism::Laplace {
        return invalid_arg("laplace_scale needs Laplace privacy parameters");
    }
    if !(delta1 > 0.0 && delta1.is_finite()) {
        return invalid_arg(format!("l1 sensitivity must be positive, got {delta1}"));
    }
    Ok(delta1 / finite_epsilon(params)?)
}

/// Parameters of the i.i.d. per-coordinate noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub distribution: Mechanism,
    /// Laplace scale `b`, or Gaussian standard deviation `σ`.
    pub scale: f64,
    pub dimension: usize,
}

impl NoiseSpec {
    pub fn new(distribution: Mechanism, scale: f64, dimension: usize) -> Result<Self> {
        let spec = NoiseSpec {
            distribution,
            scale,
            dimension,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return invalid_arg(format!("noise scale must be positive and finite, got {}", self.scale));
        }
        Ok(())
    }

    /// Variance of one coordinate: `2b²` for Laplace, `σ²` for Gaussian.
    pub fn variance(&self) -> f64 {
        match self.distribution {
            Mechanism::Laplace => 2.0 * self.scale * self.scale,
            Mechanism::Gaussian => self.scale * self.scale,
        }
    }
}

/// Noise calibration for one `(C, n, ε, δ)` configuration; `noise` is `None` at ε = ∞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: Epsilon,
    pub delta: f64,
    pub mechanism: Mechanism,
    pub clip_constant: f64,
    pub dimension: usize,
    pub sensitivity_l1: f64,
    pub sensitivity_l2: f64,
    /// `b` for Laplace, `σ` for Gaussian; `0` at ε = ∞.
    pub noise_scale: f64,
    /// Gaussian standard deviation (`None` for Laplace).
    pub sigma: Option<f64>,
    pub sigma_squared: Option<f64>,
    /// Per-coordinate noise variance.
    pub noise_variance: f64,
}

impl Calibration {
    pub fn noise(&self) -> Option<NoiseSpec> {
        (self.noise_scale > 0.0).then_some(NoiseSpec {
            distribution: self.mechanism,
            scale: self.noise_scale,
            dimension: self.dimension,
        })
    }
}

pub fn calibrate(sens: &Sensitivity, params: &PrivacyParams) -> Result<Calibration> {
    params.validate()?;
    let scale = match params.epsilon {
        Epsilon::Infinite => 0.0,
        Epsilon::Finite(_) => match params.mechanism {
            Mechanism::Laplace => laplace_scale(sens.l1, params)?,
            Mechanism::Gaussian => gaussian_sigma(sens.l2, params)?,
        },
    };
    let sigma = (params.mechanism == Mechanism::Gaussian).then_some(scale);
    let variance = match params.mechanism {
        Mechanism::Laplace => 2.0 * scale * scale,
        Mechanism::Gaussian => scale * scale,
    };
    Ok(Calibration {
        epsilon: params.epsilon,
        delta: params.delta,
        mechanism: params.mechanism,
        clip_constant: sens.clip_constant,
        dimension: sens.dimension,
        sensitivity_l1: sens.l1,
        sensitivity_l2: sens.l2,
        noise_scale: scale,
        sigma,
        sigma_squared: sigma.map(|s| s * s),
        noise_variance: variance,
    })
}

/// One draw from `Lap(0, b)` by inverting the CDF of a uniform sample.
pub fn sample_laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        if u > -0.5 {
            return -b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

pub fn sample_gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

pub(crate) fn draw<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> f64 {
    match spec.distribution {
        Mechanism::Laplace => sample_laplace(spec.scale, rng),
        Mechanism::Gaussian => sample_gaussian(spec.scale, rng),
    }
}

pub fn sample_noise<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok((0..spec.dimension).map(|_| draw(spec, rng)).collect())
}

/// Adds calibrated noise to every non-pruned coordinate of an already clipped
/// latent. Pruned columns stay exactly zero.
pub fn privatize_latent<R: Rng + ?Sized>(
    zbar: &LatentVector,
    mask: Option<&PruneMask>,
    sens: &Sensitivity,
    params: &PrivacyParams,
    rng: &mut R,
) -> Result<LatentVector> {
    let pruned: &[usize] = match mask {
        Some(m) => {
            if m.d_tok() != zbar.width {
                return invalid_arg(format!(
                    "mask width {} does not match latent width {}",
                    m.d_tok(),
                    zbar.width
                ));
            }
            m.indices()
        }
        None => &[],
    };
    let alive = zbar.tokens * (zbar.width - pruned.len());
    if sens.dimension != alive {
        return invalid_arg(format!(
            "sensitivity is for n = {} but the latent has {alive} unpruned coordinates",
            sens.dimension
        ));
    }
    let calibration = calibrate(sens, params)?;
    let mut out = zbar.clone();
    let Some(spec) = calibration.noise() else {
        return Ok(out);
    };
    let mut is_pruned = vec![false; zbar.width];
    for &j in pruned {
        is_pruned[j] = true;
    }
    for row in out.data.chunks_mut(zbar.width) {
        for (v, &dead) in row.iter_mut().zip(&is_pruned) {
            if !dead {
                *v += draw(&spec, rng);
            }
        }
    }
    Ok(out)
}

/// Total budget charged for `k` rewrites of one individual's documents.
pub fn compose_budget(epsilon: f64, k: u32) -> f64 {
    epsilon * f64::from(k)
}

/// The largest power of ten strictly below `1 / dataset_size`.
pub fn delta_guideline(dataset_size: u64) -> f64 {
    let size = dataset_size.max(1);
    let mut exponent = 0i32;
    let mut power: u128 = 1;
    while power <= u128::from(size) {
        power *= 10;
        exponent += 1;
    }
    10f64.powi(-exponent)
}

/// Monte-Carlo estimate of the worst probability ratio between the output
/// distributions of `mechanism` on inputs `x` and `y`.
///
/// Both output samples are histogrammed into `bin_count` equal-mass bins whose
/// edges are quantiles of the pooled sample (the outermost bins are unbounded).
/// The result is the largest of `P̂[M(x) ∈ b] / P̂[M(y) ∈ b]` and its inverse over
/// bins that both samples occupy. A mechanism that is ε-indistinguishable on
/// `x, y` yields at most `e^ε` up to sampling error.
pub fn empirical_privacy_ratio<R, M>(
    mut mechanism: M,
    x: f64,
    y: f64,
    bin_count: usize,
    sample_count: usize,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    M: FnMut(f64, &mut R) -> f64,
{
    if bin_count < 1 || sample_count < bin_count {
        return invalid_arg("need at least one bin and as many samples as bins");
    }
    let sx: Vec<f64> = (0..sample_count).map(|_| mechanism(x, rng)).collect();
    let sy: Vec<f64> = (0..sample_count).map(|_| mechanism(y, rng)).collect();
    let mut pooled: Vec<f64> = sx.iter().chain(&sy).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..bin_count)
        .map(|k| pooled[k * pooled.len() / bin_count])
        .collect();
    let bin_of = |v: f64| edges.partition_point(|e| *e <= v);
    let mut hx = vec![0usize; bin_count];
    let mut hy = vec![0usize; bin_count];
    sx.iter().for_each(|&v| hx[bin_of(v)] += 1);
    sy.iter().for_each(|&v| hy[bin_of(v)] += 1);

    let mut worst: Option<f64> = None;
    for (a, b) in hx.iter().zip(&hy) {
        if *a == 0 || *b == 0 {
            continue;
        }
        let r = (*a as f64 / *b as f64).max(*b as f64 / *a as f64);
        worst = Some(worst.map_or(r, |w: f64| w.max(r)));
    }
    worst.ok_or_else(|| {
        Error::Diagnostic("the two output histograms share no occupied bin".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn closed_form_sensitivities() {
        assert_eq!(l1_sensitivity_clv(1.0, 1).unwrap(), 2.0);
        assert!((l1_sensitivity_clv(0.1, 640).unwrap() - 128.0).abs() < 1e-12);
        assert_eq!(l2_sensitivity_clv(1.0, 1).unwrap(), 2.0);
        assert_eq!(l1_sensitivity_norm_clip(1.0, 4).unwrap(), 4.0);
        assert!((l1_sensitivity_norm_clip(0.1, 1024).unwrap() - 6.4).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_rejects_bad_arguments() {
        assert!(l1_sensitivity_clv(0.0, 3).is_err());
        assert!(l2_sensitivity_clv(-1.0, 3).is_err());
        assert!(l1_sensitivity_norm_clip(1.0, 0).is_err());
    }

    #[test]
    fn gaussian_requires_delta() {
        assert!(PrivacyParams::gaussian(Epsilon::Finite(1.0), 0.0).is_err());
        assert!(PrivacyParams::laplace(Epsilon::Finite(0.0)).is_err());
        let raw = PrivacyParams {
            epsilon: Epsilon::Finite(1.0),
            delta: 0.0,
            mechanism: Mechanism::Gaussian,
        };
        assert!(gaussian_sigma(1.0, &raw).is_err());
    }

    #[test]
    fn sigma_halves_when_epsilon_doubles() {
        let a = PrivacyParams::gaussian(Epsilon::Finite(3.0), 1e-5).unwrap();
        let b = PrivacyParams::gaussian(Epsilon::Finite(6.0), 1e-5).unwrap();
        let ratio = gaussian_sigma(7.0, &a).unwrap() / gaussian_sigma(7.0, &b).unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn laplace_scale_examples() {
        let p = PrivacyParams::laplace(Epsilon::Finite(2.0)).unwrap();
        assert_eq!(laplace_scale(2.0, &p).unwrap(), 1.0);
        let p = PrivacyParams::laplace(Epsilon::Finite(100.0)).unwrap();
        let d1 = l1_sensitivity_clv(0.1, 640).unwrap();
        assert!((laplace_scale(d1, &p).unwrap() - 1.28).abs() < 1e-12);
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(compose_budget(2.0, 3), 6.0);
        assert_eq!(compose_budget(500.0, 1), 500.0);
        assert_eq!(compose_budget(compose_budget(1.5, 2), 2), compose_budget(1.5, 4));
    }

    #[test]
    fn delta_guideline_matches_dataset_sizes() {
        assert_eq!(delta_guideline(25_000), 1e-5);
        assert_eq!(delta_guideline(161_297), 1e-6);
        assert_eq!(delta_guideline(1_904_197), 1e-7);
        assert_eq!(delta_guideline(1_000), 1e-4);
        assert_eq!(delta_guideline(1), 1e-1);
    }

    #[test]
    fn epsilon_parses_and_serializes() {
        assert_eq!("inf".parse::<Epsilon>().unwrap(), Epsilon::Infinite);
        assert_eq!("250".parse::<Epsilon>().unwrap(), Epsilon::Finite(250.0));
        assert!("-1".parse::<Epsilon>().is_err());
        assert_eq!(serde_json::to_string(&Epsilon::Infinite).unwrap(), "\"inf\"");
        let e: Epsilon = serde_json::from_str("12.5").unwrap();
        assert_eq!(e, Epsilon::Finite(12.5));
    }

    #[test]
    fn infinite_budget_is_identity() {
        let z = LatentVector::new(2, 2, vec![0.1, -0.1, 0.05, 0.0]).unwrap();
        let sens = Sensitivity::value_clip(0.1, 4).unwrap();
        let p = PrivacyParams::gaussian(Epsilon::Infinite, 1e-5).unwrap();
        let out = privatize_latent(&z, None, &sens, &p, &mut stream(1, 0)).unwrap();
        assert_eq!(out, z);
        assert_eq!(calibrate(&sens, &p).unwrap().noise_scale, 0.0);
    }

    #[test]
    fn privatize_skips_pruned_columns() {
        let z = LatentVector::new(3, 4, vec![0.0; 12]).unwrap();
        let mask = PruneMask::new(vec![1, 3], 4).unwrap();
        let sens = Sensitivity::value_clip(0.1, 6).unwrap();
        let p = PrivacyParams::laplace(Epsilon::Finite(1.0)).unwrap();
        let out = privatize_latent(&z, Some(&mask), &sens, &p, &mut stream(2, 0)).unwrap();
        for row in out.data.chunks(4) {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
            assert_ne!(row[0], 0.0);
        }
        let wrong = Sensitivity::value_clip(0.1, 12).unwrap();
        assert!(privatize_latent(&z, Some(&mask), &wrong, &p, &mut stream(2, 0)).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let spec = NoiseSpec::new(Mechanism::Laplace, 0.3, 64).unwrap();
        let a = sample_noise(&spec, &mut stream(11, 5)).unwrap();
        let b = sample_noise(&spec, &mut stream(11, 5)).unwrap();
        assert_eq!(a, b);
        assert!(NoiseSpec::new(Mechanism::Gaussian, 0.0, 3).is_err());
        assert!(NoiseSpec::new(Mechanism::Gaussian, f64::INFINITY, 3).is_err());
    }

    #[test]
    fn privacy_ratio_needs_overlap() {
        let err = empirical_privacy_ratio(|v, _: &mut crate::rng::StreamRng| v, 0.0, 1.0, 4, 100, &mut stream(0, 0));
        assert!(matches!(err, Err(Error::Diagnostic(_))));
    }
}

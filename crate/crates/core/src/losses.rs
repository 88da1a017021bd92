//! Training objectives.
//!
//! Stage one minimizes the Charbonnier penalty. Stage two minimizes
//! `perceptual + λ·L1 + η₁·adv_pixel + η₂·adv_feature`, where the adversarial
//! terms are relativistic-average losses against the two critics. All
//! expectations are means over the respective half of the mini-batch.

use serde::{Deserialize, Serialize};

use crate::discriminators::{relativistic_criterion, FeatureExtractor};
use crate::engine::{Tape, Var};
use crate::error::{Error, Result};

/// Floor applied to every log argument in the adversarial losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// The (λ, η₁, η₂) balance of the stage-two generator loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub eta_pixel: f64,
    pub eta_feature: f64,
}

impl LossWeights {
    pub const REGION1: LossWeights = LossWeights::new(100.0, 0.005, 0.005);
    pub const REGION2: LossWeights = LossWeights::new(30.0, 0.005, 0.005);
    pub const REGION3: LossWeights = LossWeights::new(10.0, 0.125, 0.125);

    pub const fn new(lambda: f64, eta_pixel: f64, eta_feature: f64) -> Self {
        LossWeights {
            lambda,
            eta_pixel,
            eta_feature,
        }
    }

    /// Preset tuned for one of the three RMSE regions.
    pub fn for_region(region: u8) -> Result<Self> {
        match region {
            1 => Ok(Self::REGION1),
            2 => Ok(Self::REGION2),
            3 => Ok(Self::REGION3),
            r => Err(Error::config(format!("no loss preset for region {r}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.eta_pixel, self.eta_feature];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and nonnegative, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::REGION3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharbonnierParams {
    pub epsilon: f64,
}

impl CharbonnierParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!(
                "Charbonnier epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(CharbonnierParams { epsilon })
    }
}

impl Default for CharbonnierParams {
    fn default() -> Self {
        CharbonnierParams { epsilon: 1e-3 }
    }
}

/// Mean of `sqrt((hr − sr)² + ε²)` over every element.
pub fn charbonnier_loss(tape: &mut Tape, sr: Var, hr: Var, params: CharbonnierParams) -> Result<Var> {
    tape.charbonnier(hr, sr, params.epsilon)
}

pub fn l1_loss(tape: &mut Tape, sr: Var, hr: Var) -> Result<Var> {
    tape.l1(sr, hr)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualDistance {
    /// Mean squared difference of feature maps.
    #[default]
    Squared,
    /// Mean absolute difference of feature maps.
    Absolute,
}

/// Distance between extractor responses to `sr` and `hr`. The `hr` branch is
/// detached so only `sr` receives gradient.
pub fn perceptual_loss(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    sr: Var,
    hr: Var,
    distance: PerceptualDistance,
) -> Result<Var> {
    if tape.shape(sr) != tape.shape(hr) {
        return Err(Error::dimension(format!(
            "perceptual loss needs equal shapes, got {} and {}",
            tape.shape(sr),
            tape.shape(hr)
        )));
    }
    let hr = tape.detach(hr)?;
    let fs = extractor.forward(tape, sr)?;
    let fh = extractor.forward(tape, hr)?;
    feature_distance(tape, fs, fh, distance)
}

/// Distance between two feature maps of equal shape.
pub fn feature_distance(tape: &mut Tape, fs: Var, fh: Var, distance: PerceptualDistance) -> Result<Var> {
    match distance {
        PerceptualDistance::Squared => tape.mse(fs, fh),
        PerceptualDistance::Absolute => tape.l1(fs, fh),
    }
}

fn mean_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let l = tape.log_clamped(p, LOG_FLOOR)?;
    tape.mean_all(l)
}

/// `−E[log(1 − C(real, fake))] − E[log C(fake, real)]`.
pub fn adv_loss_generator(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let c_real = relativistic_criterion(tape, real_scores, fake_scores)?;
    let c_fake = relativistic_criterion(tape, fake_scores, real_scores)?;
    let not_real = tape.one_minus(c_real)?;
    let a = mean_log(tape, not_real)?;
    let b = mean_log(tape, c_fake)?;
    let s = tape.add(a, b)?;
    tape.scale(s, -1.0)
}

/// `−E[log C(real, fake)] − E[log(1 − C(fake, real))]`.
pub fn adv_loss_discriminator(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let c_real = relativistic_criterion(tape, real_scores, fake_scores)?;
    let c_fake = relativistic_criterion(tape, fake_scores, real_scores)?;
    let not_fake = tape.one_minus(c_fake)?;
    let a = mean_log(tape, c_real)?;
    let b = mean_log(tape, not_fake)?;
    let s = tape.add(a, b)?;
    tape.scale(s, -1.0)
}

/// Scalar values of each generator loss term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub adv_pixel: f64,
    pub adv_feature: f64,
}

/// Component terms of the stage-two generator loss.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub perceptual: Var,
    pub l1: Var,
    pub adv_pixel: Option<Var>,
    pub adv_feature: Option<Var>,
}

/// Weighted total. Terms whose weight is exactly zero are left out of the
/// graph entirely, so they contribute neither value nor gradient.
pub fn total_generator_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    terms: &GeneratorTerms,
) -> Result<(Var, LossValues)> {
    let value = |tape: &Tape, v: Option<Var>| -> Result<f64> {
        v.map_or(Ok(0.0), |v| tape.value(v).item())
    };
    let mut total = terms.perceptual;
    for (w, term) in [
        (weights.lambda, Some(terms.l1)),
        (weights.eta_pixel, terms.adv_pixel),
        (weights.eta_feature, terms.adv_feature),
    ] {
        if w == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| {
            Error::contract("a loss term with nonzero weight was not computed")
        })?;
        let scaled = tape.scale(term, w)?;
        total = tape.add(total, scaled)?;
    }
    let values = LossValues {
        total: tape.value(total).item()?,
        perceptual: value(tape, Some(terms.perceptual))?,
        l1: value(tape, Some(terms.l1))?,
        adv_pixel: value(tape, terms.adv_pixel)?,
        adv_feature: value(tape, terms.adv_feature)?,
    };
    Ok((total, values))
}

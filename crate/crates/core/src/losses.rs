//! Training objectives: least-squares adversarial losses, L1
//! reconstruction, soft Dice, cross-entropy and their weighted sum.
//!
//! Every loss is recorded on an autograd graph; the `*_value` helpers
//! evaluate the same graph code on constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub seg: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            seg: 0.1,
            cls: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.rec, self.seg, self.cls]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// How the two expectation terms of the discriminator loss combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DLossMode {
    /// `½(real + fake)`, equilibrium 0.25.
    #[default]
    MeanOfTerms,
    /// `real + fake`, equilibrium 0.5.
    SumOfTerms,
}

/// `mean((D(fake) − 1)²)`.
pub fn adv_g<T: Scalar>(g: &mut Graph<T>, scores_fake: Var) -> Var {
    g.mean_squared_to(scores_fake, 1.0)
}

pub fn adv_d<T: Scalar>(g: &mut Graph<T>, scores_real: Var, scores_fake: Var, mode: DLossMode) -> Result<Var> {
    let real = g.mean_squared_to(scores_real, 1.0);
    let fake = g.mean_squared_to(scores_fake, 0.0);
    let w = match mode {
        DLossMode::MeanOfTerms => 0.5,
        DLossMode::SumOfTerms => 1.0,
    };
    g.weighted_sum(&[(real, w), (fake, w)])
}

/// Mean absolute difference over every synthesized channel and voxel.
pub fn recon<T: Scalar>(g: &mut Graph<T>, fake: Var, real: Var) -> Result<Var> {
    g.mean_abs_diff(fake, real)
}

/// `1 − 2Σ s·ŝ / (Σ s² + Σ ŝ² + ε)`.
pub fn dice<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.dice_loss(pred, target, DICE_EPS)
}

/// `−ln max(p̂[class], 1e-12)`.
pub fn cls<T: Scalar>(g: &mut Graph<T>, probs: Var, class: usize) -> Result<Var> {
    g.neg_log(probs, class, PROB_FLOOR)
}

/// Graph handles of the generator objective's terms.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub adv_g: Var,
    pub rec: Var,
    pub seg: Option<Var>,
    pub cls: Option<Var>,
}

/// `adv_G + λ_rec·rec + λ_seg·seg + λ_cls·cls`, refusing non-finite terms.
/// Absent terms contribute nothing.
pub fn full_objective_graph<T: Scalar>(g: &mut Graph<T>, t: ObjectiveTerms, w: &LossWeights) -> Result<Var> {
    let mut terms = vec![(t.adv_g, 1.0, "L_adv_G"), (t.rec, w.rec, "L_rec")];
    if let Some(s) = t.seg {
        terms.push((s, w.seg, "L_seg"));
    }
    if let Some(c) = t.cls {
        terms.push((c, w.cls, "L_cls"));
    }
    for &(v, _, name) in &terms {
        if !g.value(v).is_finite() {
            return Err(Error::Numeric { term: name.into() });
        }
    }
    let weighted: Vec<(Var, f64)> = terms.iter().map(|&(v, w, _)| (v, w)).collect();
    g.weighted_sum(&weighted)
}

/// Scalar values of the generator objective's terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_g: f64,
    pub rec: f64,
    pub seg: f64,
    pub cls: f64,
}

pub fn full_objective(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (v, name) in [
        (parts.adv_g, "L_adv_G"),
        (parts.rec, "L_rec"),
        (parts.seg, "L_seg"),
        (parts.cls, "L_cls"),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric { term: name.into() });
        }
    }
    Ok(parts.adv_g + w.rec * parts.rec + w.seg * parts.seg + w.cls * parts.cls)
}

fn constant(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::from_vec(shape, data.to_vec())?))
}

pub fn adv_g_value(scores_fake: &[f64]) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(Tensor::from_vec(&[scores_fake.len()], scores_fake.to_vec()).expect("1-D"));
    let l = adv_g(&mut g, s);
    g.value(l).item()
}

pub fn adv_d_value(scores_real: &[f64], scores_fake: &[f64], mode: DLossMode) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(Tensor::from_vec(&[scores_real.len()], scores_real.to_vec()).expect("1-D"));
    let f = g.constant(Tensor::from_vec(&[scores_fake.len()], scores_fake.to_vec()).expect("1-D"));
    let l = adv_d(&mut g, r, f, mode).expect("scalar terms");
    g.value(l).item()
}

pub fn recon_value(fake: &[f64], real: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = constant(&mut g, &[fake.len()], fake)?;
    let b = constant(&mut g, &[real.len()], real)?;
    let l = recon(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn dice_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = constant(&mut g, &[pred.len()], pred)?;
    let s = constant(&mut g, &[target.len()], target)?;
    let l = dice(&mut g, p, s)?;
    Ok(g.value(l).item())
}

pub fn cls_value(probs: &[f64], class: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = constant(&mut g, &[probs.len()], probs)?;
    let l = cls(&mut g, p, class)?;
    Ok(g.value(l).item())
}

/// One line of `losses.jsonl`. Terms not computed in a stage are null.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub iter: u64,
    #[serde(rename = "L_adv_G")]
    pub adv_g: Option<f64>,
    #[serde(rename = "L_adv_D")]
    pub adv_d: Option<f64>,
    #[serde(rename = "L_rec")]
    pub rec: Option<f64>,
    #[serde(rename = "L_seg")]
    pub seg: Option<f64>,
    #[serde(rename = "L_cls")]
    pub cls: Option<f64>,
    #[serde(rename = "L_full")]
    pub full: Option<f64>,
}

//! Lesion-level features: masked average pooling of the segmenter's
//! low-level feature map under the tumor probability, concatenated over
//! phases.

use log::warn;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{SegOutput, Segmenter};
use crate::tensor::{Scalar, Tensor};
use crate::volumes::{PhaseSet, SegMap, Volume, LABEL_TUMOR};

/// Denominator guard of the pooling; an all-zero mask yields zeros.
pub const POOL_EPS: f64 = 1e-8;

/// Which tumor map weights the pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Soft tumor probability predicted by the segmenter.
    #[default]
    Predicted,
    /// Binary ground-truth tumor mask.
    Manual,
}

/// `f[k] = Σ_x F[k,x]·s[x] / (Σ_x s[x] + ε)` for a `[K, D, H, W]` feature
/// map and a mask over the same grid.
pub fn masked_average_pool<T: Scalar>(features: &Tensor<T>, mask: &[T]) -> Result<Vec<T>> {
    if features.shape().len() != 4 || features.inner_len() != mask.len() {
        return Err(Error::Shape(format!(
            "features {:?} vs mask of {} voxels",
            features.shape(),
            mask.len()
        )));
    }
    warn_if_empty(mask);
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let m = g.constant(Tensor::from_vec(&[mask.len()], mask.to_vec())?);
    let out = g.masked_avg_pool(f, m, POOL_EPS)?;
    Ok(g.value(out).data().to_vec())
}

fn warn_if_empty<T: Scalar>(mask: &[T]) {
    if mask.iter().all(|v| v.is_zero()) {
        warn!("empty tumor mask; lesion feature is the zero vector");
    }
}

/// Records the pooling of a segmenter output on a graph. With `manual`,
/// the given constant mask replaces the predicted tumor channel.
pub fn pool_on_graph<T: Scalar>(g: &mut Graph<T>, out: SegOutput, manual: Option<Var>) -> Result<Var> {
    let mask = match manual {
        Some(m) => m,
        None => g.slice(out.probs, LABEL_TUMOR as usize, 1)?,
    };
    warn_if_empty(g.value(mask).data());
    g.masked_avg_pool(out.features, mask, POOL_EPS)
}

/// Binary tumor mask of a ground-truth segmentation.
pub fn manual_mask(gt: &SegMap) -> Vec<f32> {
    gt.class_mask(LABEL_TUMOR as usize)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect()
}

/// K-vector of one phase volume.
pub fn phase_features(seg: &Segmenter, v: &Volume, manual: Option<&SegMap>) -> Result<Vec<f32>> {
    let (pred, feats) = seg.segment(v)?;
    let mask = match manual {
        Some(gt) => {
            if gt.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "manual mask {:?} vs volume {:?}",
                    gt.shape(),
                    v.shape()
                )));
            }
            manual_mask(gt)
        }
        None => pred.tumor().to_vec(),
    };
    masked_average_pool(&feats, &mask)
}

/// Phase-ordered concatenation of the per-phase lesion features (`N·K`).
pub fn assemble_lesion_features(ps: &PhaseSet, seg: &Segmenter, manual: Option<&SegMap>) -> Result<Vec<f32>> {
    if !ps.is_complete() {
        return Err(Error::Argument(format!(
            "lesion features need a complete phase set, missing {:?}",
            ps.missing()
        )));
    }
    let mut out = Vec::with_capacity(ps.n_total() * seg.arch.feature_channels());
    for v in ps.ordered()? {
        out.extend(phase_features(seg, v, manual)?);
    }
    Ok(out)
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::Init;
use super::*;
use crate::volumes::{SegMap, Volume, LABEL_TUMOR};

/// 3D U-Net segmenter with transposed-convolution upsampling and a softmax
/// head over background, kidney and tumor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterArch {
    pub n_classes: usize,
    pub width: usize,
    pub levels: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

/// Graph handles for the class probabilities `[C, D, H, W]` and the
/// low-level feature map `[K, D, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    pub probs: Var,
    pub features: Var,
}

impl SegmenterArch {
    pub fn new(width: usize, levels: usize) -> Self {
        SegmenterArch {
            n_classes: 3,
            width,
            levels,
            leaky_slope: LEAKY_SLOPE,
            norm_eps: NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_arch(self.width, self.levels, self.leaky_slope, self.norm_eps)?;
        if self.n_classes <= LABEL_TUMOR as usize {
            return Err(Error::Config(
                "segmenter needs background, kidney and tumor classes".into(),
            ));
        }
        Ok(())
    }

    /// `K`, the channel count of the feature map.
    pub fn feature_channels(&self) -> usize {
        self.width
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut init = Init { rng, gain: 1.0 };
        add_encoder(&mut ps, &mut init, 1, self.width, self.levels);
        for l in (0..self.levels - 1).rev() {
            let (c, c_up) = (level_width(self.width, l), level_width(self.width, l + 1));
            ps.insert(format!("up{l}.weight"), init.he(&[c_up, c, 2, 2, 2], c_up));
            ps.insert(format!("up{l}.bias"), Tensor::zeros(&[c]));
            add_conv_block(&mut ps, &mut init, &format!("dec{l}.conv"), 2 * c, c, 3);
        }
        add_head(&mut ps, &mut init, "head", self.width, self.n_classes);
        ps
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<SegOutput> {
        check_volume_input(g, x, 1, self.size_multiple(), "segmenter")?;
        let (slope, eps) = (self.leaky_slope, self.norm_eps);
        let skips = encoder(g, p, x, self.levels, slope, eps)?;
        let mut h = *skips.last().expect("at least one level");
        for l in (0..self.levels - 1).rev() {
            let up = g.conv_transpose3d(h, p.var(&format!("up{l}.weight")), Some(p.var(&format!("up{l}.bias"))))?;
            let cat = g.concat(&[up, skips[l]])?;
            h = conv_block(g, p, &format!("dec{l}.conv"), cat, 1, 1, slope, eps)?;
        }
        let logits = head(g, p, "head", h)?;
        Ok(SegOutput {
            probs: g.softmax(logits),
            features: skips[0],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub arch: SegmenterArch,
    pub params: ParamSet,
}

impl Segmenter {
    pub fn init<R: Rng>(arch: SegmenterArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch.init_params(rng);
        Ok(Segmenter { arch, params })
    }

    /// Inference pass returning the segmentation and the `[K, D, H, W]`
    /// feature map.
    pub fn segment(&self, v: &Volume) -> Result<(SegMap, Tensor<f32>)> {
        let [d, h, w] = v.shape();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(&[1, d, h, w], v.data().to_vec())?);
        let out = self.arch.forward(&mut g, &p, x)?;
        let seg = SegMap::new(
            v.shape(),
            self.arch.n_classes,
            LABEL_TUMOR as usize,
            g.value(out.probs).data().to_vec(),
        )?;
        Ok((seg, g.value(out.features).clone()))
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::Init;
use super::*;
use crate::preprocess::GeneratorInput;

/// 3D U-Net generator with trilinear upsampling in the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    /// `N`, the number of phases of a complete study.
    pub n_phases: usize,
    /// `N_m`, the number of synthesized channels.
    pub n_out: usize,
    pub width: usize,
    pub levels: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl GeneratorArch {
    pub fn new(n_phases: usize, n_out: usize, width: usize, levels: usize) -> Self {
        GeneratorArch {
            n_phases,
            n_out,
            width,
            levels,
            leaky_slope: LEAKY_SLOPE,
            norm_eps: NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_arch(self.width, self.levels, self.leaky_slope, self.norm_eps)?;
        if self.n_phases < 2 || self.n_out == 0 || self.n_out >= self.n_phases {
            return Err(Error::Config(format!(
                "generator with {} phases cannot synthesize {} channels",
                self.n_phases, self.n_out
            )));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        2 * self.n_phases
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut init = Init { rng, gain: 1.0 };
        add_encoder(&mut ps, &mut init, self.in_channels(), self.width, self.levels);
        for l in (0..self.levels - 1).rev() {
            let (c, c_up) = (level_width(self.width, l), level_width(self.width, l + 1));
            add_conv_block(&mut ps, &mut init, &format!("dec{l}.conv"), c_up + c, c, 3);
        }
        add_head(&mut ps, &mut init, "head", self.width, self.n_out);
        ps
    }

    /// `[2N, D, H, W]` input to `[N_m, D, H, W]` synthesized volumes.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        check_volume_input(g, x, self.in_channels(), self.size_multiple(), "generator")?;
        let (slope, eps) = (self.leaky_slope, self.norm_eps);
        let skips = encoder(g, p, x, self.levels, slope, eps)?;
        let mut h = *skips.last().expect("at least one level");
        for l in (0..self.levels - 1).rev() {
            let up = g.upsample2x(h)?;
            let cat = g.concat(&[up, skips[l]])?;
            h = conv_block(g, p, &format!("dec{l}.conv"), cat, 1, 1, slope, eps)?;
        }
        head(g, p, "head", h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub params: ParamSet,
}

impl Generator {
    pub fn init<R: Rng>(arch: GeneratorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch.init_params(rng);
        Ok(Generator { arch, params })
    }

    /// Inference pass returning `[N_m, D, H, W]`.
    pub fn synthesize(&self, input: &GeneratorInput) -> Result<Tensor<f32>> {
        if input.missing.len() != self.arch.n_out || input.n_phases != self.arch.n_phases {
            return Err(Error::Argument(format!(
                "generator synthesizes {} of {} phases, input misses {:?} of {}",
                self.arch.n_out, self.arch.n_phases, input.missing, input.n_phases
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input.to_tensor());
        let y = self.arch.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

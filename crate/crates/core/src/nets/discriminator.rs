use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::Init;
use super::*;

/// Fully convolutional patch discriminator: `4³` stride-2 blocks followed by
/// a `3³` projection to one realness score per cell. No terminal sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub in_channels: usize,
    pub width: usize,
    /// Number of stride-2 layers.
    pub layers: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl DiscriminatorArch {
    pub fn new(width: usize, layers: usize) -> Self {
        DiscriminatorArch {
            in_channels: 1,
            width,
            layers,
            leaky_slope: LEAKY_SLOPE,
            norm_eps: NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_arch(self.width, self.layers, self.leaky_slope, self.norm_eps)?;
        if self.in_channels == 0 {
            return Err(Error::Config("discriminator needs input channels".into()));
        }
        Ok(())
    }

    /// Score-grid shape for a given input shape.
    pub fn output_shape(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|n| n >> self.layers)
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut init = Init { rng, gain: 1.0 };
        let mut cin = self.in_channels;
        for l in 0..self.layers {
            let cout = level_width(self.width, l);
            add_conv_block(&mut ps, &mut init, &format!("layer{l}"), cin, cout, 4);
            cin = cout;
        }
        ps.insert("score.weight", init.he(&[1, cin, 3, 3, 3], cin * 27));
        ps.insert("score.bias", Tensor::zeros(&[1]));
        ps
    }

    /// `[C, D, H, W]` volume to a `[1, D/2^l, H/2^l, W/2^l]` score grid.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let min = 1usize << self.layers;
        if s.len() != 4 || s[0] != self.in_channels || s[1..].iter().any(|&d| d < min) {
            return Err(Error::Shape(format!(
                "discriminator expects [{}, D, H, W] with every dim >= {min}, got {s:?}",
                self.in_channels
            )));
        }
        let mut h = x;
        for l in 0..self.layers {
            h = conv_block(g, p, &format!("layer{l}"), h, 2, 1, self.leaky_slope, self.norm_eps)?;
        }
        g.conv3d(h, p.var("score.weight"), Some(p.var("score.bias")), 1, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn init<R: Rng>(arch: DiscriminatorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = arch.init_params(rng);
        Ok(Discriminator { arch, params })
    }

    pub fn score(&self, v: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(v.clone());
        let y = self.arch.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

//! The four networks: generator, patch discriminator, segmenter and subtype
//! classifier.
//!
//! Each network is described by a serializable architecture struct whose
//! `forward` records the computation on an autograd [`Graph`] of any scalar
//! type, given parameters bound with [`ParamSet::bind`]. The owning structs
//! keep `f32` parameters and offer inference helpers.

mod classifier;
mod discriminator;
mod generator;
pub mod params;
mod segmenter;

pub use classifier::{Classifier, ClassifierArch};
pub use discriminator::{Discriminator, DiscriminatorArch};
pub use generator::{Generator, GeneratorArch};
pub use params::{Bound, ParamSet};
pub use segmenter::{SegOutput, Segmenter, SegmenterArch};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use params::Init;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// Adds weights for a bias-free `k³` convolution followed by affine instance
/// normalization.
fn add_conv_block<R: Rng>(ps: &mut ParamSet, init: &mut Init<'_, R>, prefix: &str, cin: usize, cout: usize, k: usize) {
    ps.insert(
        format!("{prefix}.weight"),
        init.he(&[cout, cin, k, k, k], cin * k * k * k),
    );
    ps.insert(format!("{prefix}.gamma"), Tensor::full(&[cout], 1.0));
    ps.insert(format!("{prefix}.beta"), Tensor::zeros(&[cout]));
}

/// Convolution, instance normalization, LeakyReLU.
fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
    slope: f64,
    eps: f64,
) -> Result<Var> {
    let h = g.conv3d(x, p.var(&format!("{prefix}.weight")), None, stride, pad)?;
    let h = g.instance_norm(
        h,
        Some(p.var(&format!("{prefix}.gamma"))),
        Some(p.var(&format!("{prefix}.beta"))),
        eps,
    )?;
    Ok(g.leaky_relu(h, slope))
}

/// Adds a `1×1×1` projection with bias.
fn add_head<R: Rng>(ps: &mut ParamSet, init: &mut Init<'_, R>, prefix: &str, cin: usize, cout: usize) {
    ps.insert(format!("{prefix}.weight"), init.he(&[cout, cin, 1, 1, 1], cin));
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
}

fn head<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    g.conv3d(
        x,
        p.var(&format!("{prefix}.weight")),
        Some(p.var(&format!("{prefix}.bias"))),
        1,
        0,
    )
}

fn level_width(width: usize, level: usize) -> usize {
    width << level
}

/// Encoder shared by the generator and the segmenter: two blocks at full
/// resolution, then per level a stride-2 block and one more block.
fn add_encoder<R: Rng>(ps: &mut ParamSet, init: &mut Init<'_, R>, cin: usize, width: usize, levels: usize) {
    add_conv_block(ps, init, "enc0.conv1", cin, width, 3);
    add_conv_block(ps, init, "enc0.conv2", width, width, 3);
    for l in 1..levels {
        let (c0, c1) = (level_width(width, l - 1), level_width(width, l));
        add_conv_block(ps, init, &format!("down{l}"), c0, c1, 3);
        add_conv_block(ps, init, &format!("enc{l}.conv"), c1, c1, 3);
    }
}

/// Returns the activations at every level, finest first.
fn encoder<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, levels: usize, slope: f64, eps: f64) -> Result<Vec<Var>> {
    let mut h = conv_block(g, p, "enc0.conv1", x, 1, 1, slope, eps)?;
    h = conv_block(g, p, "enc0.conv2", h, 1, 1, slope, eps)?;
    let mut skips = vec![h];
    for l in 1..levels {
        h = conv_block(g, p, &format!("down{l}"), h, 2, 1, slope, eps)?;
        h = conv_block(g, p, &format!("enc{l}.conv"), h, 1, 1, slope, eps)?;
        skips.push(h);
    }
    Ok(skips)
}

fn check_volume_input<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    channels: usize,
    multiple: usize,
    what: &str,
) -> Result<[usize; 3]> {
    let s = g.shape(x);
    if s.len() != 4 || s[0] != channels {
        return Err(Error::Shape(format!("{what} expects [{channels}, D, H, W], got {s:?}")));
    }
    let dims = [s[1], s[2], s[3]];
    if dims.iter().any(|&d| d == 0 || d % multiple != 0) {
        return Err(Error::Shape(format!(
            "{what} spatial dims {dims:?} must be positive multiples of {multiple}"
        )));
    }
    Ok(dims)
}

fn check_arch(width: usize, levels: usize, slope: f64, eps: f64) -> Result<()> {
    if width == 0 || levels == 0 || levels > 6 {
        return Err(Error::Config(format!("width {width} / levels {levels} out of range")));
    }
    if !(0.0..1.0).contains(&slope) || !(eps > 0.0) {
        return Err(Error::Config(format!("leaky slope {slope} / norm eps {eps}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;

//! Training-time augmentation: in-plane rotation, isotropic scaling, elastic
//! deformation, axis flips and additive Gaussian noise.
//!
//! Geometric transforms are composed into one backward map from output to
//! source voxel coordinates. The image is sampled trilinearly, the
//! segmentation by nearest neighbor, both with edge clamping.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volumes::{SegMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub scale: bool,
    pub elastic: bool,
    pub flip: bool,
    pub gaussian_noise: bool,
    /// Chance that each enabled transform fires for a sample.
    pub probability: f64,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    /// Displacement std of the elastic control points, in voxels.
    pub elastic_sigma: f64,
    pub elastic_grid: usize,
    pub noise_std_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            scale: true,
            elastic: true,
            flip: true,
            gaussian_noise: true,
            probability: 0.3,
            max_rotation_deg: 15.0,
            scale_range: [0.85, 1.15],
            elastic_sigma: 1.5,
            elastic_grid: 4,
            noise_std_max: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotate: false,
            scale: false,
            elastic: false,
            flip: false,
            gaussian_noise: false,
            ..Default::default()
        }
    }
}

/// Backward coordinate map shared by image and mask.
#[derive(Clone, Debug, Default)]
pub struct Warp {
    /// In-plane (height, width) rotation in radians about the volume center.
    pub angle: f64,
    pub scale: f64,
    pub flip: [bool; 3],
    /// Per-voxel displacement `[dz, dy, dx]` in voxels.
    pub displacement: Option<Vec<[f32; 3]>>,
}

impl Warp {
    pub fn identity() -> Self {
        Warp {
            scale: 1.0,
            ..Default::default()
        }
    }

    fn is_identity(&self) -> bool {
        self.angle == 0.0 && self.scale == 1.0 && self.flip == [false; 3] && self.displacement.is_none()
    }

    fn source(&self, shape: [usize; 3], z: usize, y: usize, x: usize) -> [f64; 3] {
        let c = shape.map(|n| (n as f64 - 1.0) / 2.0);
        let (dz, dy, dx) = (z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]);
        let (s, co) = self.angle.sin_cos();
        let inv = 1.0 / self.scale;
        let mut p = [
            c[0] + dz * inv,
            c[1] + (co * dy + s * dx) * inv,
            c[2] + (-s * dy + co * dx) * inv,
        ];
        if let Some(d) = &self.displacement {
            let v = d[(z * shape[1] + y) * shape[2] + x];
            for a in 0..3 {
                p[a] += v[a] as f64;
            }
        }
        for a in 0..3 {
            if self.flip[a] {
                p[a] = (shape[a] - 1) as f64 - p[a];
            }
        }
        p
    }

    pub fn apply_image(&self, shape: [usize; 3], data: &[f32]) -> Vec<f32> {
        if self.is_identity() {
            return data.to_vec();
        }
        let mut out = Vec::with_capacity(data.len());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    out.push(trilinear(shape, data, self.source(shape, z, y, x)));
                }
            }
        }
        out
    }

    /// Nearest-neighbor resampling of every channel of `[C, D, H, W]` data.
    pub fn apply_nearest(&self, shape: [usize; 3], channels: usize, data: &[f32]) -> Vec<f32> {
        if self.is_identity() {
            return data.to_vec();
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; channels * n];
        let mut i = 0;
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let p = self.source(shape, z, y, x);
                    let q: [usize; 3] =
                        std::array::from_fn(|a| p[a].round().clamp(0.0, (shape[a] - 1) as f64) as usize);
                    let src = (q[0] * shape[1] + q[1]) * shape[2] + q[2];
                    for c in 0..channels {
                        out[c * n + i] = data[c * n + src];
                    }
                    i += 1;
                }
            }
        }
        out
    }
}

fn trilinear(shape: [usize; 3], data: &[f32], p: [f64; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0f32; 3];
    for a in 0..3 {
        let q = p[a].clamp(0.0, (shape[a] - 1) as f64);
        let f = q.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(shape[a] - 1);
        t[a] = (q - f) as f32;
    }
    let at = |z: usize, y: usize, x: usize| data[(z * shape[1] + y) * shape[2] + x];
    let lerp = |a: f32, b: f32, t: f32| if t == 0.0 { a } else { a + t * (b - a) };
    let c00 = lerp(at(i0[0], i0[1], i0[2]), at(i0[0], i0[1], i1[2]), t[2]);
    let c01 = lerp(at(i0[0], i1[1], i0[2]), at(i0[0], i1[1], i1[2]), t[2]);
    let c10 = lerp(at(i1[0], i0[1], i0[2]), at(i1[0], i0[1], i1[2]), t[2]);
    let c11 = lerp(at(i1[0], i1[1], i0[2]), at(i1[0], i1[1], i1[2]), t[2]);
    lerp(lerp(c00, c01, t[1]), lerp(c10, c11, t[1]), t[0])
}

/// Smooth random displacement: Gaussian control points on a coarse grid,
/// trilinearly interpolated to every voxel.
fn elastic_field<R: Rng>(shape: [usize; 3], grid: usize, sigma: f64, rng: &mut R) -> Vec<[f32; 3]> {
    let grid = grid.max(2);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let coarse: [Vec<f32>; 3] =
        std::array::from_fn(|_| (0..grid * grid * grid).map(|_| normal.sample(rng) as f32).collect());
    let mut out = Vec::with_capacity(shape.iter().product());
    let scale: [f64; 3] = std::array::from_fn(|a| (grid - 1) as f64 / (shape[a].max(2) - 1) as f64);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [z as f64 * scale[0], y as f64 * scale[1], x as f64 * scale[2]];
                out.push(std::array::from_fn(|a| trilinear([grid; 3], &coarse[a], p)));
            }
        }
    }
    out
}

/// Draws a random warp and noise level according to `cfg`.
pub fn sample_warp<R: Rng>(shape: [usize; 3], cfg: &AugmentConfig, rng: &mut R) -> (Warp, f64) {
    let mut w = Warp::identity();
    let fire = |on: bool, rng: &mut R| on && rng.random::<f64>() < cfg.probability;
    if fire(cfg.rotate, rng) {
        let m = cfg.max_rotation_deg.to_radians();
        w.angle = rng.random_range(-m..=m);
    }
    if fire(cfg.scale, rng) {
        w.scale = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    }
    if fire(cfg.elastic, rng) {
        w.displacement = Some(elastic_field(shape, cfg.elastic_grid, cfg.elastic_sigma, rng));
    }
    if cfg.flip {
        for a in 0..3 {
            w.flip[a] = rng.random::<f64>() < 0.5;
        }
    }
    let noise = if fire(cfg.gaussian_noise, rng) {
        rng.random_range(0.0..=cfg.noise_std_max)
    } else {
        0.0
    };
    (w, noise)
}

/// Applies one random transform to an image and its segmentation; noise
/// touches the image only.
pub fn augment<R: Rng>(v: &Volume, s: &SegMap, cfg: &AugmentConfig, rng: &mut R) -> Result<(Volume, SegMap)> {
    let (warp, noise) = sample_warp(v.shape(), cfg, rng);
    apply(v, s, &warp, noise, rng)
}

pub fn apply<R: Rng>(v: &Volume, s: &SegMap, warp: &Warp, noise: f64, rng: &mut R) -> Result<(Volume, SegMap)> {
    let shape = v.shape();
    let mut img = warp.apply_image(shape, v.data());
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("finite noise");
        for x in &mut img {
            *x += normal.sample(rng) as f32;
        }
    }
    let probs = warp.apply_nearest(shape, s.channels(), s.probs());
    Ok((
        v.with_data(img, v.unit())?,
        SegMap::new(shape, s.channels(), s.tumor_channel(), probs)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::IntensityUnit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(shape: [usize; 3]) -> (Volume, SegMap) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        let v = Volume::new(shape, [1.5, 1.5, 3.0], IntensityUnit::Normalized, data).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| (i % 7 % 3) as u8).collect();
        (v, SegMap::from_labels(shape, &labels).unwrap())
    }

    #[test]
    fn disabled_is_identity() {
        let (v, s) = sample([4, 6, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = augment(&v, &s, &AugmentConfig::none(), &mut rng).unwrap();
        assert_eq!(a, v);
        assert_eq!(b, s);
    }

    #[test]
    fn double_flip_is_identity() {
        let (v, s) = sample([4, 6, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in 0..3 {
            let mut w = Warp::identity();
            w.flip[a] = true;
            let (v1, s1) = apply(&v, &s, &w, 0.0, &mut rng).unwrap();
            assert_ne!(v1, v);
            let (v2, s2) = apply(&v1, &s1, &w, 0.0, &mut rng).unwrap();
            assert_eq!(v2, v);
            assert_eq!(s2, s);
        }
    }

    #[test]
    fn quarter_turn_moves_one_hot_voxel() {
        let shape = [1, 5, 5];
        let mut labels = vec![0u8; 25];
        // (y, x) = (0, 3); offsets from the center (2, 2) are (-2, +1)
        labels[3] = 2;
        let s = SegMap::from_labels(shape, &labels).unwrap();
        let v = Volume::filled(shape, [1.5, 1.5, 3.0], IntensityUnit::Normalized, 0.0).unwrap();
        let w = Warp {
            angle: std::f64::consts::FRAC_PI_2,
            ..Warp::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, r) = apply(&v, &s, &w, 0.0, &mut rng).unwrap();
        // output (dy, dx) samples source (dx, -dy): the voxel lands at (dy, dx) = (-1, -2)
        let out = r.labels();
        let hit: Vec<usize> = (0..25).filter(|&i| out[i] == 2).collect();
        assert_eq!(hit, vec![5]);
    }

    #[test]
    fn noise_leaves_mask_alone() {
        let (v, s) = sample([3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = apply(&v, &s, &Warp::identity(), 0.1, &mut rng).unwrap();
        assert_ne!(a, v);
        assert_eq!(b, s);
    }

    #[test]
    fn random_augmentation_keeps_labels_valid() {
        let (v, s) = sample([8, 10, 12]);
        let cfg = AugmentConfig {
            probability: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = augment(&v, &s, &cfg, &mut rng).unwrap();
        assert!(a.data().iter().all(|x| x.is_finite()));
        assert!(b.probs().iter().all(|&p| p == 0.0 || p == 1.0));
    }
}

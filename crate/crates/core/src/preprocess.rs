//! Resampling, intensity windowing, phase dropping and assembly of the
//! generator's masked input.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volumes::{CaseRecord, IntensityUnit, PhaseSet, SegMap, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Voxel size in mm, `(x, y, z)`.
    pub target_spacing: [f64; 3],
    pub hu_window: [f32; 2],
    pub norm_mean: f32,
    pub norm_std: f32,
    /// `(depth, height, width)`.
    pub crop_shape: [usize; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: [1.5, 1.5, 3.0],
            hu_window: [-40.0, 350.0],
            norm_mean: 100.0,
            norm_std: 80.0,
            crop_shape: [32, 40, 48],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hu_window[0] >= self.hu_window[1] {
            return Err(Error::Config(format!("hu_window {:?} is empty", self.hu_window)));
        }
        if !(self.norm_std > 0.0) {
            return Err(Error::Config("norm_std must be > 0".into()));
        }
        if self.target_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("target_spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Spacing entry for array axis `axis` (depth, height, width) given
/// `(x, y, z)` spacing.
fn axis_spacing(spacing: [f64; 3], axis: usize) -> f64 {
    spacing[2 - axis]
}

/// Linear resampling of one axis of a `[outer, n, inner]` view onto `m`
/// samples at source positions `j·step`, clamped to the edge.
fn resample_axis(src: &[f32], outer: usize, n: usize, inner: usize, m: usize, step: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; outer * m * inner];
    for j in 0..m {
        let pos = (j as f64 * step).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let t = (pos - i0 as f64) as f32;
        for o in 0..outer {
            let s0 = &src[(o * n + i0) * inner..][..inner];
            let s1 = &src[(o * n + i1) * inner..][..inner];
            let d = &mut out[(o * m + j) * inner..][..inner];
            for k in 0..inner {
                d[k] = if t == 0.0 { s0[k] } else { s0[k] + t * (s1[k] - s0[k]) };
            }
        }
    }
    out
}

/// Trilinear resampling onto `target_spacing` with clamp-to-edge
/// boundaries. Output voxel `j` sits at physical offset `j·target` from the
/// first input voxel center.
pub fn resample(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("target spacing {target_spacing:?}")));
    }
    let shape = v.shape();
    let mut out_shape = [0usize; 3];
    for axis in 0..3 {
        let n = shape[axis] as f64 * axis_spacing(v.spacing(), axis) / axis_spacing(target_spacing, axis);
        out_shape[axis] = n.round() as usize;
        if out_shape[axis] < 1 {
            return Err(Error::Config(format!(
                "resampling {shape:?} at {:?} to {target_spacing:?} leaves an empty axis",
                v.spacing()
            )));
        }
    }
    let step = |axis: usize| axis_spacing(target_spacing, axis) / axis_spacing(v.spacing(), axis);
    let [d, h, w] = shape;
    let [od, oh, ow] = out_shape;
    let t = resample_axis(v.data(), d * h, w, 1, ow, step(2));
    let t = resample_axis(&t, d, h, ow, oh, step(1));
    let t = resample_axis(&t, 1, d, oh * ow, od, step(0));
    Volume::new(out_shape, target_spacing, v.unit(), t)
}

/// Clamps HU intensities to the window and standardizes them.
pub fn clip_normalize(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    if v.unit() != IntensityUnit::Hu {
        return Err(Error::Argument("clip_normalize expects a volume in HU".into()));
    }
    let [lo, hi] = cfg.hu_window;
    let data = v
        .data()
        .iter()
        .map(|&x| (x.clamp(lo, hi) - cfg.norm_mean) / cfg.norm_std)
        .collect();
    v.with_data(data, IntensityUnit::Normalized)
}

/// Mean and standard deviation of window-clipped HU values over a set of
/// training volumes.
pub fn fit_normalization<'a>(volumes: impl IntoIterator<Item = &'a Volume>, hu_window: [f32; 2]) -> Result<(f32, f32)> {
    let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
    for v in volumes {
        for &x in v.data() {
            let c = x.clamp(hu_window[0], hu_window[1]) as f64;
            n += 1;
            s += c;
            s2 += c * c;
        }
    }
    if n == 0 {
        return Err(Error::Argument("no voxels to fit normalization".into()));
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    if std <= 0.0 {
        return Err(Error::Argument("training intensities have zero variance".into()));
    }
    Ok((mean as f32, std as f32))
}

/// Center crop or zero pad to `shape`.
pub fn center_crop_or_pad(v: &Volume, shape: [usize; 3]) -> Result<Volume> {
    let src = v.shape();
    let mut data = vec![0.0f32; shape.iter().product()];
    // offset of the source origin in destination coordinates
    let off: [isize; 3] = std::array::from_fn(|i| (shape[i] as isize - src[i] as isize) / 2);
    for z in 0..shape[0] {
        let sz = z as isize - off[0];
        if sz < 0 || sz >= src[0] as isize {
            continue;
        }
        for y in 0..shape[1] {
            let sy = y as isize - off[1];
            if sy < 0 || sy >= src[1] as isize {
                continue;
            }
            for x in 0..shape[2] {
                let sx = x as isize - off[2];
                if sx < 0 || sx >= src[2] as isize {
                    continue;
                }
                data[(z * shape[1] + y) * shape[2] + x] = v.get(sz as usize, sy as usize, sx as usize);
            }
        }
    }
    Volume::new(shape, v.spacing(), v.unit(), data)
}

/// Nearest-neighbour resampling of a label grid onto `out` voxels.
fn resample_labels(labels: &[u8], shape: [usize; 3], out: [usize; 3]) -> Vec<u8> {
    let pick = |j: usize, n: usize, m: usize| (((j as f64 + 0.5) * n as f64 / m as f64) as usize).min(n - 1);
    let mut data = Vec::with_capacity(out.iter().product());
    for z in 0..out[0] {
        let sz = pick(z, shape[0], out[0]);
        for y in 0..out[1] {
            let sy = pick(y, shape[1], out[1]);
            for x in 0..out[2] {
                let sx = pick(x, shape[2], out[2]);
                data.push(labels[(sz * shape[1] + sy) * shape[2] + sx]);
            }
        }
    }
    data
}

/// Brings a case onto the model grid. Volumes off the target spacing are
/// resampled, HU volumes are windowed and standardized, and everything is
/// center-cropped or padded to `crop_shape`. The reference segmentation
/// follows with nearest-neighbour sampling.
pub fn prepare_case(case: &CaseRecord, cfg: &PreprocessConfig) -> Result<CaseRecord> {
    cfg.validate()?;
    let spacing = case.phase_set.spacing();
    let mut phases = std::collections::BTreeMap::new();
    for (i, v) in case.phase_set.present() {
        let mut v = if spacing == cfg.target_spacing {
            v.clone()
        } else {
            resample(v, cfg.target_spacing)?
        };
        if v.unit() == IntensityUnit::Hu {
            v = clip_normalize(&v, cfg)?;
        }
        if v.shape() != cfg.crop_shape {
            v = center_crop_or_pad(&v, cfg.crop_shape)?;
        }
        phases.insert(i, v);
    }
    let grid = phases
        .values()
        .next()
        .map(|v| v.shape())
        .expect("a case has at least one phase");
    let resampled_shape = if spacing == cfg.target_spacing {
        case.gt_seg.shape()
    } else {
        let probe = Volume::filled(case.gt_seg.shape(), spacing, IntensityUnit::Normalized, 0.0)?;
        resample(&probe, cfg.target_spacing)?.shape()
    };
    let labels = resample_labels(&case.gt_seg.labels(), case.gt_seg.shape(), resampled_shape);
    let seg = if resampled_shape == grid {
        SegMap::from_labels(grid, &labels)?
    } else {
        let as_volume = Volume::new(
            resampled_shape,
            cfg.target_spacing,
            IntensityUnit::Normalized,
            labels.into_iter().map(f32::from).collect(),
        )?;
        let cropped = center_crop_or_pad(&as_volume, cfg.crop_shape)?;
        let labels: Vec<u8> = cropped.data().iter().map(|&v| v as u8).collect();
        SegMap::from_labels(grid, &labels)?
    };
    CaseRecord::new(
        case.id.clone(),
        PhaseSet::new(phases, case.phase_set.n_total())?,
        seg,
        case.subtype,
    )
}

/// Removes `missing` from a complete phase set, or one uniformly chosen
/// phase when `missing` is `None`.
pub fn drop_phases<R: Rng>(ps: &PhaseSet, missing: Option<&BTreeSet<usize>>, rng: &mut R) -> Result<PhaseSet> {
    if !ps.is_complete() {
        return Err(Error::Argument("drop_phases needs a complete phase set".into()));
    }
    let n = ps.n_total();
    let drop = match missing {
        Some(m) => m.clone(),
        None => {
            let all: Vec<usize> = (1..=n).collect();
            BTreeSet::from([*all.choose(rng).expect("at least one phase")])
        }
    };
    if drop.is_empty() || drop.len() > n - 1 {
        return Err(Error::Argument(format!(
            "must drop between 1 and {} phases, got {}",
            n - 1,
            drop.len()
        )));
    }
    if let Some(&bad) = drop.iter().find(|&&i| i == 0 || i > n) {
        return Err(Error::Argument(format!("phase {bad} outside 1..={n}")));
    }
    ps.without(&drop)
}

/// The `N` single-phase drops of a complete study, in phase order.
pub fn single_phase_drops(ps: &PhaseSet) -> Result<Vec<PhaseSet>> {
    let mut rng = rand::rngs::SmallRng::seed_from_u64(0);
    (1..=ps.n_total())
        .map(|i| drop_phases(ps, Some(&BTreeSet::from([i])), &mut rng))
        .collect()
}

/// Generator input: `N` image channels (missing phases zero filled)
/// followed by `N` mask channels (ones for missing phases).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInput {
    pub shape: [usize; 3],
    pub n_phases: usize,
    pub missing: Vec<usize>,
    pub channels: Vec<f32>,
}

impl GeneratorInput {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n: usize = self.shape.iter().product();
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn n_channels(&self) -> usize {
        2 * self.n_phases
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        Tensor::from_vec(
            &[self.n_channels(), d, h, w],
            self.channels.iter().map(|&v| T::from_f32(v).unwrap()).collect(),
        )
        .expect("generator input shape")
    }
}

pub fn assemble_generator_input(ps: &PhaseSet) -> Result<GeneratorInput> {
    if ps.is_complete() {
        return Err(Error::Argument(
            "generator input needs at least one missing phase".into(),
        ));
    }
    let n = ps.n_total();
    let shape = ps.shape();
    let vox: usize = shape.iter().product();
    let mut channels = vec![0.0f32; 2 * n * vox];
    for (i, v) in ps.present() {
        channels[(i - 1) * vox..i * vox].copy_from_slice(v.data());
    }
    for &m in ps.missing() {
        channels[(n + m - 1) * vox..(n + m) * vox].fill(1.0);
    }
    Ok(GeneratorInput {
        shape,
        n_phases: n,
        missing: ps.missing().iter().copied().collect(),
        channels,
    })
}

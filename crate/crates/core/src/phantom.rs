//! Synthetic multi-phase CT studies with analytic masks.
//!
//! Each case holds an ellipsoidal kidney with a spherical tumor inside it.
//! Intensities are piecewise constant per region and phase (background,
//! kidney curve, subtype curve) plus i.i.d. Gaussian noise, so region means,
//! missing-phase targets and subtype labels are all known in closed form.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{
    CaseRecord, IntensityUnit, PhaseSet, SegMap, Volume, DEFAULT_PHASES, LABEL_KIDNEY, LABEL_TUMOR, SUBTYPE_NAMES,
};

pub const N_SUBTYPES: usize = SUBTYPE_NAMES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// `(depth, height, width)` in voxels.
    pub volume_shape: [usize; 3],
    pub n_cases: usize,
    /// Mean tumor intensity per (subtype, phase), normalized units.
    pub subtype_curves: [[f32; DEFAULT_PHASES]; N_SUBTYPES],
    pub kidney_curve: [f32; DEFAULT_PHASES],
    pub background_level: f32,
    pub noise_sigma: f32,
    /// Tumor radius bounds in voxels.
    pub tumor_radius_range: [f32; 2],
    /// Kidney semi-axes in voxels, `(depth, height, width)`.
    pub kidney_semi_axes: [f32; 3],
    /// Voxel size in mm, `(x, y, z)`.
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            volume_shape: [32, 40, 48],
            n_cases: 50,
            // every tumor stays darker than the kidney in every phase
            subtype_curves: [
                [0.4, 1.9, 1.2, 0.6],  // ccRCC
                [0.4, 0.7, 1.0, 1.4],  // pRCC
                [0.4, 1.2, 1.6, 0.9],  // chRCC
                [-0.5, 0.9, 1.1, 0.5], // AML
                [0.4, 2.0, 2.2, 1.1],  // oncocytoma
            ],
            kidney_curve: [1.0, 2.5, 3.0, 2.0],
            background_level: -1.0,
            noise_sigma: 0.05,
            tumor_radius_range: [3.0, 6.0],
            kidney_semi_axes: [9.0, 12.0, 13.0],
            spacing: [1.5, 1.5, 3.0],
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.iter().any(|&n| n == 0) {
            return Err(Error::Config("volume_shape entries must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        let min_dist = self.min_curve_distance();
        if min_dist < 4.0 * self.noise_sigma || min_dist == 0.0 {
            return Err(Error::Config(format!(
                "subtype curves too close: min pairwise distance {min_dist} < 4·noise_sigma"
            )));
        }
        let [rmin, rmax] = self.tumor_radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::Config(format!(
                "bad tumor_radius_range {:?}",
                self.tumor_radius_range
            )));
        }
        let min_axis = self.kidney_semi_axes.iter().copied().fold(f32::INFINITY, f32::min);
        if rmax + 1.0 > min_axis {
            return Err(Error::Config(format!(
                "tumor radius {rmax} does not fit inside kidney semi-axes {:?}",
                self.kidney_semi_axes
            )));
        }
        for (a, &n) in self.kidney_semi_axes.iter().zip(&self.volume_shape) {
            if 2.0 * a + 3.0 > n as f32 {
                return Err(Error::Config(format!(
                    "kidney semi-axes {:?} do not fit volume {:?}",
                    self.kidney_semi_axes, self.volume_shape
                )));
            }
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        Ok(())
    }

    /// Smallest L2 distance between two subtype enhancement curves.
    pub fn min_curve_distance(&self) -> f32 {
        let mut best = f32::INFINITY;
        for i in 0..N_SUBTYPES {
            for j in i + 1..N_SUBTYPES {
                let d = self.subtype_curves[i]
                    .iter()
                    .zip(&self.subtype_curves[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Independent random stream for case `index` of a dataset.
pub fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Geometry {
    kidney_center: [f32; 3],
    tumor_center: [f32; 3],
    radius: f32,
}

fn label_map(cfg: &PhantomConfig, g: &Geometry) -> Vec<u8> {
    let [d, h, w] = cfg.volume_shape;
    let a = cfg.kidney_semi_axes;
    let mut labels = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f32, y as f32, x as f32];
                let e: f32 = (0..3).map(|i| ((p[i] - g.kidney_center[i]) / a[i]).powi(2)).sum();
                let r2: f32 = (0..3).map(|i| (p[i] - g.tumor_center[i]).powi(2)).sum();
                let idx = (z * h + y) * w + x;
                if r2 <= g.radius * g.radius {
                    labels[idx] = if e <= 1.0 { LABEL_TUMOR } else { u8::MAX };
                } else if e <= 1.0 {
                    labels[idx] = LABEL_KIDNEY;
                }
            }
        }
    }
    labels
}

fn fits(labels: &[u8]) -> bool {
    let tumor = labels.iter().any(|&l| l == LABEL_TUMOR);
    let kidney = labels.iter().any(|&l| l == LABEL_KIDNEY);
    let escaped = labels.iter().any(|&l| l == u8::MAX);
    tumor && kidney && !escaped
}

fn sample_geometry<R: Rng>(cfg: &PhantomConfig, rng: &mut R) -> Result<(Geometry, Vec<u8>)> {
    let a = cfg.kidney_semi_axes;
    let kidney_center: [f32; 3] = std::array::from_fn(|i| {
        let lo = a[i] + 1.0;
        let hi = cfg.volume_shape[i] as f32 - 2.0 - a[i];
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    });
    let [rmin, rmax] = cfg.tumor_radius_range;
    let radius = if rmax > rmin {
        rng.random_range(rmin..=rmax)
    } else {
        rmin
    };
    for _ in 0..64 {
        let tumor_center: [f32; 3] = std::array::from_fn(|i| {
            let span = (a[i] - radius - 1.0).max(0.0);
            kidney_center[i]
                + if span > 0.0 {
                    rng.random_range(-span..=span)
                } else {
                    0.0
                }
        });
        let g = Geometry {
            kidney_center,
            tumor_center,
            radius,
        };
        let labels = label_map(cfg, &g);
        if fits(&labels) {
            return Ok((g, labels));
        }
    }
    let g = Geometry {
        kidney_center,
        tumor_center: kidney_center,
        radius,
    };
    let labels = label_map(cfg, &g);
    if fits(&labels) {
        Ok((g, labels))
    } else {
        Err(Error::Config(format!(
            "tumor of radius {radius} cannot fit inside kidney {:?}",
            cfg.kidney_semi_axes
        )))
    }
}

/// Generates one complete four-phase case of the given subtype.
pub fn generate_case<R: Rng>(id: &str, subtype: usize, rng: &mut R, cfg: &PhantomConfig) -> Result<CaseRecord> {
    if subtype >= N_SUBTYPES {
        return Err(Error::Argument(format!("subtype {subtype} outside 0..{N_SUBTYPES}")));
    }
    cfg.validate()?;
    let (_, labels) = sample_geometry(cfg, rng)?;
    let noise =
        Normal::new(0.0f32, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut phases = Vec::with_capacity(DEFAULT_PHASES);
    for p in 0..DEFAULT_PHASES {
        let levels = [
            cfg.background_level,
            cfg.kidney_curve[p],
            cfg.subtype_curves[subtype][p],
        ];
        let data = labels
            .iter()
            .map(|&l| {
                let base = levels[l as usize];
                if cfg.noise_sigma > 0.0 {
                    base + noise.sample(rng)
                } else {
                    base
                }
            })
            .collect();
        phases.push(Volume::new(
            cfg.volume_shape,
            cfg.spacing,
            IntensityUnit::Normalized,
            data,
        )?);
    }
    let seg = SegMap::from_labels(cfg.volume_shape, &labels)?;
    CaseRecord::new(id, PhaseSet::complete(phases)?, seg, subtype)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Split sizes for `n` cases: 20% test, 15% validation, the rest training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (0.20 * n as f64).round() as usize;
    let val = (0.15 * n as f64).round() as usize;
    (n - val - test, val, test)
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

/// Generates `cfg.n_cases` cases with round-robin subtypes and a
/// deterministic train/val/test split by case index.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<(Vec<CaseRecord>, SplitManifest)> {
    if cfg.n_cases < 10 {
        return Err(Error::Argument(format!("n_cases must be >= 10, got {}", cfg.n_cases)));
    }
    cfg.validate()?;
    let cases = (0..cfg.n_cases)
        .map(|i| {
            let mut rng = case_rng(cfg.seed, i as u64);
            generate_case(&case_id(i), i % N_SUBTYPES, &mut rng, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let (n_train, n_val, _) = split_sizes(cfg.n_cases);
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = SplitManifest {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    Ok((cases, split))
}

/// Region means of a noiseless case, by label, for each phase.
pub fn expected_levels(cfg: &PhantomConfig, subtype: usize) -> BTreeMap<u8, [f32; DEFAULT_PHASES]> {
    BTreeMap::from([
        (0, [cfg.background_level; DEFAULT_PHASES]),
        (LABEL_KIDNEY, cfg.kidney_curve),
        (LABEL_TUMOR, cfg.subtype_curves[subtype]),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> PhantomConfig {
        PhantomConfig {
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn noiseless_tumor_voxel_equals_curve() {
        let cfg = noiseless();
        let mut rng = case_rng(1, 0);
        let c = generate_case("a", 2, &mut rng, &cfg).unwrap();
        let labels = c.gt_seg.labels();
        let idx = labels.iter().position(|&l| l == LABEL_TUMOR).unwrap();
        assert_eq!(c.phase_set.get(2).unwrap().data()[idx], cfg.subtype_curves[2][1]);
        assert_eq!(c.phase_set.get(3).unwrap().data()[idx], cfg.subtype_curves[2][2]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = PhantomConfig::default();
        let a = generate_case("a", 1, &mut case_rng(9, 3), &cfg).unwrap();
        let b = generate_case("a", 1, &mut case_rng(9, 3), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_tumor_mean_within_clt_bound() {
        // sigma/sqrt(n) <= 0.05/10 = 0.005 for n >= 100, so 0.02 is a 4-sigma bound.
        let cfg = PhantomConfig::default();
        let mut checked = 0;
        for i in 0..20 {
            let c = generate_case("a", i % 5, &mut case_rng(3, i as u64), &cfg).unwrap();
            let mask = c.gt_seg.class_mask(LABEL_TUMOR as usize);
            let n = mask.iter().filter(|&&m| m).count();
            if n < 100 {
                continue;
            }
            checked += 1;
            for p in 1..=4 {
                let v = c.phase_set.get(p).unwrap().data();
                let mean = v
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &m)| m)
                    .map(|(&x, _)| x as f64)
                    .sum::<f64>()
                    / n as f64;
                assert!((mean - cfg.subtype_curves[i % 5][p - 1] as f64).abs() < 0.02);
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn tumor_strictly_inside_kidney() {
        let cfg = PhantomConfig::default();
        for i in 0..10 {
            let c = generate_case("a", 0, &mut case_rng(5, i), &cfg).unwrap();
            let labels = c.gt_seg.labels();
            assert!(labels.iter().any(|&l| l == LABEL_TUMOR));
            assert!(labels.iter().any(|&l| l == LABEL_KIDNEY));
        }
    }

    #[test]
    fn dataset_balance_and_split() {
        let cfg = PhantomConfig {
            n_cases: 20,
            volume_shape: [24, 28, 30],
            ..PhantomConfig::default()
        };
        let (cases, split) = generate_dataset(&cfg).unwrap();
        for s in 0..5 {
            assert_eq!(cases.iter().filter(|c| c.subtype == s).count(), 4);
        }
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), 20);
        let (_, split2) = generate_dataset(&cfg).unwrap();
        assert_eq!(split, split2);
    }

    #[test]
    fn hundred_cases_split_65_15_20() {
        assert_eq!(split_sizes(100), (65, 15, 20));
        assert_eq!(split_sizes(50), (32, 8, 10));
    }

    #[test]
    fn rejects_inseparable_curves_and_oversized_tumors() {
        let mut cfg = PhantomConfig::default();
        cfg.subtype_curves[1] = cfg.subtype_curves[0];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PhantomConfig {
            tumor_radius_range: [3.0, 12.0],
            ..PhantomConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PhantomConfig {
            n_cases: 5,
            ..PhantomConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }
}

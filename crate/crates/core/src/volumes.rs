//! Volumes, phase sets, segmentation maps and case records, with bit-exact
//! on-disk persistence.
//!
//! A volume is stored as `<name>.f32raw` (little-endian `f32`, depth-major)
//! next to a `<name>.json` sidecar holding `{shape, spacing, intensity_unit}`.
//! A case directory holds one volume per present phase, a hard-label
//! segmentation volume and a `case.json` manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of contrast phases in a complete study.
pub const DEFAULT_PHASES: usize = 4;

/// Phase names, indexed by `phase - 1`.
pub const PHASE_NAMES: [&str; DEFAULT_PHASES] = ["non-contrast", "arterial", "portal", "delayed"];

/// Tumor subtype classes, indexed by class label.
pub const SUBTYPE_NAMES: [&str; 5] = ["ccRCC", "pRCC", "chRCC", "AML", "oncocytoma"];

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_KIDNEY: u8 = 1;
pub const LABEL_TUMOR: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityUnit {
    #[serde(rename = "HU")]
    Hu,
    Normalized,
}

/// A 3D scalar grid (`depth × height × width`) with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    unit: IntensityUnit,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], unit: IntensityUnit, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("volume dimensions must be >= 1, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Shape(format!("spacing must be positive, got {spacing:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                term: "volume data".into(),
            });
        }
        Ok(Volume {
            shape,
            spacing,
            unit,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], unit: IntensityUnit, value: f32) -> Result<Self> {
        Self::new(shape, spacing, unit, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Same geometry, new contents.
    pub fn with_data(&self, data: Vec<f32>, unit: IntensityUnit) -> Result<Self> {
        Volume::new(self.shape, self.spacing, unit, data)
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    intensity_unit: IntensityUnit,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<base>.f32raw` and `<base>.json`.
pub fn save_volume(v: &Volume, base: &Path) -> Result<()> {
    let raw = with_ext(base, "f32raw");
    let json = with_ext(base, "json");
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let side = Sidecar {
        shape: v.shape,
        spacing: v.spacing,
        intensity_unit: v.unit,
    };
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Reads a volume written by [`save_volume`].
pub fn load_volume(base: &Path) -> Result<Volume> {
    let raw = with_ext(base, "f32raw");
    let json = with_ext(base, "json");
    let text =
        fs::read_to_string(&json).map_err(|e| Error::Format(format!("missing sidecar {}: {e}", json.display())))?;
    let side: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad sidecar {}: {e}", json.display())))?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: shape {:?} needs {} bytes, payload has {}",
            raw.display(),
            side.shape,
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(side.shape, side.spacing, side.intensity_unit, data)
        .map_err(|e| Error::Format(format!("{}: {e}", raw.display())))
}

/// Phases `1..=n_total` of one study; absent phases are listed in `missing`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSet {
    phases: BTreeMap<usize, Volume>,
    n_total: usize,
    missing: BTreeSet<usize>,
}

impl PhaseSet {
    /// Builds a phase set; every index in `1..=n_total` not present in
    /// `phases` is treated as missing.
    pub fn new(phases: BTreeMap<usize, Volume>, n_total: usize) -> Result<Self> {
        if n_total == 0 {
            return Err(Error::Argument("phase count must be positive".into()));
        }
        if let Some(&bad) = phases.keys().find(|&&k| k == 0 || k > n_total) {
            return Err(Error::Argument(format!("phase index {bad} outside 1..={n_total}")));
        }
        let mut iter = phases.values();
        if let Some(first) = iter.next() {
            if let Some(other) = iter.find(|v| !v.same_geometry(first)) {
                return Err(Error::Shape(format!(
                    "phases disagree on geometry: {:?}/{:?} vs {:?}/{:?}",
                    first.shape(),
                    first.spacing(),
                    other.shape(),
                    other.spacing()
                )));
            }
        } else {
            return Err(Error::Argument("phase set has no phases".into()));
        }
        let missing = (1..=n_total).filter(|i| !phases.contains_key(i)).collect();
        Ok(PhaseSet {
            phases,
            n_total,
            missing,
        })
    }

    pub fn complete(volumes: Vec<Volume>) -> Result<Self> {
        let n = volumes.len();
        Self::new(volumes.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect(), n)
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn missing(&self) -> &BTreeSet<usize> {
        &self.missing
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn get(&self, phase: usize) -> Option<&Volume> {
        self.phases.get(&phase)
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &Volume)> {
        self.phases.iter().map(|(&k, v)| (k, v))
    }

    pub fn shape(&self) -> [usize; 3] {
        self.phases.values().next().expect("non-empty").shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.phases.values().next().expect("non-empty").spacing()
    }

    /// Removes the given phases.
    pub fn without(&self, drop: &BTreeSet<usize>) -> Result<Self> {
        let phases = self
            .phases
            .iter()
            .filter(|(k, _)| !drop.contains(k))
            .map(|(&k, v)| (k, v.clone()))
            .collect();
        Self::new(phases, self.n_total)
    }

    /// Inserts volumes for missing phases.
    pub fn completed_with(&self, fill: BTreeMap<usize, Volume>) -> Result<Self> {
        let mut phases = self.phases.clone();
        for (k, v) in fill {
            if !self.missing.contains(&k) {
                return Err(Error::Argument(format!("phase {k} is not missing")));
            }
            phases.insert(k, v);
        }
        Self::new(phases, self.n_total)
    }

    /// Volumes in phase order; fails if any phase is missing.
    pub fn ordered(&self) -> Result<Vec<&Volume>> {
        if !self.is_complete() {
            return Err(Error::Argument(format!(
                "phase set is missing phases {:?}",
                self.missing
            )));
        }
        Ok(self.phases.values().collect())
    }
}

/// Per-voxel class probabilities, `channels × depth × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    shape: [usize; 3],
    channels: usize,
    tumor_channel: usize,
    probs: Vec<f32>,
}

impl SegMap {
    pub fn new(shape: [usize; 3], channels: usize, tumor_channel: usize, probs: Vec<f32>) -> Result<Self> {
        if !(2..=3).contains(&channels) || tumor_channel >= channels {
            return Err(Error::Shape(format!(
                "segmentation needs 2 or 3 channels with a valid tumor channel, got {channels}/{tumor_channel}"
            )));
        }
        if probs.len() != channels * shape.iter().product::<usize>() {
            return Err(Error::Shape("segmentation payload size".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Shape("segmentation probabilities outside [0, 1]".into()));
        }
        Ok(SegMap {
            shape,
            channels,
            tumor_channel,
            probs,
        })
    }

    /// One-hot map over {background, kidney, tumor} from hard labels.
    pub fn from_labels(shape: [usize; 3], labels: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if labels.len() != n {
            return Err(Error::Shape("label volume size".into()));
        }
        let mut probs = vec![0.0; 3 * n];
        for (i, &l) in labels.iter().enumerate() {
            if l > LABEL_TUMOR {
                return Err(Error::Format(format!("label {l} is not one of 0, 1, 2")));
            }
            probs[l as usize * n + i] = 1.0;
        }
        SegMap::new(shape, 3, LABEL_TUMOR as usize, probs)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tumor_channel(&self) -> usize {
        self.tumor_channel
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.iter().product::<usize>();
        &self.probs[c * n..(c + 1) * n]
    }

    pub fn tumor(&self) -> &[f32] {
        self.channel(self.tumor_channel)
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Per-voxel argmax (ties resolve to the lower channel).
    pub fn labels(&self) -> Vec<u8> {
        let n = self.shape.iter().product::<usize>();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.probs[c * n + i] > self.probs[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Binary mask of voxels whose argmax is `class`.
    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        self.labels().into_iter().map(|l| l as usize == class).collect()
    }
}

/// A labelled study: phase images, ground-truth segmentation and subtype.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub phase_set: PhaseSet,
    pub gt_seg: SegMap,
    pub subtype: usize,
}

impl CaseRecord {
    pub fn new(id: impl Into<String>, phase_set: PhaseSet, gt_seg: SegMap, subtype: usize) -> Result<Self> {
        if subtype >= SUBTYPE_NAMES.len() {
            return Err(Error::Argument(format!("subtype {subtype} outside 0..5")));
        }
        if gt_seg.shape() != phase_set.shape() {
            return Err(Error::Shape(format!(
                "segmentation {:?} vs phases {:?}",
                gt_seg.shape(),
                phase_set.shape()
            )));
        }
        Ok(CaseRecord {
            id: id.into(),
            phase_set,
            gt_seg,
            subtype,
        })
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub id: String,
    pub subtype: usize,
    pub missing: Vec<usize>,
    /// Phase index (as a string key) to volume base name.
    pub phase_files: BTreeMap<String, String>,
    pub seg_file: String,
    #[serde(default = "default_n_total")]
    pub n_phases: usize,
}

fn default_n_total() -> usize {
    DEFAULT_PHASES
}

pub const CASE_MANIFEST: &str = "case.json";

/// Writes `record` to `dir/<id>/` and returns that directory.
pub fn save_case(record: &CaseRecord, dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let case_dir = dir.join(&record.id);
    fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
    let mut phase_files = BTreeMap::new();
    for (i, v) in record.phase_set.present() {
        let name = format!("phase{i}");
        save_volume(v, &case_dir.join(&name))?;
        phase_files.insert(i.to_string(), name);
    }
    let labels: Vec<f32> = record.gt_seg.labels().into_iter().map(f32::from).collect();
    let seg = Volume::new(
        record.gt_seg.shape(),
        record.phase_set.spacing(),
        IntensityUnit::Normalized,
        labels,
    )?;
    save_volume(&seg, &case_dir.join("seg"))?;
    let manifest = CaseManifest {
        id: record.id.clone(),
        subtype: record.subtype,
        missing: record.phase_set.missing().iter().copied().collect(),
        phase_files,
        seg_file: "seg".into(),
        n_phases: record.phase_set.n_total(),
    };
    let path = case_dir.join(CASE_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(case_dir)
}

/// Reads a case directory written by [`save_case`].
pub fn load_case(case_dir: &Path) -> Result<CaseRecord> {
    let path = case_dir.join(CASE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CaseManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut phases = BTreeMap::new();
    for (k, name) in &m.phase_files {
        let idx: usize = k
            .parse()
            .map_err(|_| Error::Format(format!("phase key `{k}` is not an integer")))?;
        phases.insert(idx, load_volume(&case_dir.join(name))?);
    }
    let ps = PhaseSet::new(phases, m.n_phases).map_err(|e| Error::Format(e.to_string()))?;
    let listed: BTreeSet<usize> = m.missing.iter().copied().collect();
    if &listed != ps.missing() {
        return Err(Error::Format(format!(
            "manifest lists missing {:?} but phase files imply {:?}",
            listed,
            ps.missing()
        )));
    }
    let seg_vol = load_volume(&case_dir.join(&m.seg_file))?;
    if seg_vol.shape() != ps.shape() {
        return Err(Error::Format("segmentation shape differs from phases".into()));
    }
    let labels: Vec<u8> = seg_vol
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 || v == 1.0 || v == 2.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("segmentation value {v} is not a label")))
            }
        })
        .collect::<Result<_>>()?;
    let seg = SegMap::from_labels(seg_vol.shape(), &labels)?;
    CaseRecord::new(m.id, ps, seg, m.subtype).map_err(|e| Error::Format(e.to_string()))
}

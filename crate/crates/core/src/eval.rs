//! Synthesis-quality and diagnostic metrics, the paired permutation test,
//! and the simulated-drop evaluation protocol.
//!
//! The permutation test swaps the two models' prediction vectors case by
//! case with probability one half and compares mAUC differences
//! (two-sided).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lesion::{phase_features, MaskSource};
use crate::nets::{Classifier, Generator, Segmenter};
use crate::preprocess::{assemble_generator_input, PreprocessConfig};
use crate::train::stream_rng;
use crate::volumes::{CaseRecord, IntensityUnit, PhaseSet, Volume, LABEL_KIDNEY, LABEL_TUMOR};

pub const SSIM_WINDOW: usize = 7;

const PERMUTATION_STREAM: u64 = 0x9e37;

fn check_geometry(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "volumes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(Error::Argument(format!("data range {data_range} must be positive")));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical volumes give `f64::INFINITY`.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_geometry(a, b)?;
    check_range(data_range)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Sliding sums over `win` consecutive entries along one axis (valid mode).
fn box_axis(src: &[f64], shape: [usize; 3], axis: usize, win: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = shape[axis] + 1 - win;
    let [d, h, w] = out_shape;
    let stride = [shape[1] * shape[2], shape[2], 1][axis];
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let base = z * shape[1] * shape[2] + y * shape[2] + x;
                out.push((0..win).map(|k| src[base + k * stride]).sum());
            }
        }
    }
    (out, out_shape)
}

fn box_sum(src: Vec<f64>, shape: [usize; 3], win: usize) -> Vec<f64> {
    let (s, sh) = box_axis(&src, shape, 0, win);
    let (s, sh) = box_axis(&s, sh, 1, win);
    box_axis(&s, sh, 2, win).0
}

/// Mean local SSIM over all `7³` windows that fit inside the volume,
/// with uniform weights and population (co)variances.
pub fn ssim3d(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    ssim3d_window(a, b, data_range, SSIM_WINDOW)
}

pub fn ssim3d_window(a: &Volume, b: &Volume, data_range: f64, win: usize) -> Result<f64> {
    check_geometry(a, b)?;
    check_range(data_range)?;
    let shape = a.shape();
    if win == 0 || shape.iter().any(|&n| n < win) {
        return Err(Error::Argument(format!(
            "volume {shape:?} is smaller than the {win}³ window"
        )));
    }
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx = x.iter().map(|v| v * v).collect();
    let yy = y.iter().map(|v| v * v).collect();
    let xy = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [sx, sy, sxx, syy, sxy] = [x, y, xx, yy, xy].map(|s| box_sum(s, shape, win));
    let n = (win * win * win) as f64;
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let total: f64 = (0..sx.len())
        .map(|i| {
            let (mx, my) = (sx[i] / n, sy[i] / n);
            let vx = sxx[i] / n - mx * mx;
            let vy = syy[i] / n - my * my;
            let cov = sxy[i] / n - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / sx.len() as f64)
}

/// `2|P∩G| / (|P|+|G|)`, 1 when both masks are empty.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("masks of {} and {} voxels", pred.len(), gt.len())));
    }
    let p = pred.iter().filter(|&&v| v).count();
    let g = gt.iter().filter(|&&v| v).count();
    if p + g == 0 {
        return Ok(1.0);
    }
    let both = pred.iter().zip(gt).filter(|(&a, &b)| a && b).count();
    Ok(2.0 * both as f64 / (p + g) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    /// `None` for classes without positives or without negatives.
    pub per_class: Vec<Option<f64>>,
    pub mauc: f64,
}

impl AucResult {
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&c| self.per_class[c].is_none())
            .collect()
    }
}

/// Rank-based one-vs-all AUC per class (ties count one half) and their mean
/// over the classes where it is defined.
pub fn auc_one_vs_all(scores: &[Vec<f64>], labels: &[usize]) -> Result<AucResult> {
    let m = scores.len();
    if m != labels.len() {
        return Err(Error::Argument(format!("{m} score rows for {} labels", labels.len())));
    }
    if m < 2 {
        return Err(Error::Evaluation("AUC needs at least two samples".into()));
    }
    let c = scores[0].len();
    if scores.iter().any(|r| r.len() != c) {
        return Err(Error::Argument("score rows differ in length".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {l} outside {c} classes")));
    }
    if scores.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            term: "AUC scores".into(),
        });
    }
    let mut per_class = Vec::with_capacity(c);
    for class in 0..c {
        let n_pos = labels.iter().filter(|&&l| l == class).count();
        let n_neg = m - n_pos;
        if n_pos == 0 || n_neg == 0 {
            per_class.push(None);
            continue;
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| scores[i][class].total_cmp(&scores[j][class]));
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < m {
            let mut j = i;
            while j + 1 < m && scores[order[j + 1]][class] == scores[order[i]][class] {
                j += 1;
            }
            // ranks i+1..=j+1 share their average
            let avg = (i + j + 2) as f64 / 2.0;
            rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == class).count() as f64;
            i = j + 1;
        }
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        per_class.push(Some(u / (n_pos * n_neg) as f64));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Evaluation("no class has both positives and negatives".into()));
    }
    let excluded: Vec<usize> = (0..c).filter(|&k| per_class[k].is_none()).collect();
    if !excluded.is_empty() {
        warn!("classes {excluded:?} excluded from mAUC");
    }
    let mauc = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(AucResult { per_class, mauc })
}

pub fn mauc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(auc_one_vs_all(scores, labels)?.mauc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermutationTest {
    pub n_perm: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for PermutationTest {
    fn default() -> Self {
        PermutationTest {
            n_perm: 10_000,
            seed: 0,
            threads: 1,
        }
    }
}

/// Two-sided paired permutation test of `metric(A) - metric(B)`.
/// Returns `(1 + #{|Δ_perm| ≥ |Δ_obs|}) / (n_perm + 1)`.
pub fn permutation_test<F>(
    metric: F,
    preds_a: &[Vec<f64>],
    preds_b: &[Vec<f64>],
    labels: &[usize],
    test: &PermutationTest,
) -> Result<f64>
where
    F: Fn(&[Vec<f64>], &[usize]) -> Result<f64> + Sync,
{
    if test.n_perm == 0 {
        return Err(Error::Argument(
            "permutation test needs at least one permutation".into(),
        ));
    }
    if preds_a.len() != preds_b.len() || preds_a.len() != labels.len() {
        return Err(Error::Argument(format!(
            "misaligned predictions: {} vs {} rows for {} labels",
            preds_a.len(),
            preds_b.len(),
            labels.len()
        )));
    }
    if preds_a.iter().zip(preds_b).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Argument("prediction rows differ in length".into()));
    }
    let observed = (metric(preds_a, labels)? - metric(preds_b, labels)?).abs();
    // tolerate rounding in the recomputed metric
    let threshold = observed - 1e-12 * observed.max(1.0);
    let count_range = |range: std::ops::Range<usize>| -> Result<usize> {
        let mut hits = 0;
        let (mut a, mut b) = (preds_a.to_vec(), preds_b.to_vec());
        for perm in range {
            let mut rng = stream_rng(test.seed, PERMUTATION_STREAM, perm as u64);
            for i in 0..labels.len() {
                let swap = rng.random::<bool>();
                let (x, y) = if swap {
                    (&preds_b[i], &preds_a[i])
                } else {
                    (&preds_a[i], &preds_b[i])
                };
                a[i].clone_from(x);
                b[i].clone_from(y);
            }
            if (metric(&a, labels)? - metric(&b, labels)?).abs() >= threshold {
                hits += 1;
            }
        }
        Ok(hits)
    };
    let threads = test.threads.clamp(1, test.n_perm);
    let hits = if threads == 1 {
        count_range(0..test.n_perm)?
    } else {
        let chunk = test.n_perm.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let range = t * chunk..((t + 1) * chunk).min(test.n_perm);
                    s.spawn(move || count_range(range))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("permutation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok((1 + hits) as f64 / (test.n_perm + 1) as f64)
}

/// PSNR data range for volumes in `unit`: the HU window width, or that
/// width in standardized units.
pub fn default_data_range(unit: IntensityUnit, pre: &PreprocessConfig) -> f64 {
    let width = (pre.hu_window[1] - pre.hu_window[0]) as f64;
    match unit {
        IntensityUnit::Hu => width,
        IntensityUnit::Normalized => width / pre.norm_std as f64,
    }
}

/// Every `k`-subset of `1..=n` in lexicographic order.
pub fn missing_sets(n: usize, k: usize) -> Vec<BTreeSet<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<BTreeSet<usize>>) {
        if cur.len() == k {
            out.push(cur.iter().copied().collect());
            return;
        }
        for i in start..=n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        go(1, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// PSNR serialized as a number, or the string `"inf"` for exact matches.
mod db {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR `{t}`"))),
        }
    }
}

/// Quality of one synthesized phase against the real one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseQuality {
    pub phase: usize,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    /// Dice of the segmentation of the synthesized volume, per foreground
    /// class (kidney, tumor).
    pub dice: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEval {
    pub case: String,
    pub missing: Vec<usize>,
    pub label: usize,
    pub probs: Vec<f64>,
    pub synthesis: Vec<PhaseQuality>,
}

/// Aggregates over the evaluations sharing one missing set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingRow {
    pub missing: Vec<usize>,
    pub n: usize,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub dice: Option<[f64; 2]>,
    pub mauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub data_range: f64,
    pub cases: Vec<CaseEval>,
    pub per_class_auc: Vec<Option<f64>>,
    pub mauc: f64,
    pub per_missing: Vec<MissingRow>,
}

impl EvalReport {
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.cases.iter().map(|c| c.probs.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.cases.iter().map(|c| c.label).collect()
    }

    /// Builds the aggregate fields from per-case evaluations.
    pub fn from_cases(mode: &str, data_range: f64, cases: Vec<CaseEval>) -> Result<Self> {
        let scores: Vec<Vec<f64>> = cases.iter().map(|c| c.probs.clone()).collect();
        let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
        let auc = auc_one_vs_all(&scores, &labels)?;
        let mut groups: BTreeMap<Vec<usize>, Vec<&CaseEval>> = BTreeMap::new();
        for c in &cases {
            groups.entry(c.missing.clone()).or_default().push(c);
        }
        let per_missing = groups
            .into_iter()
            .map(|(missing, group)| {
                let quality: Vec<&PhaseQuality> = group.iter().flat_map(|c| &c.synthesis).collect();
                let mean = |f: &dyn Fn(&PhaseQuality) -> f64| {
                    (!quality.is_empty()).then(|| quality.iter().map(|q| f(q)).sum::<f64>() / quality.len() as f64)
                };
                let s: Vec<Vec<f64>> = group.iter().map(|c| c.probs.clone()).collect();
                let l: Vec<usize> = group.iter().map(|c| c.label).collect();
                MissingRow {
                    n: group.len(),
                    psnr: mean(&|q| q.psnr).unwrap_or(f64::NAN),
                    ssim: mean(&|q| q.ssim),
                    dice: mean(&|q| q.dice[0]).zip(mean(&|q| q.dice[1])).map(|(k, t)| [k, t]),
                    mauc: auc_one_vs_all(&s, &l).ok().map(|a| a.mauc),
                    missing,
                }
            })
            .collect();
        Ok(EvalReport {
            mode: mode.to_string(),
            data_range,
            per_class_auc: auc.per_class,
            mauc: auc.mauc,
            per_missing,
            cases,
        })
    }
}

/// What a model does with an incomplete study before classification.
pub enum Completion<'a> {
    /// Synthesize the missing phases, then classify the completed set.
    Synthesis { gen: &'a Generator, cls: &'a Classifier },
    /// Classify the available phases with the classifier trained for the
    /// matching missing set.
    Direct(&'a [(BTreeSet<usize>, Classifier)]),
}

pub struct Model<'a> {
    pub name: String,
    pub seg: &'a Segmenter,
    pub completion: Completion<'a>,
}

fn to_f64(p: Vec<f32>) -> Vec<f64> {
    p.into_iter().map(|v| v as f64).collect()
}

/// Synthesized volumes for the missing phases of `ps`, keyed by phase.
pub fn synthesize_missing(gen: &Generator, ps: &PhaseSet) -> Result<BTreeMap<usize, Volume>> {
    let input = assemble_generator_input(ps)?;
    let out = gen.synthesize(&input)?;
    let like = ps.present().next().map(|(_, v)| v).expect("at least one present phase");
    input
        .missing
        .iter()
        .enumerate()
        .map(|(j, &m)| Ok((m, like.with_data(out.channel(j).to_vec(), IntensityUnit::Normalized)?)))
        .collect()
}

/// Class probabilities of complete studies.
pub fn classify_complete(
    cases: &[CaseRecord],
    seg: &Segmenter,
    cls: &Classifier,
    mask: MaskSource,
) -> Result<Vec<Vec<f64>>> {
    cases
        .iter()
        .map(|c| {
            let manual = (mask == MaskSource::Manual).then_some(&c.gt_seg);
            let f = crate::lesion::assemble_lesion_features(&c.phase_set, seg, manual)?;
            Ok(to_f64(cls.predict(&f)?))
        })
        .collect()
}

/// Drops every set in `missing` from every complete case, completes and
/// classifies. Rows are ordered case-major, so reports from different
/// models on the same inputs are aligned.
pub fn evaluate_protocol(
    model: &Model<'_>,
    cases: &[CaseRecord],
    missing: &[BTreeSet<usize>],
    data_range: f64,
    mask: MaskSource,
) -> Result<EvalReport> {
    check_range(data_range)?;
    if cases.is_empty() || missing.is_empty() {
        return Err(Error::Argument("evaluation needs cases and missing sets".into()));
    }
    let mut rows = Vec::with_capacity(cases.len() * missing.len());
    for case in cases {
        if !case.phase_set.is_complete() {
            return Err(Error::Argument(format!("test case {} is incomplete", case.id)));
        }
        let manual = (mask == MaskSource::Manual).then_some(&case.gt_seg);
        for m in missing {
            let ps = case.phase_set.without(m)?;
            let (probs, synthesis) = match &model.completion {
                Completion::Synthesis { gen, cls } => {
                    let fill = synthesize_missing(gen, &ps)?;
                    let mut quality = Vec::with_capacity(fill.len());
                    for (&phase, fake) in &fill {
                        let real = case.phase_set.get(phase).expect("complete case");
                        let (seg_map, _) = model.seg.segment(fake)?;
                        let mut dice = [0.0; 2];
                        for (k, l) in [LABEL_KIDNEY, LABEL_TUMOR].into_iter().enumerate() {
                            let l = l as usize;
                            dice[k] = dice_score(&seg_map.class_mask(l), &case.gt_seg.class_mask(l))?;
                        }
                        quality.push(PhaseQuality {
                            phase,
                            psnr: psnr(real, fake, data_range)?,
                            ssim: ssim3d(real, fake, data_range)?,
                            dice,
                        });
                    }
                    let done = ps.completed_with(fill)?;
                    let f = crate::lesion::assemble_lesion_features(&done, model.seg, manual)?;
                    (to_f64(cls.predict(&f)?), quality)
                }
                Completion::Direct(classifiers) => {
                    let cls = classifiers
                        .iter()
                        .find(|(k, _)| k == m)
                        .map(|(_, c)| c)
                        .ok_or_else(|| Error::Argument(format!("no classifier for missing set {m:?}")))?;
                    let mut f = Vec::new();
                    for (_, v) in ps.present() {
                        f.extend(phase_features(model.seg, v, manual)?);
                    }
                    (to_f64(cls.predict(&f)?), Vec::new())
                }
            };
            rows.push(CaseEval {
                case: case.id.clone(),
                missing: m.iter().copied().collect(),
                label: case.subtype,
                probs,
                synthesis,
            });
        }
    }
    EvalReport::from_cases(&model.name, data_range, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub a: String,
    pub b: String,
    pub p: f64,
}

/// Reports of several models on the same protocol with pairwise p-values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    pub p_values: Vec<PValue>,
}

impl Comparison {
    pub fn new(reports: Vec<EvalReport>, test: &PermutationTest) -> Result<Self> {
        let mut p_values = Vec::new();
        for i in 0..reports.len() {
            for j in i + 1..reports.len() {
                let (a, b) = (&reports[i], &reports[j]);
                let aligned = a.cases.len() == b.cases.len()
                    && a.cases
                        .iter()
                        .zip(&b.cases)
                        .all(|(x, y)| x.case == y.case && x.missing == y.missing);
                if !aligned {
                    return Err(Error::Argument(format!(
                        "reports {} and {} are not aligned",
                        a.mode, b.mode
                    )));
                }
                let p = permutation_test(mauc, &a.scores(), &b.scores(), &a.labels(), test)?;
                p_values.push(PValue {
                    a: a.mode.clone(),
                    b: b.mode.clone(),
                    p,
                });
            }
        }
        Ok(Comparison { reports, p_values })
    }

    /// Plain-text tables: per-class AUC and mAUC by model, p-values, then
    /// synthesis quality by missing set.
    pub fn table(&self, class_names: &[&str]) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<24}", "model");
        for name in class_names {
            let _ = write!(s, "{name:>8}");
        }
        let _ = writeln!(s, "{:>8}", "mAUC");
        for r in &self.reports {
            let _ = write!(s, "{:<24}", r.mode);
            for a in &r.per_class_auc {
                match a {
                    Some(v) => {
                        let _ = write!(s, "{v:>8.3}");
                    }
                    None => {
                        let _ = write!(s, "{:>8}", "-");
                    }
                }
            }
            let _ = writeln!(s, "{:>8.3}", r.mauc);
        }
        for p in &self.p_values {
            let _ = writeln!(s, "p({} vs {}) = {:.4}", p.a, p.b, p.p);
        }
        for r in &self.reports {
            if r.per_missing.iter().all(|m| m.ssim.is_none()) {
                continue;
            }
            let _ = writeln!(
                s,
                "\n{}: {:<10}{:>8}{:>8}{:>10}{:>10}{:>8}",
                r.mode, "missing", "PSNR", "SSIM", "Dice kid", "Dice tum", "mAUC"
            );
            for m in &r.per_missing {
                let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
                let _ = writeln!(
                    s,
                    "{:w$}  {:<10}{:>8.2}{:>8}{:>10}{:>10}{:>8}",
                    "",
                    format!("{:?}", m.missing),
                    m.psnr,
                    opt(m.ssim),
                    opt(m.dice.map(|d| d[0])),
                    opt(m.dice.map(|d| d[1])),
                    opt(m.mauc),
                    w = r.mode.len()
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(shape: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::new(shape, [1.0; 3], IntensityUnit::Normalized, data).unwrap()
    }

    fn random_vol(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
        let n = shape.iter().product();
        vol(shape, (0..n).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn psnr_hand_values() {
        let a = vol([2, 2, 2], vec![0.5; 8]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = vol([2, 2, 2], vec![0.6; 8]);
        // the f32 offset is not exactly 0.1, hence the loose tolerance
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let c = vol([2, 2, 1], vec![0.0; 4]);
        assert!(matches!(psnr(&a, &c, 1.0), Err(Error::Shape(_))));
        assert!(matches!(psnr(&a, &b, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_vol([8, 8, 8], &mut rng);
        assert!((ssim3d(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let inv = vol([8, 8, 8], a.data().iter().map(|v| 1.0 - v).collect());
        assert!(ssim3d(&a, &inv, 1.0).unwrap() < 1.0);
        let small = random_vol([6, 8, 8], &mut rng);
        assert!(matches!(ssim3d(&small, &small, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn dice_hand_values() {
        let p = [true, true, true, true, false, false];
        let g = [false, false, true, true, true, true];
        assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
        assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
        assert_eq!(dice_score(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice_score(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(matches!(dice_score(&[true], &[true, false]), Err(Error::Shape(_))));
    }

    #[test]
    fn auc_hand_values() {
        let perfect = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.1, 0.9], vec![0.3, 0.7]];
        let labels = [0, 0, 1, 1];
        let r = auc_one_vs_all(&perfect, &labels).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.mauc, 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        assert_eq!(mauc(&flat, &labels).unwrap(), 0.5);
        // positives {0.8, 0.4, 0.4} vs negatives {0.4, 0.2, 0.9} on column 1:
        // wins 0.8>0.4, 0.8>0.2, 0.4>0.2 twice, ties 0.4=0.4 twice -> 5/9
        let s: Vec<Vec<f64>> = [0.8, 0.4, 0.4, 0.4, 0.2, 0.9]
            .iter()
            .map(|&v| vec![1.0 - v, v])
            .collect();
        let l = [1, 1, 1, 0, 0, 0];
        assert_eq!(auc_one_vs_all(&s, &l).unwrap().per_class[1], Some(5.0 / 9.0));
    }

    #[test]
    fn auc_excludes_absent_classes() {
        let s = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
        let r = auc_one_vs_all(&s, &[0, 1, 0]).unwrap();
        assert_eq!(r.excluded(), vec![2]);
        assert_eq!(r.mauc, 1.0);
        assert!(matches!(auc_one_vs_all(&s, &[0, 0, 0]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn permutation_test_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let a: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
        let test = PermutationTest {
            n_perm: 200,
            ..Default::default()
        };
        assert_eq!(permutation_test(mauc, &a, &a, &labels, &test).unwrap(), 1.0);
        let zero = PermutationTest {
            n_perm: 0,
            ..test.clone()
        };
        assert!(matches!(
            permutation_test(mauc, &a, &a, &labels, &zero),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            permutation_test(mauc, &a[..19], &a, &labels, &test),
            Err(Error::Argument(_))
        ));

        // a perfect model against a random one is significant
        let perfect: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|c| (c == l) as u8 as f64).collect())
            .collect();
        let p = permutation_test(mauc, &perfect, &a, &labels, &test).unwrap();
        assert!(p < 0.05, "p = {p}");
        assert_eq!(permutation_test(mauc, &a, &perfect, &labels, &test).unwrap(), p);
        let threaded = PermutationTest { threads: 3, ..test };
        assert_eq!(permutation_test(mauc, &perfect, &a, &labels, &threaded).unwrap(), p);
    }

    #[test]
    fn missing_set_enumeration() {
        assert_eq!(missing_sets(4, 1).len(), 4);
        assert_eq!(missing_sets(4, 2).len(), 6);
        assert_eq!(missing_sets(4, 3)[0], BTreeSet::from([1, 2, 3]));
        assert!(missing_sets(2, 3).is_empty());
    }

    #[test]
    fn report_json_keeps_infinite_psnr() {
        let q = PhaseQuality {
            phase: 2,
            psnr: f64::INFINITY,
            ssim: 1.0,
            dice: [1.0, 1.0],
        };
        let text = serde_json::to_string(&q).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<PhaseQuality>(&text).unwrap(), q);
    }
}

use std::collections::BTreeSet;

use log::info;
use rand::seq::SliceRandom;

use super::{stream, stream_rng, Adam, LossLog, TrainConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::lesion::{phase_features, MaskSource};
use crate::losses::{self, LossRecord};
use crate::nets::{Classifier, ClassifierArch, Segmenter};
use crate::tensor::Tensor;
use crate::volumes::CaseRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<f32>,
    pub label: usize,
}

/// Per-case, per-phase lesion features (`[case][phase - 1]`) of complete
/// cases.
pub fn case_features(cases: &[CaseRecord], seg: &Segmenter, mask: MaskSource) -> Result<Vec<Vec<Vec<f32>>>> {
    cases
        .iter()
        .map(|c| {
            let vols = c.phase_set.ordered().map_err(|_| {
                Error::Argument(format!(
                    "case {} is incomplete, missing {:?}",
                    c.id,
                    c.phase_set.missing()
                ))
            })?;
            let manual = (mask == MaskSource::Manual).then_some(&c.gt_seg);
            vols.into_iter().map(|v| phase_features(seg, v, manual)).collect()
        })
        .collect()
}

/// Concatenation of the features of the phases not in `missing`.
pub fn subset_features(per_phase: &[Vec<f32>], missing: &BTreeSet<usize>) -> Vec<f32> {
    per_phase
        .iter()
        .enumerate()
        .filter(|(i, _)| !missing.contains(&(i + 1)))
        .flat_map(|(_, f)| f.iter().copied())
        .collect()
}

/// Adam on cross-entropy with batch size 1 and dropout, cycling through a
/// freshly shuffled order of the samples.
pub fn fit_classifier(
    samples: &[LabeledFeatures],
    arch: &ClassifierArch,
    cfg: &TrainConfig,
    init_index: u64,
    stage: &str,
    log: &mut LossLog,
) -> Result<Classifier> {
    if samples.is_empty() {
        return Err(Error::Argument("classifier training needs samples".into()));
    }
    let mut cls = Classifier::init(arch.clone(), &mut stream_rng(cfg.seed, stream::INIT, init_index))?;
    let mut opt = Adam::new(&cls.params, cfg.adam_lr as f32, cfg.adam_betas.map(|b| b as f32));
    let n = samples.len();
    let mut order: Vec<usize> = Vec::new();
    let mut window = Vec::with_capacity(n);
    let tag = stream::CLASSIFIER ^ (init_index << 8);
    for t in 0..cfg.cls_iters {
        let pos = (t as usize) % n;
        if pos == 0 {
            order = (0..n).collect();
            order.shuffle(&mut stream_rng(cfg.seed, tag, t / n as u64));
        }
        let s = &samples[order[pos]];
        let mut rng = stream_rng(cfg.seed, tag, (1 << 40) + t);
        let mut g = Graph::new();
        let p = cls.params.bind(&mut g, true);
        let x = g.constant(Tensor::from_vec(&[s.features.len()], s.features.clone())?);
        let probs = arch.forward(&mut g, &p, x, Some(&mut rng))?;
        let loss = losses::cls(&mut g, probs, s.label)?;
        let value = g.value(loss).item() as f64;
        let mut grads = g.backward(loss);
        opt.step(&mut cls.params, &p.grads(&g, &mut grads))?;
        log.push(LossRecord {
            stage: stage.into(),
            iter: t + 1,
            cls: Some(value),
            ..Default::default()
        })?;
        window.push(value);
        if window.len() > n {
            window.remove(0);
        }
        if let Some(target) = cfg.cls_target_loss {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            if window.len() == n && mean < target {
                info!(
                    "{stage}: running loss {mean:.4} below target after {} iterations",
                    t + 1
                );
                break;
            }
        }
    }
    log.flush()?;
    Ok(cls)
}

/// Classifier on the lesion features of complete training cases. The
/// layout follows `template` with the input width set from the data.
pub fn pretrain_classifier(
    cases: &[CaseRecord],
    seg: &Segmenter,
    mask: MaskSource,
    template: &ClassifierArch,
    cfg: &TrainConfig,
    log: &mut LossLog,
) -> Result<Classifier> {
    let feats = case_features(cases, seg, mask)?;
    let samples: Vec<LabeledFeatures> = feats
        .iter()
        .zip(cases)
        .map(|(f, c)| LabeledFeatures {
            features: f.concat(),
            label: c.subtype,
        })
        .collect();
    let k = seg.arch.feature_channels();
    let n = cases.first().map_or(0, |c| c.phase_set.n_total());
    let arch = ClassifierArch {
        input_len: n * k,
        ..template.clone()
    };
    fit_classifier(&samples, &arch, cfg, 3, "classifier", log)
}

/// One classifier per missing set, each trained directly on the features of
/// the phases that remain.
pub fn train_cls_kp(
    cases: &[CaseRecord],
    seg: &Segmenter,
    missing_sets: &[BTreeSet<usize>],
    template: &ClassifierArch,
    cfg: &TrainConfig,
    log: &mut LossLog,
) -> Result<Vec<(BTreeSet<usize>, Classifier)>> {
    let feats = case_features(cases, seg, MaskSource::Predicted)?;
    let n = cases.first().map_or(0, |c| c.phase_set.n_total());
    let k = seg.arch.feature_channels();
    missing_sets
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.is_empty() || m.len() >= n {
                return Err(Error::Argument(format!("missing set {m:?} for {n} phases")));
            }
            let samples: Vec<LabeledFeatures> = feats
                .iter()
                .zip(cases)
                .map(|(f, c)| LabeledFeatures {
                    features: subset_features(f, m),
                    label: c.subtype,
                })
                .collect();
            let arch = ClassifierArch {
                input_len: (n - m.len()) * k,
                ..template.clone()
            };
            let stage = format!("cls_kP_missing_{}", join(m));
            let c = fit_classifier(&samples, &arch, cfg, 100 + i as u64, &stage, log)?;
            Ok((m.clone(), c))
        })
        .collect()
}

pub(crate) fn join(m: &BTreeSet<usize>) -> String {
    m.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("_")
}

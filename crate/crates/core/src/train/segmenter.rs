use log::info;
use rand::seq::SliceRandom;

use super::augment::augment;
use super::{accumulate, constant_volume, scale_grads, stream, stream_rng, LossLog, Sgd, TrainConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossRecord};
use crate::nets::{Bound, Segmenter, SegmenterArch};
use crate::volumes::{CaseRecord, SegMap, Volume, LABEL_KIDNEY, LABEL_TUMOR};

/// Mean soft Dice loss over the kidney and tumor channels.
pub fn segmentation_loss(g: &mut Graph<f32>, probs: Var, gt: &SegMap) -> Result<Var> {
    let mut terms = Vec::new();
    for class in [LABEL_KIDNEY as usize, LABEL_TUMOR as usize] {
        let pred = g.slice(probs, class, 1)?;
        let target = g.constant(constant_volume(gt.channel(class), gt.shape()));
        terms.push((losses::dice(g, pred, target)?, 0.5));
    }
    g.weighted_sum(&terms)
}

fn sample_grads(seg: &Segmenter, v: &Volume, gt: &SegMap) -> Result<(f64, super::Grads)> {
    let mut g = Graph::new();
    let p: Bound = seg.params.bind(&mut g, true);
    let x = g.constant(constant_volume(v.data(), v.shape()));
    let out = seg.arch.forward(&mut g, &p, x)?;
    let loss = segmentation_loss(&mut g, out.probs, gt)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric { term: "L_seg".into() });
    }
    let mut grads = g.backward(loss);
    Ok((value, p.grads(&g, &mut grads)))
}

/// Trains the segmenter on every `(phase image, mask)` pair of the training
/// cases with Nesterov SGD, polynomial learning-rate decay per step and
/// gradient accumulation over `seg_batch` samples.
pub fn train_segmenter(
    cases: &[CaseRecord],
    arch: &SegmenterArch,
    cfg: &TrainConfig,
    log: &mut LossLog,
) -> Result<Segmenter> {
    if cases.is_empty() {
        return Err(Error::Argument("segmenter training needs at least one case".into()));
    }
    let mut seg = Segmenter::init(arch.clone(), &mut stream_rng(cfg.seed, stream::INIT, 2))?;
    let pairs: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(c, case)| (1..=case.phase_set.n_total()).map(move |p| (c, p)))
        .collect();
    let steps_per_epoch = pairs.len().div_ceil(cfg.seg_batch);
    let total = (steps_per_epoch * cfg.seg_epochs) as f64;
    let mut opt = Sgd::new(&seg.params, cfg.seg_momentum as f32, true);
    let mut step = 0usize;
    let mut sample_index = 0u64;
    for epoch in 0..cfg.seg_epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut stream_rng(cfg.seed, stream::SEGMENTER, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.seg_batch) {
            let lr = cfg.seg_lr * (1.0 - step as f64 / total).powf(cfg.seg_poly_power);
            let mut acc = None;
            let mut batch_loss = 0.0;
            for &(c, p) in batch {
                let case = &cases[c];
                let v = case.phase_set.get(p).expect("complete training case");
                let mut rng = stream_rng(cfg.seed, stream::AUGMENT, sample_index);
                sample_index += 1;
                let (v, gt) = augment(v, &case.gt_seg, &cfg.augment, &mut rng)?;
                let (l, grads) = sample_grads(&seg, &v, &gt)?;
                batch_loss += l;
                accumulate(&mut acc, grads);
            }
            let mut grads = acc.expect("non-empty batch");
            scale_grads(&mut grads, 1.0 / batch.len() as f32);
            opt.step(&mut seg.params, &grads, lr as f32)?;
            step += 1;
            batch_loss /= batch.len() as f64;
            epoch_loss += batch_loss;
            log.push(LossRecord {
                stage: "segmenter".into(),
                iter: step as u64,
                seg: Some(batch_loss),
                ..Default::default()
            })?;
        }
        info!(
            "segmenter epoch {}/{}: mean loss {:.4}",
            epoch + 1,
            cfg.seg_epochs,
            epoch_loss / steps_per_epoch as f64
        );
    }
    log.flush()?;
    Ok(seg)
}

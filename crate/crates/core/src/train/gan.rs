use std::collections::BTreeSet;
use std::path::Path;

use log::info;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Networks;
use super::{constant_volume, stream, stream_rng, LossLog, Mode, Stage, TrainConfig, TrainState};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lesion::{pool_on_graph, MaskSource};
use crate::losses::{self, LossRecord, LossWeights, ObjectiveTerms};
use crate::nets::Bound;
use crate::preprocess::assemble_generator_input;
use crate::tensor::Tensor;
use crate::volumes::{CaseRecord, LABEL_TUMOR};

/// Cases for the adversarial stages with the frozen segmenter's features
/// of every real phase, computed once.
pub struct GanData<'a> {
    pub cases: &'a [CaseRecord],
    /// `[case][phase - 1]` K-vectors.
    pub real_features: Vec<Vec<Vec<f32>>>,
}

impl<'a> GanData<'a> {
    pub fn new(cases: &'a [CaseRecord], nets: &Networks) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Argument("adversarial training needs cases".into()));
        }
        let real_features = super::case_features(cases, &nets.seg, MaskSource::Predicted)?;
        Ok(GanData { cases, real_features })
    }
}

/// The missing phases of one draw, stacked `[N_m, D, H, W]`.
fn stack_missing(case: &CaseRecord, missing: &BTreeSet<usize>) -> Tensor<f32> {
    let [d, h, w] = case.phase_set.shape();
    let mut data = Vec::with_capacity(missing.len() * d * h * w);
    for &m in missing {
        data.extend_from_slice(case.phase_set.get(m).expect("complete case").data());
    }
    Tensor::from_vec(&[missing.len(), d, h, w], data).expect("stacked shape")
}

/// Discriminator scores of each channel, concatenated.
fn scores(g: &mut Graph<f32>, nets: &Networks, p: &Bound, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let ch = g.slice(x, m, 1)?;
        out.push(nets.disc.arch.forward(g, p, ch)?);
    }
    g.concat(&out)
}

/// One update of the discriminator on a real/fake pair.
fn d_step(state: &mut TrainState, real: &Tensor<f32>, fake: &Tensor<f32>, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = state.nets.disc.params.bind(&mut g, true);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let sr = scores(&mut g, &state.nets, &p, r)?;
    let sf = scores(&mut g, &state.nets, &p, f)?;
    let loss = losses::adv_d(&mut g, sr, sf, cfg.d_loss_mode)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric { term: "L_adv_D".into() });
    }
    let mut grads = g.backward(loss);
    state
        .opt_d
        .step(&mut state.nets.disc.params, &p.grads(&g, &mut grads))?;
    Ok(value)
}

/// One update of the classifier on a completed feature vector.
fn c_step(state: &mut TrainState, features: Vec<f32>, label: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let p = state.nets.cls.params.bind(&mut g, true);
    let x = g.constant(Tensor::from_vec(&[features.len()], features)?);
    let probs = state.nets.cls.arch.forward(&mut g, &p, x, Some(rng))?;
    let loss = losses::cls(&mut g, probs, label)?;
    let value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss);
    state.opt_c.step(&mut state.nets.cls.params, &p.grads(&g, &mut grads))?;
    Ok(value)
}

/// Segmenter passes over the synthesized channels and the pooled lesion
/// feature of each, recorded on `g` with the segmenter frozen.
fn segment_fake(g: &mut Graph<f32>, nets: &Networks, fake: Var) -> Result<(Vec<Var>, Vec<Var>)> {
    let ps = nets.seg.params.bind(g, false);
    let (mut probs, mut pooled) = (Vec::new(), Vec::new());
    for m in 0..g.shape(fake)[0] {
        let ch = g.slice(fake, m, 1)?;
        let out = nets.seg.arch.forward(g, &ps, ch)?;
        probs.push(out.probs);
        pooled.push(pool_on_graph(g, out, None)?);
    }
    Ok((probs, pooled))
}

/// `L_seg` averaged over synthesized channels, against the tumor mask.
fn seg_term(g: &mut Graph<f32>, probs: &[Var], case: &CaseRecord) -> Result<Var> {
    let tumor = constant_volume(case.gt_seg.channel(LABEL_TUMOR as usize), case.gt_seg.shape());
    let target = g.constant(tumor);
    let mut terms = Vec::with_capacity(probs.len());
    for &p in probs {
        let pred = g.slice(p, LABEL_TUMOR as usize, 1)?;
        terms.push((losses::dice(g, pred, target)?, 1.0 / probs.len() as f64));
    }
    g.weighted_sum(&terms)
}

/// Phase-ordered feature vector: cached features for present phases, the
/// pooled synthesized features for missing ones.
fn completed_features(g: &mut Graph<f32>, real: &[Vec<f32>], missing: &BTreeSet<usize>, pooled: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(real.len());
    let mut next = pooled.iter();
    for (i, f) in real.iter().enumerate() {
        if missing.contains(&(i + 1)) {
            parts.push(*next.next().expect("one pooled vector per missing phase"));
        } else {
            parts.push(g.constant(Tensor::from_vec(&[f.len()], f.clone())?));
        }
    }
    g.concat(&parts)
}

/// One adversarial iteration: discriminator step, optional classifier step
/// (joint fine-tuning), generator step. The generator and segmenter passes
/// on the synthesized volume are shared by all three updates since none of
/// the earlier updates changes them.
pub fn gan_iteration(
    state: &mut TrainState,
    data: &GanData<'_>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    joint: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossRecord> {
    let idx = rng.random_range(0..data.cases.len());
    let case = &data.cases[idx];
    let missing = cfg.missing_mode.sample(case.phase_set.n_total(), rng);
    let inc = case.phase_set.without(&missing)?;
    let input = assemble_generator_input(&inc)?;
    let real = stack_missing(case, &missing);

    let mut g = Graph::new();
    let pg = state.nets.gen.params.bind(&mut g, true);
    let x = g.constant(input.to_tensor());
    let fake = state.nets.gen.arch.forward(&mut g, &pg, x)?;
    let fake_value = g.value(fake).clone();

    let adv_d = d_step(state, &real, &fake_value, cfg)?;

    let need_seg = weights.seg > 0.0 || weights.cls > 0.0 || joint;
    let (probs, pooled) = if need_seg {
        segment_fake(&mut g, &state.nets, fake)?
    } else {
        (Vec::new(), Vec::new())
    };
    let features = if need_seg {
        Some(completed_features(&mut g, &data.real_features[idx], &missing, &pooled)?)
    } else {
        None
    };

    if joint {
        let f = g
            .value(features.expect("joint stage computes features"))
            .data()
            .to_vec();
        c_step(state, f, case.subtype, rng)?;
    }

    let pd = state.nets.disc.params.bind(&mut g, false);
    let sf = scores(&mut g, &state.nets, &pd, fake)?;
    let adv_g = losses::adv_g(&mut g, sf);
    let r = g.constant(real);
    let rec = losses::recon(&mut g, fake, r)?;
    let seg = if need_seg {
        Some(seg_term(&mut g, &probs, case)?)
    } else {
        None
    };
    let cls = match features {
        Some(f) => {
            let pc = state.nets.cls.params.bind(&mut g, false);
            let p = state.nets.cls.arch.forward::<f32, ChaCha8Rng>(&mut g, &pc, f, None)?;
            Some(losses::cls(&mut g, p, case.subtype)?)
        }
        None => None,
    };
    let terms = ObjectiveTerms { adv_g, rec, seg, cls };
    let full = losses::full_objective_graph(&mut g, terms, weights)?;
    let mut grads = g.backward(full);
    state
        .opt_g
        .step(&mut state.nets.gen.params, &pg.grads(&g, &mut grads))?;

    let val = |v: Var| g.value(v).item() as f64;
    Ok(LossRecord {
        stage: String::new(),
        iter: 0,
        adv_g: Some(val(adv_g)),
        adv_d: Some(adv_d),
        rec: Some(val(rec)),
        seg: seg.map(val),
        cls: cls.map(val),
        full: Some(val(full)),
    })
}

/// Diagnostic losses on held-out cases without updating anything. Case `i`
/// drops phase `i mod N + 1` under the single-drop mode.
pub fn validation_losses(
    state: &TrainState,
    data: &GanData<'_>,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<LossRecord> {
    let nets = &state.nets;
    let mut sums = [0.0f64; 6];
    for (i, case) in data.cases.iter().enumerate() {
        let n = case.phase_set.n_total();
        let missing = match &cfg.missing_mode {
            super::MissingMode::Single => BTreeSet::from([i % n + 1]),
            other => other.sample(n, &mut stream_rng(cfg.seed, 0xFA11, i as u64)),
        };
        let input = assemble_generator_input(&case.phase_set.without(&missing)?)?;
        let mut g = Graph::new();
        let pg = nets.gen.params.bind(&mut g, false);
        let x = g.constant(input.to_tensor());
        let fake = nets.gen.arch.forward(&mut g, &pg, x)?;
        let pd = nets.disc.params.bind(&mut g, false);
        let r = g.constant(stack_missing(case, &missing));
        let sr = scores(&mut g, nets, &pd, r)?;
        let sf = scores(&mut g, nets, &pd, fake)?;
        let adv_d = losses::adv_d(&mut g, sr, sf, cfg.d_loss_mode)?;
        let adv_g = losses::adv_g(&mut g, sf);
        let rec = losses::recon(&mut g, fake, r)?;
        let (probs, pooled) = segment_fake(&mut g, nets, fake)?;
        let seg = seg_term(&mut g, &probs, case)?;
        let f = completed_features(&mut g, &data.real_features[i], &missing, &pooled)?;
        let pc = nets.cls.params.bind(&mut g, false);
        let p = nets.cls.arch.forward::<f32, ChaCha8Rng>(&mut g, &pc, f, None)?;
        let cls = losses::cls(&mut g, p, case.subtype)?;
        let terms = ObjectiveTerms {
            adv_g,
            rec,
            seg: Some(seg),
            cls: Some(cls),
        };
        let full = losses::full_objective_graph(&mut g, terms, weights)?;
        for (s, v) in sums.iter_mut().zip([adv_g, adv_d, rec, seg, cls, full]) {
            *s += g.value(v).item() as f64;
        }
    }
    let n = data.cases.len() as f64;
    let [adv_g, adv_d, rec, seg, cls, full] = sums.map(|s| s / n);
    Ok(LossRecord {
        stage: "validation".into(),
        iter: 0,
        adv_g: Some(adv_g),
        adv_d: Some(adv_d),
        rec: Some(rec),
        seg: Some(seg),
        cls: Some(cls),
        full: Some(full),
    })
}

/// Hooks for long runs: periodic checkpoints and validation records.
#[derive(Default)]
pub struct StageHooks<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub validation: Option<&'a GanData<'a>>,
}

fn run_stage(
    state: &mut TrainState,
    data: &GanData<'_>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    stage: Stage,
    total: u64,
    log: &mut LossLog,
    hooks: &StageHooks<'_>,
) -> Result<()> {
    let (joint, tag, name) = match stage {
        Stage::GanInitial => (false, stream::GAN_INITIAL, "gan_initial"),
        Stage::JointFinetune => (true, stream::JOINT, "joint_finetune"),
        Stage::Done => return Ok(()),
    };
    while state.iter < total {
        let t = state.iter;
        let mut rng = stream_rng(cfg.seed, tag, t);
        let mut rec = gan_iteration(state, data, cfg, weights, joint, &mut rng)?;
        state.iter += 1;
        rec.stage = name.into();
        rec.iter = state.iter;
        log.push(rec)?;
        if state.iter % 100 == 0 {
            let r = log.records.last().expect("just pushed");
            info!(
                "{name} {}/{total}: adv_G {:.4} adv_D {:.4} rec {:.4}",
                state.iter,
                r.adv_g.unwrap_or(f64::NAN),
                r.adv_d.unwrap_or(f64::NAN),
                r.rec.unwrap_or(f64::NAN)
            );
        }
        if let Some(v) = hooks.validation {
            if cfg.validate_every > 0 && state.iter % cfg.validate_every == 0 {
                let mut r = validation_losses(state, v, cfg, weights)?;
                r.iter = state.iter;
                r.stage = format!("validation_{name}");
                log.push(r)?;
            }
        }
        if let Some(dir) = hooks.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 {
                state.save(dir)?;
                log.flush()?;
            }
        }
    }
    state.check_segmenter_frozen()?;
    log.flush()
}

/// Initial adversarial training with the classifier frozen.
pub fn train_gan_initial(
    state: &mut TrainState,
    data: &GanData<'_>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    t1: u64,
    log: &mut LossLog,
) -> Result<()> {
    if state.stage != Stage::GanInitial {
        return Err(Error::Argument(format!("state is in stage {:?}", state.stage)));
    }
    run_stage(
        state,
        data,
        cfg,
        weights,
        Stage::GanInitial,
        t1,
        log,
        &StageHooks::default(),
    )
}

/// Joint fine-tuning: discriminator, classifier, then generator per
/// iteration.
pub fn joint_finetune(
    state: &mut TrainState,
    data: &GanData<'_>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    t2: u64,
    log: &mut LossLog,
) -> Result<()> {
    if state.stage != Stage::JointFinetune {
        return Err(Error::Argument(format!("state is in stage {:?}", state.stage)));
    }
    run_stage(
        state,
        data,
        cfg,
        weights,
        Stage::JointFinetune,
        t2,
        log,
        &StageHooks::default(),
    )
}

/// Runs whatever remains of both adversarial stages for `mode`, resuming
/// from the state's stage and iteration counter.
pub fn run_gan_stages(
    state: &mut TrainState,
    data: &GanData<'_>,
    cfg: &TrainConfig,
    mode: Mode,
    log: &mut LossLog,
    hooks: &StageHooks<'_>,
) -> Result<()> {
    if !mode.uses_generator() {
        return Err(Error::Argument(format!("mode {mode} trains no generator")));
    }
    let (weights, t1, t2) = mode.schedule(cfg);
    if state.stage == Stage::Done && state.iter < t2 {
        // a finished run resumed with a longer fine-tuning schedule
        state.stage = Stage::JointFinetune;
    }
    if state.stage == Stage::GanInitial {
        run_stage(state, data, cfg, &weights, Stage::GanInitial, t1, log, hooks)?;
        info!("initial adversarial stage done after {t1} iterations");
        state.stage = Stage::JointFinetune;
        state.iter = 0;
        if let Some(dir) = hooks.checkpoint_dir {
            state.save(dir)?;
        }
    }
    if state.stage == Stage::JointFinetune {
        run_stage(state, data, cfg, &weights, Stage::JointFinetune, t2, log, hooks)?;
        state.stage = Stage::Done;
        if let Some(dir) = hooks.checkpoint_dir {
            state.save(dir)?;
        }
    }
    Ok(())
}

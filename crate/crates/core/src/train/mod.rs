//! The training procedure: segmenter, classifier pretraining, initial
//! adversarial training and joint fine-tuning, plus the baseline variants.
//!
//! Every random draw comes from a generator derived from
//! `(seed, stage, iteration)`, so a stage resumed from a checkpoint follows
//! the same trajectory as an uninterrupted one.

pub mod augment;
mod classifier;
mod gan;
pub mod optim;
mod segmenter;
mod state;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::AugmentConfig;
pub use classifier::{
    case_features, fit_classifier, pretrain_classifier, subset_features, train_cls_kp, LabeledFeatures,
};
pub use gan::{
    gan_iteration, joint_finetune, run_gan_stages, train_gan_initial, validation_losses, GanData, StageHooks,
};
pub use optim::{Adam, Grads, Sgd};
pub use segmenter::{segmentation_loss, train_segmenter};
pub use state::{Networks, Stage, TrainState};

use crate::error::{Error, Result};
use crate::losses::{DLossMode, LossRecord, LossWeights};
use crate::tensor::Tensor;

/// How the missing set is drawn for each adversarial iteration.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MissingMode {
    /// One phase, uniformly among the `N` single drops.
    #[default]
    Single,
    /// Always the same phases.
    FixedSet { phases: BTreeSet<usize> },
    /// `k` distinct phases drawn uniformly.
    RandomK { k: usize },
}

impl MissingMode {
    /// `N_m`, the generator's output channel count.
    pub fn n_missing(&self) -> usize {
        match self {
            MissingMode::Single => 1,
            MissingMode::FixedSet { phases } => phases.len(),
            MissingMode::RandomK { k } => *k,
        }
    }

    pub fn validate(&self, n_phases: usize) -> Result<()> {
        let k = self.n_missing();
        if k == 0 || k >= n_phases {
            return Err(Error::Config(format!("cannot drop {k} of {n_phases} phases")));
        }
        if let MissingMode::FixedSet { phases } = self {
            if phases.iter().any(|&p| p == 0 || p > n_phases) {
                return Err(Error::Config(format!(
                    "fixed missing set {phases:?} outside 1..={n_phases}"
                )));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, n_phases: usize, rng: &mut R) -> BTreeSet<usize> {
        match self {
            MissingMode::Single => BTreeSet::from([rng.random_range(1..=n_phases)]),
            MissingMode::FixedSet { phases } => phases.clone(),
            MissingMode::RandomK { k } => sample(rng, n_phases, *k).into_iter().map(|i| i + 1).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial adversarial iterations.
    pub t1: u64,
    /// Joint fine-tuning iterations.
    pub t2: u64,
    pub seg_epochs: usize,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub seg_poly_power: f64,
    pub seg_batch: usize,
    pub adam_lr: f64,
    pub adam_betas: [f64; 2],
    pub gan_batch: usize,
    /// Classifier pretraining iterations (batch 1).
    pub cls_iters: u64,
    /// Optional early stop once the running mean loss over one pass of the
    /// training set drops below this value.
    pub cls_target_loss: Option<f64>,
    pub loss_weights: LossWeights,
    pub d_loss_mode: DLossMode,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub missing_mode: MissingMode,
    /// Adversarial iterations between checkpoints; 0 writes only at stage ends.
    pub checkpoint_every: u64,
    /// Adversarial iterations between validation records; 0 disables them.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t1: 2000,
            t2: 1000,
            seg_epochs: 12,
            seg_lr: 0.01,
            seg_momentum: 0.99,
            seg_poly_power: 0.9,
            seg_batch: 2,
            adam_lr: 1e-4,
            adam_betas: [0.5, 0.999],
            gan_batch: 1,
            cls_iters: 6000,
            cls_target_loss: None,
            loss_weights: LossWeights::default(),
            d_loss_mode: DLossMode::MeanOfTerms,
            seed: 2024,
            augment: AugmentConfig::default(),
            missing_mode: MissingMode::Single,
            checkpoint_every: 500,
            validate_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_phases: usize) -> Result<()> {
        if !(self.seg_lr > 0.0) || !(self.adam_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.seg_momentum) || self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("momentum terms must lie in [0, 1)".into()));
        }
        if self.seg_batch == 0 {
            return Err(Error::Config("seg_batch must be positive".into()));
        }
        if self.gan_batch != 1 {
            return Err(Error::Config("adversarial stages run with batch size 1".into()));
        }
        self.loss_weights.validate()?;
        self.missing_mode.validate(n_phases)
    }
}

/// Training variant: the full method or one of the comparison baselines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// One classifier per phase combination, no synthesis.
    #[serde(rename = "cls_kP", alias = "cls_3P")]
    ClsKp,
    /// Adversarial and reconstruction losses only.
    #[serde(rename = "base_syn")]
    BaseSyn,
    /// Adds the segmentation loss.
    #[serde(rename = "syn_seg")]
    SynSeg,
    #[default]
    #[serde(rename = "diagnosis_gan")]
    DiagnosisGan,
    /// The full objective without joint fine-tuning.
    #[serde(rename = "diagnosis_gan_no_joint")]
    DiagnosisGanNoJoint,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::ClsKp,
        Mode::BaseSyn,
        Mode::SynSeg,
        Mode::DiagnosisGan,
        Mode::DiagnosisGanNoJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ClsKp => "cls_kP",
            Mode::BaseSyn => "base_syn",
            Mode::SynSeg => "syn_seg",
            Mode::DiagnosisGan => "diagnosis_gan",
            Mode::DiagnosisGanNoJoint => "diagnosis_gan_no_joint",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "cls_kP" | "cls_3P" => Ok(Mode::ClsKp),
            "base_syn" => Ok(Mode::BaseSyn),
            "syn_seg" => Ok(Mode::SynSeg),
            "diagnosis_gan" => Ok(Mode::DiagnosisGan),
            "diagnosis_gan_no_joint" => Ok(Mode::DiagnosisGanNoJoint),
            other => Err(Error::Argument(format!("unknown mode `{other}`"))),
        }
    }

    pub fn uses_generator(self) -> bool {
        self != Mode::ClsKp
    }

    /// Loss weights and stage lengths for this variant. The synthesis-only
    /// baselines get the same total number of adversarial iterations as
    /// the full method, all in the initial stage.
    pub fn schedule(self, cfg: &TrainConfig) -> (LossWeights, u64, u64) {
        let w = cfg.loss_weights;
        match self {
            Mode::DiagnosisGan => (w, cfg.t1, cfg.t2),
            Mode::DiagnosisGanNoJoint => (w, cfg.t1, 0),
            Mode::BaseSyn => (
                LossWeights {
                    seg: 0.0,
                    cls: 0.0,
                    ..w
                },
                cfg.t1 + cfg.t2,
                0,
            ),
            Mode::SynSeg => (LossWeights { cls: 0.0, ..w }, cfg.t1 + cfg.t2, 0),
            Mode::ClsKp => (w, 0, 0),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Random stream tags, one per consumer.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const SEGMENTER: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const CLASSIFIER: u64 = 4;
    pub const GAN_INITIAL: u64 = 5;
    pub const JOINT: u64 = 6;
}

/// Generator for draw `index` of stream `tag`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(index);
    r
}

/// Collects loss records and mirrors them to a JSON-lines file.
#[derive(Default)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
    writer: Option<BufWriter<File>>,
}

impl LossLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            records: Vec::new(),
            writer: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, r: LossRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("losses.jsonl", e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io("losses.jsonl", e))?;
        }
        Ok(())
    }

    pub fn stage(&self, stage: &str) -> impl Iterator<Item = &LossRecord> {
        let stage = stage.to_string();
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

/// `acc += g` for every named tensor.
fn accumulate(acc: &mut Option<Grads>, g: Grads) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (k, t) in g {
                a.get_mut(&k).expect("same layout").add_assign(&t);
            }
        }
    }
}

fn scale_grads(g: &mut Grads, k: f32) {
    for t in g.values_mut() {
        t.scale(k);
    }
}

fn constant_volume(data: &[f32], shape: [usize; 3]) -> Tensor<f32> {
    Tensor::from_vec(&[1, shape[0], shape[1], shape[2]], data.to_vec()).expect("volume shape")
}

/// Mean of a sliding window of the last `n` values.
pub fn running_mean(values: &[f64], n: usize) -> Vec<f64> {
    let n = n.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= n {
            sum -= values[i - n];
        }
        out.push(sum / (i + 1).min(n) as f64);
    }
    out
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{stream, stream_rng, Adam, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::params::{load_archive, save_archive};
use crate::nets::{Classifier, Discriminator, DiscriminatorArch, Generator, GeneratorArch, ParamSet, Segmenter};

#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub gen: Generator,
    pub disc: Discriminator,
    pub seg: Segmenter,
    pub cls: Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GanInitial,
    JointFinetune,
    Done,
}

/// Everything needed to continue adversarial training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub nets: Networks,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_c: Adam,
    pub stage: Stage,
    /// Completed iterations of `stage`.
    pub iter: u64,
    /// Segmenter checksum taken when the state was created.
    pub seg_checksum: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    stage: Stage,
    iter: u64,
    seg_checksum: String,
    opt_steps: [u64; 3],
    adam_lr: [f32; 3],
    adam_betas: [[f32; 2]; 3],
}

const STATE_FILE: &str = "state.json";

impl TrainState {
    /// Fresh generator and discriminator around a trained segmenter and
    /// pretrained classifier.
    pub fn new(
        gen_arch: GeneratorArch,
        disc_arch: DiscriminatorArch,
        seg: Segmenter,
        cls: Classifier,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let gen = Generator::init(gen_arch, &mut stream_rng(cfg.seed, stream::INIT, 0))?;
        let disc = Discriminator::init(disc_arch, &mut stream_rng(cfg.seed, stream::INIT, 1))?;
        let betas = cfg.adam_betas.map(|b| b as f32);
        let lr = cfg.adam_lr as f32;
        Ok(TrainState {
            opt_g: Adam::new(&gen.params, lr, betas),
            opt_d: Adam::new(&disc.params, lr, betas),
            opt_c: Adam::new(&cls.params, lr, betas),
            seg_checksum: seg.params.checksum(),
            nets: Networks { gen, disc, seg, cls },
            stage: Stage::GanInitial,
            iter: 0,
        })
    }

    pub fn check_segmenter_frozen(&self) -> Result<()> {
        if self.nets.seg.params.checksum() != self.seg_checksum {
            return Err(Error::Numeric {
                term: "segmenter parameters changed".into(),
            });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let n = &self.nets;
        save_archive(dir, "generator", &n.gen.arch, &n.gen.params)?;
        save_archive(dir, "discriminator", &n.disc.arch, &n.disc.params)?;
        save_archive(dir, "segmenter", &n.seg.arch, &n.seg.params)?;
        save_archive(dir, "classifier", &n.cls.arch, &n.cls.params)?;
        for (name, opt, arch) in [
            ("opt_g", &self.opt_g, serde_json::to_value(&n.gen.arch)),
            ("opt_d", &self.opt_d, serde_json::to_value(&n.disc.arch)),
            ("opt_c", &self.opt_c, serde_json::to_value(&n.cls.arch)),
        ] {
            let arch = arch.map_err(|e| Error::Format(e.to_string()))?;
            save_archive(dir, &format!("{name}_m"), &arch, &opt.m)?;
            save_archive(dir, &format!("{name}_v"), &arch, &opt.v)?;
        }
        let opts = [&self.opt_g, &self.opt_d, &self.opt_c];
        let meta = StateMeta {
            stage: self.stage,
            iter: self.iter,
            seg_checksum: self.seg_checksum.clone(),
            opt_steps: opts.map(|o| o.steps),
            adam_lr: opts.map(|o| o.lr),
            adam_betas: opts.map(|o| [o.beta1, o.beta2]),
        };
        let path = dir.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Restores a state saved by [`TrainState::save`]; `template` fixes the
    /// expected architectures.
    pub fn load(dir: &Path, template: &TrainState) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: StateMeta =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let t = &template.nets;
        let load = |name: &str, arch: &serde_json::Value, like: &ParamSet| load_archive(dir, name, arch, like);
        let ga = serde_json::to_value(&t.gen.arch).map_err(|e| Error::Format(e.to_string()))?;
        let da = serde_json::to_value(&t.disc.arch).map_err(|e| Error::Format(e.to_string()))?;
        let sa = serde_json::to_value(&t.seg.arch).map_err(|e| Error::Format(e.to_string()))?;
        let ca = serde_json::to_value(&t.cls.arch).map_err(|e| Error::Format(e.to_string()))?;
        let nets = Networks {
            gen: Generator {
                arch: t.gen.arch.clone(),
                params: load("generator", &ga, &t.gen.params)?,
            },
            disc: Discriminator {
                arch: t.disc.arch.clone(),
                params: load("discriminator", &da, &t.disc.params)?,
            },
            seg: Segmenter {
                arch: t.seg.arch.clone(),
                params: load("segmenter", &sa, &t.seg.params)?,
            },
            cls: Classifier {
                arch: t.cls.arch.clone(),
                params: load("classifier", &ca, &t.cls.params)?,
            },
        };
        let opt = |name: &str, arch: &serde_json::Value, like: &ParamSet, i: usize| -> Result<Adam> {
            Ok(Adam {
                lr: meta.adam_lr[i],
                beta1: meta.adam_betas[i][0],
                beta2: meta.adam_betas[i][1],
                eps: 1e-8,
                m: load(&format!("{name}_m"), arch, like)?,
                v: load(&format!("{name}_v"), arch, like)?,
                steps: meta.opt_steps[i],
            })
        };
        let state = TrainState {
            opt_g: opt("opt_g", &ga, &t.gen.params, 0)?,
            opt_d: opt("opt_d", &da, &t.disc.params, 1)?,
            opt_c: opt("opt_c", &ca, &t.cls.params, 2)?,
            nets,
            stage: meta.stage,
            iter: meta.iter,
            seg_checksum: meta.seg_checksum,
        };
        if state.nets.seg.params.checksum() != state.seg_checksum {
            return Err(Error::Checkpoint(
                "segmenter archive does not match the recorded checksum".into(),
            ));
        }
        Ok(state)
    }
}

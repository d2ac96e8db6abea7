//! The five commands behind the `mpct` binary, as library functions.
//!
//! A run directory looks like
//!
//! ```text
//! run/
//!   config.snapshot        canonical TOML of the effective configuration
//!   checkpoints/           resumable training state
//!   logs/losses.jsonl      one loss record per line
//!   reports/               evaluation and classification outputs
//!   state/                 final parameter archives and a config copy
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    default_data_range, evaluate_protocol, missing_sets, synthesize_missing, Comparison, Completion, Model,
};
use crate::lesion::{assemble_lesion_features, phase_features};
use crate::nets::params::{load_arch, load_archive, save_archive};
use crate::nets::{Classifier, ClassifierArch, Generator, GeneratorArch, Segmenter};
use crate::phantom::{generate_dataset, SplitManifest};
use crate::preprocess::prepare_case;
use crate::train::{
    pretrain_classifier, run_gan_stages, train_cls_kp, train_segmenter, GanData, LossLog, MissingMode, Mode,
    StageHooks, TrainState,
};
use crate::volumes::{load_case, save_case, save_volume, CaseRecord, PhaseSet, SUBTYPE_NAMES};

pub const SNAPSHOT: &str = "config.snapshot";
pub const SPLIT_FILE: &str = "split.json";

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join(SNAPSHOT)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("logs").join("losses.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn state(&self) -> PathBuf {
        self.root.join("state")
    }

    fn create(&self) -> Result<()> {
        for d in [self.checkpoints(), self.root.join("logs"), self.reports(), self.state()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Configuration stored in the run.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let path = self.snapshot();
        if !path.is_file() {
            return Err(Error::Argument(format!(
                "{} is not a run directory",
                self.root.display()
            )));
        }
        ExperimentConfig::load(&path)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

/// Writes the phantom dataset and `split.json` to `out_dir`.
pub fn cmd_phantom_gen(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SplitManifest> {
    let (cases, split) = generate_dataset(&cfg.phantom)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for c in &cases {
        save_case(c, out_dir)?;
    }
    write_text(&out_dir.join(SPLIT_FILE), &to_json(&split)?)?;
    info!("wrote {} cases to {}", cases.len(), out_dir.display());
    Ok(split)
}

/// Dataset cases split into train/val/test and brought onto the model grid.
pub struct Dataset {
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
}

pub fn load_dataset(data_dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = data_dir.join(SPLIT_FILE);
    if !path.is_file() {
        return Err(Error::Argument(format!("{} has no {SPLIT_FILE}", data_dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let split: SplitManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let load = |ids: &[String]| -> Result<Vec<CaseRecord>> {
        ids.iter()
            .map(|id| prepare_case(&load_case(&data_dir.join(id))?, &cfg.preprocess))
            .collect()
    };
    Ok(Dataset {
        train: load(&split.train)?,
        val: load(&split.val)?,
        test: load(&split.test)?,
    })
}

const SEGMENTER: &str = "segmenter";
const PRETRAINED_CLASSIFIER: &str = "classifier_pretrained";

fn load_segmenter(dir: &Path, cfg: &ExperimentConfig) -> Result<Segmenter> {
    let arch = cfg.arch.segmenter();
    let template = Segmenter::init(arch.clone(), &mut layout_rng())?;
    let params = load_archive(dir, SEGMENTER, &arch, &template.params)?;
    Ok(Segmenter { arch, params })
}

fn load_classifier(dir: &Path, name: &str) -> Result<Classifier> {
    let arch: ClassifierArch = load_arch(dir, name)?;
    let template = Classifier::init(arch.clone(), &mut layout_rng())?;
    let params = load_archive(dir, name, &arch, &template.params)?;
    Ok(Classifier { arch, params })
}

/// Parameters drawn here only fix the layout that archives are checked
/// against.
fn layout_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

fn archive_exists(dir: &Path, name: &str) -> bool {
    dir.join(format!("{name}.safetensors")).is_file()
}

fn cls_kp_name(m: &BTreeSet<usize>) -> String {
    format!(
        "cls_kP_missing_{}",
        m.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("_")
    )
}

/// Missing sets the protocol and the Cls-kP baseline cover for a training
/// missing mode.
pub fn protocol_sets(mode: &MissingMode, n_phases: usize, k: Option<usize>) -> Vec<BTreeSet<usize>> {
    match (mode, k) {
        (MissingMode::FixedSet { phases }, None) => vec![phases.clone()],
        (_, Some(k)) => missing_sets(n_phases, k),
        (m, None) => missing_sets(n_phases, m.n_missing()),
    }
}

/// Outcome of [`cmd_train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub archives: Vec<String>,
    pub iterations: u64,
}

/// Runs the stages of `cfg.mode` into `run_dir`, resuming from its
/// checkpoints when present.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, run_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = RunDir::new(run_dir);
    run.create()?;
    let snapshot = cfg.to_toml()?;
    write_text(&run.snapshot(), &snapshot)?;
    let data = load_dataset(data_dir, cfg)?;
    let ckpt = run.checkpoints();
    let mut log = LossLog::to_file(&run.losses())?;
    let tc = &cfg.train;

    let seg = if let Some(pre) = &cfg.paths.pretrained {
        load_segmenter(&RunDir::new(pre).checkpoints(), cfg)?
    } else if archive_exists(&ckpt, SEGMENTER) {
        load_segmenter(&ckpt, cfg)?
    } else {
        let s = train_segmenter(&data.train, &cfg.arch.segmenter(), tc, &mut log)?;
        save_archive(&ckpt, SEGMENTER, &s.arch, &s.params)?;
        s
    };
    let state_dir = run.state();
    save_archive(&state_dir, SEGMENTER, &seg.arch, &seg.params)?;
    write_text(&state_dir.join(SNAPSHOT), &snapshot)?;
    let template = cfg.arch.classifier(1);

    if cfg.mode == Mode::ClsKp {
        let sets = protocol_sets(&tc.missing_mode, cfg.arch.n_phases, cfg.eval.missing_k);
        let trained = train_cls_kp(&data.train, &seg, &sets, &template, tc, &mut log)?;
        let mut archives = vec![SEGMENTER.to_string()];
        for (m, c) in &trained {
            let name = cls_kp_name(m);
            save_archive(&state_dir, &name, &c.arch, &c.params)?;
            archives.push(name);
        }
        log.flush()?;
        return Ok(TrainSummary {
            mode: cfg.mode,
            archives,
            iterations: 0,
        });
    }

    let cls = if let Some(pre) = &cfg.paths.pretrained {
        load_classifier(&RunDir::new(pre).checkpoints(), PRETRAINED_CLASSIFIER)?
    } else if archive_exists(&ckpt, PRETRAINED_CLASSIFIER) {
        load_classifier(&ckpt, PRETRAINED_CLASSIFIER)?
    } else {
        let c = pretrain_classifier(&data.train, &seg, cfg.lesion_mask, &template, tc, &mut log)?;
        save_archive(&ckpt, PRETRAINED_CLASSIFIER, &c.arch, &c.params)?;
        c
    };
    let n_out = tc.missing_mode.n_missing();
    let fresh = TrainState::new(cfg.arch.generator(n_out), cfg.arch.discriminator(), seg, cls, tc)?;
    let mut state = if ckpt.join("state.json").is_file() {
        let s = TrainState::load(&ckpt, &fresh)?;
        info!("resuming at {:?} iteration {}", s.stage, s.iter);
        s
    } else {
        fresh
    };
    let train_data = GanData::new(&data.train, &state.nets)?;
    let val_data = if tc.validate_every > 0 && !data.val.is_empty() {
        Some(GanData::new(&data.val, &state.nets)?)
    } else {
        None
    };
    let hooks = StageHooks {
        checkpoint_dir: Some(&ckpt),
        validation: val_data.as_ref(),
    };
    run_gan_stages(&mut state, &train_data, tc, cfg.mode, &mut log, &hooks)?;
    state.save(&ckpt)?;
    let n = &state.nets;
    save_archive(&state_dir, "generator", &n.gen.arch, &n.gen.params)?;
    save_archive(&state_dir, "discriminator", &n.disc.arch, &n.disc.params)?;
    save_archive(&state_dir, "classifier", &n.cls.arch, &n.cls.params)?;
    log.flush()?;
    let (_, t1, t2) = cfg.mode.schedule(tc);
    Ok(TrainSummary {
        mode: cfg.mode,
        archives: vec![
            "generator".into(),
            "discriminator".into(),
            SEGMENTER.into(),
            "classifier".into(),
        ],
        iterations: t1 + t2,
    })
}

/// Trained networks of a run's `state/` directory.
pub struct TrainedRun {
    pub cfg: ExperimentConfig,
    pub seg: Segmenter,
    pub gen: Option<Generator>,
    pub cls: Option<Classifier>,
    pub cls_kp: Vec<(BTreeSet<usize>, Classifier)>,
}

impl TrainedRun {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let run = RunDir::new(run_dir);
        let cfg = run.config()?;
        let dir = run.state();
        if !archive_exists(&dir, SEGMENTER) {
            return Err(Error::Argument(format!(
                "{} holds no trained segmenter",
                run_dir.display()
            )));
        }
        let seg = load_segmenter(&dir, &cfg)?;
        let mut out = TrainedRun {
            seg,
            gen: None,
            cls: None,
            cls_kp: Vec::new(),
            cfg,
        };
        if out.cfg.mode == Mode::ClsKp {
            let sets = protocol_sets(
                &out.cfg.train.missing_mode,
                out.cfg.arch.n_phases,
                out.cfg.eval.missing_k,
            );
            for m in sets {
                let c = load_classifier(&dir, &cls_kp_name(&m))?;
                out.cls_kp.push((m, c));
            }
        } else {
            if !archive_exists(&dir, "generator") {
                return Err(Error::Argument(format!(
                    "{} holds no trained generator",
                    run_dir.display()
                )));
            }
            let arch: GeneratorArch = load_arch(&dir, "generator")?;
            let template = Generator::init(arch.clone(), &mut layout_rng())?;
            let params = load_archive(&dir, "generator", &arch, &template.params)?;
            out.gen = Some(Generator { arch, params });
            out.cls = Some(load_classifier(&dir, "classifier")?);
        }
        Ok(out)
    }

    pub fn model(&self) -> Model<'_> {
        let completion = match (&self.gen, &self.cls) {
            (Some(gen), Some(cls)) => Completion::Synthesis { gen, cls },
            _ => Completion::Direct(&self.cls_kp),
        };
        Model {
            name: self.cfg.mode.to_string(),
            seg: &self.seg,
            completion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub synthesized: Vec<PathBuf>,
    pub completed_case: PathBuf,
}

/// Synthesizes the missing phases of the case in `case_dir`. `missing`
/// selects which synthesized volumes are written (all by default); the
/// completed case is written next to them.
pub fn cmd_synthesize(
    run_dir: &Path,
    case_dir: &Path,
    missing: Option<&BTreeSet<usize>>,
    out_dir: &Path,
) -> Result<SynthesisOutput> {
    let run = TrainedRun::load(run_dir)?;
    let gen = run
        .gen
        .as_ref()
        .ok_or_else(|| Error::Argument(format!("{} has no generator", run_dir.display())))?;
    let case = prepare_case(&load_case(case_dir)?, &run.cfg.preprocess)?;
    let case_missing = case.phase_set.missing().clone();
    if case_missing.is_empty() {
        return Err(Error::Argument(format!("case {} is already complete", case.id)));
    }
    let wanted = missing.cloned().unwrap_or_else(|| case_missing.clone());
    if wanted.is_empty() || !wanted.is_subset(&case_missing) {
        return Err(Error::Argument(format!(
            "requested phases {wanted:?} are not among the missing phases {case_missing:?} of case {}",
            case.id
        )));
    }
    let fill = synthesize_missing(gen, &case.phase_set)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut synthesized = Vec::new();
    for m in &wanted {
        let base = out_dir.join(format!("{}_synth_phase{m}", case.id));
        save_volume(&fill[m], &base)?;
        synthesized.push(base);
    }
    let completed = CaseRecord::new(
        format!("{}_completed", case.id),
        case.phase_set.completed_with(fill)?,
        case.gt_seg.clone(),
        case.subtype,
    )?;
    let completed_case = save_case(&completed, out_dir)?;
    Ok(SynthesisOutput {
        synthesized,
        completed_case,
    })
}

/// Class distribution for one study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtypeDistribution {
    pub case: String,
    pub probabilities: BTreeMap<String, f64>,
    pub label: String,
    pub label_index: usize,
}

/// Classifies the complete case in `case_dir` (or, for a Cls-kP run, an
/// incomplete case with a matching classifier) and writes
/// `reports/classify_<id>.json`.
pub fn cmd_classify(run_dir: &Path, case_dir: &Path) -> Result<SubtypeDistribution> {
    let run = TrainedRun::load(run_dir)?;
    let case = prepare_case(&load_case(case_dir)?, &run.cfg.preprocess)?;
    let manual = (run.cfg.lesion_mask == crate::lesion::MaskSource::Manual).then_some(&case.gt_seg);
    let probs = match &run.cls {
        Some(cls) => {
            if !case.phase_set.is_complete() {
                return Err(Error::Argument(format!(
                    "case {} misses phases {:?}; synthesize them first",
                    case.id,
                    case.phase_set.missing()
                )));
            }
            cls.predict(&assemble_lesion_features(&case.phase_set, &run.seg, manual)?)?
        }
        None => {
            let missing = case.phase_set.missing();
            let (_, cls) = run
                .cls_kp
                .iter()
                .find(|(m, _)| m == missing)
                .ok_or_else(|| Error::Argument(format!("no classifier for missing phases {missing:?}")))?;
            let mut f = Vec::new();
            for (_, v) in case.phase_set.present() {
                f.extend(phase_features(&run.seg, v, manual)?);
            }
            cls.predict(&f)?
        }
    };
    let label_index = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("at least two classes");
    let out = SubtypeDistribution {
        case: case.id.clone(),
        probabilities: SUBTYPE_NAMES
            .iter()
            .zip(&probs)
            .map(|(n, &p)| (n.to_string(), p as f64))
            .collect(),
        label: SUBTYPE_NAMES[label_index].to_string(),
        label_index,
    };
    let reports = RunDir::new(run_dir).reports();
    fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    write_text(&reports.join(format!("classify_{}.json", case.id)), &to_json(&out)?)?;
    Ok(out)
}

/// Runs the simulated-drop protocol on the test split of `data_dir` for
/// every run and compares them. The report is written to
/// `<out_dir>/evaluation.json` and `<out_dir>/evaluation.txt`.
pub fn cmd_evaluate(
    run_dirs: &[PathBuf],
    data_dir: &Path,
    out_dir: &Path,
    threads: Option<usize>,
) -> Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(Error::Argument("evaluate needs at least one run".into()));
    }
    let runs = run_dirs
        .iter()
        .map(|r| TrainedRun::load(r))
        .collect::<Result<Vec<_>>>()?;
    let first = &runs[0].cfg;
    let mut perm = first.eval.permutation.clone();
    if let Some(t) = threads {
        perm.threads = t;
    }
    let sets = protocol_sets(&first.train.missing_mode, first.arch.n_phases, first.eval.missing_k);
    let data_range = first
        .eval
        .data_range
        .unwrap_or_else(|| default_data_range(crate::volumes::IntensityUnit::Normalized, &first.preprocess));
    let test = load_dataset(data_dir, first)?.test;
    let mut reports = Vec::with_capacity(runs.len());
    for run in &runs {
        let r = evaluate_protocol(&run.model(), &test, &sets, data_range, run.cfg.lesion_mask)?;
        info!("{}: mAUC {:.4} over {} studies", r.mode, r.mauc, r.cases.len());
        reports.push(r);
    }
    let cmp = Comparison::new(reports, &perm)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("evaluation.json"), &to_json(&cmp)?)?;
    write_text(&out_dir.join("evaluation.txt"), &cmp.table(&SUBTYPE_NAMES))?;
    Ok(cmp)
}

/// Parses `"1,4"` into a phase set.
pub fn parse_phase_list(s: &str) -> Result<BTreeSet<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("bad phase index `{p}`")))
        })
        .collect()
}

/// Incomplete copy of `case` for experiments with the commands.
pub fn drop_case_phases(case: &CaseRecord, missing: &BTreeSet<usize>) -> Result<CaseRecord> {
    let ps: PhaseSet = case.phase_set.without(missing)?;
    CaseRecord::new(case.id.clone(), ps, case.gt_seg.clone(), case.subtype)
}

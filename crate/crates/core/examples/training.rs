//! The staged training schedule on a tiny phantom: segmenter, classifier
//! pretraining, initial adversarial training and joint fine-tuning, with a
//! checkpoint written and restored in between.

use mpct::lesion::MaskSource;
use mpct::nets::{ClassifierArch, DiscriminatorArch, GeneratorArch, SegmenterArch};
use mpct::phantom::{generate_dataset, PhantomConfig};
use mpct::train::{
    pretrain_classifier, run_gan_stages, running_mean, train_segmenter, AugmentConfig, GanData, LossLog, Mode,
    StageHooks, TrainConfig, TrainState,
};

fn main() -> mpct::error::Result<()> {
    let phantom = PhantomConfig {
        volume_shape: [16, 16, 16],
        n_cases: 20,
        kidney_semi_axes: [5.0, 5.0, 5.0],
        tumor_radius_range: [2.0, 3.0],
        ..PhantomConfig::default()
    };
    let (cases, split) = generate_dataset(&phantom)?;
    let train: Vec<_> = cases.into_iter().filter(|c| split.train.contains(&c.id)).collect();
    let cfg = TrainConfig {
        t1: 40,
        t2: 20,
        seg_epochs: 8,
        cls_iters: 1500,
        augment: AugmentConfig::none(),
        checkpoint_every: 0,
        validate_every: 0,
        ..TrainConfig::default()
    };
    let mut log = LossLog::in_memory();

    let seg = train_segmenter(&train, &SegmenterArch::new(4, 2), &cfg, &mut log)?;
    let cls = pretrain_classifier(
        &train,
        &seg,
        MaskSource::Predicted,
        &ClassifierArch::new(1, 5),
        &cfg,
        &mut log,
    )?;
    let cls_losses: Vec<f64> = log.stage("classifier").filter_map(|r| r.cls).collect();
    let smooth = running_mean(&cls_losses, 20);
    println!(
        "classifier pretraining: running-mean loss {:.3} -> {:.3}",
        smooth[19.min(smooth.len() - 1)],
        smooth[smooth.len() - 1]
    );

    let mut state = TrainState::new(
        GeneratorArch::new(4, 1, 4, 2),
        DiscriminatorArch::new(4, 2),
        seg,
        cls,
        &cfg,
    )?;
    let data = GanData::new(&train, &state.nets)?;
    let hooks = StageHooks::default();

    // initial stage only, then a checkpoint round trip
    let initial = TrainConfig { t2: 0, ..cfg.clone() };
    run_gan_stages(&mut state, &data, &initial, Mode::DiagnosisGan, &mut log, &hooks)?;
    let dir = std::env::temp_dir().join("mpct-training-example");
    state.save(&dir)?;
    let mut resumed = TrainState::load(&dir, &state)?;
    println!("checkpoint restored bit-exactly: {}", resumed == state);

    // the longer schedule continues with joint fine-tuning
    run_gan_stages(&mut resumed, &data, &cfg, Mode::DiagnosisGan, &mut log, &hooks)?;
    for stage in ["gan_initial", "joint_finetune"] {
        let recs: Vec<_> = log.stage(stage).collect();
        let rec: Vec<f64> = recs.iter().filter_map(|r| r.rec).collect();
        let smooth = running_mean(&rec, 10);
        println!(
            "{stage}: {} iterations, running-mean L_rec {:.3} -> {:.3}",
            recs.len(),
            smooth[0],
            smooth[smooth.len() - 1]
        );
    }
    println!("segmenter untouched: {}", resumed.check_segmenter_frozen().is_ok());
    Ok(())
}

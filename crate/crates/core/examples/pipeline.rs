//! The command-line workflow as library calls on a tiny configuration:
//! phantom generation, training DiagnosisGAN and BaseSyn, synthesis and
//! classification of one incomplete study, and the comparison report.

use std::collections::BTreeSet;

use mpct::cli::{cmd_classify, cmd_evaluate, cmd_phantom_gen, cmd_synthesize, cmd_train, drop_case_phases};
use mpct::config::ExperimentConfig;
use mpct::train::Mode;
use mpct::volumes::{load_case, save_case, SUBTYPE_NAMES};

const CONFIG: &str = r#"
[phantom]
volume_shape = [16, 16, 16]
n_cases = 20
kidney_semi_axes = [5.0, 5.0, 5.0]
tumor_radius_range = [2.0, 3.0]

[preprocess]
crop_shape = [16, 16, 16]

[arch]
width = 4
levels = 2
disc_width = 4
disc_layers = 2

[train]
t1 = 30
t2 = 15
seg_epochs = 2
cls_iters = 300
checkpoint_every = 0
validate_every = 0

[eval.permutation]
n_perm = 500
"#;

fn main() -> mpct::error::Result<()> {
    let root = std::env::temp_dir().join("mpct-pipeline-example");
    let _ = std::fs::remove_dir_all(&root);
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let data = root.join("data");
    let split = cmd_phantom_gen(&cfg, &data)?;
    println!("phantom: {} train / {} test cases", split.train.len(), split.test.len());

    let dgan = root.join("diagnosis_gan");
    let summary = cmd_train(&cfg, &data, &dgan)?;
    println!(
        "trained {} ({} iterations): {:?}",
        summary.mode, summary.iterations, summary.archives
    );
    let mut base_cfg = cfg.clone();
    base_cfg.mode = Mode::BaseSyn;
    base_cfg.paths.pretrained = Some(dgan.clone());
    let base = root.join("base_syn");
    cmd_train(&base_cfg, &data, &base)?;

    let case = load_case(&data.join(&split.test[0]))?;
    let studies = root.join("studies");
    std::fs::create_dir_all(&studies).map_err(|e| mpct::error::Error::io(&studies, e))?;
    let incomplete = save_case(&drop_case_phases(&case, &BTreeSet::from([2]))?, &studies)?;
    let synth = cmd_synthesize(&dgan, &incomplete, None, &root.join("synth"))?;
    let dist = cmd_classify(&dgan, &synth.completed_case)?;
    println!(
        "{} (truth {}): predicted {} {:?}",
        case.id, SUBTYPE_NAMES[case.subtype], dist.label, dist.probabilities
    );

    let cmp = cmd_evaluate(&[dgan, base], &data, &root.join("eval"), None)?;
    print!("{}", cmp.table(&SUBTYPE_NAMES));
    Ok(())
}

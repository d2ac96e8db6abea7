//! Builds the four networks at desk scale and runs one forward pass of each
//! on a phantom case.

use std::collections::BTreeSet;

use mpct::lesion::assemble_lesion_features;
use mpct::nets::{Classifier, ClassifierArch, Discriminator, DiscriminatorArch, Generator, GeneratorArch};
use mpct::nets::{Segmenter, SegmenterArch};
use mpct::phantom::{case_rng, generate_case, PhantomConfig, N_SUBTYPES};
use mpct::preprocess::assemble_generator_input;
use mpct::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mpct::error::Result<()> {
    let cfg = PhantomConfig::default();
    let case = generate_case("demo", 1, &mut case_rng(cfg.seed, 0), &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let gen = Generator::init(GeneratorArch::new(4, 1, 8, 3), &mut rng)?;
    let input = assemble_generator_input(&case.phase_set.without(&BTreeSet::from([2]))?)?;
    let fake = gen.synthesize(&input)?;
    println!(
        "G: {} parameters, {:?} -> {:?}",
        gen.params.num_scalars(),
        input.n_channels(),
        fake.shape()
    );

    let disc = Discriminator::init(DiscriminatorArch::new(8, 3), &mut rng)?;
    let scores = disc.score(&fake)?;
    println!(
        "D: {} parameters, score grid {:?}",
        disc.params.num_scalars(),
        scores.shape()
    );

    let seg = Segmenter::init(SegmenterArch::new(8, 3), &mut rng)?;
    let (map, features) = seg.segment(case.phase_set.get(1).expect("phase 1"))?;
    let voxel_sum: f32 = (0..map.channels()).map(|c| map.channel(c)[0]).sum();
    println!(
        "S: {} parameters, {} classes (sum at voxel 0: {voxel_sum:.6}), features {:?}",
        seg.params.num_scalars(),
        map.channels(),
        features.shape()
    );

    let f = assemble_lesion_features(&case.phase_set, &seg, None)?;
    let cls = Classifier::init(ClassifierArch::new(f.len(), N_SUBTYPES), &mut rng)?;
    let probs = cls.predict(&f)?;
    println!(
        "C: {} parameters, {} features -> {probs:.3?}",
        cls.params.num_scalars(),
        f.len()
    );

    let zeros = Tensor::<f32>::zeros(&[cls.arch.input_len]);
    let mut zero_cls = cls.clone();
    for (_, t) in zero_cls.params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    println!("C with zero weights: {:.3?}", zero_cls.predict(zeros.data())?);
    Ok(())
}

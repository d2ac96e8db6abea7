use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::preprocess::{assemble_generator_input, drop_phases};
use crate::volumes::{IntensityUnit, PhaseSet, Volume};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn zeroed(ps: &ParamSet) -> ParamSet {
    ps.map(|_| 0.0)
}

fn run_generator(gen: &GeneratorArch, ps: &ParamSet, x: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let x = g.constant(x);
    let y = gen.forward(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

#[test]
fn generator_shapes() {
    let arch = GeneratorArch::new(4, 1, 4, 3);
    let gen = Generator::init(arch.clone(), &mut rng()).unwrap();
    let y = run_generator(&arch, &gen.params, random_tensor(&[8, 8, 16, 24], 1)).unwrap();
    assert_eq!(y.shape(), &[1, 8, 16, 24]);

    let arch2 = GeneratorArch::new(4, 2, 4, 3);
    let gen2 = Generator::init(arch2.clone(), &mut rng()).unwrap();
    let y = run_generator(&arch2, &gen2.params, random_tensor(&[8, 8, 8, 8], 2)).unwrap();
    assert_eq!(y.shape(), &[2, 8, 8, 8]);
}

#[test]
fn generator_default_desk_shape() {
    let arch = GeneratorArch::new(4, 1, 8, 3);
    let gen = Generator::init(arch, &mut rng()).unwrap();
    let vols: Vec<Volume> = (0..4)
        .map(|i| Volume::filled([32, 40, 48], [1.5, 1.5, 3.0], IntensityUnit::Normalized, i as f32).unwrap())
        .collect();
    let ps = PhaseSet::complete(vols).unwrap();
    let inc = drop_phases(&ps, Some(&BTreeSet::from([2])), &mut rng()).unwrap();
    let y = gen.synthesize(&assemble_generator_input(&inc).unwrap()).unwrap();
    assert_eq!(y.shape(), &[1, 32, 40, 48]);
    assert!(y.is_finite());
}

#[test]
fn generator_rejects_indivisible_dims() {
    let arch = GeneratorArch::new(4, 1, 4, 3);
    let gen = Generator::init(arch.clone(), &mut rng()).unwrap();
    let err = run_generator(&arch, &gen.params, random_tensor(&[8, 8, 12, 8], 1)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    let err = run_generator(&arch, &gen.params, random_tensor(&[6, 8, 8, 8], 1)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn generator_zero_params_zero_output() {
    let arch = GeneratorArch::new(4, 1, 4, 2);
    let gen = Generator::init(arch.clone(), &mut rng()).unwrap();
    let y = run_generator(&arch, &zeroed(&gen.params), random_tensor(&[8, 4, 8, 8], 3)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_count_is_deterministic() {
    let a = GeneratorArch::new(4, 1, 8, 3);
    let n1 = a.init_params(&mut ChaCha8Rng::seed_from_u64(1)).num_scalars();
    let n2 = a.init_params(&mut ChaCha8Rng::seed_from_u64(2)).num_scalars();
    assert_eq!(n1, n2);
    // 8->8 block: 8*8*27 weights + 16 affine
    let c = ClassifierArch::new(32, 5);
    assert_eq!(
        c.init_params(&mut rng()).num_scalars(),
        32 * 64 + 64 + 64 * 32 + 32 + 32 * 5 + 5
    );
}

#[test]
fn discriminator_grid_shape_and_zero_params() {
    let arch = DiscriminatorArch::new(4, 3);
    let d = Discriminator::init(arch.clone(), &mut rng()).unwrap();
    let s = d.score(&random_tensor(&[1, 32, 40, 48], 4)).unwrap();
    assert_eq!(s.shape(), &[1, 4, 5, 6]);
    assert_eq!(arch.output_shape([32, 40, 48]), [4, 5, 6]);
    let z = Discriminator {
        arch,
        params: zeroed(&d.params),
    };
    assert!(z
        .score(&random_tensor(&[1, 16, 16, 16], 5))
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(matches!(
        d.score(&random_tensor(&[1, 4, 16, 16], 5)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn discriminator_constant_input_constant_interior() {
    let arch = DiscriminatorArch::new(4, 3);
    let d = Discriminator::init(arch, &mut rng()).unwrap();
    let s = d.score(&Tensor::full(&[1, 64, 64, 64], 0.7)).unwrap();
    assert_eq!(s.shape(), &[1, 8, 8, 8]);
    // receptive field of cell i spans [8i - 15, 8i + 22]; cells 2..=5 avoid the padding
    let at = |z: usize, y: usize, x: usize| s.data()[(z * 8 + y) * 8 + x];
    let c = at(2, 2, 2);
    for z in 2..=5 {
        for y in 2..=5 {
            for x in 2..=5 {
                assert!((at(z, y, x) - c).abs() <= 1e-5 * c.abs().max(1.0), "{z},{y},{x}");
            }
        }
    }
}

#[test]
fn segmenter_softmax_and_features() {
    let arch = SegmenterArch::new(8, 3);
    let s = Segmenter::init(arch, &mut rng()).unwrap();
    let t = random_tensor(&[1, 32, 40, 48], 6);
    let v = Volume::new([32, 40, 48], [1.5, 1.5, 3.0], IntensityUnit::Normalized, t.into_data()).unwrap();
    let (seg, feats) = s.segment(&v).unwrap();
    assert_eq!(feats.shape(), &[8, 32, 40, 48]);
    let n = 32 * 40 * 48;
    for i in (0..n).step_by(97) {
        let sum: f32 = (0..3).map(|c| seg.channel(c)[i]).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn classifier_contract() {
    let arch = ClassifierArch::new(32, 5);
    let mut c = Classifier::init(arch.clone(), &mut rng()).unwrap();
    c.params = zeroed(&c.params);
    let p = c.predict(&[0.0; 32]).unwrap();
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-7));

    let c = Classifier::init(arch.clone(), &mut rng()).unwrap();
    let x = random_tensor(&[32], 7).into_data();
    let a = c.predict(&x).unwrap();
    assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6 && a.iter().all(|&v| v >= 0.0));
    assert_eq!(a, c.predict(&x).unwrap());
    assert!(matches!(c.predict(&x[..31]), Err(Error::Shape(_))));

    // training mode uses dropout
    let mut g = Graph::<f32>::new();
    let p = c.params.bind(&mut g, false);
    let xv = g.constant(Tensor::from_vec(&[32], x.clone()).unwrap());
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let outs: Vec<Vec<f32>> = (0..4)
        .map(|_| {
            let y = arch.forward(&mut g, &p, xv, Some(&mut r)).unwrap();
            g.value(y).data().to_vec()
        })
        .collect();
    assert!(outs.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn instance_norm_standardizes() {
    let mut g = Graph::<f64>::new();
    let t = random_tensor(&[3, 4, 5, 6], 8).convert::<f64>().map(|v| 3.0 * v + 1.5);
    let x = g.constant(t);
    let y = g.instance_norm(x, None, None, 1e-5).unwrap();
    let v = g.value(y);
    for c in 0..3 {
        let ch = v.channel(c);
        let n = ch.len() as f64;
        let m = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        assert!(m.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn archive_round_trip_and_arch_check() {
    let dir = tempfile::tempdir().unwrap();
    let arch = GeneratorArch::new(4, 1, 4, 2);
    let gen = Generator::init(arch.clone(), &mut rng()).unwrap();
    params::save_archive(dir.path(), "generator", &arch, &gen.params).unwrap();
    let back = params::load_archive(dir.path(), "generator", &arch, &gen.params).unwrap();
    assert_eq!(back, gen.params);
    assert_eq!(back.checksum(), gen.params.checksum());

    let other = GeneratorArch::new(4, 1, 8, 2);
    let err = params::load_archive(dir.path(), "generator", &other, &other.init_params(&mut rng())).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
}

#[test]
fn checksum_detects_single_bit() {
    let arch = ClassifierArch::new(8, 5);
    let c = Classifier::init(arch, &mut rng()).unwrap();
    let mut p = c.params.clone();
    let t = p.get_mut("fc2.bias").unwrap();
    t.data_mut()[0] = f32::from_bits(t.data()[0].to_bits() ^ 1);
    assert_ne!(p.checksum(), c.params.checksum());
}

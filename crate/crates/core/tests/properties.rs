//! Property tests over randomly drawn shapes, intensities and scores.

use mpct::autograd::Graph;
use mpct::eval::{auc_one_vs_all, dice_score, mauc, permutation_test, psnr, PermutationTest};
use mpct::nets::GeneratorArch;
use mpct::preprocess::{clip_normalize, PreprocessConfig};
use mpct::tensor::Tensor;
use mpct::volumes::{IntensityUnit, Volume};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores_and_labels() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (4usize..16).prop_flat_map(|m| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), m),
            prop::collection::vec(0usize..5, m),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_keeps_spatial_shape(
        levels in 1usize..=2,
        mults in prop::array::uniform3(1usize..=3),
        n_out in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let arch = GeneratorArch::new(4, n_out, 2, levels);
        let dims = mults.map(|m| m << levels);
        let params = arch.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false);
        let n: usize = dims.iter().product();
        let x = g.constant(Tensor::from_vec(&[8, dims[0], dims[1], dims[2]], (0..8 * n).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap());
        let y = arch.forward(&mut g, &p, x).unwrap();
        prop_assert_eq!(g.shape(y), &[n_out, dims[0], dims[1], dims[2]][..]);
    }
}

proptest! {
    #[test]
    fn clip_normalize_is_monotone(mut hu in prop::collection::vec(-1500.0f32..3000.0, 2..64)) {
        hu.sort_by(f32::total_cmp);
        let v = Volume::new([1, 1, hu.len()], [1.0; 3], IntensityUnit::Hu, hu).unwrap();
        let cfg = PreprocessConfig::default();
        let out = clip_normalize(&v, &cfg).unwrap();
        prop_assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
        let lo = (cfg.hu_window[0] - cfg.norm_mean) / cfg.norm_std;
        let hi = (cfg.hu_window[1] - cfg.norm_mean) / cfg.norm_std;
        prop_assert!(out.data().iter().all(|&x| x >= lo - 1e-6 && x <= hi + 1e-6));
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in scores_and_labels()) {
        let warped: Vec<Vec<f64>> = scores
            .iter()
            .map(|row| row.iter().map(|&s| s.exp() * 2.0 + s.powi(3)).collect())
            .collect();
        match (auc_one_vs_all(&scores, &labels), auc_one_vs_all(&warped, &labels)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.per_class, b.per_class),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn dice_is_symmetric(a in prop::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<bool> = a.iter().map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect();
        prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
    }

    #[test]
    fn psnr_drops_as_error_grows(
        base in prop::collection::vec(-2.0f32..2.0, 8..64),
        small in 0.01f32..0.5,
        factor in 1.5f32..4.0,
    ) {
        let shape = [1, 1, base.len()];
        let a = Volume::new(shape, [1.0; 3], IntensityUnit::Normalized, base.clone()).unwrap();
        let shifted = |eps: f32| {
            let d = base.iter().enumerate().map(|(i, &x)| if i % 2 == 0 { x + eps } else { x - eps }).collect();
            a.with_data(d, IntensityUnit::Normalized).unwrap()
        };
        let near = psnr(&a, &shifted(small), 4.0).unwrap();
        let far = psnr(&a, &shifted(small * factor), 4.0).unwrap();
        prop_assert!(near > far);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_test_is_symmetric(
        (a, labels) in scores_and_labels(),
        noise in prop::collection::vec(-1.0f64..1.0, 80),
        seed in any::<u64>(),
    ) {
        let b: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(c, &s)| s + noise[(i * 5 + c) % 80]).collect())
            .collect();
        let test = PermutationTest { n_perm: 200, seed, threads: 1 };
        let ab = permutation_test(mauc, &a, &b, &labels, &test);
        let ba = permutation_test(mauc, &b, &a, &labels, &test);
        match (ab, ba) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one direction failed"),
        }
    }
}

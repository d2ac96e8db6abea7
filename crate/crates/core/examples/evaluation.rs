//! Synthesis and diagnosis metrics on toy inputs: PSNR, SSIM, Dice,
//! one-vs-all AUC and the paired permutation test.

use mpct::eval::{auc_one_vs_all, dice_score, mauc, missing_sets, permutation_test, psnr, ssim3d, PermutationTest};
use mpct::volumes::{IntensityUnit, Volume};

fn main() -> mpct::error::Result<()> {
    let shape = [8, 8, 8];
    let truth: Vec<f32> = (0..512).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
    let a = Volume::new(shape, [1.0; 3], IntensityUnit::Normalized, truth.clone())?;
    for noise in [0.01f32, 0.1, 0.5] {
        let noisy: Vec<f32> = truth
            .iter()
            .enumerate()
            .map(|(i, &x)| x + noise * if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let b = a.with_data(noisy, IntensityUnit::Normalized)?;
        println!(
            "noise {noise}: PSNR {:.2} dB, SSIM {:.4}",
            psnr(&a, &b, 2.0)?,
            ssim3d(&a, &b, 2.0)?
        );
    }

    let pred = [true, true, false, false, true];
    let gt = [true, false, false, false, true];
    println!("Dice {:.4}", dice_score(&pred, &gt)?);

    let labels = vec![0, 0, 1, 1, 2, 2, 3, 4];
    let good: Vec<Vec<f64>> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            (0..5)
                .map(|c| if c == l { 0.6 } else { 0.1 } + 0.01 * i as f64)
                .collect()
        })
        .collect();
    let flat: Vec<Vec<f64>> = labels.iter().map(|_| vec![0.2; 5]).collect();
    let auc = auc_one_vs_all(&good, &labels)?;
    println!(
        "per-class AUC {:?}, mAUC {:.3}; uninformative mAUC {:.3}",
        auc.per_class,
        auc.mauc,
        mauc(&flat, &labels)?
    );

    let test = PermutationTest {
        n_perm: 2000,
        ..PermutationTest::default()
    };
    println!(
        "p(good vs flat) = {:.4}",
        permutation_test(mauc, &good, &flat, &labels, &test)?
    );
    println!(
        "p(good vs good) = {:.4}",
        permutation_test(mauc, &good, &good, &labels, &test)?
    );
    println!("simulated drops of two of four phases: {:?}", missing_sets(4, 2));
    Ok(())
}

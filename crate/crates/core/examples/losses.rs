//! Loss terms on small hand-made inputs, including the least-squares GAN
//! equilibrium values.

use mpct::losses::{
    adv_d_value, adv_g_value, cls_value, dice_value, full_objective, recon_value, DLossMode, LossParts, LossWeights,
};

fn main() -> mpct::error::Result<()> {
    let half = vec![0.5; 8];
    println!(
        "D outputs 0.5 everywhere: L_adv_G = {}, L_adv_D = {}",
        adv_g_value(&half),
        adv_d_value(&half, &half, DLossMode::MeanOfTerms)
    );
    println!(
        "perfect D: L_adv_G = {}, L_adv_D = {}",
        adv_g_value(&[0.0; 8]),
        adv_d_value(&[1.0; 8], &[0.0; 8], DLossMode::MeanOfTerms)
    );

    let real = [0.0, 1.0, 2.0, 3.0];
    let fake = [0.5, 1.0, 1.0, 3.0];
    let rec = recon_value(&fake, &real)?;
    println!("L_rec = {rec}");

    let target = [1.0, 1.0, 0.0, 0.0];
    let seg = dice_value(&[0.9, 0.8, 0.1, 0.0], &target)?;
    println!("L_seg = {seg:.5} (perfect mask: {:.2e})", dice_value(&target, &target)?);

    let cls = cls_value(&[0.1, 0.6, 0.1, 0.1, 0.1], 1)?;
    println!("L_cls = {cls:.5}");

    let parts = LossParts {
        adv_g: 0.25,
        rec,
        seg,
        cls,
    };
    let w = LossWeights::default();
    println!("full objective with {w:?}: {:.5}", full_objective(&parts, &w)?);
    Ok(())
}

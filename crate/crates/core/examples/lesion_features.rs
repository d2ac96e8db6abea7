//! Lesion-level features: masked average pooling of the segmenter's
//! low-level feature map, with predicted and with ground-truth tumor masks.

use mpct::lesion::{manual_mask, masked_average_pool, phase_features};
use mpct::nets::{Segmenter, SegmenterArch};
use mpct::phantom::{case_rng, generate_case, PhantomConfig};
use mpct::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mpct::error::Result<()> {
    // pooling by hand: two channels over four voxels, half of them masked
    let features = Tensor::from_vec(&[2, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 5.0])?;
    let pooled = masked_average_pool(&features, &[1.0, 0.0, 1.0, 0.0])?;
    println!("pooled {pooled:?} (channel means over voxels 0 and 2)");

    let cfg = PhantomConfig::default();
    let case = generate_case("demo", 3, &mut case_rng(cfg.seed, 5), &cfg)?;
    let seg = Segmenter::init(SegmenterArch::new(8, 3), &mut ChaCha8Rng::seed_from_u64(1))?;
    let tumor_voxels = manual_mask(&case.gt_seg).iter().filter(|&&m| m > 0.0).count();
    println!("{} has {tumor_voxels} tumor voxels", case.id);
    for (p, v) in case.phase_set.present() {
        let predicted = phase_features(&seg, v, None)?;
        let manual = phase_features(&seg, v, Some(&case.gt_seg))?;
        println!("phase {p}: predicted-mask {predicted:.3?}");
        println!("         manual-mask    {manual:.3?}");
    }
    Ok(())
}

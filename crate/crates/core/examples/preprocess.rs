//! Brings an HU scan onto the model grid and assembles the generator input
//! for a study with a dropped phase.

use std::collections::{BTreeMap, BTreeSet};

use mpct::preprocess::{assemble_generator_input, prepare_case, PreprocessConfig};
use mpct::volumes::{CaseRecord, IntensityUnit, PhaseSet, SegMap, Volume};

fn main() -> mpct::error::Result<()> {
    // a 20×30×30 scan at 2 mm in-plane and 4.5 mm slices, intensities in HU
    let shape = [20, 30, 30];
    let n: usize = shape.iter().product();
    let mut phases = BTreeMap::new();
    for p in 1..=4 {
        let data = (0..n)
            .map(|i| -200.0 + (i % 97) as f32 * 6.0 + 40.0 * p as f32)
            .collect();
        phases.insert(p, Volume::new(shape, [2.0, 2.0, 4.5], IntensityUnit::Hu, data)?);
    }
    let labels: Vec<u8> = (0..n)
        .map(|i| {
            if i % 11 == 0 {
                2
            } else if i % 3 == 0 {
                1
            } else {
                0
            }
        })
        .collect();
    let case = CaseRecord::new(
        "scan",
        PhaseSet::new(phases, 4)?,
        SegMap::from_labels(shape, &labels)?,
        0,
    )?;

    let cfg = PreprocessConfig::default();
    let prepared = prepare_case(&case, &cfg)?;
    let v = prepared.phase_set.get(1).expect("phase 1");
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    println!(
        "{:?} at {:?} mm ({:?}) -> {:?} at {:?} mm ({:?}), values in [{lo:.3}, {hi:.3}]",
        shape,
        [2.0, 2.0, 4.5],
        IntensityUnit::Hu,
        v.shape(),
        v.spacing(),
        v.unit()
    );

    let dropped = prepared.phase_set.without(&BTreeSet::from([3]))?;
    let input = assemble_generator_input(&dropped)?;
    println!(
        "generator input: {} channels, missing {:?}; mask channel of phase 3 is all {}",
        input.n_channels(),
        input.missing,
        input.channel(4 + 2)[0]
    );
    Ok(())
}

//! Generates a small phantom dataset, checks the region means of one case
//! against the configured enhancement curves and writes it to disk.
//!
//! ```text
//! cargo run --release --example phantom -- /tmp/phantom
//! ```

use std::path::PathBuf;

use mpct::phantom::{expected_levels, generate_dataset, PhantomConfig};
use mpct::volumes::{save_case, PHASE_NAMES, SUBTYPE_NAMES};

fn main() -> mpct::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mpct-phantom"));
    let cfg = PhantomConfig {
        n_cases: 10,
        ..PhantomConfig::default()
    };
    let (cases, split) = generate_dataset(&cfg)?;
    println!(
        "{} cases, split {}/{}/{}",
        cases.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let case = &cases[0];
    let labels = case.gt_seg.labels();
    let expected = expected_levels(&cfg, case.subtype);
    println!("{} is {}", case.id, SUBTYPE_NAMES[case.subtype]);
    for (p, v) in case.phase_set.present() {
        print!("  {:<13}", PHASE_NAMES[p - 1]);
        for (label, curve) in &expected {
            let (sum, n) = labels
                .iter()
                .zip(v.data())
                .filter(|(l, _)| *l == label)
                .fold((0.0f64, 0usize), |(s, n), (_, &x)| (s + x as f64, n + 1));
            print!("  label {label}: {:+.3} (curve {:+.2})", sum / n as f64, curve[p - 1]);
        }
        println!();
    }

    std::fs::create_dir_all(&out).map_err(|e| mpct::error::Error::io(&out, e))?;
    for c in &cases {
        save_case(c, &out)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

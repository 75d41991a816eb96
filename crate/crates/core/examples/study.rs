//! Pre-runs the three acceptance power studies into target/acceptance so
//! the acceptance test can resume from the record files.

use splinetrial::harness::*;
use std::path::PathBuf;

fn main() {
    let reps: usize = std::env::var("ACCEPTANCE_REPLICATES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1000);
    let dir = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/acceptance"));
    std::fs::create_dir_all(&dir).unwrap();
    let studies = [
        (Scenario::Pad, EffectArm::Power, "pad-power.csv"),
        (Scenario::Pad, EffectArm::Type1, "pad-type1.csv"),
        (Scenario::PadCovid, EffectArm::Power, "pad-covid-power.csv"),
    ];
    for (scenario, arm, file) in studies {
        let config = StudyConfig::new(scenario, arm, reps, 20211128);
        let path = dir.join(file);
        eprintln!("== {} {} -> {}", scenario.label(), arm.label(), path.display());
        let summaries = run_study(&config, &path).unwrap();
        eprint!("{}", SummaryTable(&summaries));
    }
}

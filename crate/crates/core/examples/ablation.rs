//! Train every prompt variant on one shared pretrained backbone and compare
//! average recall under predicted task identity.
//!
//! `cargo run --release --example ablation -- [train seed]`

use std::time::Instant;

use lpi::continual::IdentityMode;
use lpi::io::report::summarize;
use lpi::io::{generate_dataset, GeneratorSpec, RunConfig};
use lpi::RunState;

fn main() -> lpi::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(2), |s| s.parse()).expect("seed is an integer");
    let data = generate_dataset(&GeneratorSpec::default())?;
    let mut cfg = RunConfig::default();
    cfg.seeds.train = seed;
    let base = RunState::pretrain(&cfg, &data)?;

    for variant in ["cp", "dp", "lpi-m", "lpi-p"] {
        cfg.train.variant = variant.parse()?;
        let t = Instant::now();
        let mut run = RunState::with_backbone(&cfg, base.backbone.clone())?;
        run.train_until(&data, None, |_| Ok(()))?;
        let avg = summarize(&run.evaluate(&data, IdentityMode::Predicted)?)?.modes[0].average;
        println!(
            "{variant:>6}: R@1 {:.2} R@5 {:.2} R@10 {:.2} forgetting {:.2} ({:.0?})",
            avg.r1,
            avg.r5,
            avg.r10,
            avg.forgetting,
            t.elapsed()
        );
    }
    Ok(())
}

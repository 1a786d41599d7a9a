//! Generate the default stream of tasks, pretrain a backbone, train one
//! prompt variant task by task and print recall and forgetting.
//!
//! `cargo run --release --example continual_run -- [variant]`

use std::time::Instant;

use lpi::continual::{Evaluator, IdentityMode, Variant};
use lpi::io::report::summarize;
use lpi::io::{generate_dataset, GeneratorSpec, RunConfig};
use lpi::RunState;

fn main() -> lpi::Result<()> {
    let variant: Variant = std::env::args().nth(1).as_deref().unwrap_or("lpi-m").parse()?;
    let data = generate_dataset(&GeneratorSpec::default())?;
    let mut cfg = RunConfig::default();
    cfg.train.variant = variant;

    let t = Instant::now();
    let mut run = RunState::pretrain(&cfg, &data)?;
    println!("pretrained backbone in {:.1?}", t.elapsed());

    let t = Instant::now();
    run.train_until(&data, None, |s| {
        let r = s.reports.last().expect("a report per stage");
        println!("task {} losses {:?}", r.task_id, r.epoch_losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>());
        Ok(())
    })?;
    println!("trained {} tasks with {variant} in {:.1?}", run.stage(), t.elapsed());

    let tests = data.test_sets();
    let mut ev = Evaluator::new(&run.backbone, &tests, cfg.eval.gallery);
    println!("identity accuracy {:.3}", ev.identity_accuracy(&run.pool, run.stage())?);
    for mode in [IdentityMode::None, IdentityMode::Oracle, IdentityMode::Predicted] {
        let t = Instant::now();
        let records = ev.evaluate_run(&run.pool, mode)?;
        let avg = summarize(&records)?.modes[0].average;
        println!(
            "{mode:>9}: R@1 {:.2} R@5 {:.2} R@10 {:.2} forgetting {:.2} ({:.1?})",
            avg.r1, avg.r5, avg.r10, avg.forgetting, t.elapsed()
        );
    }
    Ok(())
}

//! Build a task key per task from the frozen backbone and predict the task
//! of every test query, on clean data and on data with more noise.
//!
//! `cargo run --release --example task_identity`

use lpi::continual::{train_task, Evaluator, PromptPool, TrainConfig};
use lpi::io::{generate_dataset, GeneratorSpec, RunConfig};
use lpi::numerics::RngStreams;
use lpi::RunState;

fn main() -> lpi::Result<()> {
    let cfg = RunConfig::default();
    let clean = generate_dataset(&GeneratorSpec::default())?;
    let base = RunState::pretrain(&cfg, &clean)?;
    // Zero epochs: prompts stay at their init and only the keys are built.
    let keys_only = TrainConfig { epochs: 0, ..cfg.train.clone() };
    let streams = RngStreams::new(cfg.seeds.train);

    for noise_factor in [1.0, 2.0, 4.0] {
        let spec = GeneratorSpec { noise: GeneratorSpec::default().noise * noise_factor, ..Default::default() };
        let data = generate_dataset(&spec)?;
        let mut pool = PromptPool::new();
        for task in &data.tasks {
            train_task(&mut pool, &base.backbone, &task.spec, &task.train, &keys_only, &streams)?;
        }
        let tests = data.test_sets();
        let mut ev = Evaluator::new(&base.backbone, &tests, cfg.eval.gallery);
        let acc = ev.identity_accuracy(&pool, pool.len())?;
        println!("noise {:.2}: identity accuracy {:.3}", spec.noise, acc);
    }
    Ok(())
}

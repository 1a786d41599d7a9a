//! Interrupt a run after two tasks, checkpoint it, resume from disk, and
//! check that the result matches an uninterrupted run byte for byte.
//!
//! `cargo run --release --example checkpoint_resume`

use lpi::io::{generate_dataset, GeneratorSpec, RunConfig};
use lpi::RunState;

fn main() -> lpi::Result<()> {
    let spec = GeneratorSpec {
        tasks: ["appliance", "sports", "outdoor"].map(String::from).to_vec(),
        classes_per_task: 3,
        train_per_class: 12,
        ..Default::default()
    };
    let data = generate_dataset(&spec)?;
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 3;
    let dir = std::env::temp_dir().join(format!("lpi-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| lpi::Error::io(&dir, e))?;

    let base = RunState::pretrain(&cfg, &data)?;
    let mut whole = RunState::with_backbone(&cfg, base.backbone.clone())?;
    whole.train_until(&data, None, |_| Ok(()))?;
    whole.save(&dir.join("whole.ckpt"))?;

    let part = dir.join("part.ckpt");
    let mut first = RunState::with_backbone(&cfg, base.backbone)?;
    first.train_until(&data, Some(2), |s| s.save(&part))?;
    let mut resumed = RunState::load(&part)?;
    println!("resumed at stage {}", resumed.stage());
    resumed.train_until(&data, None, |_| Ok(()))?;
    resumed.save(&dir.join("resumed.ckpt"))?;

    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| lpi::Error::io(&dir.join(name), e));
    let (a, b) = (read("whole.ckpt")?, read("resumed.ckpt")?);
    println!("checkpoints: {} bytes, identical: {}", a.len(), a == b);
    println!("in-memory states equal: {}", resumed == whole);
    std::fs::remove_dir_all(&dir).map_err(|e| lpi::Error::io(&dir, e))?;
    Ok(())
}

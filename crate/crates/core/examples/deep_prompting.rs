//! Encode a batch through the dual encoder with no prompts, with per-modality
//! prompts, and with fused cross-modal prompts, and print the pair scores.
//!
//! `cargo run --release --example deep_prompting`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lpi::encoder::{encode_pair, Backbone, BackboneConfig, PromptConfig, PromptSet};
use lpi::numerics::{RngStreams, Tape, Tensor};

fn main() -> lpi::Result<()> {
    let cfg = BackboneConfig::default();
    let streams = RngStreams::new(1);
    let mut backbone = Backbone::init(&cfg, &streams)?;
    backbone.freeze();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = 3;
    let vision = Tensor::randn(&[batch, cfg.patches, cfg.patch_dim], 1.0, &mut rng);
    let text: Vec<usize> = (0..batch * cfg.caption_len).map(|_| rng.gen_range(32..cfg.vocab)).collect();

    let plain = PromptConfig::default();
    let fused = PromptConfig { fusion: true, ..plain };
    let sets = [
        ("no prompts", None),
        ("prompts", Some(PromptSet::init(0, &cfg, &plain, &streams, "example/plain")?)),
        ("fused prompts", Some(PromptSet::init(0, &cfg, &fused, &streams, "example/fused")?)),
    ];
    for (label, set) in &sets {
        let mut tape = Tape::new();
        let bb = backbone.bind(&mut tape);
        let bound = set.as_ref().map(|s| s.bind(&mut tape)).transpose()?;
        let e = encode_pair(&mut tape, &cfg, &bb, &vision, &text, bound.as_ref())?;
        let scores = tape.matmul_t(e.vision.feature, e.text.feature)?;
        let s = tape.value(scores);
        let rows: Vec<String> = (0..batch)
            .map(|i| s.row(i).iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(" "))
            .collect();
        println!("{label:>13}: {} prompt layers, scores [{}]", e.vision.slot_states.len(), rows.join(" | "));
    }
    Ok(())
}

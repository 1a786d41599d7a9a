//! Build factored prompts, reconstruct them, and compare the per-task
//! parameter cost of factored and dense prompts.
//!
//! `cargo run --release --example lowrank_prompts`

use lpi::lowrank::{
    brute_force_reconstruct, param_count, reconstruct_linear, CoupledPromptFactors, LinearFactors, PromptDims,
    PromptKind,
};
use lpi::numerics::RngStreams;

fn main() -> lpi::Result<()> {
    let streams = RngStreams::new(3);
    let factors = CoupledPromptFactors::init(6, 4, 32, 24, 4, &streams, "example/prompts");
    let vision = factors.vision()?;
    let text = factors.text()?;
    let pv = vision.reconstruct();
    let pl = text.reconstruct();
    println!("vision prompts {:?}, text prompts {:?}", pv.shape(), pl.shape());
    println!(
        "fast and brute-force reconstruction differ by {:.1e}",
        pv.max_abs_diff(&brute_force_reconstruct(&vision))
    );
    let std = (pv.data().iter().map(|x| x * x).sum::<f64>() / pv.numel() as f64).sqrt();
    println!("reconstructed prompt std at init {std:.4}");

    let map = LinearFactors::init(5, 24, 32, 4, &streams, "example/fusion");
    let (w, b) = reconstruct_linear(&map, 2)?;
    println!("layer-2 fusion weight {:?} and bias {:?}", w.shape(), b.shape());

    for (label, dims) in [
        ("desk", PromptDims { depth: 6, prompt_len: 4, d_vision: 32, d_text: 24, prompt_rank: 4, interaction_rank: 4 }),
        ("large", PromptDims::large_scale()),
    ] {
        let dp = param_count(&dims, PromptKind::Dp, false);
        let fused = param_count(&dims, PromptKind::Dp, true);
        let cp = param_count(&dims, PromptKind::Cp, false);
        println!(
            "{label:>5}: factored {} (+{} fusion), dense {}, ratio {:.1}x",
            dp.total,
            fused.fusion,
            cp.total,
            cp.total as f64 / dp.total as f64
        );
    }
    Ok(())
}

//! Evaluate the retrieval, modality-alignment and task-alignment losses on
//! random prompts and combine them.
//!
//! `cargo run --release --example prompt_losses`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lpi::losses::{cpa_loss, hpa_loss, retrieval_loss, task_label_matrix, total_loss, LossWeights, Temperatures};
use lpi::numerics::{Tape, Tensor, Var};

fn main() -> lpi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let temps = Temperatures::default();
    let mut tape = Tape::new();

    // Retrieval scores are cosines, so features are unit rows as the encoder emits them.
    let v = tape.param(Tensor::randn(&[8, 16], 1.0, &mut rng));
    let t = tape.param(Tensor::randn(&[8, 16], 1.0, &mut rng));
    let (v, t) = (tape.l2_normalize(v)?, tape.l2_normalize(t)?);
    let base = retrieval_loss(&mut tape, v, t, temps.retrieval)?;

    let mut vis: Vec<Var> = Vec::new();
    let mut txt: Vec<Var> = Vec::new();
    for _ in 0..3 {
        vis.push(tape.param(Tensor::randn(&[6, 4, 32], 0.05, &mut rng)));
        txt.push(tape.param(Tensor::randn(&[6, 4, 24], 0.05, &mut rng)));
    }
    let modal = hpa_loss(&mut tape, vis[2], txt[2], temps.modal)?;

    // Tasks 0 and 2 have similar names; task 1 does not.
    let names = vec![vec![1.0, 0.2, 0.0], vec![0.0, 0.1, 1.0], vec![0.9, 0.3, 0.1]];
    let z = task_label_matrix(&names, 0.4)?;
    println!("task labels {:?}", z.z);
    let task = cpa_loss(&mut tape, &vis, &txt, &z, temps.task)?;

    let total = total_loss(&mut tape, base, Some(modal), Some(task), &LossWeights::default())?;
    for (label, var) in [("retrieval", base), ("modality", modal), ("task", task), ("total", total)] {
        println!("{label:>9} loss {:.4}", tape.value(var).item());
    }
    let grads = tape.backward(total)?;
    let g = grads.wrt(vis[0]);
    println!("|grad| on task 0 vision prompts {:.3e}", g.data().iter().map(|x| x * x).sum::<f64>().sqrt());
    Ok(())
}

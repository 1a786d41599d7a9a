//! Differentiate a small attention-style expression on the tape and compare
//! the reverse-mode gradient with central differences.
//!
//! `cargo run --release --example autodiff_gradcheck`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lpi::numerics::{grad_check, Tape, Tensor, Var};

fn attention(tape: &mut Tape, p: &[Var], probe: &Tensor) -> lpi::Result<Var> {
    let (x, wq, wk) = (p[0], p[1], p[2]);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let scores = tape.matmul_t(q, k)?;
    let attn = tape.softmax(scores);
    let mixed = tape.matmul(attn, x)?;
    let normed = tape.layer_norm(mixed, 1e-5);
    // Squared layer-norm outputs have a fixed mean, so read them through a probe.
    let w = tape.constant(probe.clone());
    let read = tape.mul(normed, w)?;
    Ok(tape.sum(read))
}

fn main() -> lpi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = [
        Tensor::randn(&[5, 4], 1.0, &mut rng),
        Tensor::randn(&[4, 3], 0.5, &mut rng),
        Tensor::randn(&[4, 3], 0.5, &mut rng),
    ];
    let probe = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let attention = |t: &mut Tape, p: &[Var]| attention(t, p, &probe);

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = attention(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    for (name, v) in ["x", "w_q", "w_k"].iter().zip(&vars) {
        let g = grads.wrt(*v);
        let norm = g.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("|d loss / d {name}| = {norm:.6}");
    }

    let err = grad_check(attention, &params, 1e-5)?;
    println!("max relative error against central differences: {err:.2e}");
    Ok(())
}

//! Three-factor (CP-style) parameterization of 3-D parameter tensors.
//!
//! A tensor `P` of shape `(I, J, K)` is stored as factors `d1: I×r`,
//! `d2: J×r`, `d3: K×r` and reconstructed as the rank-averaged triple product
//!
//! ```text
//! P[i][j][k] = (1/r) · Σ_t d1[i,t] · d2[j,t] · d3[k,t]
//! ```
//!
//! Visual and textual prompts share their depth factor, and the per-layer
//! affine maps used for cross-modal fusion are factored the same way with the
//! bias appended as an extra input row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStreams, Tape, Tensor, Var};

/// Scale `s` in the factor init standard deviation `(1/r)^(1/3) · s`.
pub const INIT_SCALE: f64 = 0.5;

pub fn init_std(rank: usize) -> f64 {
    (1.0 / rank as f64).cbrt() * INIT_SCALE
}

/// Variance of a reconstructed entry under [`init_factors`]: each of the `r`
/// triple products has variance `σ⁶`, and averaging divides by `r`, giving
/// `σ⁶ / r = s⁶ / r³`.
pub fn reconstructed_init_variance(rank: usize) -> f64 {
    init_std(rank).powi(6) / rank as f64
}

/// Three factor matrices for one 3-D tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TriFactor {
    pub d1: Tensor,
    pub d2: Tensor,
    pub d3: Tensor,
}

impl TriFactor {
    pub fn new(d1: Tensor, d2: Tensor, d3: Tensor) -> Result<Self> {
        for f in [&d1, &d2, &d3] {
            if f.rank() != 2 || f.shape()[1] != d1.shape().get(1).copied().unwrap_or(0) {
                return Err(Error::shape("tri_factor", d1.shape(), f.shape()));
            }
        }
        Ok(Self { d1, d2, d3 })
    }

    pub fn rank(&self) -> usize {
        self.d1.shape()[1]
    }

    pub fn target_shape(&self) -> (usize, usize, usize) {
        (self.d1.shape()[0], self.d2.shape()[0], self.d3.shape()[0])
    }

    /// Dense tensor of shape `(I, J, K)`.
    pub fn reconstruct(&self) -> Tensor {
        let mut tape = Tape::new();
        let vars = [&self.d1, &self.d2, &self.d3].map(|f| tape.constant(f.clone()));
        let p = reconstruct_on(&mut tape, vars[0], vars[1], vars[2])
            .expect("factor shapes validated at construction");
        tape.value(p).clone()
    }

    pub fn is_finite(&self) -> bool {
        self.d1.is_finite() && self.d2.is_finite() && self.d3.is_finite()
    }
}

/// Factors for `shape` with i.i.d. normal entries of standard deviation
/// [`init_std`]`(rank)`, drawn from the named stream.
pub fn init_factors(
    shape: (usize, usize, usize),
    rank: usize,
    streams: &RngStreams,
    stream: &str,
) -> TriFactor {
    let std = init_std(rank);
    let mut rng = streams.stream(stream);
    let d1 = Tensor::randn(&[shape.0, rank], std, &mut rng);
    let d2 = Tensor::randn(&[shape.1, rank], std, &mut rng);
    let d3 = Tensor::randn(&[shape.2, rank], std, &mut rng);
    TriFactor { d1, d2, d3 }
}

/// Differentiable reconstruction from factor nodes `d1: I×r`, `d2: J×r`,
/// `d3: K×r` into an `(I, J, K)` node.
///
/// Rows of `d1` and `d2` are expanded to all `(i, j)` pairs with one-hot
/// selection matrices, multiplied elementwise, and contracted against `d3`.
pub fn reconstruct_on(tape: &mut Tape, d1: Var, d2: Var, d3: Var) -> Result<Var> {
    let (s1, s2, s3) = (tape.shape(d1).to_vec(), tape.shape(d2).to_vec(), tape.shape(d3).to_vec());
    if s1.len() != 2 || s2.len() != 2 || s3.len() != 2 || s1[1] != s2[1] || s1[1] != s3[1] {
        return Err(Error::shape("reconstruct", &s1, &[s2, s3].concat()));
    }
    let (i, j, k, r) = (s1[0], s2[0], s3[0], s1[1]);
    let mut sel_i = vec![0.0; i * j * i];
    let mut sel_j = vec![0.0; i * j * j];
    for a in 0..i {
        for b in 0..j {
            sel_i[(a * j + b) * i + a] = 1.0;
            sel_j[(a * j + b) * j + b] = 1.0;
        }
    }
    let sel_i = tape.constant(Tensor::new(vec![i * j, i], sel_i)?);
    let sel_j = tape.constant(Tensor::new(vec![i * j, j], sel_j)?);
    let rows_i = tape.matmul(sel_i, d1)?;
    let rows_j = tape.matmul(sel_j, d2)?;
    let pair = tape.mul(rows_i, rows_j)?;
    let flat = tape.matmul_t(pair, d3)?;
    let avg = tape.scale(flat, 1.0 / r as f64);
    tape.reshape(avg, &[i, j, k])
}

/// Explicit quadruple loop; the reference for [`TriFactor::reconstruct`].
pub fn brute_force_reconstruct(f: &TriFactor) -> Tensor {
    let (ni, nj, nk) = f.target_shape();
    let r = f.rank();
    let mut out = Vec::with_capacity(ni * nj * nk);
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += f.d1.at(&[i, t]) * f.d2.at(&[j, t]) * f.d3.at(&[k, t]);
                }
                out.push(acc / r as f64);
            }
        }
    }
    Tensor::new(vec![ni, nj, nk], out).expect("shape from factors")
}

/// Visual and textual prompt factors sharing one depth factor.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPromptFactors {
    /// `D × r`, used by both modalities.
    pub shared_depth: Tensor,
    pub vis_token: Tensor,
    pub vis_dim: Tensor,
    pub txt_token: Tensor,
    pub txt_dim: Tensor,
}

impl CoupledPromptFactors {
    pub const NAMES: [&'static str; 5] = ["shared_depth", "vis_token", "vis_dim", "txt_token", "txt_dim"];

    pub fn init(
        depth: usize,
        prompt_len: usize,
        d_vision: usize,
        d_text: usize,
        rank: usize,
        streams: &RngStreams,
        stream: &str,
    ) -> Self {
        let std = init_std(rank);
        let mut rng = streams.stream(stream);
        let mut draw = |rows| Tensor::randn(&[rows, rank], std, &mut rng);
        Self {
            shared_depth: draw(depth),
            vis_token: draw(prompt_len),
            vis_dim: draw(d_vision),
            txt_token: draw(prompt_len),
            txt_dim: draw(d_text),
        }
    }

    pub fn from_tensors(mut t: Vec<Tensor>) -> Result<Self> {
        if t.len() != 5 {
            return Err(Error::domain("prompt_factors", format!("expected 5 factors, got {}", t.len())));
        }
        let txt_dim = t.pop().unwrap_or_else(|| unreachable!());
        let txt_token = t.pop().unwrap_or_else(|| unreachable!());
        let vis_dim = t.pop().unwrap_or_else(|| unreachable!());
        let vis_token = t.pop().unwrap_or_else(|| unreachable!());
        let shared_depth = t.pop().unwrap_or_else(|| unreachable!());
        let f = Self {
            shared_depth,
            vis_token,
            vis_dim,
            txt_token,
            txt_dim,
        };
        f.vision()?;
        f.text()?;
        if f.vis_token.shape()[0] != f.txt_token.shape()[0] {
            return Err(Error::shape("prompt_factors", f.vis_token.shape(), f.txt_token.shape()));
        }
        Ok(f)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.shared_depth, &self.vis_token, &self.vis_dim, &self.txt_token, &self.txt_dim]
    }

    pub fn vision(&self) -> Result<TriFactor> {
        TriFactor::new(self.shared_depth.clone(), self.vis_token.clone(), self.vis_dim.clone())
    }

    pub fn text(&self) -> Result<TriFactor> {
        TriFactor::new(self.shared_depth.clone(), self.txt_token.clone(), self.txt_dim.clone())
    }

    /// Reconstruct `(PV, PL)` from factor nodes given in [`Self::NAMES`] order.
    /// The depth node is used by both reconstructions.
    pub fn reconstruct_on(tape: &mut Tape, vars: &[Var]) -> Result<(Var, Var)> {
        let pv = reconstruct_on(tape, vars[0], vars[1], vars[2])?;
        let pl = reconstruct_on(tape, vars[0], vars[3], vars[4])?;
        Ok((pv, pl))
    }
}

/// Factors of one fused affine map stack `(D−1) × (d_in+1) × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFactors {
    pub depth: Tensor,
    pub in_plus_bias: Tensor,
    pub out: Tensor,
}

impl LinearFactors {
    pub fn init(layers: usize, d_in: usize, d_out: usize, rank: usize, streams: &RngStreams, stream: &str) -> Self {
        let f = init_factors((layers, d_in + 1, d_out), rank, streams, stream);
        Self {
            depth: f.d1,
            in_plus_bias: f.d2,
            out: f.d3,
        }
    }

    pub fn layers(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.in_plus_bias.shape()[0] - 1
    }

    pub fn d_out(&self) -> usize {
        self.out.shape()[0]
    }

    pub fn as_tri(&self) -> Result<TriFactor> {
        TriFactor::new(self.depth.clone(), self.in_plus_bias.clone(), self.out.clone())
    }
}

/// Factors for both fusion directions.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionFactors {
    /// Language → vision map (`d_in = d_l`, `d_out = d_v`).
    pub vis: LinearFactors,
    /// Vision → language map (`d_in = d_v`, `d_out = d_l`).
    pub text: LinearFactors,
}

impl FusionFactors {
    pub fn init(depth: usize, d_vision: usize, d_text: usize, rank: usize, streams: &RngStreams, stream: &str) -> Self {
        Self {
            vis: LinearFactors::init(depth - 1, d_text, d_vision, rank, streams, &format!("{stream}/vis")),
            text: LinearFactors::init(depth - 1, d_vision, d_text, rank, streams, &format!("{stream}/text")),
        }
    }
}

/// Weight `d_in × d_out` and bias `d_out` of fused layer `layer`
/// (`0 ≤ layer ≤ D−2`).
pub fn reconstruct_linear(f: &LinearFactors, layer: usize) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let d = tape.constant(f.depth.clone());
    let i = tape.constant(f.in_plus_bias.clone());
    let o = tape.constant(f.out.clone());
    let (w, b) = linear_on(&mut tape, d, i, o, layer)?;
    Ok((tape.value(w).clone(), tape.value(b).clone()))
}

/// Differentiable per-layer weight and bias from factor nodes. Only the
/// requested depth slice of the full tensor is materialized.
pub fn linear_on(tape: &mut Tape, depth: Var, in_plus_bias: Var, out: Var, layer: usize) -> Result<(Var, Var)> {
    let layers = tape.shape(depth)[0];
    if layer >= layers {
        return Err(Error::domain(
            "reconstruct_linear",
            format!("layer {layer} out of range for {layers} fused layers"),
        ));
    }
    let (rows, rank) = (tape.shape(in_plus_bias)[0], tape.shape(depth)[1]);
    let d_out = tape.shape(out)[0];
    let row = tape.narrow(depth, 0, layer, 1)?;
    let row = tape.reshape(row, &[rank])?;
    let scaled = tape.mul(in_plus_bias, row)?;
    let slab = tape.matmul_t(scaled, out)?;
    let slab = tape.scale(slab, 1.0 / rank as f64);
    let w = tape.narrow(slab, 0, 0, rows - 1)?;
    let b = tape.narrow(slab, 0, rows - 1, 1)?;
    let b = tape.reshape(b, &[d_out])?;
    Ok((w, b))
}

/// Prompt parameterization: dense (CP, "common prompting") or factored (DP).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Cp,
    Dp,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Cp => "cp",
            PromptKind::Dp => "dp",
        }
    }
}

/// Dimensions that determine per-task parameter cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDims {
    pub depth: usize,
    pub prompt_len: usize,
    pub d_vision: usize,
    pub d_text: usize,
    pub prompt_rank: usize,
    pub interaction_rank: usize,
}

impl PromptDims {
    /// Large-model dimensions (`L = 16`, `d_v = 768`, `d_l = 512`, rank 4)
    /// with a prompted depth of 9.
    pub fn large_scale() -> Self {
        Self {
            depth: 9,
            prompt_len: 16,
            d_vision: 768,
            d_text: 512,
            prompt_rank: 4,
            interaction_rank: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub prompts: u64,
    pub fusion: u64,
    pub total: u64,
}

/// Trainable parameters added per task.
pub fn param_count(dims: &PromptDims, kind: PromptKind, with_fusion: bool) -> ParamCount {
    let (d, l, dv, dl) = (
        dims.depth as u64,
        dims.prompt_len as u64,
        dims.d_vision as u64,
        dims.d_text as u64,
    );
    let (r, ri) = (dims.prompt_rank as u64, dims.interaction_rank as u64);
    let prompts = match kind {
        PromptKind::Cp => d * l * dv + d * l * dl,
        PromptKind::Dp => r * (d + l + dv + l + dl),
    };
    let fusion = if with_fusion && d > 1 {
        let direction = |d_in: u64, d_out: u64| match kind {
            PromptKind::Cp => (d - 1) * (d_in + 1) * d_out,
            PromptKind::Dp => ri * ((d - 1) + (d_in + 1) + d_out),
        };
        direction(dl, dv) + direction(dv, dl)
    } else {
        0
    };
    ParamCount {
        prompts,
        fusion,
        total: prompts + fusion,
    }
}

/// Multiply counts of the three cost terms: prompt reconstruction per
/// modality (`D·L·d_m·r`), interaction weight reconstruction
/// (`(D−1)·d_v·d_l·r`), and the fused projection forward pass
/// (`(D−1)·L·d_v·d_l`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityTerms {
    pub reconstruct_vision: u64,
    pub reconstruct_text: u64,
    pub interaction: u64,
    pub fusion_forward: u64,
}

pub fn complexity_terms(dims: &PromptDims) -> ComplexityTerms {
    let (d, l, dv, dl, r) = (
        dims.depth as u64,
        dims.prompt_len as u64,
        dims.d_vision as u64,
        dims.d_text as u64,
        dims.prompt_rank as u64,
    );
    ComplexityTerms {
        reconstruct_vision: d * l * dv * r,
        reconstruct_text: d * l * dl * r,
        interaction: d.saturating_sub(1) * dv * dl * dims.interaction_rank as u64,
        fusion_forward: d.saturating_sub(1) * l * dv * dl,
    }
}

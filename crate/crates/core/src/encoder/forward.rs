use super::backbone::{BackboneParams, EncoderParams, LayerParams};
use super::config::{BackboneConfig, Modality};
use super::prompts::{BoundFusion, BoundPrompts};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// A batch for one encoder.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    /// `[B, patches, patch_dim]`.
    Vision(&'a Tensor),
    /// `B × len` token ids, row-major.
    Text { ids: &'a [usize], len: usize },
}

impl Input<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            Input::Vision(_) => Modality::Vision,
            Input::Text { .. } => Modality::Language,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            Input::Vision(t) => t.shape()[0],
            Input::Text { ids, len } => ids.len() / len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, d_joint]`, unit rows.
    pub feature: Var,
    /// Prompt-slot states `I = P + E` entering each prompted layer, before
    /// fusion, `[B, L, d]` each. Empty without prompts.
    pub slot_states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PairEncoded {
    pub vision: Encoded,
    pub text: Encoded,
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS);
    let g = tape.mul(n, gain)?;
    tape.add(g, bias)
}

fn layer(tape: &mut Tape, p: &LayerParams<Var>, x: Var) -> Result<Var> {
    let h = affine_norm(tape, x, p.ln1_gain, p.ln1_bias)?;
    let dh = tape.shape(p.query[0])[1];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = None;
    for head in 0..p.query.len() {
        let q = tape.matmul(h, p.query[head])?;
        let k = tape.matmul(h, p.key[head])?;
        let v = tape.matmul(h, p.value[head])?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s);
        let o = tape.matmul(a, v)?;
        let o = tape.matmul(o, p.proj[head])?;
        attn = Some(match attn {
            None => o,
            Some(acc) => tape.add(acc, o)?,
        });
    }
    let attn = attn.ok_or_else(|| Error::domain("attention", "no heads"))?;
    let attn = tape.add(attn, p.proj_bias)?;
    let x = tape.add(x, attn)?;

    let h = affine_norm(tape, x, p.ln2_gain, p.ln2_bias)?;
    let f = tape.affine(h, p.fc1, p.fc1_bias)?;
    let f = tape.gelu(f);
    let f = tape.affine(f, p.fc2, p.fc2_bias)?;
    tape.add(x, f)
}

/// Token sequence `[pool, slots?, content]` with positions added. Slots are
/// zeros and carry no positional embedding.
fn embed(tape: &mut Tape, e: &EncoderParams<Var>, input: Input<'_>, slots: usize) -> Result<Var> {
    let b = input.batch();
    let content = match input {
        Input::Vision(x) => {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, e.embed)?;
            match e.embed_bias {
                Some(bias) => tape.add(h, bias)?,
                None => h,
            }
        }
        Input::Text { ids, len } => tape.gather(e.embed, ids, &[b, len])?,
    };
    let (n, d) = (tape.shape(content)[1], tape.shape(content)[2]);
    if tape.shape(e.pos)[0] != n + 1 {
        return Err(Error::shape("embed", tape.shape(e.pos), &[n + 1, d]));
    }
    let pos = tape.narrow(e.pos, 0, 1, n)?;
    let content = tape.add(content, pos)?;
    let pool_pos = tape.narrow(e.pos, 0, 0, 1)?;
    let pool = tape.reshape(e.pool, &[1, d])?;
    let pool = tape.add(pool, pool_pos)?;
    let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
    let pool = tape.add(zeros, pool)?;
    if slots == 0 {
        tape.concat(&[pool, content], 1)
    } else {
        let z = tape.constant(Tensor::zeros(&[b, slots, d]));
        tape.concat(&[pool, z, content], 1)
    }
}

fn pool_feature(tape: &mut Tape, e: &EncoderParams<Var>, x: Var) -> Result<Var> {
    let (b, d) = (tape.shape(x)[0], tape.shape(x)[2]);
    let p = tape.narrow(x, 1, 0, 1)?;
    let p = tape.reshape(p, &[b, d])?;
    let p = affine_norm(tape, p, e.final_gain, e.final_bias)?;
    let p = tape.matmul(p, e.head)?;
    tape.l2_normalize(p)
}

fn slot_view(tape: &mut Tape, x: Var, slots: usize) -> Result<Var> {
    tape.narrow(x, 1, 1, slots)
}

fn splice(tape: &mut Tape, x: Var, slots: Var) -> Result<Var> {
    let (t, l) = (tape.shape(x)[1], tape.shape(slots)[1]);
    let head = tape.narrow(x, 1, 0, 1)?;
    let tail = tape.narrow(x, 1, 1 + l, t - 1 - l)?;
    tape.concat(&[head, slots, tail], 1)
}

fn prompt_layer(tape: &mut Tape, p: Var, i: usize) -> Result<Var> {
    let s = tape.shape(p).to_vec();
    let row = tape.narrow(p, 0, i, 1)?;
    tape.reshape(row, &[s[1], s[2]])
}

fn check_prompts(cfg: &BackboneConfig, p: &BoundPrompts, tape: &Tape) -> Result<()> {
    let want_v = [cfg.depth, cfg.prompt_len, cfg.d_vision];
    let want_l = [cfg.depth, cfg.prompt_len, cfg.d_text];
    if tape.shape(p.vision) != want_v || tape.shape(p.text) != want_l {
        return Err(Error::Prompt {
            task_id: p.task_id,
            msg: format!(
                "prompt shapes {:?}/{:?} do not match config {:?}/{:?}",
                tape.shape(p.vision),
                tape.shape(p.text),
                want_v,
                want_l
            ),
        });
    }
    Ok(())
}

/// `λ·own + (1−λ)·(other · W + b)`.
fn blend(tape: &mut Tape, own: Var, other: Var, map: (Var, Var), lambda: f64) -> Result<Var> {
    let projected = tape.affine(other, map.0, map.1)?;
    let a = tape.scale(own, lambda);
    let b = tape.scale(projected, 1.0 - lambda);
    tape.add(a, b)
}

fn fusion_index(fusion: &BoundFusion, layer: usize) -> Result<usize> {
    if layer == 0 || layer > fusion.vis.len() {
        return Err(Error::domain(
            "fuse",
            format!("layer {layer} outside fused range 1..={}", fusion.vis.len()),
        ));
    }
    Ok(layer - 1)
}

/// Momentum blend of the two modalities' prompt-slot states at prompted
/// layer `layer` (never the first). Both outputs use the pre-fusion pair.
pub fn fuse(tape: &mut Tape, i_v: Var, i_l: Var, fusion: &BoundFusion, layer: usize) -> Result<(Var, Var)> {
    let k = fusion_index(fusion, layer)?;
    let v = blend(tape, i_v, i_l, fusion.vis[k], fusion.lambda_v)?;
    let l = blend(tape, i_l, i_v, fusion.text[k], fusion.lambda_l)?;
    Ok((v, l))
}

/// Run one encoder.
///
/// Without prompts this is the plain backbone. With fused prompts the
/// partner modality's pre-fusion slot states (as returned by
/// [`encode_pair`]) must be supplied.
pub fn encode(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    backbone: &BackboneParams<Var>,
    input: Input<'_>,
    prompts: Option<&BoundPrompts>,
    partner: Option<&[Var]>,
) -> Result<Encoded> {
    let modality = input.modality();
    let e = backbone.encoder(modality);
    let Some(p) = prompts else {
        let mut x = embed(tape, e, input, 0)?;
        for lp in &e.layers {
            x = layer(tape, lp, x)?;
        }
        return Ok(Encoded {
            feature: pool_feature(tape, e, x)?,
            slot_states: Vec::new(),
        });
    };
    check_prompts(cfg, p, tape)?;
    if p.fusion.is_some() && partner.map_or(true, |s| s.len() < cfg.depth) {
        return Err(Error::Prompt {
            task_id: p.task_id,
            msg: "fused prompts need the partner modality's slot states".into(),
        });
    }
    let own_prompts = match modality {
        Modality::Vision => p.vision,
        Modality::Language => p.text,
    };
    let mut x = embed(tape, e, input, cfg.prompt_len)?;
    let mut states = Vec::with_capacity(cfg.depth);
    for (i, lp) in e.layers.iter().enumerate() {
        if i < cfg.depth {
            let slots = slot_view(tape, x, cfg.prompt_len)?;
            let pi = prompt_layer(tape, own_prompts, i)?;
            let state = tape.add(slots, pi)?;
            states.push(state);
            let fused = match (&p.fusion, partner) {
                (Some(f), Some(other)) if i >= 1 => {
                    let k = fusion_index(f, i)?;
                    match modality {
                        Modality::Vision => blend(tape, state, other[i], f.vis[k], f.lambda_v)?,
                        Modality::Language => blend(tape, state, other[i], f.text[k], f.lambda_l)?,
                    }
                }
                _ => state,
            };
            x = splice(tape, x, fused)?;
        }
        x = layer(tape, lp, x)?;
    }
    Ok(Encoded {
        feature: pool_feature(tape, e, x)?,
        slot_states: states,
    })
}

/// Run both encoders layer by layer so that fused prompts can exchange
/// prompt-slot states. Row `b` of the vision batch is paired with row `b`
/// of the text batch.
pub fn encode_pair(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    backbone: &BackboneParams<Var>,
    vision: &Tensor,
    text: &[usize],
    prompts: Option<&BoundPrompts>,
) -> Result<PairEncoded> {
    let vin = Input::Vision(vision);
    let tin = Input::Text {
        ids: text,
        len: cfg.caption_len,
    };
    if vin.batch() != tin.batch() {
        return Err(Error::shape("encode_pair", vision.shape(), &[tin.batch(), cfg.caption_len]));
    }
    let Some(p) = prompts.filter(|p| p.fusion.is_some()) else {
        return Ok(PairEncoded {
            vision: encode(tape, cfg, backbone, vin, prompts, None)?,
            text: encode(tape, cfg, backbone, tin, prompts, None)?,
        });
    };
    check_prompts(cfg, p, tape)?;
    let fusion = p.fusion.as_ref().expect("filtered on fusion");
    let (ev, el) = (&backbone.vision, &backbone.text);
    let mut xv = embed(tape, ev, vin, cfg.prompt_len)?;
    let mut xl = embed(tape, el, tin, cfg.prompt_len)?;
    let (mut sv, mut sl) = (Vec::new(), Vec::new());
    for i in 0..cfg.layers {
        if i < cfg.depth {
            let slots_v = slot_view(tape, xv, cfg.prompt_len)?;
            let slots_l = slot_view(tape, xl, cfg.prompt_len)?;
            let pv = prompt_layer(tape, p.vision, i)?;
            let pl = prompt_layer(tape, p.text, i)?;
            let iv = tape.add(slots_v, pv)?;
            let il = tape.add(slots_l, pl)?;
            sv.push(iv);
            sl.push(il);
            let (fv, fl) = if i >= 1 { fuse(tape, iv, il, fusion, i)? } else { (iv, il) };
            xv = splice(tape, xv, fv)?;
            xl = splice(tape, xl, fl)?;
        }
        xv = layer(tape, &ev.layers[i], xv)?;
        xl = layer(tape, &el.layers[i], xl)?;
    }
    Ok(PairEncoded {
        vision: Encoded {
            feature: pool_feature(tape, ev, xv)?,
            slot_states: sv,
        },
        text: Encoded {
            feature: pool_feature(tape, el, xl)?,
            slot_states: sl,
        },
    })
}

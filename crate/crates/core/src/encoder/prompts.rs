use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::lowrank::{
    linear_on, reconstructed_init_variance, CoupledPromptFactors, FusionFactors,
    LinearFactors, PromptKind,
};
use crate::numerics::{RngStreams, Tape, Tensor, Var};

/// How a task's prompts are parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub kind: PromptKind,
    pub prompt_rank: usize,
    pub interaction_rank: usize,
    /// Attach cross-modal fusion maps.
    pub fusion: bool,
    pub lambda_v: f64,
    pub lambda_l: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            kind: PromptKind::Dp,
            prompt_rank: 4,
            interaction_rank: 4,
            fusion: false,
            lambda_v: 0.9,
            lambda_l: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptParams {
    Factored(CoupledPromptFactors),
    /// Unfactored `D×L×d_v` and `D×L×d_l` tensors.
    Dense { vision: Tensor, text: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionParams {
    Factored(FusionFactors),
    /// Unfactored `(D−1)×(d_in+1)×d_out` stacks; the last input row is the bias.
    Dense { vis: Tensor, text: Tensor },
}

/// One task's prompts and optional fusion maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub task_id: usize,
    pub prompts: PromptParams,
    pub fusion: Option<FusionParams>,
    pub lambda_v: f64,
    pub lambda_l: f64,
    frozen: bool,
}

/// Per-layer fusion weights on the tape, indexed by `layer − 1`.
#[derive(Clone, Debug)]
pub struct BoundFusion {
    /// Language → vision `(weight, bias)`.
    pub vis: Vec<(Var, Var)>,
    /// Vision → language `(weight, bias)`.
    pub text: Vec<(Var, Var)>,
    pub lambda_v: f64,
    pub lambda_l: f64,
}

/// A prompt set placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundPrompts {
    pub task_id: usize,
    /// `D×L×d_v`.
    pub vision: Var,
    /// `D×L×d_l`.
    pub text: Var,
    pub fusion: Option<BoundFusion>,
    /// Leaves in [`PromptSet::named_tensors`] order.
    pub leaves: Vec<Var>,
}

fn dense_linear(tape: &mut Tape, stack: Var, layer: usize) -> Result<(Var, Var)> {
    let s = tape.shape(stack).to_vec();
    let slab = tape.narrow(stack, 0, layer, 1)?;
    let slab = tape.reshape(slab, &[s[1], s[2]])?;
    let w = tape.narrow(slab, 0, 0, s[1] - 1)?;
    let b = tape.narrow(slab, 0, s[1] - 1, 1)?;
    let b = tape.reshape(b, &[s[2]])?;
    Ok((w, b))
}

impl PromptSet {
    pub fn init(
        task_id: usize,
        cfg: &BackboneConfig,
        pc: &PromptConfig,
        streams: &RngStreams,
        stream: &str,
    ) -> Result<Self> {
        let (d, l, dv, dl) = (cfg.depth, cfg.prompt_len, cfg.d_vision, cfg.d_text);
        let prompts = match pc.kind {
            PromptKind::Dp => {
                PromptParams::Factored(CoupledPromptFactors::init(d, l, dv, dl, pc.prompt_rank, streams, stream))
            }
            PromptKind::Cp => {
                // Match the entry scale of a reconstructed factored prompt.
                let std = reconstructed_init_variance(pc.prompt_rank).sqrt();
                let mut rng = streams.stream(stream);
                PromptParams::Dense {
                    vision: Tensor::randn(&[d, l, dv], std, &mut rng),
                    text: Tensor::randn(&[d, l, dl], std, &mut rng),
                }
            }
        };
        let fusion = if pc.fusion {
            if d < 2 {
                return Err(Error::Config("fusion needs a prompted depth of at least 2".into()));
            }
            let fstream = format!("{stream}/fusion");
            Some(match pc.kind {
                PromptKind::Dp => FusionParams::Factored(FusionFactors::init(d, dv, dl, pc.interaction_rank, streams, &fstream)),
                PromptKind::Cp => {
                    let std = reconstructed_init_variance(pc.interaction_rank).sqrt();
                    let mut rng = streams.stream(&fstream);
                    FusionParams::Dense {
                        vis: Tensor::randn(&[d - 1, dl + 1, dv], std, &mut rng),
                        text: Tensor::randn(&[d - 1, dv + 1, dl], std, &mut rng),
                    }
                }
            })
        } else {
            None
        };
        let set = Self {
            task_id,
            prompts,
            fusion,
            lambda_v: pc.lambda_v,
            lambda_l: pc.lambda_l,
            frozen: false,
        };
        set.validate(cfg)?;
        Ok(set)
    }

    pub fn kind(&self) -> PromptKind {
        match self.prompts {
            PromptParams::Factored(_) => PromptKind::Dp,
            PromptParams::Dense { .. } => PromptKind::Cp,
        }
    }

    pub fn has_fusion(&self) -> bool {
        self.fusion.is_some()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// All trainable arrays with their names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.prompts {
            PromptParams::Factored(f) => {
                for (n, t) in CoupledPromptFactors::NAMES.iter().zip(f.tensors()) {
                    out.push((format!("prompts.{n}"), t.clone()));
                }
            }
            PromptParams::Dense { vision, text } => {
                out.push(("prompts.vision".into(), vision.clone()));
                out.push(("prompts.text".into(), text.clone()));
            }
        }
        match &self.fusion {
            Some(FusionParams::Factored(f)) => {
                for (dir, lf) in [("vis", &f.vis), ("text", &f.text)] {
                    out.push((format!("fusion.{dir}.depth"), lf.depth.clone()));
                    out.push((format!("fusion.{dir}.in_plus_bias"), lf.in_plus_bias.clone()));
                    out.push((format!("fusion.{dir}.out"), lf.out.clone()));
                }
            }
            Some(FusionParams::Dense { vis, text }) => {
                out.push(("fusion.vis".into(), vis.clone()));
                out.push(("fusion.text".into(), text.clone()));
            }
            None => {}
        }
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuild a set from arrays named as in [`Self::named_tensors`].
    pub fn from_named(
        task_id: usize,
        kind: PromptKind,
        fusion: bool,
        lambdas: (f64, f64),
        frozen: bool,
        arrays: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let get = |name: &str| {
            arrays
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Prompt {
                    task_id,
                    msg: format!("missing array {name}"),
                })
        };
        let prompts = match kind {
            PromptKind::Dp => {
                let t = CoupledPromptFactors::NAMES
                    .iter()
                    .map(|n| get(&format!("prompts.{n}")))
                    .collect::<Result<Vec<_>>>()?;
                PromptParams::Factored(CoupledPromptFactors::from_tensors(t)?)
            }
            PromptKind::Cp => PromptParams::Dense {
                vision: get("prompts.vision")?,
                text: get("prompts.text")?,
            },
        };
        let fusion = if !fusion {
            None
        } else {
            Some(match kind {
                PromptKind::Dp => {
                    let lf = |dir: &str| -> Result<LinearFactors> {
                        Ok(LinearFactors {
                            depth: get(&format!("fusion.{dir}.depth"))?,
                            in_plus_bias: get(&format!("fusion.{dir}.in_plus_bias"))?,
                            out: get(&format!("fusion.{dir}.out"))?,
                        })
                    };
                    FusionParams::Factored(FusionFactors {
                        vis: lf("vis")?,
                        text: lf("text")?,
                    })
                }
                PromptKind::Cp => FusionParams::Dense {
                    vis: get("fusion.vis")?,
                    text: get("fusion.text")?,
                },
            })
        };
        Ok(Self {
            task_id,
            prompts,
            fusion,
            lambda_v: lambdas.0,
            lambda_l: lambdas.1,
            frozen,
        })
    }

    /// Replace all arrays, in [`Self::named_tensors`] order.
    pub fn set_tensors(&mut self, values: &[Tensor]) -> Result<()> {
        if self.frozen {
            return Err(Error::Prompt {
                task_id: self.task_id,
                msg: "prompt set is frozen".into(),
            });
        }
        let names = self.named_tensors();
        if names.len() != values.len() {
            return Err(Error::Prompt {
                task_id: self.task_id,
                msg: format!("expected {} arrays, got {}", names.len(), values.len()),
            });
        }
        for ((name, old), new) in names.iter().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::Prompt {
                    task_id: self.task_id,
                    msg: format!("{name}: shape {:?}, expected {:?}", new.shape(), old.shape()),
                });
            }
        }
        let map: BTreeMap<String, Tensor> = names.into_iter().map(|(n, _)| n).zip(values.iter().cloned()).collect();
        *self = Self::from_named(
            self.task_id,
            self.kind(),
            self.has_fusion(),
            (self.lambda_v, self.lambda_l),
            false,
            &map,
        )?;
        Ok(())
    }

    /// Check reconstructed shapes against the backbone.
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        let (pv, pl) = self.reconstructed()?;
        let want_v = [cfg.depth, cfg.prompt_len, cfg.d_vision];
        let want_l = [cfg.depth, cfg.prompt_len, cfg.d_text];
        if pv.shape() != want_v || pl.shape() != want_l {
            return Err(Error::Prompt {
                task_id: self.task_id,
                msg: format!(
                    "prompts {:?}/{:?} do not match config {:?}/{:?}",
                    pv.shape(),
                    pl.shape(),
                    want_v,
                    want_l
                ),
            });
        }
        if let Some(f) = &self.fusion {
            let (vis, text) = match f {
                FusionParams::Factored(f) => (f.vis.as_tri()?.reconstruct(), f.text.as_tri()?.reconstruct()),
                FusionParams::Dense { vis, text } => (vis.clone(), text.clone()),
            };
            let want_vis = [cfg.depth - 1, cfg.d_text + 1, cfg.d_vision];
            let want_text = [cfg.depth - 1, cfg.d_vision + 1, cfg.d_text];
            if vis.shape() != want_vis || text.shape() != want_text {
                return Err(Error::Prompt {
                    task_id: self.task_id,
                    msg: format!("fusion maps {:?}/{:?} do not match config", vis.shape(), text.shape()),
                });
            }
        }
        Ok(())
    }

    /// Dense `(PV, PL)`.
    pub fn reconstructed(&self) -> Result<(Tensor, Tensor)> {
        match &self.prompts {
            PromptParams::Factored(f) => Ok((f.vision()?.reconstruct(), f.text()?.reconstruct())),
            PromptParams::Dense { vision, text } => Ok((vision.clone(), text.clone())),
        }
    }

    /// Place the set on a tape; frozen sets become constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPrompts> {
        let frozen = self.frozen;
        let leaves: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if frozen { tape.constant(t) } else { tape.param(t) })
            .collect();
        let (vision, text, used) = match &self.prompts {
            PromptParams::Factored(_) => {
                let (v, l) = CoupledPromptFactors::reconstruct_on(tape, &leaves[..5])?;
                (v, l, 5)
            }
            PromptParams::Dense { .. } => (leaves[0], leaves[1], 2),
        };
        let fusion = match &self.fusion {
            None => None,
            Some(kind) => {
                let rest = &leaves[used..];
                let (mut vis, mut text) = (Vec::new(), Vec::new());
                let layers = tape.shape(vision)[0] - 1;
                for layer in 0..layers {
                    match kind {
                        FusionParams::Factored(_) => {
                            vis.push(linear_on(tape, rest[0], rest[1], rest[2], layer)?);
                            text.push(linear_on(tape, rest[3], rest[4], rest[5], layer)?);
                        }
                        FusionParams::Dense { .. } => {
                            vis.push(dense_linear(tape, rest[0], layer)?);
                            text.push(dense_linear(tape, rest[1], layer)?);
                        }
                    }
                }
                Some(BoundFusion {
                    vis,
                    text,
                    lambda_v: self.lambda_v,
                    lambda_l: self.lambda_l,
                })
            }
        };
        Ok(BoundPrompts {
            task_id: self.task_id,
            vision,
            text,
            fusion,
            leaves,
        })
    }

    /// Trainable parameter count of this set.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(Tensor::numel).sum()
    }
}

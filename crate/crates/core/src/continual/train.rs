use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pool::{build_task_key, task_name_embedding, PoolEntry, PromptPool};
use crate::data::{PairSet, TaskSpec};
use crate::encoder::{encode_pair, Backbone, BackboneConfig, BackboneParams, BoundPrompts, PromptConfig, PromptSet};
use crate::error::{Error, Result};
use crate::losses::{
    cpa_loss, hpa_loss, retrieval_loss, retrieval_loss_from_scores, task_label_matrix, total_loss, LossWeights, Temperatures};
use crate::lowrank::PromptKind;
use crate::numerics::{adam_step, AdamState, CosineSchedule, RngStreams, Tape, Tensor, Var};

/// Which components a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub prompt_type: PromptKind,
    /// Layer-diagonal alignment between visual and textual prompts.
    pub hpa: bool,
    /// Cross-modal fusion of prompt slots.
    pub cpf: bool,
    /// Alignment of prompts across tasks.
    pub cpa: bool,
}

impl Variant {
    pub const NAMES: [&'static str; 4] = ["lpi-m", "lpi-p", "cp", "dp"];

    pub fn lpi_m() -> Self {
        Self {
            prompt_type: PromptKind::Dp,
            hpa: true,
            cpf: false,
            cpa: true,
        }
    }

    pub fn lpi_p() -> Self {
        Self {
            cpf: true,
            ..Self::lpi_m()
        }
    }

    pub fn dp() -> Self {
        Self {
            prompt_type: PromptKind::Dp,
            hpa: false,
            cpf: false,
            cpa: false,
        }
    }

    pub fn cp() -> Self {
        Self {
            prompt_type: PromptKind::Cp,
            ..Self::dp()
        }
    }

    pub fn name(&self) -> Option<&'static str> {
        Self::NAMES.into_iter().find(|n| n.parse::<Variant>().ok().as_ref() == Some(self))
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lpi-m" => Ok(Self::lpi_m()),
            "lpi-p" => Ok(Self::lpi_p()),
            "cp" => Ok(Self::cp()),
            "dp" => Ok(Self::dp()),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(
                f,
                "{}{}{}{}",
                self.prompt_type.as_str(),
                if self.hpa { "+hpa" } else { "" },
                if self.cpf { "+cpf" } else { "" },
                if self.cpa { "+cpa" } else { "" }
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub prompt_rank: usize,
    pub interaction_rank: usize,
    pub lambda_v: f64,
    pub lambda_l: f64,
    pub temperatures: Temperatures,
    pub weights: LossWeights,
    /// Task-name cosine at or above which two tasks count as related.
    pub threshold: f64,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    /// With fusion, every image of a block is encoded against every text of
    /// the block; batches are split into blocks of this size.
    pub joint_block: usize,
    /// Centroids per task key.
    pub centroids: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::lpi_m(),
            prompt_rank: 4,
            interaction_rank: 4,
            lambda_v: 0.9,
            lambda_l: 0.9,
            temperatures: Temperatures::default(),
            weights: LossWeights::default(),
            threshold: 0.4,
            epochs: 12,
            lr: 0.05,
            min_lr: 0.0,
            batch_size: 32,
            joint_block: 4,
            centroids: 5,
        }
    }
}

impl TrainConfig {
    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            kind: self.variant.prompt_type,
            prompt_rank: self.prompt_rank,
            interaction_rank: self.interaction_rank,
            fusion: self.variant.cpf,
            lambda_v: self.lambda_v,
            lambda_l: self.lambda_l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.temperatures;
        let w = &self.weights;
        let checks = [
            (self.prompt_rank > 0, "prompt_rank must be positive"),
            (self.interaction_rank > 0, "interaction_rank must be positive"),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (self.joint_block >= 2, "joint_block must be at least 2"),
            (self.centroids > 0, "centroids must be positive"),
            (self.lr > 0.0 && self.min_lr >= 0.0, "learning rates must be positive"),
            (t.modal > 0.0 && t.task > 0.0 && t.retrieval > 0.0, "temperatures must be positive"),
            (w.base >= 0.0 && w.modal >= 0.0 && w.task >= 0.0, "loss weights must be non-negative"),
            ((0.0..=1.0).contains(&self.lambda_v) && (0.0..=1.0).contains(&self.lambda_l), "momentum must lie in [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_id: usize,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Batches of an epoch; a trailing singleton joins the previous batch.
fn epoch_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

/// Retrieval loss on pair scores `cos(f(v_i | t_j), g(t_j | v_i))`, where
/// each side is fused with the other, averaged over blocks of the batch.
/// Fused features depend on the partner, so negatives must be encoded as
/// pairs too; scoring them with features fused against their own partners
/// would not match how pairs are ranked at evaluation.
fn joint_retrieval_loss(
    tape: &mut Tape,
    bcfg: &BackboneConfig,
    bb: &BackboneParams<Var>,
    bp: &BoundPrompts,
    train: &PairSet,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Var> {
    let blocks = epoch_batches(idx, cfg.joint_block);
    let mut total: Option<Var> = None;
    for block in &blocks {
        let b = block.len();
        let rows: Vec<usize> = block.iter().flat_map(|&i| std::iter::repeat(i).take(b)).collect();
        let cols: Vec<usize> = (0..b).flat_map(|_| block.iter().copied()).collect();
        let vision = train.vision_batch(&rows);
        let text = train.caption_batch(&cols);
        let enc = encode_pair(tape, bcfg, bb, &vision, &text, Some(bp))?;
        let prod = tape.mul(enc.vision.feature, enc.text.feature)?;
        let dots = tape.sum_axis(prod, 1)?;
        let scores = tape.reshape(dots, &[b, b])?;
        let loss = retrieval_loss_from_scores(tape, scores, cfg.temperatures.retrieval)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / blocks.len() as f64))
}

/// Train a new prompt set for `task` on top of `pool`, freeze it, build its
/// key and append it. On error the pool is left untouched.
pub fn train_task(
    pool: &mut PromptPool,
    backbone: &Backbone,
    task: &TaskSpec,
    train: &PairSet,
    cfg: &TrainConfig,
    streams: &RngStreams,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::Config("prompt training needs a frozen backbone".into()));
    }
    if train.len() < 2 {
        return Err(Error::Data(format!("task {} has fewer than 2 training pairs", task.task_id)));
    }
    let k = pool.len();
    let bcfg = &backbone.config;
    let mut set = PromptSet::init(task.task_id, bcfg, &cfg.prompt_config(), streams, &format!("task/{k}/init"))?;

    let labels = if cfg.variant.cpa {
        let mut names: Vec<&str> = pool.entries.iter().map(|e| e.task.name.as_str()).collect();
        names.push(&task.name);
        let emb = names
            .iter()
            .map(|n| task_name_embedding(backbone, n))
            .collect::<Result<Vec<_>>>()?;
        Some(task_label_matrix(&emb, cfg.threshold)?)
    } else {
        None
    };
    let earlier: Vec<(Tensor, Tensor)> = if cfg.variant.cpa {
        pool.entries
            .iter()
            .map(|e| e.prompts.reconstructed())
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let batches_per_epoch = epoch_batches(&(0..train.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let schedule = CosineSchedule::new(cfg.lr, total_steps.max(1), cfg.min_lr)?;
    let mut params = set.tensors();
    let mut adam = AdamState::new(&params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut streams.stream(&format!("task/{k}/shuffle/epoch{epoch}")));
        let mut sum = 0.0;
        let batches = epoch_batches(&order, cfg.batch_size);
        for idx in &batches {
            let mut tape = Tape::new();
            let bb = backbone.bind(&mut tape);
            let bp = set.bind(&mut tape)?;
            let base = if set.has_fusion() {
                joint_retrieval_loss(&mut tape, bcfg, &bb, &bp, train, idx, cfg)?
            } else {
                let vision = train.vision_batch(idx);
                let text = train.caption_batch(idx);
                let enc = encode_pair(&mut tape, bcfg, &bb, &vision, &text, Some(&bp))?;
                retrieval_loss(&mut tape, enc.vision.feature, enc.text.feature, cfg.temperatures.retrieval)?
            };
            let modal = if cfg.variant.hpa {
                Some(hpa_loss(&mut tape, bp.vision, bp.text, cfg.temperatures.modal)?)
            } else {
                None
            };
            let cross = match &labels {
                Some(z) => {
                    let mut pv: Vec<Var> = Vec::with_capacity(k + 1);
                    let mut pl: Vec<Var> = Vec::with_capacity(k + 1);
                    for (v, l) in &earlier {
                        pv.push(tape.constant(v.clone()));
                        pl.push(tape.constant(l.clone()));
                    }
                    pv.push(bp.vision);
                    pl.push(bp.text);
                    Some(cpa_loss(&mut tape, &pv, &pl, z, cfg.temperatures.task)?)
                }
                None => None,
            };
            let loss = total_loss(&mut tape, base, modal, cross, &cfg.weights)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("task {} epoch {epoch} step {step}", task.task_id),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bp.leaves.iter().map(|&v| grads.wrt(v)).collect();
            adam_step(&mut params, &g, &mut adam, schedule.lr(step))?;
            set.set_tensors(&params)?;
            sum += value;
            step += 1;
        }
        let mean = sum / batches.len() as f64;
        log::info!("task {} epoch {epoch}: loss {mean:.4}", task.task_id);
        epoch_losses.push(mean);
    }

    set.freeze();
    let key = build_task_key(backbone, train, cfg.centroids, streams, &format!("task/{k}/kmeans"))?;
    pool.push(PoolEntry {
        task: task.clone(),
        prompts: set,
        key,
    })?;
    Ok(TrainReport {
        task_id: task.task_id,
        epoch_losses,
        steps: step,
    })
}

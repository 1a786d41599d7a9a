use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::backbone::Backbone;
use super::config::BackboneConfig;
use super::forward::{encode, encode_pair, Input};
use crate::data::PairSet;
use crate::error::{Error, Result};
use crate::losses::retrieval_loss;
use crate::numerics::{adam_step, AdamState, CosineSchedule, RngStreams, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 3e-3,
            tau: 0.05,
        }
    }
}

/// Train a fresh backbone on generic pairs with the retrieval loss, without
/// prompts, then freeze it. Zero steps yields a frozen random backbone.
pub fn pretrain_backbone(
    corpus: &PairSet,
    config: &BackboneConfig,
    opts: &PretrainOptions,
    streams: &RngStreams,
) -> Result<Backbone> {
    let mut backbone = Backbone::init(config, streams)?;
    if opts.steps > 0 {
        let batch = opts.batch_size.min(corpus.len());
        if batch < 2 {
            return Err(Error::Data("pretraining needs at least 2 pairs".into()));
        }
        let mut params = backbone.tensors();
        let mut adam = AdamState::new(&params);
        let schedule = CosineSchedule::new(opts.lr, opts.steps as u64, 0.0)?;
        let mut rng = streams.stream("pretrain/shuffle");
        let mut order: Vec<usize> = Vec::new();
        for step in 0..opts.steps {
            if order.len() < batch {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx: Vec<usize> = order.drain(..batch).collect();
            let mut tape = Tape::new();
            let bound = backbone.bind(&mut tape);
            let vision = corpus.vision_batch(&idx);
            let text = corpus.caption_batch(&idx);
            let enc = encode_pair(&mut tape, config, &bound, &vision, &text, None)?;
            let loss = retrieval_loss(&mut tape, enc.vision.feature, enc.text.feature, opts.tau)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("pretraining step {step}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bound.named().into_iter().map(|(_, v)| grads.wrt(v)).collect();
            adam_step(&mut params, &g, &mut adam, schedule.lr(step as u64))?;
            backbone.set_tensors(&params)?;
            if step % 50 == 0 {
                log::debug!("pretrain step {step} loss {value:.4}");
            }
        }
    }
    backbone.freeze();
    Ok(backbone)
}

/// Prompt-free features for every pair of `set`, `[N, d_joint]`.
pub fn plain_features(backbone: &Backbone, set: &PairSet, vision: bool) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let mut rows = Vec::with_capacity(set.len() * backbone.config.d_joint);
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape);
        let (v, t);
        let input = if vision {
            v = set.vision_batch(idx);
            Input::Vision(&v)
        } else {
            t = set.caption_batch(idx);
            Input::Text {
                ids: &t,
                len: set.caption_len,
            }
        };
        let enc = encode(&mut tape, &backbone.config, &bound, input, None, None)?;
        rows.extend_from_slice(tape.value(enc.feature).data());
    }
    Tensor::new(vec![set.len(), backbone.config.d_joint], rows)
}

/// Image→text R@1 (percent) within consecutive batches of `batch` pairs,
/// counting only the exact partner as correct.
pub fn in_batch_recall_at_1(backbone: &Backbone, set: &PairSet, batch: usize) -> Result<f64> {
    let v = plain_features(backbone, set, true)?;
    let t = plain_features(backbone, set, false)?;
    let d = v.shape()[1];
    let (mut hits, mut total) = (0usize, 0usize);
    for start in (0..set.len()).step_by(batch) {
        let end = (start + batch).min(set.len());
        for i in start..end {
            let score = |j: usize| -> f64 { (0..d).map(|c| v.at(&[i, c]) * t.at(&[j, c])).sum() };
            let best = (start..end).fold(start, |b, j| if score(j) > score(b) { j } else { b });
            hits += usize::from(best == i);
            total += 1;
        }
    }
    Ok(100.0 * hits as f64 / total as f64)
}

use std::collections::BTreeMap;

use super::config::{BackboneConfig, Modality};
use crate::error::{Error, Result};
use crate::numerics::{RngStreams, Tape, Tensor, Var};

/// Weights of one pre-norm transformer layer. Attention uses separate
/// per-head projections whose outputs are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub proj: Vec<T>,
    pub proj_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub fc1: T,
    pub fc1_bias: T,
    pub fc2: T,
    pub fc2_bias: T,
}

/// One encoder stack. `embed` is a patch projection `[patch_dim, d]` for
/// vision (with `embed_bias`) and a token table `[vocab, d]` for language.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub embed: T,
    pub embed_bias: Option<T>,
    pub pool: T,
    /// `[1 + content_len, d]`; row 0 belongs to the pooling token.
    pub pos: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub head: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub vision: EncoderParams<T>,
    pub text: EncoderParams<T>,
}

type MapFn<'a, T, U> = dyn FnMut(&str, &T) -> Result<U> + 'a;

fn map_vec<T, U>(prefix: &str, items: &[T], f: &mut MapFn<'_, T, U>) -> Result<Vec<U>> {
    items
        .iter()
        .enumerate()
        .map(|(h, x)| f(&format!("{prefix}.{h}"), x))
        .collect()
}

impl<T> LayerParams<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut MapFn<'_, T, U>) -> Result<LayerParams<U>> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(LayerParams {
            ln1_gain: f(&n("ln1_gain"), &self.ln1_gain)?,
            ln1_bias: f(&n("ln1_bias"), &self.ln1_bias)?,
            query: map_vec(&n("query"), &self.query, f)?,
            key: map_vec(&n("key"), &self.key, f)?,
            value: map_vec(&n("value"), &self.value, f)?,
            proj: map_vec(&n("proj"), &self.proj, f)?,
            proj_bias: f(&n("proj_bias"), &self.proj_bias)?,
            ln2_gain: f(&n("ln2_gain"), &self.ln2_gain)?,
            ln2_bias: f(&n("ln2_bias"), &self.ln2_bias)?,
            fc1: f(&n("fc1"), &self.fc1)?,
            fc1_bias: f(&n("fc1_bias"), &self.fc1_bias)?,
            fc2: f(&n("fc2"), &self.fc2)?,
            fc2_bias: f(&n("fc2_bias"), &self.fc2_bias)?,
        })
    }
}

impl<T> EncoderParams<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut MapFn<'_, T, U>) -> Result<EncoderParams<U>> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(EncoderParams {
            embed: f(&n("embed"), &self.embed)?,
            embed_bias: match &self.embed_bias {
                Some(b) => Some(f(&n("embed_bias"), b)?),
                None => None,
            },
            pool: f(&n("pool"), &self.pool)?,
            pos: f(&n("pos"), &self.pos)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&n(&format!("layer{i}")), f))
                .collect::<Result<_>>()?,
            final_gain: f(&n("final_gain"), &self.final_gain)?,
            final_bias: f(&n("final_bias"), &self.final_bias)?,
            head: f(&n("head"), &self.head)?,
        })
    }
}

impl<T> BackboneParams<T> {
    pub fn try_map<U>(&self, f: &mut MapFn<'_, T, U>) -> Result<BackboneParams<U>> {
        Ok(BackboneParams {
            vision: self.vision.try_map("vision", f)?,
            text: self.text.try_map("text", f)?,
        })
    }

    pub fn encoder(&self, modality: Modality) -> &EncoderParams<T> {
        match modality {
            Modality::Vision => &self.vision,
            Modality::Language => &self.text,
        }
    }

    /// Every leaf in a fixed order, paired with its dotted name.
    pub fn named(&self) -> Vec<(String, T)>
    where
        T: Clone,
    {
        let mut out = Vec::new();
        self.try_map(&mut |name, x: &T| {
            out.push((name.to_string(), x.clone()));
            Ok(())
        })
        .expect("collection is infallible");
        out
    }
}

/// Frozen-or-trainable dual encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: BackboneParams<Tensor>,
    frozen: bool,
}

fn init_layer(d: usize, heads: usize, ffn_mult: usize, rng: &mut rand_chacha::ChaCha8Rng) -> LayerParams<Tensor> {
    let dh = d / heads;
    let lin = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
    };
    let hidden = d * ffn_mult;
    LayerParams {
        ln1_gain: Tensor::full(&[d], 1.0),
        ln1_bias: Tensor::zeros(&[d]),
        query: (0..heads).map(|_| lin(d, dh, rng)).collect(),
        key: (0..heads).map(|_| lin(d, dh, rng)).collect(),
        value: (0..heads).map(|_| lin(d, dh, rng)).collect(),
        proj: (0..heads).map(|_| lin(dh, d, rng)).collect(),
        proj_bias: Tensor::zeros(&[d]),
        ln2_gain: Tensor::full(&[d], 1.0),
        ln2_bias: Tensor::zeros(&[d]),
        fc1: lin(d, hidden, rng),
        fc1_bias: Tensor::zeros(&[hidden]),
        fc2: lin(hidden, d, rng),
        fc2_bias: Tensor::zeros(&[d]),
    }
}

fn init_encoder(cfg: &BackboneConfig, modality: Modality, streams: &RngStreams) -> EncoderParams<Tensor> {
    let d = cfg.width(modality);
    let mut rng = streams.stream(&format!("backbone/init/{}", modality.as_str()));
    let (embed, embed_bias) = match modality {
        Modality::Vision => (
            Tensor::randn(&[cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt(), &mut rng),
            Some(Tensor::zeros(&[d])),
        ),
        Modality::Language => (Tensor::randn(&[cfg.vocab, d], 1.0, &mut rng), None),
    };
    let pool = Tensor::randn(&[d], 1.0, &mut rng);
    let pos = Tensor::randn(&[1 + cfg.content_len(modality), d], 0.1, &mut rng);
    let layers = (0..cfg.layers)
        .map(|_| init_layer(d, cfg.heads, cfg.ffn_mult, &mut rng))
        .collect();
    EncoderParams {
        embed,
        embed_bias,
        pool,
        pos,
        layers,
        final_gain: Tensor::full(&[d], 1.0),
        final_bias: Tensor::zeros(&[d]),
        head: Tensor::randn(&[d, cfg.d_joint], 1.0 / (d as f64).sqrt(), &mut rng),
    }
}

impl Backbone {
    /// Randomly initialized, trainable backbone.
    pub fn init(config: &BackboneConfig, streams: &RngStreams) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: BackboneParams {
                vision: init_encoder(config, Modality::Vision, streams),
                text: init_encoder(config, Modality::Language, streams),
            },
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.named()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Replace all weights, in [`Self::named_tensors`] order.
    pub fn set_tensors(&mut self, values: &[Tensor]) -> Result<()> {
        if self.frozen {
            return Err(Error::domain("backbone", "weights are frozen"));
        }
        let mut it = values.iter();
        self.params = self.params.try_map(&mut |name, old: &Tensor| {
            let new = it
                .next()
                .ok_or_else(|| Error::domain("backbone", format!("missing value for {name}")))?;
            if new.shape() != old.shape() {
                return Err(Error::shape("backbone", old.shape(), new.shape()));
            }
            Ok(new.clone())
        })?;
        Ok(())
    }

    /// Rebuild from named arrays; every expected name must be present with
    /// the shape implied by `config`.
    pub fn from_named(config: &BackboneConfig, frozen: bool, arrays: &BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Self::init(config, &RngStreams::new(0))?;
        let params = template.params.try_map(&mut |name, t: &Tensor| {
            let found = arrays
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing backbone array {name}")))?;
            if found.shape() != t.shape() {
                return Err(Error::CheckpointArray {
                    array: name.to_string(),
                    msg: format!("shape {:?}, expected {:?}", found.shape(), t.shape()),
                });
            }
            Ok(found.clone())
        })?;
        Ok(Self {
            config: config.clone(),
            params,
            frozen,
        })
    }

    /// Place all weights on the tape: constants when frozen, trainable
    /// leaves otherwise.
    pub fn bind(&self, tape: &mut Tape) -> BackboneParams<Var> {
        let frozen = self.frozen;
        self.params
            .try_map(&mut |_, t: &Tensor| {
                Ok(if frozen {
                    tape.constant(t.clone())
                } else {
                    tape.param(t.clone())
                })
            })
            .expect("binding is infallible")
    }

    /// Token-table rows for the given ids, averaged.
    pub fn mean_token_embedding(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let table = &self.params.text.embed;
        let d = table.shape()[1];
        if ids.is_empty() {
            return Err(Error::domain("mean_token_embedding", "no tokens"));
        }
        let mut acc = vec![0.0; d];
        for &id in ids {
            if id >= table.shape()[0] {
                return Err(Error::domain("mean_token_embedding", format!("id {id} outside vocabulary")));
            }
            for (a, x) in acc.iter_mut().zip(table.row(id)) {
                *a += x;
            }
        }
        Ok(acc.into_iter().map(|a| a / ids.len() as f64).collect())
    }
}

//! Whole-run state: configuration, frozen backbone, prompt pool and the
//! per-stage training history, with checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::{train_task, Evaluator, MetricsRecord, PoolEntry, PromptPool, TaskKey, TrainReport};
use crate::data::TaskSpec;
use crate::encoder::{pretrain_backbone, Backbone, PromptSet};
use crate::error::{Error, Result};
use crate::io::checkpoint::{read_checkpoint, write_checkpoint};
use crate::io::config::RunConfig;
use crate::io::dataset::Dataset;
use crate::lowrank::PromptKind;
use crate::numerics::{RngStreams, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PoolMeta {
    task: TaskSpec,
    kind: PromptKind,
    fusion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngMeta {
    backbone_seed: u64,
    train_seed: u64,
    /// Named streams drawn from so far; each is derived afresh from its
    /// seed and name, so these fully determine the generator state.
    streams: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    stage: usize,
    config_hash: String,
    config: String,
    rng: RngMeta,
    backbone_frozen: bool,
    pool: Vec<PoolMeta>,
    reports: Vec<TrainReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub config: RunConfig,
    pub backbone: Backbone,
    pub pool: PromptPool,
    pub reports: Vec<TrainReport>,
}

impl RunState {
    /// Initialize and pretrain a backbone on the dataset's pretraining split.
    pub fn pretrain(config: &RunConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        check_compatible(config, data)?;
        let streams = RngStreams::new(config.seeds.backbone);
        let backbone = if data.meta.pretrain_classes.is_empty() {
            log::warn!("dataset has no pretraining split; freezing the random backbone");
            let mut b = Backbone::init(&config.backbone, &streams)?;
            b.freeze();
            b
        } else {
            pretrain_backbone(&data.pretrain_train, &config.backbone, &config.pretrain, &streams)?
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            pool: PromptPool::new(),
            reports: Vec::new(),
        })
    }

    /// Start a run on an existing frozen backbone.
    pub fn with_backbone(config: &RunConfig, backbone: Backbone) -> Result<Self> {
        config.validate()?;
        if backbone.config != config.backbone {
            return Err(Error::Config("backbone shape differs from the run configuration".into()));
        }
        if !backbone.is_frozen() {
            return Err(Error::Config("prompt training needs a frozen backbone".into()));
        }
        Ok(Self {
            config: config.clone(),
            backbone,
            pool: PromptPool::new(),
            reports: Vec::new(),
        })
    }

    /// Number of tasks trained so far.
    pub fn stage(&self) -> usize {
        self.pool.len()
    }

    /// Train the next task of `data`.
    pub fn train_next(&mut self, data: &Dataset) -> Result<&TrainReport> {
        check_compatible(&self.config, data)?;
        let k = self.stage();
        let task = data
            .tasks
            .get(k)
            .ok_or_else(|| Error::Data(format!("dataset has {} tasks; all are trained", data.tasks.len())))?;
        let streams = RngStreams::new(self.config.seeds.train);
        let report = train_task(&mut self.pool, &self.backbone, &task.spec, &task.train, &self.config.train, &streams)?;
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Train until `until` tasks are done (all tasks when `None`), calling
    /// `after_stage` after each one.
    pub fn train_until(
        &mut self,
        data: &Dataset,
        until: Option<usize>,
        mut after_stage: impl FnMut(&RunState) -> Result<()>,
    ) -> Result<()> {
        let target = until.unwrap_or(data.tasks.len()).min(data.tasks.len());
        while self.stage() < target {
            self.train_next(data)?;
            after_stage(self)?;
        }
        Ok(())
    }

    /// Records for every stage under the configured gallery and `mode`.
    pub fn evaluate(&self, data: &Dataset, mode: crate::continual::IdentityMode) -> Result<Vec<MetricsRecord>> {
        let tests = data.test_sets();
        let tests = &tests[..self.stage().min(tests.len())];
        Evaluator::new(&self.backbone, tests, self.config.eval.gallery).evaluate_run(&self.pool, mode)
    }

    fn streams_used(&self) -> Vec<String> {
        let mut s = vec![
            "backbone/init/vision".to_string(),
            "backbone/init/language".to_string(),
            "pretrain/shuffle".to_string(),
        ];
        for k in 0..self.stage() {
            s.push(format!("task/{k}/init"));
            s.extend((0..self.config.train.epochs).map(|e| format!("task/{k}/shuffle/epoch{e}")));
            s.push(format!("task/{k}/kmeans"));
        }
        s
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .backbone
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("backbone.{n}"), t))
            .collect();
        for (k, e) in self.pool.entries.iter().enumerate() {
            out.extend(e.prompts.named_tensors().into_iter().map(|(n, t)| (format!("pool.{k}.{n}"), t)));
            out.push((format!("pool.{k}.key.centroids"), e.key.centroids.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = self.config.to_toml()?;
        let meta = RunMeta {
            stage: self.stage(),
            config_hash: self.config.hash()?,
            config,
            rng: RngMeta {
                backbone_seed: self.config.seeds.backbone,
                train_seed: self.config.seeds.train,
                streams: self.streams_used(),
            },
            backbone_frozen: self.backbone.is_frozen(),
            pool: self
                .pool
                .entries
                .iter()
                .map(|e| PoolMeta {
                    task: e.task.clone(),
                    kind: e.prompts.kind(),
                    fusion: e.prompts.has_fusion(),
                })
                .collect(),
            reports: self.reports.clone(),
        };
        write_checkpoint(path, &meta, &self.named_arrays())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays): (RunMeta, _) = read_checkpoint(path)?;
        let config = RunConfig::from_toml(&meta.config)?;
        if config.hash()? != meta.config_hash {
            return Err(Error::Checkpoint("configuration hash mismatch".into()));
        }
        if meta.pool.len() != meta.stage || meta.reports.len() != meta.stage {
            return Err(Error::Checkpoint(format!(
                "stage {} with {} pool entries and {} reports",
                meta.stage,
                meta.pool.len(),
                meta.reports.len()
            )));
        }
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        for (name, t) in arrays {
            let (group, rest) = match name.strip_prefix("backbone.") {
                Some(rest) => ("backbone".to_string(), rest.to_string()),
                None => {
                    let mut parts = name.splitn(3, '.');
                    match (parts.next(), parts.next(), parts.next()) {
                        (Some("pool"), Some(k), Some(rest)) => (format!("pool.{k}"), rest.to_string()),
                        _ => return Err(Error::Checkpoint(format!("unexpected array {name}"))),
                    }
                }
            };
            groups.entry(group).or_default().insert(rest, t);
        }
        let empty = BTreeMap::new();
        let backbone = Backbone::from_named(
            &config.backbone,
            meta.backbone_frozen,
            groups.get("backbone").unwrap_or(&empty),
        )?;
        let tc = &config.train;
        let mut pool = PromptPool::new();
        for (k, pm) in meta.pool.iter().enumerate() {
            let arrays = groups
                .get(&format!("pool.{k}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing arrays for pool entry {k}")))?;
            let prompts = PromptSet::from_named(
                pm.task.task_id,
                pm.kind,
                pm.fusion,
                (tc.lambda_v, tc.lambda_l),
                true,
                arrays,
            )?;
            prompts.validate(&config.backbone)?;
            let centroids = arrays
                .get("key.centroids")
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing array pool.{k}.key.centroids")))?;
            pool.push(PoolEntry {
                task: pm.task.clone(),
                prompts,
                key: TaskKey { centroids },
            })?;
        }
        Ok(Self {
            config,
            backbone,
            pool,
            reports: meta.reports,
        })
    }
}

fn check_compatible(config: &RunConfig, data: &Dataset) -> Result<()> {
    let g = &data.meta.generator;
    let b = &config.backbone;
    if (g.patches, g.patch_dim, g.caption_len) != (b.patches, b.patch_dim, b.caption_len) || g.vocab > b.vocab {
        return Err(Error::Config(format!(
            "dataset (patches {}, patch_dim {}, caption_len {}, vocab {}) does not fit the backbone (patches {}, patch_dim {}, caption_len {}, vocab {})",
            g.patches, g.patch_dim, g.caption_len, g.vocab, b.patches, b.patch_dim, b.caption_len, b.vocab
        )));
    }
    Ok(())
}

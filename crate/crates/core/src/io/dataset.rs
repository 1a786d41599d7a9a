//! Synthetic paired data and its on-disk layout.
//!
//! ```text
//! <dir>/meta.json
//! <dir>/pretrain/{train,test}.bin
//! <dir>/task_<name>/{train,test}.bin
//! ```
//!
//! Each `.bin` holds the magic `LPIDATA1`, then little-endian `u32` count,
//! patches, patch width and caption length, the `u32` labels, the `u32`
//! caption tokens, and the `f64` patch values.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{PairSet, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::{RngStreams, Tensor};

pub const DATA_MAGIC: &[u8; 8] = b"LPIDATA1";

/// Token ids below this value are reserved for task-name letters.
pub const RESERVED_TOKENS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub tasks: Vec<String>,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the Gaussian noise added to image prototypes.
    pub noise: f64,
    /// Probability that a caption token is swapped within its class block.
    pub p_swap: f64,
    /// Vocabulary tokens owned by each class.
    pub block_size: usize,
    /// Fraction of an image prototype's variance shared by its whole task.
    pub task_share: f64,
    pub pretrain_classes: usize,
    pub pretrain_train_per_class: usize,
    pub pretrain_test_per_class: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub caption_len: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            tasks: ["appliance", "sports", "outdoor", "electronic"].map(String::from).to_vec(),
            classes_per_task: 5,
            train_per_class: 40,
            test_per_class: 20,
            noise: 0.35,
            p_swap: 0.2,
            block_size: 6,
            task_share: 0.5,
            pretrain_classes: 16,
            pretrain_train_per_class: 40,
            pretrain_test_per_class: 8,
            patches: 16,
            patch_dim: 8,
            caption_len: 8,
            vocab: 512,
            seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn total_classes(&self) -> usize {
        self.tasks.len() * self.classes_per_task + self.pretrain_classes
    }

    /// First token id of class `class`'s vocabulary block.
    pub fn block_start(&self, class: usize) -> usize {
        RESERVED_TOKENS + class * self.block_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() || self.classes_per_task == 0 {
            return fail("generator needs at least one task and one class per task".into());
        }
        for (i, n) in self.tasks.iter().enumerate() {
            if !n.bytes().any(|b| b.is_ascii_alphabetic()) || !n.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                return fail(format!("task name `{n}` must be alphanumeric with at least one letter"));
            }
            if self.tasks[..i].contains(n) {
                return fail(format!("duplicate task name `{n}`"));
            }
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.p_swap) || !(0.0..=1.0).contains(&self.task_share) {
            return fail("need noise >= 0 and p_swap, task_share in [0, 1]".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("every class needs train and test samples".into());
        }
        if self.pretrain_classes > 0 && (self.pretrain_train_per_class == 0 || self.pretrain_test_per_class == 0) {
            return fail("pretraining classes need train and test samples".into());
        }
        if self.patches == 0 || self.patch_dim == 0 || self.caption_len == 0 {
            return fail("patches, patch_dim and caption_len must be positive".into());
        }
        if self.block_size == 0 || self.block_start(self.total_classes()) > self.vocab {
            return fail(format!(
                "class vocabulary blocks overlap: {} classes of {} tokens from id {RESERVED_TOKENS} exceed vocab {}",
                self.total_classes(),
                self.block_size,
                self.vocab
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GeneratorSpec,
    pub tasks: Vec<TaskSpec>,
    pub pretrain_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: PairSet,
    pub test: PairSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub tasks: Vec<TaskData>,
    pub pretrain_train: PairSet,
    pub pretrain_test: PairSet,
}

impl Dataset {
    pub fn test_sets(&self) -> Vec<PairSet> {
        self.tasks.iter().map(|t| t.test.clone()).collect()
    }
}

struct ClassModel {
    prototype: Vec<f64>,
    template: Vec<usize>,
    block: usize,
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sample_pairs(spec: &GeneratorSpec, classes: &[(usize, &ClassModel)], per_class: usize, rng: &mut impl Rng) -> Result<PairSet> {
    let dim = spec.patches * spec.patch_dim;
    let n = classes.len() * per_class;
    let mut vision = Vec::with_capacity(n * dim);
    let mut captions = Vec::with_capacity(n * spec.caption_len);
    let mut labels = Vec::with_capacity(n);
    for &(label, model) in classes {
        for _ in 0..per_class {
            for &p in &model.prototype {
                let z: f64 = StandardNormal.sample(rng);
                vision.push(p + spec.noise * z);
            }
            for &tok in &model.template {
                let swap = rng.gen::<f64>() < spec.p_swap;
                captions.push(if swap { model.block + rng.gen_range(0..spec.block_size) } else { tok });
            }
            labels.push(label);
        }
    }
    PairSet::new(
        Tensor::new(vec![n, spec.patches, spec.patch_dim], vision)?,
        captions,
        spec.caption_len,
        labels,
    )
}

/// Draw every split from named streams of `spec.seed`.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let streams = RngStreams::new(spec.seed);
    let dim = spec.patches * spec.patch_dim;
    let (a, b) = (spec.task_share.sqrt(), (1.0 - spec.task_share).sqrt());
    let class_model = |class: usize, shared: Option<&[f64]>| {
        let mut rng = streams.stream(&format!("gen/class/{class}"));
        let own = normal_vec(dim, &mut rng);
        let prototype = match shared {
            Some(s) => s.iter().zip(&own).map(|(s, o)| a * s + b * o).collect(),
            None => own,
        };
        let block = spec.block_start(class);
        let template = (0..spec.caption_len).map(|_| block + rng.gen_range(0..spec.block_size)).collect();
        ClassModel {
            prototype,
            template,
            block,
        }
    };

    let mut tasks = Vec::with_capacity(spec.tasks.len());
    for (t, name) in spec.tasks.iter().enumerate() {
        let shared = normal_vec(dim, &mut streams.stream(&format!("gen/task/{t}")));
        let ids: Vec<usize> = (0..spec.classes_per_task).map(|m| t * spec.classes_per_task + m).collect();
        let models: Vec<ClassModel> = ids.iter().map(|&c| class_model(c, Some(&shared))).collect();
        let labelled: Vec<(usize, &ClassModel)> = ids.iter().copied().zip(&models).collect();
        let train = sample_pairs(spec, &labelled, spec.train_per_class, &mut streams.stream(&format!("gen/task/{t}/train")))?;
        let test = sample_pairs(spec, &labelled, spec.test_per_class, &mut streams.stream(&format!("gen/task/{t}/test")))?;
        tasks.push(TaskData {
            spec: TaskSpec {
                task_id: t,
                name: name.clone(),
                classes: ids,
            },
            train,
            test,
        });
    }

    let first = spec.tasks.len() * spec.classes_per_task;
    let pre_ids: Vec<usize> = (first..first + spec.pretrain_classes).collect();
    let pre_models: Vec<ClassModel> = pre_ids.iter().map(|&c| class_model(c, None)).collect();
    let labelled: Vec<(usize, &ClassModel)> = pre_ids.iter().copied().zip(&pre_models).collect();
    let (pretrain_train, pretrain_test) = if labelled.is_empty() {
        let empty = |n| PairSet {
            vision: Tensor::zeros(&[1, spec.patches, spec.patch_dim]),
            captions: vec![0; spec.caption_len],
            caption_len: spec.caption_len,
            labels: vec![usize::MAX; n],
        };
        (empty(1), empty(1))
    } else {
        (
            sample_pairs(spec, &labelled, spec.pretrain_train_per_class, &mut streams.stream("gen/pretrain/train"))?,
            sample_pairs(spec, &labelled, spec.pretrain_test_per_class, &mut streams.stream("gen/pretrain/test"))?,
        )
    };

    Ok(Dataset {
        meta: DatasetMeta {
            generator: spec.clone(),
            tasks: tasks.iter().map(|t| t.spec.clone()).collect(),
            pretrain_classes: pre_ids,
        },
        tasks,
        pretrain_train,
        pretrain_test,
    })
}

pub fn encode_pairs(set: &PairSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + set.len() * 4 * (1 + set.caption_len) + set.vision.numel() * 8);
    out.extend_from_slice(DATA_MAGIC);
    for v in [set.len(), set.patches(), set.patch_dim(), set.caption_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in &set.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &t in &set.captions {
        out.extend_from_slice(&(t as u32).to_le_bytes());
    }
    for &x in set.vision.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_pairs(bytes: &[u8], what: &str) -> Result<PairSet> {
    let bad = |m: &str| Error::Data(format!("{what}: {m}"));
    if bytes.len() < 24 || &bytes[..8] != DATA_MAGIC {
        return Err(bad("not a pair file (bad magic)"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, p, d, c) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let expected = 24 + 4 * n * (1 + c) + 8 * n * p * d;
    if bytes.len() != expected {
        return Err(bad(&format!("{} bytes, expected {expected}", bytes.len())));
    }
    let mut off = 24;
    let labels: Vec<usize> = (0..n).map(|i| u32_at(off + 4 * i)).collect();
    off += 4 * n;
    let captions: Vec<usize> = (0..n * c).map(|i| u32_at(off + 4 * i)).collect();
    off += 4 * n * c;
    let vision: Vec<f64> = bytes[off..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    PairSet::new(Tensor::new(vec![n, p, d], vision).map_err(|e| bad(&e.to_string()))?, captions, c, labels)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_pairs(path: &Path) -> Result<PairSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pairs(&bytes, &path.display().to_string())
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    let meta = serde_json::to_string_pretty(&data.meta).map_err(|e| Error::Data(e.to_string()))?;
    write(&dir.join("meta.json"), meta.as_bytes())?;
    if !data.meta.pretrain_classes.is_empty() {
        write(&dir.join("pretrain/train.bin"), &encode_pairs(&data.pretrain_train))?;
        write(&dir.join("pretrain/test.bin"), &encode_pairs(&data.pretrain_test))?;
    }
    for t in &data.tasks {
        let sub = dir.join(format!("task_{}", t.spec.name));
        write(&sub.join("train.bin"), &encode_pairs(&t.train))?;
        write(&sub.join("test.bin"), &encode_pairs(&t.test))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let mut tasks = Vec::with_capacity(meta.tasks.len());
    for spec in &meta.tasks {
        let sub = dir.join(format!("task_{}", spec.name));
        tasks.push(TaskData {
            spec: spec.clone(),
            train: read_pairs(&sub.join("train.bin"))?,
            test: read_pairs(&sub.join("test.bin"))?,
        });
    }
    let (pretrain_train, pretrain_test) = if meta.pretrain_classes.is_empty() {
        let g = &meta.generator;
        let empty = PairSet {
            vision: Tensor::zeros(&[1, g.patches, g.patch_dim]),
            captions: vec![0; g.caption_len],
            caption_len: g.caption_len,
            labels: vec![usize::MAX],
        };
        (empty.clone(), empty)
    } else {
        (read_pairs(&dir.join("pretrain/train.bin"))?, read_pairs(&dir.join("pretrain/test.bin"))?)
    };
    Ok(Dataset {
        meta,
        tasks,
        pretrain_train,
        pretrain_test,
    })
}

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{rank_descending, recall_at_k, Direction, IdentityMode, MetricsRecord};
use super::pool::{predict_task, PromptPool};
use crate::data::PairSet;
use crate::encoder::{encode, encode_pair, plain_features, Backbone, Input, PromptSet};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Which items a query is ranked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GalleryScope {
    /// The test set of the query's own task.
    PerTask,
    /// All test sets of tasks seen so far.
    Union,
}

impl FromStr for GalleryScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-task" => Ok(Self::PerTask),
            "union" => Ok(Self::Union),
            other => Err(Error::Config(format!("unknown gallery scope `{other}` (expected per-task or union)"))),
        }
    }
}

impl fmt::Display for GalleryScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerTask => "per-task",
            Self::Union => "union",
        })
    }
}

const CHUNK: usize = 64;
const PAIR_CHUNK: usize = 128;

/// Image-by-text cosine scores over one gallery under one prompt set;
/// entries not yet computed are NaN.
struct ScoreMatrix {
    n: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    fn at(&self, v: usize, t: usize) -> f64 {
        self.values[v * self.n + t]
    }
}

/// Per-query outcome of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRankings {
    pub rankings: Vec<Vec<usize>>,
    pub relevant: Vec<Vec<usize>>,
    /// Pool position of the prompt set each query used; `None` without prompts.
    pub chosen: Vec<Option<usize>>,
}

/// Evaluates a pool stage by stage, caching score matrices. Entries of a
/// pool never change once added, so a matrix computed for one stage is
/// reused at every later stage.
pub struct Evaluator<'a> {
    backbone: &'a Backbone,
    tests: &'a [PairSet],
    scope: GalleryScope,
    galleries: HashMap<Vec<usize>, PairSet>,
    matrices: HashMap<(Vec<usize>, Option<usize>), ScoreMatrix>,
    identity_features: HashMap<usize, Tensor>,
}

impl<'a> Evaluator<'a> {
    /// `tests[i]` is the test set of the task at pool position `i`.
    pub fn new(backbone: &'a Backbone, tests: &'a [PairSet], scope: GalleryScope) -> Self {
        Self {
            backbone,
            tests,
            scope,
            galleries: HashMap::new(),
            matrices: HashMap::new(),
            identity_features: HashMap::new(),
        }
    }

    fn gallery_tasks(&self, task: usize, stage: usize) -> Vec<usize> {
        match self.scope {
            GalleryScope::PerTask => vec![task],
            GalleryScope::Union => (0..stage).collect(),
        }
    }

    fn gallery(&mut self, tasks: &[usize]) -> Result<&PairSet> {
        if !self.galleries.contains_key(tasks) {
            let sets: Vec<&PairSet> = tasks.iter().map(|&t| &self.tests[t]).collect();
            let first = sets[0];
            let mut vision = Vec::new();
            let mut captions = Vec::new();
            let mut labels = Vec::new();
            for s in &sets {
                vision.extend_from_slice(s.vision.data());
                captions.extend_from_slice(&s.captions);
                labels.extend_from_slice(&s.labels);
            }
            let shape = vec![labels.len(), first.patches(), first.patch_dim()];
            let set = PairSet::new(Tensor::new(shape, vision)?, captions, first.caption_len, labels)?;
            self.galleries.insert(tasks.to_vec(), set);
        }
        Ok(&self.galleries[tasks])
    }

    fn identity_feature(&mut self, task: usize, q: usize) -> Result<Vec<f64>> {
        if !self.identity_features.contains_key(&task) {
            let f = plain_features(self.backbone, &self.tests[task], true)?;
            self.identity_features.insert(task, f);
        }
        Ok(self.identity_features[&task].row(q).to_vec())
    }

    /// Fill the requested `(image, text)` entries of the matrix for
    /// `(gallery, prompt)`.
    fn ensure(
        &mut self,
        tasks: &[usize],
        prompt: Option<usize>,
        set: Option<&PromptSet>,
        pairs: &[(usize, usize)],
    ) -> Result<()> {
        let key = (tasks.to_vec(), prompt);
        let gallery = self.gallery(tasks)?.clone();
        let n = gallery.len();
        let fused = set.map_or(false, PromptSet::has_fusion);
        if !self.matrices.contains_key(&key) {
            let values = if fused {
                vec![f64::NAN; n * n]
            } else {
                self.separate_scores(&gallery, set)?
            };
            self.matrices.insert(key.clone(), ScoreMatrix { n, values });
        }
        if !fused {
            return Ok(());
        }
        let m = &self.matrices[&key];
        let mut missing: Vec<(usize, usize)> = pairs.iter().copied().filter(|&(v, t)| m.at(v, t).is_nan()).collect();
        missing.sort_unstable();
        missing.dedup();
        let set = set.expect("fused implies a prompt set");
        for chunk in missing.chunks(PAIR_CHUNK) {
            let vi: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let ti: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let mut tape = Tape::new();
            let bb = self.backbone.bind(&mut tape);
            let bp = set.bind(&mut tape)?;
            let vision = gallery.vision_batch(&vi);
            let text = gallery.caption_batch(&ti);
            let e = encode_pair(&mut tape, &self.backbone.config, &bb, &vision, &text, Some(&bp))?;
            let fv = tape.value(e.vision.feature);
            let ft = tape.value(e.text.feature);
            let m = self.matrices.get_mut(&key).expect("inserted above");
            for (r, &(v, t)) in chunk.iter().enumerate() {
                m.values[v * n + t] = fv.row(r).iter().zip(ft.row(r)).map(|(a, b)| a * b).sum();
            }
        }
        Ok(())
    }

    /// All image-text cosines when the two encoders run independently.
    fn separate_scores(&self, gallery: &PairSet, set: Option<&PromptSet>) -> Result<Vec<f64>> {
        let n = gallery.len();
        let d = self.backbone.config.d_joint;
        let mut img = Vec::with_capacity(n * d);
        let mut txt = Vec::with_capacity(n * d);
        let all: Vec<usize> = (0..n).collect();
        for idx in all.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bb = self.backbone.bind(&mut tape);
            let bp = set.map(|s| s.bind(&mut tape)).transpose()?;
            let v = gallery.vision_batch(idx);
            let t = gallery.caption_batch(idx);
            let cfg = &self.backbone.config;
            let ev = encode(&mut tape, cfg, &bb, Input::Vision(&v), bp.as_ref(), None)?;
            let et = encode(
                &mut tape,
                cfg,
                &bb,
                Input::Text {
                    ids: &t,
                    len: gallery.caption_len,
                },
                bp.as_ref(),
                None,
            )?;
            img.extend_from_slice(tape.value(ev.feature).data());
            txt.extend_from_slice(tape.value(et.feature).data());
        }
        let mut values = vec![0.0; n * n];
        for v in 0..n {
            for t in 0..n {
                values[v * n + t] = (0..d).map(|c| img[v * d + c] * txt[t * d + c]).sum();
            }
        }
        Ok(values)
    }

    /// Rankings of every test query of pool position `task` at `stage`.
    pub fn query_rankings(
        &mut self,
        pool: &PromptPool,
        stage: usize,
        task: usize,
        direction: Direction,
        mode: IdentityMode,
    ) -> Result<QueryRankings> {
        if task >= stage || stage > self.tests.len() {
            return Err(Error::domain(
                "evaluate",
                format!("task {task} at stage {stage} with {} test sets", self.tests.len()),
            ));
        }
        if mode != IdentityMode::None && stage > pool.len() {
            return Err(if pool.is_empty() { Error::EmptyPool } else {
                Error::domain("evaluate", format!("stage {stage} beyond pool of {}", pool.len()))
            });
        }
        let test_len = self.tests[task].len();
        if test_len == 0 {
            return Err(Error::Data(format!("task {task} has an empty test set")));
        }
        let prefix = pool.prefix(stage);
        let tasks = self.gallery_tasks(task, stage);
        let offset: usize = tasks.iter().take_while(|&&t| t != task).map(|&t| self.tests[t].len()).sum();

        let mut chosen = Vec::with_capacity(test_len);
        for q in 0..test_len {
            chosen.push(match mode {
                IdentityMode::None => None,
                IdentityMode::Oracle => Some(task),
                IdentityMode::Predicted => {
                    let feat = self.identity_feature(task, q)?;
                    let id = predict_task(&feat, &prefix)?;
                    Some(prefix.position(id).expect("predicted task is in the pool"))
                }
            });
        }

        let labels = self.gallery(&tasks)?.labels.clone();
        let n = labels.len();
        let mut by_prompt: Vec<(Option<usize>, Vec<usize>)> = Vec::new();
        for (q, &p) in chosen.iter().enumerate() {
            match by_prompt.iter_mut().find(|(k, _)| *k == p) {
                Some((_, qs)) => qs.push(q),
                None => by_prompt.push((p, vec![q])),
            }
        }
        for (p, qs) in &by_prompt {
            let mut pairs = Vec::with_capacity(qs.len() * n);
            for &q in qs {
                let g = offset + q;
                for other in 0..n {
                    pairs.push(match direction {
                        Direction::ImageToText => (g, other),
                        Direction::TextToImage => (other, g),
                    });
                }
            }
            let set = p.map(|p| &pool.entries[p].prompts);
            self.ensure(&tasks, *p, set, &pairs)?;
        }

        let mut rankings = Vec::with_capacity(test_len);
        let mut relevant = Vec::with_capacity(test_len);
        for (q, p) in chosen.iter().enumerate() {
            let m = &self.matrices[&(tasks.clone(), *p)];
            let g = offset + q;
            let scores: Vec<f64> = (0..n)
                .map(|o| match direction {
                    Direction::ImageToText => m.at(g, o),
                    Direction::TextToImage => m.at(o, g),
                })
                .collect();
            rankings.push(rank_descending(&scores));
            relevant.push((0..n).filter(|&o| labels[o] == labels[g]).collect());
        }
        Ok(QueryRankings {
            rankings,
            relevant,
            chosen,
        })
    }

    /// Records for every task seen by `stage`, both directions.
    pub fn evaluate_stage(&mut self, pool: &PromptPool, stage: usize, mode: IdentityMode) -> Result<Vec<MetricsRecord>> {
        if stage == 0 {
            return Err(Error::EmptyPool);
        }
        let mut out = Vec::new();
        for task in 0..stage {
            for direction in [Direction::ImageToText, Direction::TextToImage] {
                let r = self.query_rankings(pool, stage, task, direction, mode)?;
                let task_id = pool.entries.get(task).map_or(task, |e| e.task.task_id);
                out.push(MetricsRecord {
                    stage,
                    task: task_id,
                    direction,
                    identity_mode: mode,
                    r1: recall_at_k(&r.rankings, &r.relevant, 1)?,
                    r5: recall_at_k(&r.rankings, &r.relevant, 5)?,
                    r10: recall_at_k(&r.rankings, &r.relevant, 10)?,
                });
            }
        }
        Ok(out)
    }

    /// Records after every stage `1..=pool.len()`.
    pub fn evaluate_run(&mut self, pool: &PromptPool, mode: IdentityMode) -> Result<Vec<MetricsRecord>> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut out = Vec::new();
        for stage in 1..=pool.len() {
            out.extend(self.evaluate_stage(pool, stage, mode)?);
        }
        Ok(out)
    }

    /// Fraction of test queries (all tasks up to `stage`) whose predicted
    /// task is their true task.
    pub fn identity_accuracy(&mut self, pool: &PromptPool, stage: usize) -> Result<f64> {
        let prefix = pool.prefix(stage);
        let (mut hit, mut total) = (0usize, 0usize);
        for task in 0..stage {
            for q in 0..self.tests[task].len() {
                let feat = self.identity_feature(task, q)?;
                hit += usize::from(predict_task(&feat, &prefix)? == prefix.entries[task].task.task_id);
                total += 1;
            }
        }
        Ok(hit as f64 / total as f64)
    }
}

/// One-shot [`Evaluator::evaluate_stage`].
pub fn evaluate_stage(
    pool: &PromptPool,
    backbone: &Backbone,
    tests: &[PairSet],
    stage: usize,
    mode: IdentityMode,
    scope: GalleryScope,
) -> Result<Vec<MetricsRecord>> {
    Evaluator::new(backbone, tests, scope).evaluate_stage(pool, stage, mode)
}

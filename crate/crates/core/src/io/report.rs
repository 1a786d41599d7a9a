//! Evaluation reports: `metrics.csv`, `summary.json`, `prompts.tsv` and
//! `params.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::{forgetting, group_histories, Direction, IdentityMode, MetricsRecord, PromptPool, Variant};
use crate::encoder::BackboneConfig;
use crate::error::{Error, Result};
use crate::lowrank::{complexity_terms, param_count, ComplexityTerms, ParamCount, PromptDims, PromptKind};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROMPTS_FILE: &str = "prompts.tsv";
pub const PARAMS_FILE: &str = "params.json";

pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Report(format!("metrics row {}: {e}", i + 1))))
        .collect()
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_to_csv(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    metrics_from_csv(&text)
}

/// Check value ranges and that every `(task, direction, mode)` history runs
/// without gaps from its first stage to the last stage of its mode.
pub fn validate_metrics(records: &[MetricsRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Report("no metrics records".into()));
    }
    for r in records {
        let ok = (0.0..=100.0).contains(&r.r1) && r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 100.0;
        if !ok {
            return Err(Error::Report(format!(
                "stage {} task {} {} {}: recalls {} {} {} are not ordered within [0, 100]",
                r.stage, r.task, r.direction, r.identity_mode, r.r1, r.r5, r.r10
            )));
        }
    }
    let mut last: BTreeMap<IdentityMode, usize> = BTreeMap::new();
    for r in records {
        let e = last.entry(r.identity_mode).or_insert(0);
        *e = (*e).max(r.stage);
    }
    let mut gaps = Vec::new();
    for ((task, direction, mode), hist) in group_histories(records) {
        let seen: BTreeSet<usize> = hist.iter().map(|r| r.stage).collect();
        if seen.len() != hist.len() {
            return Err(Error::Report(format!("task {task} {direction} {mode}: duplicate stage")));
        }
        let first = *seen.iter().next().expect("non-empty history");
        let missing: Vec<String> = (first..=last[&mode]).filter(|s| !seen.contains(s)).map(|s| s.to_string()).collect();
        if !missing.is_empty() {
            gaps.push(format!("task {task} {direction} {mode} stage {}", missing.join("/")));
        }
    }
    if gaps.is_empty() {
        Ok(())
    } else {
        Err(Error::Report(format!("missing stages: {}", gaps.join("; "))))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "F5")]
    pub f5: f64,
    #[serde(rename = "F10")]
    pub f10: f64,
    pub forgetting: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub direction: Direction,
    #[serde(flatten)]
    pub values: SummaryRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub identity_mode: IdentityMode,
    pub final_stage: usize,
    pub tasks: Vec<TaskSummary>,
    /// Mean over tasks and directions.
    pub average: SummaryRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub modes: Vec<ModeSummary>,
}

impl Summary {
    pub fn mode(&self, mode: IdentityMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.identity_mode == mode)
    }
}

/// Final recall and forgetting per task and direction, for every identity
/// mode present.
pub fn summarize(records: &[MetricsRecord]) -> Result<Summary> {
    validate_metrics(records)?;
    let mut by_mode: BTreeMap<IdentityMode, Vec<TaskSummary>> = BTreeMap::new();
    let mut final_stage: BTreeMap<IdentityMode, usize> = BTreeMap::new();
    for ((task, direction, mode), hist) in group_histories(records) {
        let last = hist.last().expect("non-empty history");
        let f = forgetting(&hist)?;
        let fs = final_stage.entry(mode).or_insert(0);
        *fs = (*fs).max(last.stage);
        by_mode.entry(mode).or_default().push(TaskSummary {
            task,
            direction,
            values: SummaryRow {
                r1: last.r1,
                r5: last.r5,
                r10: last.r10,
                f1: f.f1,
                f5: f.f5,
                f10: f.f10,
                forgetting: f.forgetting,
            },
        });
    }
    let modes = by_mode
        .into_iter()
        .map(|(mode, tasks)| {
            let n = tasks.len() as f64;
            let mean = |g: fn(&SummaryRow) -> f64| tasks.iter().map(|t| g(&t.values)).sum::<f64>() / n;
            let average = SummaryRow {
                r1: mean(|v| v.r1),
                r5: mean(|v| v.r5),
                r10: mean(|v| v.r10),
                f1: mean(|v| v.f1),
                f5: mean(|v| v.f5),
                f10: mean(|v| v.f10),
                forgetting: mean(|v| v.forgetting),
            };
            ModeSummary {
                identity_mode: mode,
                final_stage: final_stage[&mode],
                tasks,
                average,
            }
        })
        .collect();
    Ok(Summary { modes })
}

/// One row per task and modality: the reconstructed prompt flattened over
/// layers, slots and width.
pub fn prompts_tsv(pool: &PromptPool) -> Result<String> {
    let mut out = String::from("task_id\tmodality\tcomponents\n");
    for e in &pool.entries {
        let (pv, pl) = e.prompts.reconstructed()?;
        for (modality, t) in [("vision", pv), ("language", pl)] {
            out.push_str(&e.task.task_id.to_string());
            out.push('\t');
            out.push_str(modality);
            for x in t.data() {
                out.push('\t');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub dims: PromptDims,
    /// Per-task trainable parameters of each named variant at `dims`.
    pub variants: BTreeMap<String, ParamCount>,
    pub complexity: ComplexityTerms,
    pub large_dims: PromptDims,
    pub large_variants: BTreeMap<String, ParamCount>,
}

pub fn prompt_dims(cfg: &BackboneConfig, prompt_rank: usize, interaction_rank: usize) -> PromptDims {
    PromptDims {
        depth: cfg.depth,
        prompt_len: cfg.prompt_len,
        d_vision: cfg.d_vision,
        d_text: cfg.d_text,
        prompt_rank,
        interaction_rank,
    }
}

fn variant_counts(dims: &PromptDims) -> Result<BTreeMap<String, ParamCount>> {
    Variant::NAMES
        .iter()
        .map(|n| {
            let v: Variant = n.parse()?;
            Ok((n.to_string(), param_count(dims, v.prompt_type, v.cpf)))
        })
        .collect()
}

pub fn params_report(dims: PromptDims) -> Result<ParamsReport> {
    let large = PromptDims::large_scale();
    Ok(ParamsReport {
        dims,
        variants: variant_counts(&dims)?,
        complexity: complexity_terms(&dims),
        large_dims: large,
        large_variants: variant_counts(&large)?,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Report(e.to_string()))
}

/// Write `metrics.csv` and `summary.json`, plus `prompts.tsv` and
/// `params.json` when a pool is given.
pub fn write_report(dir: &Path, records: &[MetricsRecord], pool: Option<(&PromptPool, PromptDims)>) -> Result<Summary> {
    let summary = summarize(records)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics(&dir.join(METRICS_FILE), records)?;
    write_text(&dir.join(SUMMARY_FILE), &to_json(&summary)?)?;
    if let Some((pool, dims)) = pool {
        write_text(&dir.join(PROMPTS_FILE), &prompts_tsv(pool)?)?;
        write_text(&dir.join(PARAMS_FILE), &to_json(&params_report(dims)?)?)?;
    }
    Ok(summary)
}

/// Dense-to-factored parameter ratio at `dims`, without fusion.
pub fn compression_ratio(dims: &PromptDims) -> f64 {
    param_count(dims, PromptKind::Cp, false).total as f64 / param_count(dims, PromptKind::Dp, false).total as f64
}

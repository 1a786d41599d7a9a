use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

/// Which prompt set a query is evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdentityMode {
    /// The query's true task.
    Oracle,
    /// The task chosen by the key lookup.
    Predicted,
    /// No prompts: the frozen backbone alone.
    None,
}

macro_rules! str_enum {
    ($ty:ty, $($variant:path => $s:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($variant),)+
                    other => Err(Error::Report(format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
    };
}

str_enum!(Direction, Direction::ImageToText => "i2t", Direction::TextToImage => "t2i");
str_enum!(IdentityMode, IdentityMode::Oracle => "oracle", IdentityMode::Predicted => "predicted", IdentityMode::None => "none");

/// Recall of one task's test queries after `stage` tasks have been trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: usize,
    pub task: usize,
    pub direction: Direction,
    pub identity_mode: IdentityMode,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
}

impl MetricsRecord {
    pub fn recall(&self, k: usize) -> f64 {
        match k {
            1 => self.r1,
            5 => self.r5,
            10 => self.r10,
            _ => f64::NAN,
        }
    }
}

/// Percentage of queries with at least one relevant item in the top `k` of
/// their ranking. `k` beyond a ranking's length covers the whole ranking.
pub fn recall_at_k(rankings: &[Vec<usize>], relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("recall_at_k", "k must be at least 1"));
    }
    if rankings.is_empty() || rankings.len() != relevant.len() {
        return Err(Error::domain(
            "recall_at_k",
            format!("{} rankings for {} relevance sets", rankings.len(), relevant.len()),
        ));
    }
    let hits = rankings
        .iter()
        .zip(relevant)
        .filter(|(rank, rel)| rank.iter().take(k).any(|i| rel.contains(i)))
        .count();
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Gallery indices by descending score; equal scores keep index order.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub f1: f64,
    pub f5: f64,
    pub f10: f64,
    pub forgetting: f64,
}

/// Best earlier R@K minus final R@K, for K = 1, 5, 10, and their mean.
/// `history` holds one task's records in one direction and mode; the final
/// stage is the largest stage present.
pub fn forgetting(history: &[MetricsRecord]) -> Result<Forgetting> {
    let last = history
        .iter()
        .max_by_key(|r| r.stage)
        .ok_or_else(|| Error::Report("forgetting needs at least one record".into()))?;
    let earlier: Vec<&MetricsRecord> = history.iter().filter(|r| r.stage < last.stage).collect();
    let f = |k: usize| {
        earlier
            .iter()
            .map(|r| r.recall(k))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .map_or(0.0, |best| best - last.recall(k))
    };
    Ok(forgetting_from(f(1), f(5), f(10)))
}

pub fn forgetting_from(f1: f64, f5: f64, f10: f64) -> Forgetting {
    Forgetting {
        f1,
        f5,
        f10,
        forgetting: (f1 + f5 + f10) / 3.0,
    }
}

/// Records grouped by `(task, direction, identity_mode)`, stage-ordered.
pub fn group_histories(records: &[MetricsRecord]) -> BTreeMap<(usize, Direction, IdentityMode), Vec<MetricsRecord>> {
    let mut out: BTreeMap<_, Vec<MetricsRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.task, r.direction, r.identity_mode)).or_default().push(r.clone());
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.stage);
    }
    out
}

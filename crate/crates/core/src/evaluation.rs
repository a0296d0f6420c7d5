//! Full-ranking evaluation with HR@K and NDCG@K.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_sequences, DatasetError, InteractionDataset, Phase};
use crate::model::{forward, ModelError, ModelParams, ModelSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to aggregate")]
    EmptyRanks,
    #[error("target {target} outside 1..={num_items}")]
    TargetOutOfRange { target: usize, num_items: usize },
    #[error("evaluation needs the valid or test phase, got {0:?}")]
    Phase(Phase),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    #[serde(rename = "n_users")]
    pub num_users: usize,
    #[serde(skip)]
    pub per_user_rank: Vec<usize>,
    /// User index for each entry of `per_user_rank`.
    #[serde(skip)]
    pub users: Vec<usize>,
}

/// 1-based rank of `target` among items `1..scores.len()`; ties favour the target.
/// Index 0 of `scores` is the padding slot and is ignored.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize, EvalError> {
    let num_items = scores.len().saturating_sub(1);
    if target == 0 || target > num_items {
        return Err(EvalError::TargetOutOfRange { target, num_items });
    }
    let s = scores[target];
    Ok(1 + scores[1..].iter().filter(|&&v| v > s).count())
}

pub fn metrics_at_k(ranks: &[usize], k: usize) -> Result<RankingReport, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    let n = ranks.len() as f64;
    let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(RankingReport {
        k,
        hr: hits / n,
        ndcg: gain / n,
        num_users: ranks.len(),
        per_user_rank: ranks.to_vec(),
        users: (0..ranks.len()).collect(),
    })
}

impl RankingReport {
    /// Same ranks aggregated at another cutoff.
    pub fn at(&self, k: usize) -> RankingReport {
        let mut r = metrics_at_k(&self.per_user_rank, k).expect("non-empty ranks");
        r.users = self.users.clone();
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `user_id<TAB>rank` per evaluated user.
    pub fn ranks_tsv(&self, ds: &InteractionDataset) -> String {
        let mut out = String::from("user\trank\n");
        for (&u, &r) in self.users.iter().zip(&self.per_user_rank) {
            let _ = writeln!(out, "{}\t{r}", ds.user_id(u));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_json()).map_err(|source| EvalError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

/// Ranks each user's held-out item for `phase` against every item, with
/// dropout off. With `exclude_seen`, items earlier in the user's sequence
/// (other than the target) are removed from the candidates.
pub fn evaluate(
    params: &ModelParams,
    spec: &ModelSpec,
    ds: &InteractionDataset,
    phase: Phase,
    batch_size: usize,
    k: usize,
    exclude_seen: bool,
) -> Result<RankingReport, EvalError> {
    if phase == Phase::Train {
        return Err(EvalError::Phase(phase));
    }
    let mut ranks = Vec::with_capacity(ds.num_users());
    let mut users = Vec::with_capacity(ds.num_users());
    for batch in build_sequences(ds, spec.dims.n, phase, batch_size)? {
        let trace = forward(params, spec, &batch, false, 0)?;
        let mut logits = trace.last_logits();
        for (b, &u) in batch.users.iter().enumerate() {
            let split = ds.split(u);
            let target = match phase {
                Phase::Valid => split.valid,
                _ => split.test,
            };
            let scores = logits.row_mut(b);
            if exclude_seen {
                let seen = split.train.iter().chain((phase == Phase::Test).then_some(&split.valid));
                for &item in seen {
                    if item != target {
                        scores[item] = f64::NEG_INFINITY;
                    }
                }
            }
            ranks.push(rank_of_target(scores, target)?);
            users.push(u);
        }
    }
    let mut report = metrics_at_k(&ranks, k)?;
    report.users = users;
    Ok(report)
}

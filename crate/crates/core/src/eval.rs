//! Next-item ranking metrics over teacher-forced session replay.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::batching::{session_parallel_batches, BatchSlice};
use crate::dataprep::Session;
use crate::error::{Error, Result};
use crate::model::{forward_window, score_items, LaneState, Model, ScoreContext};

/// `mean(1/rank if rank <= k else 0)`.
pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    let total: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / r as f64)
        .sum();
    Ok(total / ranks.len() as f64)
}

/// Fraction of ranks within the cutoff.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

fn check_ranks(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("cutoff K must be at least 1".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Invalid("ranks are 1-based".into()));
    }
    Ok(())
}

/// 1-based position of `target` when items are ordered by score descending,
/// ties by item id ascending.
pub fn rank_of(scores: &[f32], target: usize) -> usize {
    let t = scores[target];
    let above = scores.iter().filter(|&&s| s > t).count();
    let tied_before = scores[..target].iter().filter(|&&s| s == t).count();
    1 + above + tied_before
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub session: usize,
    pub step: usize,
    pub target: usize,
    pub rank: usize,
}

/// Produces full-vocabulary scores one slice at a time. Lane state lives in
/// `State`; every lane restarts on `reset_mask`.
pub trait StepScorer: Sync {
    type State;

    fn num_items(&self) -> usize;

    fn begin(&self, lanes: usize) -> Self::State;

    /// Row-major `B x V` scores for `slice`.
    fn score(&self, state: &mut Self::State, slice: &BatchSlice) -> Result<Vec<f32>>;
}

/// Scores every item by training popularity; ties resolve by id.
#[derive(Clone, Debug)]
pub struct PopularityScorer {
    scores: Vec<f32>,
}

impl PopularityScorer {
    pub fn new(popularity: &[u64]) -> Self {
        PopularityScorer {
            scores: popularity.iter().map(|&c| c as f32).collect(),
        }
    }

    /// Item ids best first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.scores.len()).collect();
        ids.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        ids
    }
}

impl StepScorer for PopularityScorer {
    type State = ();

    fn num_items(&self) -> usize {
        self.scores.len()
    }

    fn begin(&self, _lanes: usize) {}

    fn score(&self, _state: &mut (), slice: &BatchSlice) -> Result<Vec<f32>> {
        Ok(self.scores.repeat(slice.batch_size()))
    }
}

/// Frozen model scored over the full vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct ModelScorer<'a> {
    pub model: &'a Model<f32>,
}

impl StepScorer for ModelScorer<'_> {
    type State = LaneState<f32>;

    fn num_items(&self) -> usize {
        self.model.config.num_items
    }

    fn begin(&self, lanes: usize) -> LaneState<f32> {
        LaneState::new(&self.model.config, lanes)
    }

    fn score(&self, state: &mut LaneState<f32>, slice: &BatchSlice) -> Result<Vec<f32>> {
        let cfg = &self.model.config;
        let mut g = Graph::new();
        let b = self.model.params.bind(&mut g, false);
        let q = forward_window(cfg, &mut g, &b, &[slice], state, None)?[0];
        let all: Vec<usize> = (0..cfg.num_items).collect();
        let s = score_items(cfg, &mut g, &b, q, &all, ScoreContext::from_slice(slice))?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Lanes per evaluation chunk.
pub const EVAL_LANES: usize = 64;

/// Replays each session with its true items and ranks every next item.
/// Output is ordered by `(session, step)` and independent of thread count.
pub fn rank_sessions<S: StepScorer>(
    scorer: &S,
    sessions: &[Session],
) -> Result<Vec<RankedPrediction>> {
    let v = scorer.num_items();
    for s in sessions {
        if let Some(&bad) = s.items.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                table: "evaluation vocabulary".into(),
                index: bad,
                len: v,
            });
        }
    }
    let chunk = EVAL_LANES * 4;
    let starts: Vec<usize> = (0..sessions.len()).step_by(chunk).collect();
    let parts: Vec<Result<Vec<RankedPrediction>>> = starts
        .par_iter()
        .map(|&start| {
            let part = &sessions[start..(start + chunk).min(sessions.len())];
            let usable: Vec<usize> = (0..part.len()).filter(|&i| part[i].len() >= 2).collect();
            if usable.is_empty() {
                return Ok(Vec::new());
            }
            let sub: Vec<Session> = usable.iter().map(|&i| part[i].clone()).collect();
            let lanes = EVAL_LANES.min(sub.len());
            let mut state = scorer.begin(lanes);
            let mut out = Vec::new();
            for slice in session_parallel_batches(&sub, lanes)? {
                let scores = scorer.score(&mut state, &slice)?;
                for (lane, _, target, _) in slice.pairs() {
                    let row = &scores[lane * v..(lane + 1) * v];
                    out.push(RankedPrediction {
                        session: start + usable[slice.session_ids[lane]],
                        step: slice.steps[lane],
                        target,
                        rank: rank_of(row, target),
                    });
                }
            }
            out.sort_by_key(|p| (p.session, p.step));
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// Metric values keyed by cutoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub variant: String,
    pub ks: Vec<usize>,
    pub mrr: BTreeMap<String, f64>,
    pub recall: BTreeMap<String, f64>,
    pub n_predictions: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let mut mrr = BTreeMap::new();
        let mut recall = BTreeMap::new();
        for &k in ks {
            mrr.insert(k.to_string(), mrr_at_k(ranks, k)?);
            recall.insert(k.to_string(), recall_at_k(ranks, k)?);
        }
        Ok(MetricsReport {
            dataset: String::new(),
            variant: String::new(),
            ks: ks.to_vec(),
            mrr,
            recall,
            n_predictions: ranks.len(),
            seed: 0,
            checkpoint_hash: String::new(),
        })
    }

    pub fn mrr(&self, k: usize) -> Option<f64> {
        self.mrr.get(&k.to_string()).copied()
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall.get(&k.to_string()).copied()
    }

    /// One CSV line: dataset, variant, then `MRR@K` and `Recall@K` per K.
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["dataset".to_string(), "variant".to_string()];
        for k in &self.ks {
            cols.push(format!("mrr@{k}"));
            cols.push(format!("recall@{k}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.dataset.clone(), self.variant.clone()];
        for &k in &self.ks {
            cols.push(format!("{:.6}", self.mrr(k).unwrap_or(f64::NAN)));
            cols.push(format!("{:.6}", self.recall(k).unwrap_or(f64::NAN)));
        }
        cols.join(",")
    }
}

/// Ranks every next item of `sessions` and summarizes at each cutoff.
pub fn evaluate<S: StepScorer>(
    scorer: &S,
    sessions: &[Session],
    ks: &[usize],
) -> Result<MetricsReport> {
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus("no sessions to evaluate".into()));
    }
    let preds = rank_sessions(scorer, sessions)?;
    let ranks: Vec<usize> = preds.iter().map(|p| p.rank).collect();
    MetricsReport::from_ranks(&ranks, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabulated_metric_values() {
        assert_eq!(mrr_at_k(&[1, 1, 1], 20).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&[21], 20).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&[1, 2, 4], 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[1, 2, 3], 20).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[25, 30], 20).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[5, 25], 20).unwrap(), 0.5);
        assert!(mrr_at_k(&[], 20).is_err());
        assert!(recall_at_k(&[1], 0).is_err());
    }

    #[test]
    fn ranks_break_ties_by_id() {
        let s = [0.5f32, 0.9, 0.5, 0.1, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 0), 2);
        assert_eq!(rank_of(&s, 2), 3);
        assert_eq!(rank_of(&s, 4), 4);
        assert_eq!(rank_of(&s, 3), 5);
    }

    #[test]
    fn popularity_ranking_order() {
        assert_eq!(PopularityScorer::new(&[1, 5, 3]).ranking(), vec![1, 2, 0]);
        assert_eq!(PopularityScorer::new(&[2, 2, 2]).ranking(), vec![0, 1, 2]);
    }

    #[test]
    fn csv_row_layout() {
        let mut r = MetricsReport::from_ranks(&[1, 4], &[1, 5]).unwrap();
        r.dataset = "toy".into();
        r.variant = "baseline".into();
        assert_eq!(
            r.csv_header(),
            "dataset,variant,mrr@1,recall@1,mrr@5,recall@5"
        );
        assert_eq!(
            r.csv_row(),
            "toy,baseline,0.500000,0.500000,0.625000,1.000000"
        );
    }
}

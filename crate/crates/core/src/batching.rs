//! Session-parallel and user-parallel mini-batches.
//!
//! Every lane holds one session at a time and advances one step per slice.
//! When its session runs out the lane is refilled and `reset_mask` fires.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::Session;
use crate::error::{Error, Result};

/// One step across all `B` lanes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSlice {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// Bin of the dwell between input and target.
    pub time_bin_ids: Vec<usize>,
    pub user_ids: Vec<usize>,
    /// Timestamp of the input event.
    pub timestamps: Vec<i64>,
    pub reset_mask: Vec<bool>,
    pub active_mask: Vec<bool>,
    /// Index of the lane's session in the batched session list.
    pub session_ids: Vec<usize>,
    /// Position of the input within its session.
    pub steps: Vec<usize>,
}

impl BatchSlice {
    fn empty(b: usize) -> Self {
        BatchSlice {
            input_ids: vec![0; b],
            target_ids: vec![0; b],
            time_bin_ids: vec![0; b],
            user_ids: vec![0; b],
            timestamps: vec![0; b],
            reset_mask: vec![false; b],
            active_mask: vec![false; b],
            session_ids: vec![usize::MAX; b],
            steps: vec![0; b],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input_ids.len()
    }

    pub fn num_active(&self) -> usize {
        self.active_mask.iter().filter(|&&a| a).count()
    }

    /// Yields `(lane, input, target, time_bin)` for active lanes.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..self.batch_size())
            .filter(|&b| self.active_mask[b])
            .map(|b| {
                (
                    b,
                    self.input_ids[b],
                    self.target_ids[b],
                    self.time_bin_ids[b],
                )
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    SessionParallel,
    UserParallel,
}

/// Everything that determines the slice stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub mode: BatchMode,
    pub batch_size: usize,
    /// Sessions longer than this are cut into fragments.
    pub max_len: Option<usize>,
    /// Seeded shuffle of session (or user) order; `None` keeps start-time
    /// order.
    pub shuffle_seed: Option<u64>,
}

impl BatchPlan {
    pub fn new(mode: BatchMode, batch_size: usize) -> Self {
        BatchPlan {
            mode,
            batch_size,
            max_len: None,
            shuffle_seed: None,
        }
    }

    /// Truncates, orders and batches `sessions`. Session ids in the emitted
    /// slices index the returned fragment list.
    pub fn batches(&self, sessions: &[Session]) -> Result<(Vec<Session>, Batches)> {
        let fragments = match self.max_len {
            Some(m) => {
                let mut out = Vec::with_capacity(sessions.len());
                for s in sessions {
                    out.extend(truncate(s, m)?);
                }
                out
            }
            None => sessions.iter().filter(|s| s.len() >= 2).cloned().collect(),
        };
        let batches = match self.mode {
            BatchMode::SessionParallel => {
                session_parallel_with(&fragments, self.batch_size, self.shuffle_seed)?
            }
            BatchMode::UserParallel => {
                user_parallel_with(&fragments, self.batch_size, self.shuffle_seed)?
            }
        };
        Ok((fragments, batches))
    }
}

/// Splits a session into consecutive fragments of at most `max_len` items.
/// The dwell at each cut is dropped; fragments without a pair are omitted.
pub fn truncate(session: &Session, max_len: usize) -> Result<Vec<Session>> {
    if max_len < 2 {
        return Err(Error::Invalid(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    if session.len() <= max_len {
        return Ok(if session.len() >= 2 {
            vec![session.clone()]
        } else {
            Vec::new()
        });
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < session.len() {
        let end = (start + max_len).min(session.len());
        out.push(Session {
            user: session.user,
            items: session.items[start..end].to_vec(),
            timestamps: session.timestamps[start..end].to_vec(),
            dwell: session.dwell[start..end - 1].to_vec(),
            time_bins: session.time_bins[start..end - 1].to_vec(),
            start_ts: session.timestamps[start],
            end_ts: session.timestamps[end - 1],
        });
        start = end;
    }
    Ok(out)
}

pub fn session_parallel_batches(sessions: &[Session], batch_size: usize) -> Result<Batches> {
    session_parallel_with(sessions, batch_size, None)
}

pub fn user_parallel_batches(sessions: &[Session], batch_size: usize) -> Result<Batches> {
    user_parallel_with(sessions, batch_size, None)
}

fn check(sessions: &[Session], batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus("no sessions to batch".into()));
    }
    Ok(())
}

fn by_start(sessions: &[Session]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by_key(|&i| (sessions[i].start_ts, i));
    order
}

fn session_parallel_with(
    sessions: &[Session],
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Batches> {
    check(sessions, batch_size)?;
    let mut order = by_start(sessions);
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let units = order.into_iter().map(|i| VecDeque::from([i])).collect();
    Ok(Batches::new(sessions, batch_size, units))
}

fn user_parallel_with(
    sessions: &[Session],
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Batches> {
    check(sessions, batch_size)?;
    let mut groups: Vec<(usize, VecDeque<usize>)> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    for i in by_start(sessions) {
        let u = sessions[i].user;
        let g = *slot.entry(u).or_insert_with(|| {
            groups.push((u, VecDeque::new()));
            groups.len() - 1
        });
        groups[g].1.push_back(i);
    }
    if let Some(seed) = seed {
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let units = groups.into_iter().map(|(_, q)| q).collect();
    Ok(Batches::new(sessions, batch_size, units))
}

#[derive(Clone, Debug)]
struct Lane {
    unit: VecDeque<usize>,
    session: Option<usize>,
    pos: usize,
}

/// Iterator over [`BatchSlice`]s. Owns the per-session data it needs so
/// it can outlive the session list.
#[derive(Clone, Debug)]
pub struct Batches {
    sessions: Vec<LaneSession>,
    units: VecDeque<VecDeque<usize>>,
    lanes: Vec<Lane>,
}

#[derive(Clone, Debug)]
struct LaneSession {
    user: usize,
    items: Vec<usize>,
    timestamps: Vec<i64>,
    time_bins: Vec<usize>,
}

impl Batches {
    fn new(sessions: &[Session], batch_size: usize, units: VecDeque<VecDeque<usize>>) -> Self {
        Batches {
            sessions: sessions
                .iter()
                .map(|s| LaneSession {
                    user: s.user,
                    items: s.items.clone(),
                    timestamps: s.timestamps.clone(),
                    time_bins: s.time_bins.clone(),
                })
                .collect(),
            units,
            lanes: vec![
                Lane {
                    unit: VecDeque::new(),
                    session: None,
                    pos: 0,
                };
                batch_size
            ],
        }
    }

    fn next_session(&mut self, lane: usize) -> Option<usize> {
        loop {
            if let Some(s) = self.lanes[lane].unit.pop_front() {
                if self.sessions[s].items.len() >= 2 {
                    return Some(s);
                }
                continue;
            }
            self.lanes[lane].unit = self.units.pop_front()?;
        }
    }
}

impl Iterator for Batches {
    type Item = BatchSlice;

    fn next(&mut self) -> Option<BatchSlice> {
        let b = self.lanes.len();
        let mut slice = BatchSlice::empty(b);
        for lane in 0..b {
            let exhausted = match self.lanes[lane].session {
                Some(s) => self.lanes[lane].pos + 1 >= self.sessions[s].items.len(),
                None => true,
            };
            if exhausted {
                match self.next_session(lane) {
                    Some(s) => {
                        self.lanes[lane].session = Some(s);
                        self.lanes[lane].pos = 0;
                        slice.reset_mask[lane] = true;
                    }
                    None => {
                        self.lanes[lane].session = None;
                        continue;
                    }
                }
            }
            let s = self.lanes[lane].session.expect("lane has a session");
            let pos = self.lanes[lane].pos;
            let sess = &self.sessions[s];
            slice.input_ids[lane] = sess.items[pos];
            slice.target_ids[lane] = sess.items[pos + 1];
            slice.time_bin_ids[lane] = sess.time_bins[pos];
            slice.user_ids[lane] = sess.user;
            slice.timestamps[lane] = sess.timestamps[pos];
            slice.active_mask[lane] = true;
            slice.session_ids[lane] = s;
            slice.steps[lane] = pos;
            self.lanes[lane].pos += 1;
        }
        (slice.num_active() > 0).then_some(slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sess(user: usize, items: &[usize], start: i64) -> Session {
        let ts = (0..items.len() as i64).map(|k| start + 10 * k).collect();
        Session::new(user, items.to_vec(), ts)
    }

    #[test]
    fn single_lane_order_and_resets() {
        let s = vec![sess(0, &[0, 1, 2], 0), sess(0, &[3, 4], 100)];
        let got: Vec<_> = session_parallel_batches(&s, 1).unwrap().collect();
        let pairs: Vec<_> = got
            .iter()
            .map(|x| (x.input_ids[0], x.target_ids[0], x.reset_mask[0]))
            .collect();
        assert_eq!(pairs, vec![(0, 1, true), (1, 2, false), (3, 4, true)]);
    }

    #[test]
    fn lane_refills_after_short_session() {
        let s = vec![
            sess(0, &[0, 1, 2, 3], 0),
            sess(1, &[4, 5], 1),
            sess(2, &[6, 7, 8], 2),
        ];
        let got: Vec<_> = session_parallel_batches(&s, 2).unwrap().collect();
        assert_eq!(got[0].reset_mask, vec![true, true]);
        assert_eq!(got[1].reset_mask, vec![false, true]);
        assert_eq!(got[1].input_ids[1], 6);
        assert_eq!(got.len(), 3);
        assert_eq!(got[2].active_mask, vec![true, true]);
        // Lane 1's second session ends at step 3.
        let all: usize = got.iter().map(BatchSlice::num_active).sum();
        assert_eq!(all, 3 + 1 + 2);
    }

    #[test]
    fn exhausted_lanes_are_inactive() {
        let s = vec![sess(0, &[0, 1, 2, 3], 0), sess(1, &[4, 5], 1)];
        let got: Vec<_> = session_parallel_batches(&s, 3).unwrap().collect();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].active_mask, vec![true, true, false]);
        assert_eq!(got[1].active_mask, vec![true, false, false]);
    }

    #[test]
    fn user_parallel_keeps_user_on_lane() {
        let s = vec![
            sess(0, &[0, 1], 0),
            sess(1, &[2, 3], 5),
            sess(0, &[4, 5, 6], 50),
        ];
        let got: Vec<_> = user_parallel_batches(&s, 1).unwrap().collect();
        let users: Vec<_> = got.iter().map(|x| x.user_ids[0]).collect();
        assert_eq!(users, vec![0, 0, 0, 1]);
        let resets: Vec<_> = got.iter().map(|x| x.reset_mask[0]).collect();
        assert_eq!(resets, vec![true, true, false, true]);
    }

    #[test]
    fn truncation_fragments() {
        let s = sess(0, &[0, 1, 2, 3, 4], 0);
        assert_eq!(truncate(&s, 200).unwrap(), vec![s.clone()]);
        let f = truncate(&s, 3).unwrap();
        assert_eq!(f.iter().map(Session::len).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!(f[1].items, vec![3, 4]);
        assert_eq!(f[0].dwell.len(), 2);
        assert_eq!(f[1].dwell.len(), 1);
        assert!(truncate(&s, 1).is_err());
        let four = sess(0, &[0, 1, 2, 3], 0);
        assert_eq!(
            truncate(&four, 3).unwrap().len(),
            1,
            "singleton tail has no pair"
        );
    }

    #[test]
    fn empty_and_zero_batch_rejected() {
        assert!(session_parallel_batches(&[], 4).is_err());
        assert!(session_parallel_batches(&[sess(0, &[0, 1], 0)], 0).is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        let s: Vec<_> = (0..20)
            .map(|k| sess(k % 3, &[k, k + 1], k as i64))
            .collect();
        let mut plan = BatchPlan::new(BatchMode::SessionParallel, 2);
        plan.shuffle_seed = Some(9);
        let a: Vec<_> = plan.batches(&s).unwrap().1.collect();
        let b: Vec<_> = plan.batches(&s).unwrap().1.collect();
        assert_eq!(a, b);
        plan.shuffle_seed = None;
        let c: Vec<_> = plan.batches(&s).unwrap().1.collect();
        assert_ne!(a, c);
    }
}

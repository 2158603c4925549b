//! Event-log ingestion: sessionization, support filtering, id remapping,
//! dwell-time binning and the time-based train/test split.

mod binning;
mod io;

pub use binning::{build_binning, dwell_cap, scott_bin_width, DwellBinning};
pub use io::{
    read_corpus_file, read_dataset, read_events_csv, read_movielens_ratings, write_corpus_file,
    write_dataset, write_events_csv, CORPUS_MAGIC,
};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default inactivity gap that closes a session, in seconds.
pub const DEFAULT_GAP_SECONDS: i64 = 3600;

/// One raw interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub user_raw: String,
    pub item_raw: String,
    pub timestamp: i64,
    pub session_raw: Option<String>,
}

impl Event {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Event {
            user_raw: user.into(),
            item_raw: item.into(),
            timestamp,
            session_raw: None,
        }
    }
}

/// A session still expressed in raw ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSession {
    pub user: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
}

impl RawSession {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn start_ts(&self) -> i64 {
        self.timestamps[0]
    }
}

/// Dwell between two consecutive clicks. Ties and clock skew are clamped to
/// one second so every dwell is strictly positive.
pub fn dwell_seconds(from: i64, to: i64) -> f64 {
    (to - from).max(1) as f64
}

/// A filtered session in contiguous id space.
///
/// `dwell[k]` is the time spent on `items[k]` before `items[k + 1]` was
/// clicked; the trailing gap after the last item is unknown and dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub dwell: Vec<f64>,
    pub time_bins: Vec<usize>,
    pub start_ts: i64,
    pub end_ts: i64,
}

impl Session {
    pub fn new(user: usize, items: Vec<usize>, timestamps: Vec<i64>) -> Self {
        assert_eq!(items.len(), timestamps.len());
        assert!(!items.is_empty());
        let dwell = timestamps
            .windows(2)
            .map(|w| dwell_seconds(w[0], w[1]))
            .collect();
        Session {
            user,
            start_ts: timestamps[0],
            end_ts: *timestamps.last().unwrap(),
            time_bins: vec![0; items.len() - 1],
            items,
            timestamps,
            dwell,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of (input, target) training pairs.
    pub fn num_pairs(&self) -> usize {
        self.items.len().saturating_sub(1)
    }
}

/// Which part of a dataset a corpus holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Test,
}

/// Filtered, id-remapped sessions plus the lookup tables built from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub split: Split,
    /// Sorted by `(user, start_ts)`.
    pub sessions: Vec<Session>,
    /// Contiguous item id -> raw id.
    pub item_ids: Vec<String>,
    /// Contiguous user id -> raw id.
    pub user_ids: Vec<String>,
    /// Events per item over `sessions`.
    pub popularity: Vec<u64>,
    /// Sorted distinct items per user.
    pub histories: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_sessions(
        split: Split,
        mut sessions: Vec<Session>,
        item_ids: Vec<String>,
        user_ids: Vec<String>,
    ) -> Self {
        sessions.sort_by_key(|s| (s.user, s.start_ts, s.end_ts));
        let mut popularity = vec![0u64; item_ids.len()];
        let mut histories = vec![Vec::new(); user_ids.len()];
        for s in &sessions {
            for &i in &s.items {
                popularity[i] += 1;
                histories[s.user].push(i);
            }
        }
        for h in &mut histories {
            h.sort_unstable();
            h.dedup();
        }
        Corpus {
            split,
            sessions,
            item_ids,
            user_ids,
            popularity,
            histories,
        }
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_events(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    pub fn num_pairs(&self) -> usize {
        self.sessions.iter().map(Session::num_pairs).sum()
    }

    pub fn in_history(&self, user: usize, item: usize) -> bool {
        self.histories
            .get(user)
            .is_some_and(|h| h.binary_search(&item).is_ok())
    }

    /// Every dwell of every session.
    pub fn dwells(&self) -> Vec<f64> {
        self.sessions
            .iter()
            .flat_map(|s| s.dwell.iter().copied())
            .collect()
    }

    /// Mean event timestamp per user, in days.
    pub fn user_mean_days(&self) -> Vec<f64> {
        let mut sum = vec![0.0f64; self.num_users()];
        let mut n = vec![0usize; self.num_users()];
        for s in &self.sessions {
            for &t in &s.timestamps {
                sum[s.user] += t as f64 / 86_400.0;
                n[s.user] += 1;
            }
        }
        sum.iter()
            .zip(&n)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect()
    }

    /// Assigns `time_bins` of every session from `binning`.
    pub fn apply_binning(&mut self, binning: &DwellBinning) {
        for s in &mut self.sessions {
            s.time_bins = s.dwell.iter().map(|&d| binning.bin(d)).collect();
        }
    }

    /// Sessions grouped by user: `(user, range into sessions)`.
    pub fn user_groups(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.sessions.len() {
            if i == self.sessions.len() || self.sessions[i].user != self.sessions[start].user {
                out.push((self.sessions[start].user, start..i));
                start = i;
            }
        }
        out
    }
}

/// Groups events into sessions, closing a session whenever the same user is
/// idle for at least `gap_seconds`.
///
/// Events are ordered by `(user, timestamp, item)` first, so the result does
/// not depend on input order.
pub fn sessionize(events: &[Event], gap_seconds: i64) -> Result<Vec<RawSession>> {
    if gap_seconds <= 0 {
        return Err(Error::Invalid(format!(
            "session gap {gap_seconds} must be positive"
        )));
    }
    let mut sorted: Vec<&Event> = events.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.user_raw, a.timestamp, &a.item_raw).cmp(&(&b.user_raw, b.timestamp, &b.item_raw))
    });
    let mut out: Vec<RawSession> = Vec::new();
    for e in sorted {
        let extend = out.last().is_some_and(|s| {
            s.user == e.user_raw && e.timestamp - *s.timestamps.last().unwrap() < gap_seconds
        });
        if extend {
            let s = out.last_mut().unwrap();
            s.items.push(e.item_raw.clone());
            s.timestamps.push(e.timestamp);
        } else {
            out.push(RawSession {
                user: e.user_raw.clone(),
                items: vec![e.item_raw.clone()],
                timestamps: vec![e.timestamp],
            });
        }
    }
    Ok(out)
}

/// Groups events by their provided `(user, session id)`; falls back to
/// [`sessionize`] when any event lacks a session id.
pub fn build_sessions(events: &[Event], gap_seconds: i64) -> Result<Vec<RawSession>> {
    if events.is_empty() || events.iter().any(|e| e.session_raw.is_none()) {
        return sessionize(events, gap_seconds);
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&Event>> = BTreeMap::new();
    for e in events {
        groups
            .entry((e.user_raw.as_str(), e.session_raw.as_deref().unwrap()))
            .or_default()
            .push(e);
    }
    let mut out: Vec<RawSession> = groups
        .into_iter()
        .map(|((user, _), mut evs)| {
            evs.sort_by(|a, b| (a.timestamp, &a.item_raw).cmp(&(b.timestamp, &b.item_raw)));
            RawSession {
                user: user.to_string(),
                items: evs.iter().map(|e| e.item_raw.clone()).collect(),
                timestamps: evs.iter().map(|e| e.timestamp).collect(),
            }
        })
        .collect();
    out.sort_by(|a, b| (&a.user, a.start_ts(), &a.items).cmp(&(&b.user, b.start_ts(), &b.items)));
    Ok(out)
}

/// Minimum-support thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub min_item_events: usize,
    pub min_session_len: usize,
    pub min_user_sessions: usize,
}

impl Default for Support {
    fn default() -> Self {
        Support {
            min_item_events: 10,
            min_session_len: 2,
            min_user_sessions: 10,
        }
    }
}

/// Applies the item, session-length and user filters repeatedly until none
/// of them removes anything, then remaps surviving ids to `0..n` in
/// ascending raw-id order.
pub fn filter_support(sessions: Vec<RawSession>, support: Support) -> Result<Corpus> {
    if support.min_item_events == 0
        || support.min_session_len == 0
        || support.min_user_sessions == 0
    {
        return Err(Error::Invalid(
            "support thresholds must be at least 1".into(),
        ));
    }
    let mut sessions = sessions;
    loop {
        let before: usize = sessions.iter().map(RawSession::len).sum::<usize>() + sessions.len();

        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for s in &sessions {
            for i in &s.items {
                *item_count.entry(i.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = item_count
            .into_iter()
            .filter(|&(_, c)| c < support.min_item_events)
            .map(|(i, _)| i.to_string())
            .collect();
        if !rare.is_empty() {
            for s in &mut sessions {
                let keep: Vec<bool> = s.items.iter().map(|i| !rare.contains(i)).collect();
                let mut k = keep.iter();
                s.items.retain(|_| *k.next().unwrap());
                let mut k = keep.iter();
                s.timestamps.retain(|_| *k.next().unwrap());
            }
        }

        sessions.retain(|s| s.len() >= support.min_session_len.max(1));

        let mut user_count: HashMap<&str, usize> = HashMap::new();
        for s in &sessions {
            *user_count.entry(s.user.as_str()).or_default() += 1;
        }
        let sparse: std::collections::HashSet<String> = user_count
            .into_iter()
            .filter(|&(_, c)| c < support.min_user_sessions)
            .map(|(u, _)| u.to_string())
            .collect();
        sessions.retain(|s| !sparse.contains(&s.user));

        let after: usize = sessions.iter().map(RawSession::len).sum::<usize>() + sessions.len();
        if after == before {
            break;
        }
    }
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus(
            "every session was removed by the support filters".into(),
        ));
    }
    Ok(remap(Split::Full, &sessions))
}

fn remap(split: Split, sessions: &[RawSession]) -> Corpus {
    let mut items: Vec<&str> = sessions
        .iter()
        .flat_map(|s| s.items.iter().map(String::as_str))
        .collect();
    items.sort_unstable();
    items.dedup();
    let mut users: Vec<&str> = sessions.iter().map(|s| s.user.as_str()).collect();
    users.sort_unstable();
    users.dedup();
    let item_idx: HashMap<&str, usize> = items.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let user_idx: HashMap<&str, usize> = users.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let out = sessions
        .iter()
        .map(|s| {
            Session::new(
                user_idx[s.user.as_str()],
                s.items.iter().map(|i| item_idx[i.as_str()]).collect(),
                s.timestamps.clone(),
            )
        })
        .collect();
    Corpus::from_sessions(
        split,
        out,
        items.into_iter().map(String::from).collect(),
        users.into_iter().map(String::from).collect(),
    )
}

fn to_raw(corpus: &Corpus, s: &Session) -> RawSession {
    RawSession {
        user: corpus.user_ids[s.user].clone(),
        items: s
            .items
            .iter()
            .map(|&i| corpus.item_ids[i].clone())
            .collect(),
        timestamps: s.timestamps.clone(),
    }
}

/// Splits by time: sessions ending after `boundary_ts` form the test set.
///
/// Ids are re-densified from the training part. Test sessions whose user or
/// any item never occurs in training are dropped whole.
pub fn split_train_test(corpus: &Corpus, boundary_ts: i64) -> Result<(Corpus, Corpus)> {
    let (test_raw, train_raw): (Vec<&Session>, Vec<&Session>) =
        corpus.sessions.iter().partition(|s| s.end_ts > boundary_ts);
    if train_raw.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no session ends at or before {boundary_ts}"
        )));
    }
    let train_sessions: Vec<RawSession> = train_raw.iter().map(|s| to_raw(corpus, s)).collect();
    let train = remap(Split::Train, &train_sessions);

    let item_idx: HashMap<&str, usize> = train
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let user_idx: HashMap<&str, usize> = train
        .user_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let test_sessions: Vec<Session> = test_raw
        .iter()
        .filter_map(|s| {
            let user = *user_idx.get(corpus.user_ids[s.user].as_str())?;
            let items = s
                .items
                .iter()
                .map(|&i| item_idx.get(corpus.item_ids[i].as_str()).copied())
                .collect::<Option<Vec<usize>>>()?;
            Some(Session::new(user, items, s.timestamps.clone()))
        })
        .collect();
    if test_sessions.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no usable test session ends after {boundary_ts}"
        )));
    }
    let test = Corpus::from_sessions(
        Split::Test,
        test_sessions,
        train.item_ids.clone(),
        train.user_ids.clone(),
    );
    Ok((train, test))
}

/// Timestamp such that roughly `test_fraction` of sessions end after it.
pub fn boundary_for_fraction(corpus: &Corpus, test_fraction: f64) -> Result<i64> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::Invalid(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut ends: Vec<i64> = corpus.sessions.iter().map(|s| s.end_ts).collect();
    ends.sort_unstable();
    let idx = ((ends.len() as f64) * (1.0 - test_fraction)).floor() as usize;
    Ok(ends[idx.saturating_sub(1).min(ends.len() - 1)])
}

/// Preprocessing settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub gap_seconds: i64,
    pub support: Support,
    /// Explicit split boundary; when absent `test_fraction` decides.
    pub boundary_ts: Option<i64>,
    pub test_fraction: f64,
    pub max_bins: usize,
    /// Dwell quantile used as cap before fitting the bin width.
    pub dwell_cap_quantile: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            gap_seconds: DEFAULT_GAP_SECONDS,
            support: Support::default(),
            boundary_ts: None,
            test_fraction: 0.1,
            max_bins: 512,
            dwell_cap_quantile: 0.995,
        }
    }
}

/// Dataset-level counts, laid out like a data-description table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub events: usize,
    pub users: usize,
    pub items: usize,
    pub sessions: usize,
    pub session_support: usize,
    pub item_support: usize,
    pub user_support: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_events: usize,
    pub test_events: usize,
    pub boundary_ts: i64,
    pub bin_width: f64,
    pub num_time_bins: usize,
}

/// Train and test corpora sharing id maps and dwell bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Corpus,
    pub test: Corpus,
    pub binning: DwellBinning,
    pub boundary_ts: i64,
    pub support: Support,
}

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn summary(&self) -> CorpusSummary {
        let mut users: Vec<usize> = self
            .train
            .sessions
            .iter()
            .chain(&self.test.sessions)
            .map(|s| s.user)
            .collect();
        users.sort_unstable();
        users.dedup();
        CorpusSummary {
            events: self.train.num_events() + self.test.num_events(),
            users: users.len(),
            items: self.num_items(),
            sessions: self.train.sessions.len() + self.test.sessions.len(),
            session_support: self.support.min_session_len,
            item_support: self.support.min_item_events,
            user_support: self.support.min_user_sessions,
            train_sessions: self.train.sessions.len(),
            test_sessions: self.test.sessions.len(),
            train_events: self.train.num_events(),
            test_events: self.test.num_events(),
            boundary_ts: self.boundary_ts,
            bin_width: self.binning.width,
            num_time_bins: self.binning.num_bins,
        }
    }
}

/// Runs the whole preprocessing protocol on raw events.
pub fn prepare(events: &[Event], cfg: &PrepConfig) -> Result<Dataset> {
    if events.is_empty() {
        return Err(Error::EmptyCorpus("no events".into()));
    }
    let raw = build_sessions(events, cfg.gap_seconds)?;
    let full = filter_support(raw, cfg.support)?;
    let boundary_ts = match cfg.boundary_ts {
        Some(b) => b,
        None => boundary_for_fraction(&full, cfg.test_fraction)?,
    };
    let (mut train, mut test) = split_train_test(&full, boundary_ts)?;
    let binning = DwellBinning::fit_train(&train, cfg.max_bins, cfg.dwell_cap_quantile)?;
    train.apply_binning(&binning);
    test.apply_binning(&binning);
    Ok(Dataset {
        train,
        test,
        binning,
        boundary_ts,
        support: cfg.support,
    })
}

#![allow(dead_code)]

use asars::autodiff::{Bindings, Graph, Var};
use asars::batching::{session_parallel_batches, BatchSlice};
use asars::dataprep::{Corpus, Session, Split};
use asars::model::{
    forward_window, score_items, BiasTerms, ItemTimeBias, LaneState, Model, ModelConfig,
    ScoreContext, Variant,
};
use asars::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_ITEMS: usize = 20;
pub const TOY_USERS: usize = 5;
pub const TOY_BINS: usize = 4;

/// Sessions with random items, dwells and bins; lengths in `lens`.
pub fn random_sessions(
    lens: &[usize],
    num_items: usize,
    num_users: usize,
    num_bins: usize,
    seed: u64,
) -> Vec<Session> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 1_000_000i64;
    lens.iter()
        .enumerate()
        .map(|(k, &len)| {
            let items = (0..len).map(|_| rng.random_range(0..num_items)).collect();
            let ts = (0..len)
                .map(|_| {
                    t += rng.random_range(1..600);
                    t
                })
                .collect();
            t += 10_000;
            let mut s = Session::new(k % num_users, items, ts);
            s.time_bins = (0..len.saturating_sub(1))
                .map(|_| rng.random_range(0..num_bins))
                .collect();
            s
        })
        .collect()
}

pub fn toy_corpus(sessions: Vec<Session>, num_items: usize, num_users: usize) -> Corpus {
    let items = (0..num_items).map(|i| format!("i{i}")).collect();
    let users = (0..num_users).map(|u| format!("u{u}")).collect();
    Corpus::from_sessions(Split::Train, sessions, items, users)
}

/// Toy model with every bias term enabled and learnable entries drawn from
/// U(-0.5, 0.5) so no gradient is trivially small.
pub fn gradcheck_model(variant: Variant, d: usize, full_table: bool, seed: u64) -> Model<f64> {
    let mut cfg = ModelConfig::new(variant, TOY_ITEMS, TOY_USERS, TOY_BINS).with_dims(d);
    cfg.biases = BiasTerms {
        global: true,
        user: true,
        item: true,
        item_time: true,
        dev: true,
    };
    cfg.item_time_bias = if full_table {
        ItemTimeBias::Full
    } else {
        ItemTimeBias::Factored
    };
    let means: Vec<f64> = (0..TOY_USERS).map(|u| 11.0 + u as f64 * 0.3).collect();
    let mut m = Model::<f32>::new(cfg, &means, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in m.params.iter_mut() {
        if p.learnable {
            for x in p.tensor.data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }
    m
}

/// BPR of each target against every item plus the mean squared score,
/// summed over all steps of one window.
pub fn window_objective(
    cfg: &ModelConfig,
    g: &mut Graph<f64>,
    b: &Bindings,
    slices: &[BatchSlice],
) -> Result<Var> {
    let refs: Vec<&BatchSlice> = slices.iter().collect();
    let mut state = LaneState::new(cfg, slices[0].batch_size());
    let qs = forward_window(cfg, g, b, &refs, &mut state, None)?;
    let all: Vec<usize> = (0..cfg.num_items).collect();
    let mut total: Option<Var> = None;
    for (q, s) in qs.into_iter().zip(slices) {
        let scores = score_items(cfg, g, b, q, &all, ScoreContext::from_slice(s))?;
        let pos = g.gather_cols(scores, &s.target_ids, 1)?;
        let diff = g.sub(scores, pos)?;
        let neg = g.scale(diff, -1.0);
        let ls = g.log_sigmoid(neg);
        let bpr = g.mean(ls);
        let bpr = g.scale(bpr, -1.0);
        let sq = g.square(scores);
        let reg = g.mean(sq);
        let term = g.add(bpr, reg)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one slice"))
}

/// Slices of a two-lane batch over three sessions, so one lane resets
/// mid-window.
pub fn gradcheck_slices(n: usize, seed: u64) -> Vec<BatchSlice> {
    let sessions = random_sessions(&[n, n - 2, 3], TOY_ITEMS, TOY_USERS, TOY_BINS, seed);
    session_parallel_batches(&sessions, 2).unwrap().collect()
}

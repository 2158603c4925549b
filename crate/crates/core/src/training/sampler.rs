use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::batching::BatchSlice;
use crate::error::{Error, Result};

/// Negatives for each lane of one slice. Inactive lanes get none.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSet {
    pub per_lane: Vec<Vec<usize>>,
    /// Lanes whose in-batch pool had no valid item and used global
    /// popularity instead.
    pub fallback_lanes: Vec<usize>,
}

/// Item -> occurrences as input or target among the slice's active lanes.
pub fn batch_pool(slice: &BatchSlice) -> BTreeMap<usize, u64> {
    let mut pool = BTreeMap::new();
    for (_, i, t, _) in slice.pairs() {
        *pool.entry(i).or_insert(0) += 1;
        *pool.entry(t).or_insert(0) += 1;
    }
    pool
}

fn excluded(item: usize, target: usize, history: Option<&[usize]>) -> bool {
    item == target || history.is_some_and(|h| h.binary_search(&item).is_ok())
}

/// Draws `k` negatives per active lane in proportion to in-batch frequency,
/// never the lane's target and, when `histories` is given, never an item
/// from the lane user's sorted history. Sampling is from the pool
/// restricted to valid items, which is the distribution rejection sampling
/// converges to. A lane with no valid pool item falls back to global
/// `popularity` under the same exclusions.
pub fn local_negative_sample<R: Rng + ?Sized>(
    slice: &BatchSlice,
    popularity: &[u64],
    histories: Option<&[Vec<usize>]>,
    k: usize,
    rng: &mut R,
) -> Result<NegativeSet> {
    if k == 0 {
        return Err(Error::Invalid(
            "need at least one negative per positive".into(),
        ));
    }
    let pool = batch_pool(slice);
    let mut per_lane = vec![Vec::new(); slice.batch_size()];
    let mut fallback_lanes = Vec::new();
    for (lane, _, target, _) in slice.pairs() {
        let history = histories.map(|h| h.get(slice.user_ids[lane]).map_or(&[][..], Vec::as_slice));
        let (items, weights): (Vec<usize>, Vec<u64>) = pool
            .iter()
            .filter(|(&i, _)| !excluded(i, target, history))
            .map(|(&i, &w)| (i, w))
            .unzip();
        let (items, weights) = if items.is_empty() {
            fallback_lanes.push(lane);
            popularity
                .iter()
                .enumerate()
                .filter(|&(i, &w)| w > 0 && !excluded(i, target, history))
                .map(|(i, &w)| (i, w))
                .unzip()
        } else {
            (items, weights)
        };
        if items.is_empty() {
            return Err(Error::Sampling(format!(
                "lane {lane}: every item is the target or in user {}'s history",
                slice.user_ids[lane]
            )));
        }
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Sampling(e.to_string()))?;
        per_lane[lane] = (0..k).map(|_| items[dist.sample(rng)]).collect();
    }
    Ok(NegativeSet {
        per_lane,
        fallback_lanes,
    })
}

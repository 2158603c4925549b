//! Pairwise-loss training with in-batch negative sampling and early
//! stopping on held-out sessions.

mod loss;
mod optim;
mod sampler;

use std::io::Write;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batching::{BatchMode, BatchPlan, BatchSlice};
use crate::dataprep::{Corpus, Session, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ModelScorer};
use crate::model::{forward_window, score_items, LaneState, Model, ScoreContext};

pub use loss::{pairwise_loss, LossKind};
pub use optim::{Optimizer, OptimizerKind, ADAGRAD_EPS, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use sampler::{batch_pool, local_negative_sample, NegativeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Use the positive-oriented TOP1 / hinge forms.
    pub literal_loss: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub k_neg: usize,
    pub seed: u64,
    pub max_len: usize,
    /// `None` picks user-parallel batches for user-aware variants.
    pub batch_mode: Option<BatchMode>,
    pub shuffle: bool,
    /// Slices per graph; gradients do not cross window boundaries.
    pub bptt_window: usize,
    /// `None` excludes user history from negatives for user-aware variants.
    pub exclude_history: Option<bool>,
    /// Trailing share of training sessions (by end time) held out.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Hinge,
            literal_loss: false,
            optimizer: OptimizerKind::Adagrad,
            learning_rate: 0.2,
            batch_size: 64,
            epochs_max: 30,
            patience: 10,
            k_neg: 50,
            seed: 0,
            max_len: 200,
            batch_mode: None,
            shuffle: false,
            bptt_window: 1,
            exclude_history: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.patience == 0 || self.k_neg == 0 || self.batch_size == 0 || self.bptt_window == 0 {
            return Err(Error::Config(
                "patience, k_neg, batch_size and bptt_window must be at least 1".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len {} must be at least 2",
                self.max_len
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Sampling tables drawn from the sessions being trained on.
#[derive(Clone, Debug)]
pub struct SamplingTables {
    pub popularity: Vec<u64>,
    pub histories: Vec<Vec<usize>>,
}

impl SamplingTables {
    pub fn from_corpus(c: &Corpus) -> Self {
        SamplingTables {
            popularity: c.popularity.clone(),
            histories: c.histories.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean loss per (positive, negative) pair.
    pub mean_loss: f64,
    pub updates: usize,
    /// Supervised next-item predictions.
    pub examples: usize,
}

fn resolve_mode(model: &Model<f32>, cfg: &TrainConfig) -> BatchMode {
    cfg.batch_mode
        .unwrap_or(if model.config.variant.uses_user() {
            BatchMode::UserParallel
        } else {
            BatchMode::SessionParallel
        })
}

fn excludes_history(model: &Model<f32>, cfg: &TrainConfig) -> bool {
    cfg.exclude_history
        .unwrap_or(model.config.variant.uses_user())
}

/// Builds the pair loss of one window. Returns the loss node (if any lane
/// was active), the pair count and the prediction count.
fn window_loss(
    model: &Model<f32>,
    g: &mut Graph<f32>,
    b: &crate::autodiff::Bindings,
    window: &[&BatchSlice],
    qs: &[Var],
    tables: &SamplingTables,
    cfg: &TrainConfig,
    exclude: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Var>, usize, usize)> {
    let mut terms = Vec::new();
    let mut pairs = 0usize;
    let mut examples = 0usize;
    let hist = exclude.then_some(tables.histories.as_slice());
    for (slice, &q) in window.iter().zip(qs) {
        let active: Vec<usize> = (0..slice.batch_size())
            .filter(|&l| slice.active_mask[l])
            .collect();
        if active.is_empty() {
            continue;
        }
        let negs = local_negative_sample(slice, &tables.popularity, hist, cfg.k_neg, rng)?;
        let mut cands: Vec<usize> = active.iter().map(|&l| slice.target_ids[l]).collect();
        for &l in &active {
            cands.extend_from_slice(&negs.per_lane[l]);
        }
        cands.sort_unstable();
        cands.dedup();
        let col = |item: usize| cands.binary_search(&item).expect("candidate present");
        let rows: Vec<(Var, usize)> = active.iter().map(|&l| (q, l)).collect();
        let qa = g.gather_rows(&rows)?;
        let users: Vec<usize> = active.iter().map(|&l| slice.user_ids[l]).collect();
        let bins: Vec<usize> = active.iter().map(|&l| slice.time_bin_ids[l]).collect();
        let ts: Vec<i64> = active.iter().map(|&l| slice.timestamps[l]).collect();
        let ctx = ScoreContext {
            users: &users,
            time_bins: &bins,
            timestamps: &ts,
        };
        let s = score_items(&model.config, g, b, qa, &cands, ctx)?;
        let pos_idx: Vec<usize> = active.iter().map(|&l| col(slice.target_ids[l])).collect();
        let neg_idx: Vec<usize> = active
            .iter()
            .flat_map(|&l| negs.per_lane[l].iter().map(|&i| col(i)))
            .collect();
        let pos = g.gather_cols(s, &pos_idx, 1)?;
        let neg = g.gather_cols(s, &neg_idx, cfg.k_neg)?;
        let l = pairwise_loss(g, cfg.loss, pos, neg, cfg.literal_loss)?;
        let n = active.len() * cfg.k_neg;
        terms.push((l, n));
        pairs += n;
        examples += active.len();
    }
    if terms.is_empty() {
        return Ok((None, 0, 0));
    }
    // Normalized by the nominal pair count of a full window, so slices with
    // few active lanes take proportionally smaller steps.
    let nominal = (cfg.batch_size * cfg.k_neg * window.len()) as f32;
    let mut total: Option<Var> = None;
    for (l, n) in terms {
        let w = g.scale(l, n as f32 / nominal);
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    Ok((total, pairs, examples))
}

/// One pass over `sessions`: forward every slice, score targets against
/// sampled negatives, backpropagate and update once per window.
pub fn train_epoch(
    model: &mut Model<f32>,
    optimizer: &mut Optimizer<f32>,
    sessions: &[Session],
    tables: &SamplingTables,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let mut plan = BatchPlan::new(resolve_mode(model, cfg), cfg.batch_size);
    plan.max_len = Some(cfg.max_len);
    plan.shuffle_seed = cfg.shuffle.then(|| rng.next_u64());
    let (_, mut batches) = plan.batches(sessions)?;
    let exclude = excludes_history(model, cfg);
    let mut state = LaneState::new(&model.config, cfg.batch_size);
    let mut stats = EpochStats::default();
    let mut loss_sum = 0.0f64;
    let mut pair_sum = 0usize;
    loop {
        let window: Vec<BatchSlice> = batches.by_ref().take(cfg.bptt_window).collect();
        if window.is_empty() {
            break;
        }
        let refs: Vec<&BatchSlice> = window.iter().collect();
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, true);
        let drop_rng = (model.config.dropout > 0.0).then_some(&mut *rng);
        let qs = forward_window(&model.config, &mut g, &b, &refs, &mut state, drop_rng)?;
        let (loss, pairs, examples) =
            window_loss(model, &mut g, &b, &refs, &qs, tables, cfg, exclude, rng)?;
        let Some(loss) = loss else { continue };
        let nominal = (cfg.batch_size * cfg.k_neg * refs.len()) as f64;
        let value = g.value(loss).data()[0] as f64 * nominal / pairs as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at update {} ({} examples seen)",
                stats.updates, stats.examples
            )));
        }
        g.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = (0..model.params.len())
            .map(|i| g.grad(b.at(i)).map(<[f32]>::to_vec))
            .collect();
        drop(g);
        optimizer.step(&mut model.params, &grads, cfg.learning_rate)?;
        loss_sum += value * pairs as f64;
        pair_sum += pairs;
        stats.updates += 1;
        stats.examples += examples;
    }
    stats.mean_loss = if pair_sum > 0 {
        loss_sum / pair_sum as f64
    } else {
        0.0
    };
    Ok(stats)
}

/// Mean pair loss on `sessions` with frozen parameters. Negatives come from
/// a fixed seed so successive calls are comparable.
pub fn validation_loss(
    model: &Model<f32>,
    sessions: &[Session],
    tables: &SamplingTables,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut plan = BatchPlan::new(resolve_mode(model, cfg), cfg.batch_size);
    plan.max_len = Some(cfg.max_len);
    let (_, batches) = plan.batches(sessions)?;
    let exclude = excludes_history(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a1d);
    let mut state = LaneState::new(&model.config, cfg.batch_size);
    let (mut sum, mut n) = (0.0f64, 0usize);
    for slice in batches {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let qs = forward_window(&model.config, &mut g, &b, &[&slice], &mut state, None)?;
        let (loss, pairs, _) = window_loss(
            model,
            &mut g,
            &b,
            &[&slice],
            &qs,
            tables,
            cfg,
            exclude,
            &mut rng,
        )?;
        if let Some(l) = loss {
            sum += g.value(l).data()[0] as f64 * (cfg.batch_size * cfg.k_neg) as f64;
            n += pairs;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus(
            "validation sessions have no pairs".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Tracks the best validation loss; stops after `patience` evaluations
/// without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_evaluation: usize,
    pub evaluations: usize,
    bad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_evaluation: 0,
            evaluations: 0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.evaluations += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_evaluation = self.evaluations;
            self.bad = 0;
            StopDecision::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// One JSON-lines log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mrr20: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_mrr20: f64,
    pub evaluations: usize,
}

/// Holds out the last `frac` of sessions by end time (at least one).
pub fn validation_split(sessions: &[Session], frac: f64) -> Result<(Vec<Session>, Vec<Session>)> {
    if sessions.len() < 2 {
        return Err(Error::EmptyCorpus(
            "need at least two sessions to hold out validation data".into(),
        ));
    }
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by_key(|&i| (sessions[i].end_ts, i));
    let n_val = ((sessions.len() as f64 * frac).ceil() as usize).clamp(1, sessions.len() - 1);
    let cut = sessions.len() - n_val;
    let mut train: Vec<usize> = order[..cut].to_vec();
    let mut val: Vec<usize> = order[cut..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((
        train.into_iter().map(|i| sessions[i].clone()).collect(),
        val.into_iter().map(|i| sessions[i].clone()).collect(),
    ))
}

/// Trains `model` on `train` minus a trailing validation slice and keeps
/// the parameters with the lowest validation loss. Each epoch appends one
/// JSON line to `log` when given.
pub fn fit(
    model: Model<f32>,
    train: &Corpus,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<FitResult> {
    fit_with_objective(model, train, cfg, log, None)
}

/// Validation objective called after every epoch with the current model
/// and the 1-based epoch number. Lower is better.
pub type ValidationObjective<'a> = &'a mut dyn FnMut(&Model<f32>, usize) -> Result<f64>;

/// [`fit`] with the early-stopping objective replaced by `objective` when
/// given; the default is the sampled ranking loss on the validation split.
pub fn fit_with_objective(
    mut model: Model<f32>,
    train: &Corpus,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut objective: Option<ValidationObjective<'_>>,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.split == Split::Test {
        return Err(Error::Invalid("fit needs the training split".into()));
    }
    let (fit_sessions, val_sessions) = validation_split(&train.sessions, cfg.val_fraction)?;
    let fit_corpus = Corpus::from_sessions(
        Split::Train,
        fit_sessions,
        train.item_ids.clone(),
        train.user_ids.clone(),
    );
    let tables = SamplingTables::from_corpus(&fit_corpus);
    let mut optimizer = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_mrr = 0.0;
    let mut es = EarlyStopping::new(cfg.patience);
    for epoch in 1..=cfg.epochs_max {
        let t0 = Instant::now();
        let stats = train_epoch(
            &mut model,
            &mut optimizer,
            &fit_corpus.sessions,
            &tables,
            cfg,
            &mut rng,
        )?;
        let val_loss = match objective.as_deref_mut() {
            Some(f) => f(&model, epoch)?,
            None => validation_loss(&model, &val_sessions, &tables, cfg)?,
        };
        let val_mrr20 = evaluate(&ModelScorer { model: &model }, &val_sessions, &[20])?
            .mrr(20)
            .unwrap_or(0.0);
        let rec = EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            val_loss,
            val_mrr20,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} mrr@20 {:.5} ({:.1}s)",
            rec.train_loss,
            rec.val_loss,
            rec.val_mrr20,
            rec.seconds
        );
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        history.push(rec);
        match es.observe(val_loss) {
            StopDecision::Improved => {
                best = model.clone();
                best_mrr = val_mrr20;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(FitResult {
        model: best,
        history,
        best_epoch: es.best_evaluation,
        best_val_loss: es.best,
        best_val_mrr20: best_mrr,
        evaluations: es.evaluations,
    })
}

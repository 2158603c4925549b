//! End-to-end steps shared by the command line and the test suites.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataprep::{prepare, Dataset, Event};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, ModelScorer, PopularityScorer};
use crate::model::{checkpoint_hash, Model};
use crate::training::{fit, FitResult};

pub fn preprocess(events: &[Event], run: &RunConfig) -> Result<Dataset> {
    prepare(events, &run.prep_config())
}

/// Fresh model sized for `ds`, seeded from the run.
pub fn build_model(ds: &Dataset, run: &RunConfig) -> Result<Model<f32>> {
    let cfg = run.model_config(ds.num_items(), ds.num_users(), ds.binning.num_bins);
    Model::new(cfg, &ds.train.user_mean_days(), run.seed)
}

pub fn train(ds: &Dataset, run: &RunConfig, log: Option<&mut dyn Write>) -> Result<FitResult> {
    run.validate()?;
    fit(build_model(ds, run)?, &ds.train, &run.train_config(), log)
}

/// Test-split metrics with run metadata filled in.
pub fn evaluate_model(ds: &Dataset, model: &Model<f32>, run: &RunConfig) -> Result<MetricsReport> {
    if model.config.num_items != ds.num_items() || model.config.num_users != ds.num_users() {
        return Err(Error::Invalid(format!(
            "checkpoint sized for {} items / {} users, corpus has {} / {}",
            model.config.num_items,
            model.config.num_users,
            ds.num_items(),
            ds.num_users()
        )));
    }
    let mut r = evaluate(&ModelScorer { model }, &ds.test.sessions, &run.ks)?;
    r.dataset = run.dataset.clone();
    r.variant = model.config.variant.name().to_string();
    r.seed = run.seed;
    r.checkpoint_hash = checkpoint_hash(model)?;
    Ok(r)
}

pub fn evaluate_popularity(ds: &Dataset, run: &RunConfig) -> Result<MetricsReport> {
    let mut r = evaluate(
        &PopularityScorer::new(&ds.train.popularity),
        &ds.test.sessions,
        &run.ks,
    )?;
    r.dataset = run.dataset.clone();
    r.variant = "popularity".into();
    r.seed = run.seed;
    Ok(r)
}

/// Outcome of one grid point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRun {
    pub point: Vec<(String, String)>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_mrr20: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub runs: Vec<GridRun>,
    /// Index into `runs` with the highest validation MRR@20; ties keep the
    /// earlier point.
    pub best: usize,
    pub best_config: RunConfig,
    pub best_model: Model<f32>,
}

/// Fits every grid point and keeps the one with the best validation MRR@20.
/// Each run appends one JSON line to `log`.
pub fn grid_search(
    ds: &Dataset,
    run: &RunConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<GridOutcome> {
    let points = run.grid_points()?;
    let mut runs: Vec<GridRun> = Vec::with_capacity(points.len());
    let mut best: Option<(usize, RunConfig, Model<f32>)> = None;
    for (i, (point, cfg)) in points.into_iter().enumerate() {
        log::info!("grid point {}: {point:?}", i + 1);
        let r = train(ds, &cfg, None)?;
        let g = GridRun {
            point: point
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect(),
            best_epoch: r.best_epoch,
            best_val_loss: r.best_val_loss,
            best_val_mrr20: r.best_val_mrr20,
            epochs_run: r.history.len(),
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &g)?;
            w.write_all(b"\n")?;
        }
        let better = best
            .as_ref()
            .is_none_or(|(b, _, _)| g.best_val_mrr20 > runs[*b].best_val_mrr20);
        runs.push(g);
        if better {
            best = Some((i, cfg, r.model));
        }
    }
    let (best, best_config, best_model) = best.expect("grid has at least one point");
    Ok(GridOutcome {
        runs,
        best,
        best_config,
        best_model,
    })
}

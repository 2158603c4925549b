use serde::{Deserialize, Serialize};

use super::{Corpus, Split};
use crate::error::{Error, Result};

/// Fixed-width dwell-time histogram bins.
///
/// Bin `k` covers `[k * width, (k + 1) * width)`; anything at or beyond the
/// last edge lands in the final (overflow) bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwellBinning {
    pub width: f64,
    pub num_bins: usize,
    /// Lower edge of every bin, ascending.
    pub edges: Vec<f64>,
    /// Cap applied to training dwells before the width was fitted.
    pub cap: f64,
    /// Set only by [`DwellBinning::fit_train`].
    pub fitted_on_train: bool,
}

impl DwellBinning {
    pub fn bin(&self, dwell: f64) -> usize {
        if dwell <= 0.0 || !dwell.is_finite() {
            return if dwell.is_finite() {
                0
            } else {
                self.num_bins - 1
            };
        }
        ((dwell / self.width).floor() as usize).min(self.num_bins - 1)
    }

    /// Caps the training dwells at `cap_quantile`, fits the width by Scott's
    /// rule and lays out at most `max_bins` bins.
    pub fn fit_train(train: &Corpus, max_bins: usize, cap_quantile: f64) -> Result<Self> {
        if train.split != Split::Train {
            return Err(Error::Invalid(format!(
                "dwell bins must be fitted on the training split, got {:?}",
                train.split
            )));
        }
        let dwells = train.dwells();
        let cap = dwell_cap(&dwells, cap_quantile)?;
        let capped: Vec<f64> = dwells.iter().map(|&d| d.min(cap)).collect();
        let width = scott_bin_width(&capped)?;
        let mut b = build_binning(&capped, width, max_bins)?;
        b.cap = cap;
        b.fitted_on_train = true;
        Ok(b)
    }
}

/// Scott's reference rule: `sigma * cbrt(24 * sqrt(pi) / n)` with the sample
/// standard deviation `sigma`.
pub fn scott_bin_width(dwells: &[f64]) -> Result<f64> {
    let n = dwells.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "need at least two dwell values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = dwells.iter().sum::<f64>() / nf;
    let var = dwells.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sigma = var.sqrt();
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Degenerate(format!(
            "dwell standard deviation is {sigma}"
        )));
    }
    Ok(sigma * (24.0 * std::f64::consts::PI.sqrt() / nf).cbrt())
}

/// Lays out `min(ceil(max_dwell / width), max_bins)` bins of `width`.
pub fn build_binning(train_dwells: &[f64], width: f64, max_bins: usize) -> Result<DwellBinning> {
    if width <= 0.0 || !width.is_finite() {
        return Err(Error::Invalid(format!(
            "bin width {width} must be positive"
        )));
    }
    if max_bins == 0 {
        return Err(Error::Invalid("max_bins must be at least 1".into()));
    }
    let max = train_dwells.iter().copied().fold(0.0f64, f64::max);
    let needed = (max / width).ceil().max(1.0);
    let num_bins = if needed >= max_bins as f64 {
        max_bins
    } else {
        needed as usize
    };
    Ok(DwellBinning {
        width,
        num_bins,
        edges: (0..num_bins).map(|k| k as f64 * width).collect(),
        cap: max,
        fitted_on_train: false,
    })
}

/// Nearest-rank quantile of the dwells.
pub fn dwell_cap(dwells: &[f64], quantile: f64) -> Result<f64> {
    if dwells.is_empty() {
        return Err(Error::Degenerate("no dwell values".into()));
    }
    if !(0.0..=1.0).contains(&quantile) || quantile == 0.0 {
        return Err(Error::Invalid(format!(
            "quantile {quantile} outside (0, 1]"
        )));
    }
    let mut sorted = dwells.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (quantile * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

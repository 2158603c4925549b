//! Flat run configuration read from TOML, with `key=value` overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batching::BatchMode;
use crate::dataprep::{PrepConfig, Support, DEFAULT_GAP_SECONDS};
use crate::error::{Error, Result};
use crate::model::{BiasTerms, Cell, ItemTimeBias, ModelConfig, Variant};
use crate::training::{LossKind, OptimizerKind, TrainConfig};

/// One grid assignment and the config it produces.
pub type GridPoint = (Vec<(String, toml::Value)>, RunConfig);

/// Every setting of a preprocess, train and evaluate run.
///
/// Keys are flat; the only table is `[grid]`, mapping a key to the values
/// a grid search tries. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub seed: u64,

    pub gap_seconds: i64,
    pub min_item_events: usize,
    pub min_session_len: usize,
    pub min_user_sessions: usize,
    pub boundary_ts: Option<i64>,
    pub test_fraction: f64,
    pub max_bins: usize,
    pub dwell_cap_quantile: f64,

    pub variant: Variant,
    pub cell: Cell,
    pub item_dim: usize,
    pub time_dim: usize,
    pub user_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub item_time_bias: ItemTimeBias,
    pub dev_beta: f64,
    pub attention_bypass: bool,
    /// Overrides the per-variant bias defaults when set.
    pub bias_global: Option<bool>,
    pub bias_user: Option<bool>,
    pub bias_item: Option<bool>,
    pub bias_item_time: Option<bool>,
    pub bias_dev: Option<bool>,

    pub loss: LossKind,
    pub literal_loss: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub k_neg: usize,
    pub max_len: usize,
    pub batch_mode: Option<BatchMode>,
    pub shuffle: bool,
    pub bptt_window: usize,
    pub exclude_history: Option<bool>,
    pub val_fraction: f64,

    pub ks: Vec<usize>,
    /// JSON-lines training log.
    pub log_path: Option<String>,

    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prep = PrepConfig::default();
        let train = TrainConfig::default();
        let model = ModelConfig::new(Variant::Baseline, 1, 1, 1);
        RunConfig {
            dataset: "dataset".into(),
            seed: 0,
            gap_seconds: DEFAULT_GAP_SECONDS,
            min_item_events: prep.support.min_item_events,
            min_session_len: prep.support.min_session_len,
            min_user_sessions: prep.support.min_user_sessions,
            boundary_ts: None,
            test_fraction: prep.test_fraction,
            max_bins: prep.max_bins,
            dwell_cap_quantile: prep.dwell_cap_quantile,
            variant: Variant::Baseline,
            cell: model.cell,
            item_dim: model.item_dim,
            time_dim: model.time_dim,
            user_dim: model.user_dim,
            hidden_dim: model.hidden_dim,
            dropout: model.dropout,
            item_time_bias: model.item_time_bias,
            dev_beta: model.dev_beta,
            attention_bypass: false,
            bias_global: None,
            bias_user: None,
            bias_item: None,
            bias_item_time: None,
            bias_dev: None,
            loss: train.loss,
            literal_loss: train.literal_loss,
            optimizer: train.optimizer,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs_max: train.epochs_max,
            patience: train.patience,
            k_neg: train.k_neg,
            max_len: train.max_len,
            batch_mode: None,
            shuffle: train.shuffle,
            bptt_window: train.bptt_window,
            exclude_history: None,
            val_fraction: train.val_fraction,
            ks: vec![10, 20, 30, 40],
            log_path: None,
            grid: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces one key. `value` is read as a TOML literal, falling back to
    /// a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        self.set_value(key, parsed)
    }

    pub fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        if key == "grid" {
            return Err(Error::Config(
                "grid cannot be overridden by a single value".into(),
            ));
        }
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("setting {key}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every grid point: the cartesian product over grid keys in sorted
    /// order, last key varying fastest. An empty grid is one point.
    pub fn grid_points(&self) -> Result<Vec<GridPoint>> {
        let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (k, values) in &self.grid {
            if values.is_empty() {
                return Err(Error::Config(format!("grid key {k} has no values")));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((k.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
            .into_iter()
            .map(|p| {
                let mut cfg = self.clone();
                cfg.grid.clear();
                for (k, v) in &p {
                    cfg.set_value(k, v.clone())?;
                }
                Ok((p, cfg))
            })
            .collect()
    }

    pub fn prep_config(&self) -> PrepConfig {
        PrepConfig {
            gap_seconds: self.gap_seconds,
            support: Support {
                min_item_events: self.min_item_events,
                min_session_len: self.min_session_len,
                min_user_sessions: self.min_user_sessions,
            },
            boundary_ts: self.boundary_ts,
            test_fraction: self.test_fraction,
            max_bins: self.max_bins,
            dwell_cap_quantile: self.dwell_cap_quantile,
        }
    }

    pub fn model_config(
        &self,
        num_items: usize,
        num_users: usize,
        num_time_bins: usize,
    ) -> ModelConfig {
        let d = BiasTerms::for_variant(self.variant);
        ModelConfig {
            variant: self.variant,
            cell: self.cell,
            num_items,
            num_users,
            num_time_bins,
            item_dim: self.item_dim,
            time_dim: self.time_dim,
            user_dim: self.user_dim,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            biases: BiasTerms {
                global: self.bias_global.unwrap_or(d.global),
                user: self.bias_user.unwrap_or(d.user),
                item: self.bias_item.unwrap_or(d.item),
                item_time: self.bias_item_time.unwrap_or(d.item_time),
                dev: self.bias_dev.unwrap_or(d.dev),
            },
            item_time_bias: self.item_time_bias,
            dev_beta: self.dev_beta,
            attention_bypass: self.attention_bypass,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            literal_loss: self.literal_loss,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs_max: self.epochs_max,
            patience: self.patience,
            k_neg: self.k_neg,
            seed: self.seed,
            max_len: self.max_len,
            batch_mode: self.batch_mode,
            shuffle: self.shuffle,
            bptt_window: self.bptt_window,
            exclude_history: self.exclude_history,
            val_fraction: self.val_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(format!(
                "ks {:?} must be non-empty and positive",
                self.ks
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        self.train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile() {
        let c = RunConfig::default();
        assert_eq!((c.batch_size, c.max_len), (64, 200));
        assert_eq!(
            (c.item_dim, c.time_dim, c.user_dim, c.hidden_dim),
            (64, 16, 32, 100)
        );
        assert_eq!((c.learning_rate, c.dropout), (0.2, 0.5));
        assert_eq!(
            (c.loss, c.optimizer),
            (LossKind::Hinge, OptimizerKind::Adagrad)
        );
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = RunConfig::from_toml_str(
            "variant = \"time_user\"\nlearning_rate = 0.05\n[grid]\nk_neg = [10, 20]\n",
        )
        .unwrap();
        assert_eq!(c.variant, Variant::TimeUser);
        assert_eq!(c.learning_rate, 0.05);
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        let err = RunConfig::from_toml_str("learning_rat = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "learning_rate=0.01",
            "variant=user_att",
            "batch_mode=user_parallel",
            "dataset = toy",
        ])
        .unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.variant, Variant::UserAtt);
        assert_eq!(c.batch_mode, Some(BatchMode::UserParallel));
        assert_eq!(c.dataset, "toy");
        assert!(c.apply_overrides(&["nope=1"]).is_err());
        assert!(c.apply_overrides(&["batch_size=\"x\""]).is_err());
        assert!(c.apply_overrides(&["batch_size"]).is_err());
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let mut c = RunConfig::default();
        assert_eq!(c.grid_points().unwrap().len(), 1);
        c.grid
            .insert("learning_rate".into(), vec![0.1.into(), 0.2.into()]);
        c.grid
            .insert("k_neg".into(), vec![5.into(), 10.into(), 20.into()]);
        let pts = c.grid_points().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].1.k_neg, 5);
        assert_eq!(pts[0].1.learning_rate, 0.1);
        assert_eq!(pts[1].1.learning_rate, 0.2);
        assert!(pts.iter().all(|(_, p)| p.grid.is_empty()));
    }
}

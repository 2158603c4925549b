//! The recurrent recommender family: item GRU, dwell-time GRU with prefix
//! attention, user-profile fusion, temporal bias terms and item scoring.

mod attention;
mod cells;
mod checkpoint;
mod forward;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub use attention::{
    fuse_user_cat, naive_prefix_attention, prefix_attention, triangle_attention, user_attention,
    AttentionMask,
};
pub use cells::{gru_step, lstm_step, CellWeights};
pub use checkpoint::{
    checkpoint_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC,
};
pub use forward::{dev_days, forward_window, score_items, LaneState, ScoreContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    UserAtt,
    UserCat,
    TimeAtt,
    TimeCat,
    TimeUser,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::UserAtt,
        Variant::UserCat,
        Variant::TimeAtt,
        Variant::TimeCat,
        Variant::TimeUser,
    ];

    pub fn uses_time(self) -> bool {
        matches!(
            self,
            Variant::TimeAtt | Variant::TimeCat | Variant::TimeUser
        )
    }

    pub fn uses_user(self) -> bool {
        matches!(
            self,
            Variant::UserAtt | Variant::UserCat | Variant::TimeUser
        )
    }

    /// A separate GRU over time-bin embeddings feeds the attention keys.
    pub fn has_time_branch(self) -> bool {
        matches!(self, Variant::TimeAtt | Variant::TimeUser)
    }

    pub fn has_attention(self) -> bool {
        matches!(
            self,
            Variant::TimeAtt | Variant::TimeUser | Variant::UserAtt
        )
    }

    pub fn has_user_cat(self) -> bool {
        matches!(self, Variant::UserCat | Variant::TimeUser)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::UserAtt => "user_att",
            Variant::UserCat => "user_cat",
            Variant::TimeAtt => "time_att",
            Variant::TimeCat => "time_cat",
            Variant::TimeUser => "time_user",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    #[default]
    Gru,
    Lstm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemTimeBias {
    /// `c_i[k] * c_t[bin] + c_t0[bin]`.
    #[default]
    Factored,
    /// Dense `V x T` table.
    Full,
}

/// Which additive terms enter the score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasTerms {
    pub global: bool,
    pub user: bool,
    pub item: bool,
    pub item_time: bool,
    pub dev: bool,
}

impl BiasTerms {
    pub const NONE: BiasTerms = BiasTerms {
        global: false,
        user: false,
        item: false,
        item_time: false,
        dev: false,
    };

    pub fn for_variant(v: Variant) -> Self {
        BiasTerms {
            global: true,
            user: v.uses_user(),
            item: true,
            item_time: v.uses_time(),
            dev: v == Variant::TimeUser,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub cell: Cell,
    pub num_items: usize,
    pub num_users: usize,
    pub num_time_bins: usize,
    pub item_dim: usize,
    pub time_dim: usize,
    pub user_dim: usize,
    pub hidden_dim: usize,
    /// Inverted dropout on recurrent inputs during training.
    pub dropout: f64,
    pub biases: BiasTerms,
    pub item_time_bias: ItemTimeBias,
    pub dev_beta: f64,
    /// Replace attention output by the hidden state (wiring ablation).
    pub attention_bypass: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_items: usize, num_users: usize, num_time_bins: usize) -> Self {
        ModelConfig {
            variant,
            cell: Cell::Gru,
            num_items,
            num_users,
            num_time_bins,
            item_dim: 64,
            time_dim: 16,
            user_dim: 32,
            hidden_dim: 100,
            dropout: 0.5,
            biases: BiasTerms::for_variant(variant),
            item_time_bias: ItemTimeBias::Factored,
            dev_beta: 0.4,
            attention_bypass: false,
        }
    }

    /// Same width for every embedding and the hidden state.
    pub fn with_dims(mut self, d: usize) -> Self {
        self.item_dim = d;
        self.time_dim = d;
        self.user_dim = d;
        self.hidden_dim = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.item_dim, self.time_dim, self.user_dim, self.hidden_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "dimensions must be at least 1, got {dims:?}"
            )));
        }
        if self.num_items == 0 || self.num_users == 0 {
            return Err(Error::Config(
                "model needs at least one item and one user".into(),
            ));
        }
        if (self.variant.uses_time() || self.biases.item_time) && self.num_time_bins == 0 {
            return Err(Error::Config(format!(
                "variant {} needs at least one time bin",
                self.variant
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.dev_beta.is_finite() || self.dev_beta <= 0.0 {
            return Err(Error::Config(format!(
                "dev_beta {} must be positive",
                self.dev_beta
            )));
        }
        Ok(())
    }

    /// Input width of the item recurrent cell.
    pub fn item_input_dim(&self) -> usize {
        if self.variant == Variant::TimeCat {
            self.item_dim + self.time_dim
        } else {
            self.item_dim
        }
    }
}

/// Parameters plus the configuration that wires them.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

fn uniform<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|_| F::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn xavier<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<F> {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

pub(crate) const EMBED_INIT: f64 = 0.05;

impl<F: Real> Model<F> {
    /// Seeded initialization. `user_mean_days` holds each user's mean
    /// training timestamp in days and is stored as a frozen parameter.
    pub fn new(config: ModelConfig, user_mean_days: &[f64], seed: u64) -> Result<Self> {
        config.validate()?;
        if user_mean_days.len() != config.num_users {
            return Err(Error::Config(format!(
                "{} user mean timestamps for {} users",
                user_mean_days.len(),
                config.num_users
            )));
        }
        let c = &config;
        let v = c.variant;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let zeros = |r: usize, k: usize| Tensor::<F>::zeros(vec![r, k]);

        p.insert(
            "item_embed",
            uniform(&mut rng, c.num_items, c.item_dim, EMBED_INIT),
            true,
        )?;
        if v.uses_time() {
            p.insert(
                "time_embed",
                uniform(&mut rng, c.num_time_bins, c.time_dim, EMBED_INIT),
                true,
            )?;
        }
        if v.uses_user() {
            p.insert(
                "user_embed",
                uniform(&mut rng, c.num_users, c.user_dim, EMBED_INIT),
                true,
            )?;
        }
        cells::init_cell(
            &mut p,
            &mut rng,
            "rnn_item",
            c.cell,
            c.item_input_dim(),
            c.hidden_dim,
        )?;
        if v.has_time_branch() {
            cells::init_cell(
                &mut p,
                &mut rng,
                "rnn_time",
                c.cell,
                c.time_dim,
                c.hidden_dim,
            )?;
        }
        if v.has_attention() {
            p.insert(
                "att.w_s",
                xavier(&mut rng, c.hidden_dim, c.hidden_dim),
                true,
            )?;
            p.insert("att.b_s", zeros(1, c.hidden_dim), true)?;
        }
        if v == Variant::UserAtt && c.user_dim != c.hidden_dim {
            p.insert(
                "att.user_proj",
                xavier(&mut rng, c.user_dim, c.hidden_dim),
                true,
            )?;
        }
        if v.has_user_cat() {
            p.insert(
                "cat.w",
                xavier(&mut rng, c.hidden_dim + c.user_dim, c.hidden_dim),
                true,
            )?;
            p.insert("cat.b", zeros(1, c.hidden_dim), true)?;
        }
        if c.hidden_dim != c.item_dim {
            p.insert("out.proj", xavier(&mut rng, c.hidden_dim, c.item_dim), true)?;
        }
        let b = c.biases;
        if b.global {
            p.insert("bias.global", zeros(1, 1), true)?;
        }
        if b.user {
            p.insert("bias.user", zeros(c.num_users, 1), true)?;
        }
        if b.item {
            p.insert("bias.item", zeros(c.num_items, 1), true)?;
        }
        if b.item_time {
            match c.item_time_bias {
                ItemTimeBias::Factored => {
                    p.insert("bias.item_time.ci", zeros(c.num_items, 1), true)?;
                    p.insert(
                        "bias.item_time.ct",
                        Tensor::full(vec![c.num_time_bins, 1], F::one()),
                        true,
                    )?;
                    p.insert("bias.item_time.ct0", zeros(c.num_time_bins, 1), true)?;
                }
                ItemTimeBias::Full => {
                    p.insert("bias.item_time", zeros(c.num_items, c.num_time_bins), true)?
                }
            }
        }
        if b.dev {
            p.insert("bias.user_alpha", zeros(c.num_users, 1), true)?;
        }
        let means: Vec<F> = user_mean_days
            .iter()
            .map(|&d| F::from_f64_lossy(d))
            .collect();
        p.insert(
            "user_mean_days",
            Tensor::new(vec![c.num_users, 1], means)?,
            false,
        )?;
        Ok(Model { config, params: p })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

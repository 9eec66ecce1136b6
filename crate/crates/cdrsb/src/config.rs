//! Run configuration: one flat struct covering data preparation, model size,
//! training, evaluation, and the synthetic generator. Values come from
//! defaults, then an optional `key = value` config file, then repeated
//! `--set key=value` overrides, in that order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rating,
    Ranking,
}

impl Task {
    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "rating" => Some(Task::Rating),
            "ranking" => Some(Task::Ranking),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Rating => "rating",
            Task::Ranking => "ranking",
        }
    }
}

/// Ablation variants: how the social-influence channel enters prediction and
/// whether the independence objectives are trained.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-pair regulation weight computed from history similarity.
    Full,
    /// Regulation weight pinned to 1 (social channel always added).
    NoWt,
    /// Regulation weight pinned to 0 (social channel never added).
    NoSl,
    /// Independence objectives dropped from the loss (weight computation kept).
    NoMi,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "full" => Some(Variant::Full),
            "no_wt" => Some(Variant::NoWt),
            "no_sl" => Some(Variant::NoSl),
            "no_mi" => Some(Variant::NoMi),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWt => "no_wt",
            Variant::NoSl => "no_sl",
            Variant::NoMi => "no_mi",
        }
    }

    pub fn all() -> [Variant; 4] {
        [Variant::Full, Variant::NoWt, Variant::NoSl, Variant::NoMi]
    }

    /// Whether the independence objectives contribute to the training loss.
    pub fn uses_mi(&self) -> bool {
        !matches!(self, Variant::NoMi)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub variant: Variant,
    pub seed: u64,

    // model
    pub d: usize,
    pub d_prime: usize,
    pub activation: String,
    pub batch_norm: bool,
    pub dropout: f64,

    // training
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub train_negatives: usize,
    /// Rebuild the item-embedding cache behind the regulation weights every
    /// batch instead of every epoch.
    pub alpha_per_batch: bool,

    // regulation
    pub similarity_threshold: f64,

    // data preparation
    pub min_interactions: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub subsample_users: f64,

    // evaluation
    pub eval_negatives: usize,
    pub eval_k: usize,

    // synthetic generator
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_latent_dim: usize,
    pub synth_knn: usize,
    pub synth_interactions_per_user: usize,
    pub synth_conformity_rate: f64,
    pub synth_rating_noise: f64,
    pub synth_softmax_beta: f64,
    pub synth_positive_boost: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Rating,
            variant: Variant::Full,
            seed: 42,
            d: 64,
            d_prime: 64,
            activation: "softplus".to_string(),
            batch_norm: true,
            dropout: 0.1,
            batch_size: 128,
            learning_rate: 1e-4,
            lambda: 1e-3,
            patience: 5,
            max_epochs: 200,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            train_negatives: 4,
            alpha_per_batch: false,
            similarity_threshold: 0.5,
            min_interactions: 1,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            subsample_users: 1.0,
            eval_negatives: 99,
            eval_k: 10,
            synth_users: 300,
            synth_items: 500,
            synth_latent_dim: 8,
            synth_knn: 8,
            synth_interactions_per_user: 30,
            synth_conformity_rate: 0.3,
            synth_rating_noise: 0.6,
            synth_softmax_beta: 3.0,
            synth_positive_boost: 0.9,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys and malformed values
    /// are errors that name the offending key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str, want: &str) -> Error {
            Error::Config(format!("invalid value {value:?} for key {key:?} (expected {want})"))
        }
        macro_rules! num {
            ($field:expr, $ty:ty, $want:expr) => {{
                $field = value
                    .parse::<$ty>()
                    .map_err(|_| bad(key, value, $want))?;
            }};
        }
        match key {
            "task" => {
                self.task = Task::parse(value).ok_or_else(|| bad(key, value, "rating|ranking"))?
            }
            "variant" => {
                self.variant = Variant::parse(value)
                    .ok_or_else(|| bad(key, value, "full|no_wt|no_sl|no_mi"))?
            }
            "seed" => num!(self.seed, u64, "integer"),
            "d" => num!(self.d, usize, "positive integer"),
            "d_prime" => num!(self.d_prime, usize, "positive integer"),
            "activation" => {
                crate::tape::Activation::parse(value)
                    .ok_or_else(|| bad(key, value, "softplus|relu|tanh|identity"))?;
                self.activation = value.to_string();
            }
            "batch_norm" => num!(self.batch_norm, bool, "true|false"),
            "dropout" => num!(self.dropout, f64, "number in [0,1)"),
            "batch_size" => num!(self.batch_size, usize, "positive integer"),
            "learning_rate" => num!(self.learning_rate, f64, "number"),
            "lambda" => num!(self.lambda, f64, "number"),
            "patience" => num!(self.patience, usize, "positive integer"),
            "max_epochs" => num!(self.max_epochs, usize, "positive integer"),
            "rms_decay" => num!(self.rms_decay, f64, "number in (0,1)"),
            "rms_eps" => num!(self.rms_eps, f64, "number"),
            "train_negatives" => num!(self.train_negatives, usize, "integer"),
            "alpha_per_batch" => num!(self.alpha_per_batch, bool, "true|false"),
            "similarity_threshold" => num!(self.similarity_threshold, f64, "number in [-1,1]"),
            "min_interactions" => num!(self.min_interactions, usize, "integer"),
            "split_train" => num!(self.split_train, f64, "fraction"),
            "split_val" => num!(self.split_val, f64, "fraction"),
            "split_test" => num!(self.split_test, f64, "fraction"),
            "subsample_users" => num!(self.subsample_users, f64, "fraction in (0,1]"),
            "eval_negatives" => num!(self.eval_negatives, usize, "integer"),
            "eval_k" => num!(self.eval_k, usize, "positive integer"),
            "synth_users" => num!(self.synth_users, usize, "positive integer"),
            "synth_items" => num!(self.synth_items, usize, "positive integer"),
            "synth_latent_dim" => num!(self.synth_latent_dim, usize, "positive integer"),
            "synth_knn" => num!(self.synth_knn, usize, "integer"),
            "synth_interactions_per_user" => {
                num!(self.synth_interactions_per_user, usize, "positive integer")
            }
            "synth_conformity_rate" => num!(self.synth_conformity_rate, f64, "fraction"),
            "synth_rating_noise" => num!(self.synth_rating_noise, f64, "number"),
            "synth_softmax_beta" => num!(self.synth_softmax_beta, f64, "number"),
            "synth_positive_boost" => num!(self.synth_positive_boost, f64, "number"),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a flat config file: `key = value` lines, `#` comments, blank
    /// lines ignored.
    pub fn apply_file(&mut self, path: &str) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                msg: "expected key = value".to_string(),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 {
            return Err(Error::Config("d and d_prime must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        let s = self.split_train + self.split_val + self.split_test;
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {s}, expected 1")));
        }
        if self.split_train <= 0.0 || self.split_val < 0.0 || self.split_test < 0.0 {
            return Err(Error::Config("split fractions must be non-negative with train > 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::Config("similarity_threshold must lie in [-1,1]".into()));
        }
        if !(0.0 < self.subsample_users && self.subsample_users <= 1.0) {
            return Err(Error::Config("subsample_users must lie in (0,1]".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }

    pub fn activation_kind(&self) -> crate::tape::Activation {
        crate::tape::Activation::parse(&self.activation).expect("validated activation")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<RunConfig> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config json: {e}")))
    }
}

/// Derive a named sub-seed from the root seed so independent consumers
/// (splitting, init, shuffling, negative sampling, dropout) never share a
/// stream. splitmix64 over root xor fnv1a(tag).
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

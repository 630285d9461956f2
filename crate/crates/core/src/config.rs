//! Run configuration as flat `key=value` pairs.
//!
//! Every tunable has exactly one key. Values are layered: built-in defaults,
//! then an optional configuration file, then command-line overrides.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{LoadOptions, SyntheticSpec, MIN_SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::gc2n::{Gc2nConfig, RoutingVariant};
use crate::model::{ContrastiveReduction, TrainConfig};
use crate::subspace::RefineMode;

/// A configuration group addressable by flat keys.
pub trait KeyValues {
    /// Current values, in a stable order.
    fn pairs(&self) -> Vec<(&'static str, String)>;
    /// Sets `key`; returns `Ok(false)` when the key belongs to another group.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value.trim())
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("`{key}` must be one of {}, got `{value}`", names.join("|")))
        })
}

const ROUTING: &[(&str, RoutingVariant)] =
    &[("standard", RoutingVariant::Standard), ("literal", RoutingVariant::LiteralDoubleSum)];
const REFINE: &[(&str, RefineMode)] = &[("dominant", RefineMode::Dominant), ("soft", RefineMode::Soft)];
const REDUCTION: &[(&str, ContrastiveReduction)] =
    &[("sum", ContrastiveReduction::Sum), ("mean", ContrastiveReduction::Mean)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> String {
    options.iter().find(|(_, o)| o == v).map(|(n, _)| n.to_string()).unwrap_or_default()
}

impl KeyValues for Gc2nConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d1", self.d1.to_string()),
            ("d2", self.d2.to_string()),
            ("alpha", self.alpha.to_string()),
            ("layers", self.layers.to_string()),
            ("routing_iters", self.routing_iters.to_string()),
            ("use_linear_attention", self.use_linear_attention.to_string()),
            ("use_dynamic_routing", self.use_dynamic_routing.to_string()),
            ("routing_variant", name_of(ROUTING, &self.routing_variant)),
            ("normalize_adjacency", self.normalize_adjacency.to_string()),
            ("cosine_correlation", self.cosine_correlation.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "d1" => self.d1 = parse(key, v)?,
            "d2" => self.d2 = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "routing_iters" => self.routing_iters = parse(key, v)?,
            "use_linear_attention" => self.use_linear_attention = parse_bool(key, v)?,
            "use_dynamic_routing" => self.use_dynamic_routing = parse_bool(key, v)?,
            "routing_variant" => self.routing_variant = choice(key, v, ROUTING)?,
            "normalize_adjacency" => self.normalize_adjacency = parse_bool(key, v)?,
            "cosine_correlation" => self.cosine_correlation = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValues for TrainConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.ablation;
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("epochs", self.epochs.to_string()),
            ("gamma", self.gamma.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("seed", self.seed.to_string()),
            ("no_linear_attention", a.no_linear_attention.to_string()),
            ("no_dynamic_routing", a.no_dynamic_routing.to_string()),
            ("no_contrastive", a.no_contrastive.to_string()),
            ("no_subspace", a.no_subspace.to_string()),
            ("refine", name_of(REFINE, &self.refine)),
            ("contrastive_reduction", name_of(REDUCTION, &self.contrastive_reduction)),
            ("normalize_refined", self.normalize_refined.to_string()),
            ("base_refresh", self.base_refresh.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "no_linear_attention" => self.ablation.no_linear_attention = parse_bool(key, v)?,
            "no_dynamic_routing" => self.ablation.no_dynamic_routing = parse_bool(key, v)?,
            "no_contrastive" => self.ablation.no_contrastive = parse_bool(key, v)?,
            "no_subspace" => self.ablation.no_subspace = parse_bool(key, v)?,
            "refine" => self.refine = choice(key, v, REFINE)?,
            "contrastive_reduction" => self.contrastive_reduction = choice(key, v, REDUCTION)?,
            "normalize_refined" => self.normalize_refined = parse_bool(key, v)?,
            "base_refresh" => self.base_refresh = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValues for SyntheticSpec {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mixing = match &self.mixing_weights {
            None => "uniform".to_string(),
            Some(w) => w.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        };
        vec![
            ("accounts", self.n_accounts.to_string()),
            ("items", self.n_items.to_string()),
            ("users_per_account", self.users_per_account.to_string()),
            ("pool_overlap", self.pool_overlap.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("seq_len_min", self.seq_len_min.to_string()),
            ("seq_len_max", self.seq_len_max.to_string()),
            ("sequences_per_account", self.sequences_per_account.to_string()),
            ("stickiness", self.stickiness.to_string()),
            ("mixing_weights", mixing),
            ("data_seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "accounts" => self.n_accounts = parse(key, v)?,
            "items" => self.n_items = parse(key, v)?,
            "users_per_account" => self.users_per_account = parse(key, v)?,
            "pool_overlap" => self.pool_overlap = parse(key, v)?,
            "pool_size" => self.pool_size = parse(key, v)?,
            "seq_len_min" => self.seq_len_min = parse(key, v)?,
            "seq_len_max" => self.seq_len_max = parse(key, v)?,
            "sequences_per_account" => self.sequences_per_account = parse(key, v)?,
            "stickiness" => self.stickiness = parse(key, v)?,
            "mixing_weights" => {
                self.mixing_weights = match v.trim() {
                    "uniform" => None,
                    list => Some(list.split(',').map(|w| parse(key, w)).collect::<Result<_>>()?),
                }
            }
            "data_seed" => self.seed = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Loading, splitting and execution settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub min_len: usize,
    /// Split an account's history where consecutive timestamps differ by more.
    pub session_gap: Option<i64>,
    /// Worker threads for independent runs (sweeps, multi-seed benches).
    pub threads: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            split_seed: 1,
            min_len: MIN_SEQUENCE_LEN,
            session_gap: None,
            threads: 1,
        }
    }
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            min_len: self.min_len,
            session_gap: self.session_gap,
        }
    }
}

impl KeyValues for DataConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train_fraction", self.train_fraction.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("min_len", self.min_len.to_string()),
            ("session_gap", self.session_gap.map_or("none".into(), |g| g.to_string())),
            ("threads", self.threads.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "min_len" => self.min_len = parse(key, v)?,
            "session_gap" => {
                self.session_gap = match v.trim() {
                    "none" => None,
                    g => Some(parse(key, g)?),
                }
            }
            "threads" => self.threads = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Every configuration key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("d1", "base embedding size"),
    ("d2", "capsule size"),
    ("alpha", "latent users per account"),
    ("layers", "graph propagation layers"),
    ("routing_iters", "dynamic routing iterations"),
    ("use_linear_attention", "linear-attention item projection (true|false)"),
    ("use_dynamic_routing", "route user capsules into account capsules (true|false)"),
    ("routing_variant", "standard|literal"),
    ("normalize_adjacency", "scale messages by 1/sqrt(deg*deg) (true|false)"),
    ("cosine_correlation", "correlate unit-normalized capsules (true|false)"),
    ("batch_size", "sequences per mini-batch"),
    ("lr", "Adam learning rate"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("weight_decay", "L2 penalty added to gradients"),
    ("dropout", "dropout rate on projected capsules"),
    ("epochs", "training epochs"),
    ("gamma", "contrastive loss weight"),
    ("beta", "contrastive temperature"),
    ("lambda", "subspace affinity smoothing"),
    ("seed", "initialization, shuffling and dropout seed"),
    ("no_linear_attention", "ablation: point-wise item projection"),
    ("no_dynamic_routing", "ablation: mean of user capsules"),
    ("no_contrastive", "ablation: contrastive weight 0"),
    ("no_subspace", "ablation: no subspace alignment"),
    ("refine", "dominant|soft subspace refinement"),
    ("contrastive_reduction", "sum|mean of per-anchor contrastive terms"),
    ("normalize_refined", "L2-normalize refined rows inside the contrastive logits"),
    ("base_refresh", "epochs between subspace basis refreshes"),
    ("eval_every", "evaluate every N epochs (0: final epoch only)"),
    ("accounts", "synthetic: accounts"),
    ("items", "synthetic: items"),
    ("users_per_account", "synthetic: latent users per account"),
    ("pool_overlap", "synthetic: fraction of co-user pools shared"),
    ("pool_size", "synthetic: items per user pool"),
    ("seq_len_min", "synthetic: minimum sequence length"),
    ("seq_len_max", "synthetic: maximum sequence length"),
    ("sequences_per_account", "synthetic: sequences per account"),
    ("stickiness", "synthetic: probability the active user continues"),
    ("mixing_weights", "synthetic: uniform or comma-separated user weights"),
    ("data_seed", "synthetic: generator seed"),
    ("train_fraction", "fraction of sequences used for training"),
    ("split_seed", "train/test split seed"),
    ("min_len", "drop sequences shorter than this"),
    ("session_gap", "none or the timestamp gap that starts a new sequence"),
    ("threads", "worker threads for independent runs"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub gc2n: Gc2nConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut p = self.gc2n.pairs();
        p.extend(self.train.pairs());
        p.extend(self.synthetic.pairs());
        p.extend(self.data.pairs());
        p
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = self.gc2n.set(key, value)?
            || self.train.set(key, value)?
            || self.synthetic.set(key, value)?
            || self.data.set(key, value)?;
        if known {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown configuration key `{key}`")))
        }
    }

    /// Applies a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            writeln!(s, "{k}={v}").expect("writing to a string");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.gc2n.validate()?;
        self.train.validate()?;
        if self.data.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

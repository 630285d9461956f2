//! Accounts, items and hybrid interaction sequences.
//!
//! The on-disk log is one interaction per line:
//! `account<TAB>item<TAB>timestamp[<TAB>latent_user]`. The optional fourth
//! column carries the generating latent user for synthetic data.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense index into the item vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(pub usize);

/// Dense index into the account vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AccountId(pub usize);

/// Minimum sequence length: one history item plus the target.
pub const MIN_SEQUENCE_LEN: usize = 2;
/// Stricter filter used for the original benchmark datasets.
pub const PAPER_MIN_SEQUENCE_LEN: usize = 5;

/// Chronological interactions of one shared account.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridSequence {
    pub account: AccountId,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
    /// Generating latent user of each interaction (synthetic data only).
    pub labels: Option<Vec<usize>>,
}

impl HybridSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Everything but the final item.
    pub fn history(&self) -> &[ItemId] {
        &self.items[..self.items.len().saturating_sub(1)]
    }

    /// The final item, withheld as the prediction target.
    pub fn target(&self) -> ItemId {
        *self.items.last().expect("sequences are non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Immutable collection of sequences over dense vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub item_tokens: Vec<String>,
    pub account_tokens: Vec<String>,
    pub sequences: Vec<HybridSequence>,
    /// One tag per sequence; everything is `Train` until split.
    pub split: Vec<Split>,
}

impl Dataset {
    /// Item vocabulary size `m`.
    pub fn n_items(&self) -> usize {
        self.item_tokens.len()
    }

    /// Account vocabulary size `n`.
    pub fn n_accounts(&self) -> usize {
        self.account_tokens.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(HybridSequence::len).sum()
    }

    pub fn has_labels(&self) -> bool {
        !self.sequences.is_empty() && self.sequences.iter().all(|s| s.labels.is_some())
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train(&self) -> impl Iterator<Item = &HybridSequence> {
        self.tagged(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &HybridSequence> {
        self.tagged(Split::Test)
    }

    fn tagged(&self, which: Split) -> impl Iterator<Item = &HybridSequence> {
        self.sequences
            .iter()
            .zip(&self.split)
            .filter(move |(_, &s)| s == which)
            .map(|(seq, _)| seq)
    }

    /// Checks vocabulary bounds and per-sequence shape.
    pub fn validate(&self) -> Result<()> {
        if self.split.len() != self.sequences.len() {
            return Err(Error::Contract("split tags do not match sequences".into()));
        }
        for seq in &self.sequences {
            if seq.account.0 >= self.n_accounts() {
                return Err(Error::Index {
                    what: "account",
                    index: seq.account.0,
                    len: self.n_accounts(),
                });
            }
            if let Some(item) = seq.items.iter().find(|i| i.0 >= self.n_items()) {
                return Err(Error::Index {
                    what: "item",
                    index: item.0,
                    len: self.n_items(),
                });
            }
            if seq.len() < MIN_SEQUENCE_LEN || seq.timestamps.len() != seq.len() {
                return Err(Error::Contract("malformed sequence".into()));
            }
            if seq.labels.as_ref().is_some_and(|l| l.len() != seq.len()) {
                return Err(Error::Contract("label count does not match sequence".into()));
            }
        }
        Ok(())
    }

    /// Builds a training-only dataset from dense indices, with tokens `i<j>`
    /// and `a<k>` and timestamps equal to positions.
    pub fn from_index_sequences(n_items: usize, n_accounts: usize, seqs: &[(usize, Vec<usize>)]) -> Result<Dataset> {
        let d = Dataset {
            item_tokens: (0..n_items).map(|j| format!("i{j}")).collect(),
            account_tokens: (0..n_accounts).map(|k| format!("a{k}")).collect(),
            sequences: seqs
                .iter()
                .map(|(k, items)| HybridSequence {
                    account: AccountId(*k),
                    items: items.iter().map(|&j| ItemId(j)).collect(),
                    timestamps: (0..items.len() as i64).collect(),
                    labels: None,
                })
                .collect(),
            split: vec![Split::Train; seqs.len()],
        };
        d.validate()?;
        Ok(d)
    }

    /// Restricts the dataset to the given sequences, keeping vocabularies.
    pub fn subset(&self, keep: &[usize]) -> Dataset {
        Dataset {
            item_tokens: self.item_tokens.clone(),
            account_tokens: self.account_tokens.clone(),
            sequences: keep.iter().map(|&i| self.sequences[i].clone()).collect(),
            split: keep.iter().map(|&i| self.split[i]).collect(),
        }
    }

    /// 64-bit FNV-1a fingerprint of both vocabularies.
    pub fn vocabulary_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.item_tokens {
            feed(t.as_bytes());
            feed(&[0]);
        }
        feed(&[1]);
        for t in &self.account_tokens {
            feed(t.as_bytes());
            feed(&[0]);
        }
        h
    }
}

/// How raw log records are grouped into sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Sequences shorter than this are dropped.
    pub min_len: usize,
    /// Start a new sequence for the same account when consecutive timestamps
    /// differ by more than this. `None` keeps one sequence per account.
    pub session_gap: Option<i64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            min_len: MIN_SEQUENCE_LEN,
            session_gap: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Record {
    account: String,
    item: String,
    timestamp: i64,
    label: Option<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(Error::file(path))?;
    parse_log(BufReader::new(file), path, opts)
}

/// Parses a TSV interaction log. `origin` is used in error messages.
pub fn parse_log(reader: impl Read, origin: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut labelled: Option<bool> = None;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(parse_err(format!(
                "expected 3 or 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty account or item token".into()));
        }
        let timestamp = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|_| parse_err(format!("timestamp {:?} is not an integer", fields[2])))?;
        let label = match fields.get(3) {
            Some(raw) => Some(
                raw.trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("latent user {raw:?} is not a non-negative integer")))?,
            ),
            None => None,
        };
        match labelled {
            None => labelled = Some(label.is_some()),
            Some(l) if l != label.is_some() => {
                return Err(parse_err("latent-user column present on some lines only".into()))
            }
            _ => {}
        }
        records.push(Record {
            account: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
            label,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no records", origin.display())));
    }
    assemble(records, opts)
}

/// Groups records into chronological sequences and assigns dense vocabularies.
///
/// Accounts are indexed in order of first appearance; items in order of first
/// appearance when the retained sequences are read in order. Writing a dataset
/// back out therefore reproduces the same indices.
fn assemble(records: Vec<Record>, opts: &LoadOptions) -> Result<Dataset> {
    let mut account_order: Vec<String> = Vec::new();
    let mut per_account: HashMap<String, Vec<Record>> = HashMap::new();
    for r in records {
        if !per_account.contains_key(&r.account) {
            account_order.push(r.account.clone());
        }
        per_account.entry(r.account.clone()).or_default().push(r);
    }

    let mut raw_sequences: Vec<(String, Vec<Record>)> = Vec::new();
    for account in account_order {
        let mut recs = per_account.remove(&account).expect("grouped above");
        // Stable: equal timestamps keep file order.
        recs.sort_by_key(|r| r.timestamp);
        let mut current: Vec<Record> = Vec::new();
        for r in recs {
            let split_here = match (opts.session_gap, current.last()) {
                (Some(gap), Some(prev)) => r.timestamp - prev.timestamp > gap,
                _ => false,
            };
            if split_here {
                raw_sequences.push((account.clone(), std::mem::take(&mut current)));
            }
            current.push(r);
        }
        if !current.is_empty() {
            raw_sequences.push((account.clone(), current));
        }
    }
    raw_sequences.retain(|(_, recs)| recs.len() >= opts.min_len.max(MIN_SEQUENCE_LEN));
    if raw_sequences.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no sequence has at least {} interactions",
            opts.min_len.max(MIN_SEQUENCE_LEN)
        )));
    }

    let mut account_tokens = Vec::new();
    let mut account_index: HashMap<String, usize> = HashMap::new();
    let mut item_tokens = Vec::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut sequences = Vec::with_capacity(raw_sequences.len());
    for (account, recs) in raw_sequences {
        let a = *account_index.entry(account.clone()).or_insert_with(|| {
            account_tokens.push(account);
            account_tokens.len() - 1
        });
        let mut items = Vec::with_capacity(recs.len());
        let mut timestamps = Vec::with_capacity(recs.len());
        let mut labels = Vec::with_capacity(recs.len());
        for r in recs {
            let i = *item_index.entry(r.item.clone()).or_insert_with(|| {
                item_tokens.push(r.item);
                item_tokens.len() - 1
            });
            items.push(ItemId(i));
            timestamps.push(r.timestamp);
            labels.extend(r.label);
        }
        let labels = (labels.len() == items.len()).then_some(labels);
        sequences.push(HybridSequence {
            account: AccountId(a),
            items,
            timestamps,
            labels,
        });
    }
    let split = vec![Split::Train; sequences.len()];
    Ok(Dataset {
        item_tokens,
        account_tokens,
        sequences,
        split,
    })
}

/// Writes the canonical TSV log.
pub fn write_log(d: &Dataset, mut out: impl Write) -> Result<()> {
    for seq in &d.sequences {
        let account = &d.account_tokens[seq.account.0];
        for (k, item) in seq.items.iter().enumerate() {
            write!(out, "{}\t{}\t{}", account, d.item_tokens[item.0], seq.timestamps[k])?;
            if let Some(labels) = &seq.labels {
                write!(out, "\t{}", labels[k])?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_log(d, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes the `key=value` sidecar describing a dataset.
pub fn write_metadata(d: &Dataset, extra: &[(&str, String)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "m={}", d.n_items())?;
    writeln!(w, "n={}", d.n_accounts())?;
    writeln!(w, "sequences={}", d.sequences.len())?;
    writeln!(w, "interactions={}", d.interaction_count())?;
    writeln!(w, "train_sequences={}", d.indices(Split::Train).len())?;
    writeln!(w, "test_sequences={}", d.indices(Split::Test).len())?;
    writeln!(w, "labelled={}", d.has_labels())?;
    for (k, v) in extra {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `key=value` sidecar into ordered pairs.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: "expected key=value".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Tags a seeded random `train_fraction` of the sequences as training data.
///
/// The permutation is an explicit Fisher–Yates shuffle driven by
/// `ChaCha8Rng::seed_from_u64(seed)`; the first `round(fraction · N)` positions
/// become the training set.
pub fn split_train_test(d: &Dataset, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = d.sequences.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 sequences, have {n}")));
    }
    let perm = seeded_permutation(n, seed);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut split = vec![Split::Test; n];
    for &i in &perm[..n_train] {
        split[i] = Split::Train;
    }
    Ok(Dataset {
        split,
        ..d.clone()
    })
}

pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Timestamp spacing between consecutive synthetic sequences of one account.
pub const SYNTHETIC_SESSION_SPAN: i64 = 1_000_000;
/// Session gap that recovers synthetic sequences on reload.
pub const SYNTHETIC_SESSION_GAP: i64 = 1_000;

/// Generator settings for shared-account data with known latent users.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_accounts: usize,
    pub n_items: usize,
    /// True number of latent users per account.
    pub users_per_account: usize,
    /// Fraction of each co-resident user's pool that a user also draws from.
    pub pool_overlap: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub sequences_per_account: usize,
    /// Approximate number of items in each latent user's pool.
    pub pool_size: usize,
    /// Probability that consecutive interactions come from the same user.
    pub stickiness: f64,
    /// Per-user share of interactions; uniform when `None`.
    pub mixing_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_accounts: 200,
            n_items: 500,
            users_per_account: 2,
            pool_overlap: 0.0,
            seq_len_min: 6,
            seq_len_max: 12,
            sequences_per_account: 6,
            pool_size: 25,
            stickiness: 0.5,
            mixing_weights: None,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Spec(m.to_string()));
        if self.users_per_account == 0 {
            return fail("users_per_account must be at least 1");
        }
        if self.n_items < self.users_per_account {
            return fail("n_items must be at least users_per_account");
        }
        if self.n_accounts == 0 {
            return fail("n_accounts must be positive");
        }
        if !(0.0..=1.0).contains(&self.pool_overlap) {
            return fail("pool_overlap must lie in [0, 1]");
        }
        if self.seq_len_min < MIN_SEQUENCE_LEN || self.seq_len_min > self.seq_len_max {
            return fail("need 2 <= seq_len_min <= seq_len_max");
        }
        if self.sequences_per_account == 0 || self.pool_size == 0 {
            return fail("sequences_per_account and pool_size must be positive");
        }
        if !(0.0..1.0).contains(&self.stickiness) {
            return fail("stickiness must lie in [0, 1)");
        }
        if let Some(w) = &self.mixing_weights {
            if w.len() != self.users_per_account || w.iter().any(|&x| x.is_nan() || x <= 0.0) {
                return fail("mixing_weights needs one positive weight per user");
            }
        }
        Ok(())
    }

    /// Normalized per-user mixing weights.
    pub fn weights(&self) -> Vec<f64> {
        let raw = self
            .mixing_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.users_per_account]);
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Load options that recover the generated sequences from the written log.
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            min_len: MIN_SEQUENCE_LEN,
            session_gap: Some(SYNTHETIC_SESSION_GAP),
        }
    }
}

/// Generates shared-account sequences whose latent users draw from item pools.
///
/// Items are partitioned into pools of roughly `pool_size`; each account gets
/// `users_per_account` distinct pools (one per latent user), dealt from a
/// shuffled deck so that every pool is used. With `pool_overlap = ω` a user
/// also draws from the first `⌈ω·|pool|⌉` items of each co-resident user's pool.
/// The active user follows a sticky chain whose stationary law is the mixing
/// weights; each interaction is a uniform draw from the active user's pool.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alpha = spec.users_per_account;
    let n_pools = (spec.n_items / spec.pool_size).max(alpha);

    let item_perm = {
        let mut p: Vec<usize> = (0..spec.n_items).collect();
        for i in (1..p.len()).rev() {
            let j = rng.random_range(0..=i);
            p.swap(i, j);
        }
        p
    };
    let pools: Vec<Vec<usize>> = (0..n_pools)
        .map(|g| {
            let lo = g * spec.n_items / n_pools;
            let hi = (g + 1) * spec.n_items / n_pools;
            item_perm[lo..hi].to_vec()
        })
        .collect();

    let mut deck: Vec<usize> = Vec::new();
    let mut draw_pool = |rng: &mut ChaCha8Rng, taken: &[usize]| -> usize {
        loop {
            if deck.is_empty() {
                deck = (0..n_pools).collect();
                for i in (1..deck.len()).rev() {
                    let j = rng.random_range(0..=i);
                    deck.swap(i, j);
                }
            }
            // Skip pools this account already owns; they return to a later deck.
            if let Some(pos) = deck.iter().rposition(|g| !taken.contains(g)) {
                return deck.remove(pos);
            }
            deck.clear();
        }
    };

    let weights = spec.weights();
    let mut records = Vec::new();
    for k in 0..spec.n_accounts {
        let mut owned = Vec::with_capacity(alpha);
        for _ in 0..alpha {
            let g = draw_pool(&mut rng, &owned);
            owned.push(g);
        }
        let user_pools: Vec<Vec<usize>> = (0..alpha)
            .map(|h| {
                let mut pool = pools[owned[h]].clone();
                for (other, &g) in owned.iter().enumerate() {
                    if other != h {
                        let take = (spec.pool_overlap * pools[g].len() as f64).ceil() as usize;
                        pool.extend_from_slice(&pools[g][..take.min(pools[g].len())]);
                    }
                }
                pool
            })
            .collect();

        for s in 0..spec.sequences_per_account {
            let len = rng.random_range(spec.seq_len_min..=spec.seq_len_max);
            let base = s as i64 * SYNTHETIC_SESSION_SPAN;
            let mut user = sample_weighted(&mut rng, &weights);
            for t in 0..len {
                if t > 0 && rng.random::<f64>() >= spec.stickiness {
                    user = sample_weighted(&mut rng, &weights);
                }
                let pool = &user_pools[user];
                let item = pool[rng.random_range(0..pool.len())];
                records.push(Record {
                    account: format!("acct{k}"),
                    item: format!("item{item}"),
                    timestamp: base + t as i64,
                    label: Some(user),
                });
            }
        }
    }
    assemble(records, &spec.load_options())
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_log(text.as_bytes(), Path::new("<test>"), &LoadOptions::default())
    }

    #[test]
    fn sorts_each_account_by_timestamp() {
        let d = parse("a\tx\t3\na\ty\t1\na\tz\t2\n").unwrap();
        assert_eq!(d.sequences.len(), 1);
        let s = &d.sequences[0];
        assert_eq!(s.timestamps, vec![1, 2, 3]);
        let tokens: Vec<&str> = s.items.iter().map(|i| d.item_tokens[i.0].as_str()).collect();
        assert_eq!(tokens, ["y", "z", "x"]);
    }

    #[test]
    fn ties_keep_file_order() {
        let d = parse("a\tx\t5\na\ty\t5\na\tz\t1\n").unwrap();
        let tokens: Vec<&str> = d.sequences[0]
            .items
            .iter()
            .map(|i| d.item_tokens[i.0].as_str())
            .collect();
        assert_eq!(tokens, ["z", "x", "y"]);
    }

    #[test]
    fn counts_vocabularies() {
        let d = parse("a\tp\t1\nb\tq\t1\na\tr\t2\nb\ts\t2\nb\tt\t3\n").unwrap();
        assert_eq!(d.n_accounts(), 2);
        assert_eq!(d.n_items(), 5);
        assert_eq!(d.account_tokens, ["a", "b"]);
        d.validate().unwrap();
    }

    #[test]
    fn bad_timestamp_names_line() {
        let err = parse("a\tx\t1\na\ty\tnoon\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse(""), Err(Error::EmptyDataset(_))));
        assert!(matches!(parse("# only a comment\n"), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn short_sequences_dropped() {
        let d = parse("a\tx\t1\nb\ty\t1\nb\tz\t2\n").unwrap();
        assert_eq!(d.sequences.len(), 1);
        assert_eq!(d.account_tokens, ["b"]);
        assert_eq!(d.item_tokens, ["y", "z"]);
    }

    #[test]
    fn strict_filter_drops_under_five() {
        let text = "a\tx\t1\na\ty\t2\na\tz\t3\n";
        let opts = LoadOptions {
            min_len: PAPER_MIN_SEQUENCE_LEN,
            ..LoadOptions::default()
        };
        assert!(matches!(
            parse_log(text.as_bytes(), Path::new("<t>"), &opts),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn session_gap_splits_sequences() {
        let text = "a\tx\t1\na\ty\t2\na\tz\t100\na\tw\t101\n";
        let opts = LoadOptions {
            session_gap: Some(10),
            ..LoadOptions::default()
        };
        let d = parse_log(text.as_bytes(), Path::new("<t>"), &opts).unwrap();
        assert_eq!(d.sequences.len(), 2);
        assert_eq!(d.n_accounts(), 1);
    }

    #[test]
    fn mixed_label_columns_rejected() {
        assert!(matches!(parse("a\tx\t1\t0\na\ty\t2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn split_counts_and_determinism() {
        let text: String = (0..10)
            .flat_map(|a| (0..3).map(move |t| format!("u{a}\ti{}\t{t}\n", a * 3 + t)))
            .collect();
        let d = parse(&text).unwrap();
        let s1 = split_train_test(&d, 0.8, 42).unwrap();
        let s2 = split_train_test(&d, 0.8, 42).unwrap();
        assert_eq!(s1.indices(Split::Train).len(), 8);
        assert_eq!(s1.indices(Split::Test).len(), 2);
        assert_eq!(s1.split, s2.split);
    }

    #[test]
    fn split_errors() {
        let d = parse("a\tx\t1\na\ty\t2\n").unwrap();
        assert!(matches!(split_train_test(&d, 0.8, 1), Err(Error::Split(_))));
        assert!(matches!(split_train_test(&d, 1.0, 1), Err(Error::Split(_))));
    }

    #[test]
    fn synthetic_spec_errors() {
        let spec = SyntheticSpec {
            n_items: 1,
            users_per_account: 2,
            ..SyntheticSpec::default()
        };
        assert!(matches!(synthesize_dataset(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn single_user_labels_are_zero() {
        let spec = SyntheticSpec {
            users_per_account: 1,
            n_accounts: 10,
            n_items: 50,
            ..SyntheticSpec::default()
        };
        let d = synthesize_dataset(&spec).unwrap();
        assert!(d.sequences.iter().all(|s| s.labels.as_ref().unwrap().iter().all(|&l| l == 0)));
    }

    #[test]
    fn disjoint_pools_give_each_item_one_owner() {
        let spec = SyntheticSpec {
            n_accounts: 30,
            n_items: 200,
            ..SyntheticSpec::default()
        };
        let d = synthesize_dataset(&spec).unwrap();
        let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &d.sequences {
            for (item, &label) in s.items.iter().zip(s.labels.as_ref().unwrap()) {
                let prev = *owner.entry((s.account.0, item.0)).or_insert(label);
                assert_eq!(prev, label, "item shared between users of one account");
            }
        }
    }

    fn hundred_sequences() -> Dataset {
        let seqs: Vec<(usize, Vec<usize>)> = (0..100).map(|k| (k % 10, vec![k % 7, (k + 1) % 7])).collect();
        Dataset::from_index_sequences(7, 10, &seqs).unwrap()
    }

    #[test]
    fn split_membership_is_frozen() {
        // Recorded once from the seeded Fisher-Yates shuffle; any change to
        // the shuffle or the RNG stream shows up here.
        let s = split_train_test(&hundred_sequences(), 0.8, 2024).unwrap();
        assert_eq!(
            s.indices(Split::Test),
            [3, 16, 17, 26, 29, 37, 40, 44, 45, 57, 62, 64, 65, 69, 75, 84, 89, 94, 95, 99]
        );
        assert_eq!(s.indices(Split::Train).len(), 80);
    }

    #[test]
    fn mixing_weights_match_label_frequencies() {
        let spec = SyntheticSpec {
            n_accounts: 2000,
            n_items: 500,
            mixing_weights: Some(vec![0.7, 0.3]),
            seed: 7,
            ..SyntheticSpec::default()
        };
        let d = synthesize_dataset(&spec).unwrap();
        let labels: Vec<usize> = d.sequences.iter().flat_map(|s| s.labels.clone().unwrap()).collect();
        assert!(labels.len() >= 100_000, "only {} interactions", labels.len());
        let first = labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64;
        assert!((first - 0.7).abs() < 0.02, "user 0 share {first}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_accounts: 20,
            n_items: 100,
            ..SyntheticSpec::default()
        };
        let (a, b) = (synthesize_dataset(&spec).unwrap(), synthesize_dataset(&spec).unwrap());
        let dump = |d: &Dataset| {
            let mut out = Vec::new();
            write_log(d, &mut out).unwrap();
            out
        };
        assert_eq!(dump(&a), dump(&b));
    }

    proptest::proptest! {
        #[test]
        fn log_round_trips(raw in proptest::collection::vec((0u8..6, 0u8..12, -50i64..50), 1..60)) {
            let text: String = raw.iter().map(|(a, i, t)| format!("acct{a}\titem{i}\t{t}\n")).collect();
            let Ok(first) = parse(&text) else { return Ok(()) };
            let mut written = Vec::new();
            write_log(&first, &mut written).unwrap();
            let second = parse_log(written.as_slice(), Path::new("<rt>"), &LoadOptions::default()).unwrap();
            let mut again = Vec::new();
            write_log(&second, &mut again).unwrap();
            proptest::prop_assert_eq!(&second.sequences, &first.sequences);
            proptest::prop_assert_eq!(written, again);
        }
    }
}

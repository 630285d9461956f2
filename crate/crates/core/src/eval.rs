//! Full-vocabulary ranking metrics, the popularity baseline, and latent-user
//! attribution on labelled data.

use std::fmt;

use crate::data::{Dataset, ItemId};
use crate::error::{Error, Result};
use crate::graph::SequentialGraph;
use crate::numeric::Tensor;

pub const CUTOFFS: [usize; 2] = [5, 20];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub recall_5: f64,
    pub recall_20: f64,
    pub mrr_5: f64,
    pub mrr_20: f64,
    pub n_evaluated: usize,
}

impl MetricReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            recall_5: recall_at_n(ranks, 5)?,
            recall_20: recall_at_n(ranks, 20)?,
            mrr_5: mrr_at_n(ranks, 5)?,
            mrr_20: mrr_at_n(ranks, 20)?,
            n_evaluated: ranks.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "recall@5,recall@20,mrr@5,mrr@20,n_evaluated";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{}",
            self.recall_5, self.recall_20, self.mrr_5, self.mrr_20, self.n_evaluated
        )
    }

    /// Whether `R@5 ≤ R@20`, `MRR@5 ≤ MRR@20` and `MRR@N ≤ R@N` hold.
    pub fn is_consistent(&self) -> bool {
        self.recall_5 <= self.recall_20
            && self.mrr_5 <= self.mrr_20
            && self.mrr_5 <= self.recall_5
            && self.mrr_20 <= self.recall_20
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric     value")?;
        writeln!(f, "recall@5   {:.4}", self.recall_5)?;
        writeln!(f, "recall@20  {:.4}", self.recall_20)?;
        writeln!(f, "mrr@5      {:.4}", self.mrr_5)?;
        writeln!(f, "mrr@20     {:.4}", self.mrr_20)?;
        write!(f, "evaluated  {}", self.n_evaluated)
    }
}

/// 1-based rank of `target` when items are sorted by descending score with
/// ties broken by ascending item id.
pub fn rank_of(scores: &[f64], target: ItemId) -> Result<usize> {
    let t = target.0;
    let st = *scores.get(t).ok_or(Error::Index {
        what: "item",
        index: t,
        len: scores.len(),
    })?;
    if st.is_nan() {
        return Err(Error::Evaluation("target score is NaN".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < t))
        .count();
    Ok(ahead + 1)
}

/// Item ids sorted by descending score, ties by ascending id.
pub fn ranked_list(scores: &[f64]) -> Vec<ItemId> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.into_iter().map(ItemId).collect()
}

/// Rank of the target in each row of a `sequences × items` score matrix.
pub fn ranks(scores: &Tensor, targets: &[ItemId]) -> Result<Vec<usize>> {
    if scores.rows() != targets.len() {
        return Err(Error::shape("ranks", &scores.shape(), &[targets.len()]));
    }
    targets.iter().enumerate().map(|(r, &t)| rank_of(scores.row(r), t)).collect()
}

fn nonempty(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Evaluation("no test sequences to evaluate".into()));
    }
    Ok(())
}

pub fn recall_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    nonempty(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

pub fn mrr_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    nonempty(ranks)?;
    let total: f64 = ranks.iter().filter(|&&r| r <= n).map(|&r| 1.0 / r as f64).sum();
    Ok(total / ranks.len() as f64)
}

/// Interaction count of every item over the training split.
pub fn popularity_counts(d: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; d.n_items()];
    for seq in d.train() {
        for item in &seq.items {
            counts[item.0] += 1;
        }
    }
    counts
}

/// Items by descending training popularity, ties by id; unseen items last.
pub fn popularity_ranking(d: &Dataset) -> Result<Vec<ItemId>> {
    if d.train().next().is_none() {
        return Err(Error::Evaluation("popularity needs a training split".into()));
    }
    let scores: Vec<f64> = popularity_counts(d).into_iter().map(|c| c as f64).collect();
    Ok(ranked_list(&scores))
}

/// Metrics of the popularity ranking on the test split.
pub fn popularity_report(d: &Dataset) -> Result<MetricReport> {
    let order = popularity_ranking(d)?;
    let mut position = vec![0; d.n_items()];
    for (r, item) in order.iter().enumerate() {
        position[item.0] = r + 1;
    }
    let ranks: Vec<usize> = d.test().map(|s| position[s.target().0]).collect();
    MetricReport::from_ranks(&ranks)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub const MAX_ATTRIBUTION_ALPHA: usize = 8;

/// Latent user each interaction is attributed to: `argmax_h` of the
/// correlation between user capsule `(k, h)` and the item, normalized over
/// the account's training items. Returned per sequence and position.
pub fn attribute(users: &Tensor, items: &Tensor, alpha: usize, graph: &SequentialGraph, d: &Dataset) -> Vec<Vec<usize>> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    d.sequences
        .iter()
        .map(|seq| {
            let k = seq.account.0;
            // log Σ_i sqrt(exp(C_u·C_i)) per latent user, stabilized by the max.
            let log_denoms: Vec<f64> = (0..alpha)
                .map(|h| {
                    let u = users.row(k * alpha + h);
                    let half: Vec<f64> =
                        graph.items_of_account(k).iter().map(|&i| 0.5 * dot(u, items.row(i))).collect();
                    let max = half.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if half.is_empty() {
                        0.0
                    } else {
                        max + half.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
                    }
                })
                .collect();
            seq.items
                .iter()
                .map(|item| {
                    (0..alpha)
                        .map(|h| dot(users.row(k * alpha + h), items.row(item.0)) - log_denoms[h])
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (h, s)| if s > b.1 { (h, s) } else { b })
                        .0
                })
                .collect()
        })
        .collect()
}

/// Fraction of labelled interactions whose attributed latent user matches
/// the generating user, under the best relabelling of users per account.
pub fn attribution_accuracy(
    users: &Tensor,
    items: &Tensor,
    alpha: usize,
    graph: &SequentialGraph,
    d: &Dataset,
) -> Result<f64> {
    if !d.has_labels() {
        return Err(Error::Evaluation("attribution needs latent-user labels".into()));
    }
    if alpha > MAX_ATTRIBUTION_ALPHA {
        return Err(Error::Evaluation(format!("attribution supports at most {MAX_ATTRIBUTION_ALPHA} latent users")));
    }
    if users.rows() != d.n_accounts() * alpha || items.rows() != d.n_items() || users.cols() != items.cols() {
        return Err(Error::shape("attribution_accuracy", &users.shape(), &items.shape()));
    }
    let predicted = attribute(users, items, alpha, graph, d);
    let mut confusion = vec![vec![0usize; alpha * alpha]; d.n_accounts()];
    let mut total = 0;
    for (seq, pred) in d.sequences.iter().zip(&predicted) {
        for (&p, &truth) in pred.iter().zip(seq.labels.as_ref().expect("labels checked")) {
            if truth >= alpha {
                return Err(Error::Evaluation(format!("label {truth} exceeds {alpha} latent users")));
            }
            confusion[seq.account.0][p * alpha + truth] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Evaluation("no labelled interactions".into()));
    }
    let perms = permutations(alpha);
    let correct: usize = confusion
        .iter()
        .map(|c| {
            perms
                .iter()
                .map(|perm| (0..alpha).map(|truth| c[perm[truth] * alpha + truth]).sum::<usize>())
                .max()
                .unwrap_or(0)
        })
        .sum();
    Ok(correct as f64 / total as f64)
}

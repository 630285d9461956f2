//! Graph capsule convolution over the sequential graph.
//!
//! Items are projected into capsules by linear attention, accounts by a
//! point-wise convolution that splits each account into `α` latent-user
//! capsules. `L` layers of attentive message passing follow, and the layer
//! outputs are summed. Dynamic routing then merges every account's user
//! capsules into one account capsule.
//!
//! All capsule sets are stored as matrices with one capsule per row. User
//! capsule `(k, h)` is row `k·α + h`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SequentialGraph;
use crate::numeric::{Tape, Tensor, Var};

/// How an account's user capsules are read in the routing step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingVariant {
    /// `squash(Σ_p b_p E_{u_p})`, one coupling coefficient per user capsule.
    Standard,
    /// `Σ_h squash((Σ_p b_p) E_{u_h})`, the double sum taken literally.
    LiteralDoubleSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gc2nConfig {
    /// Base embedding size.
    pub d1: usize,
    /// Capsule size.
    pub d2: usize,
    /// Latent users per account.
    pub alpha: usize,
    /// Propagation layers.
    pub layers: usize,
    /// Routing iterations.
    pub routing_iters: usize,
    pub use_linear_attention: bool,
    pub use_dynamic_routing: bool,
    pub routing_variant: RoutingVariant,
    /// Scale every edge message by `1 / sqrt(deg(src) · deg(dst))`.
    pub normalize_adjacency: bool,
    /// Score correlations on unit-normalized capsules (cosine) instead of raw
    /// inner products.
    pub cosine_correlation: bool,
}

impl Default for Gc2nConfig {
    fn default() -> Self {
        Self {
            d1: 16,
            d2: 16,
            alpha: 2,
            layers: 2,
            routing_iters: 3,
            use_linear_attention: true,
            use_dynamic_routing: true,
            routing_variant: RoutingVariant::Standard,
            normalize_adjacency: true,
            cosine_correlation: true,
        }
    }
}

impl Gc2nConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        if self.d1 == 0 || self.d2 == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        if self.use_dynamic_routing && self.routing_iters == 0 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Flattened edge lists used by message passing.
///
/// One user–item edge exists for every latent user of an account and every
/// item the account interacted with: which latent user produced an
/// interaction is unobserved, so all of them see the account's items.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub n_items: usize,
    pub n_accounts: usize,
    pub alpha: usize,
    /// User capsule row of each user–item edge.
    pub ui_user: Vec<usize>,
    /// Item of each user–item edge.
    pub ui_item: Vec<usize>,
    pub ui_weight: Option<Vec<f64>>,
    /// Predecessor item of each sequential edge.
    pub ii_src: Vec<usize>,
    /// Successor item of each sequential edge.
    pub ii_dst: Vec<usize>,
    pub ii_weight: Option<Vec<f64>>,
    /// Account of each user capsule row.
    pub account_of_user: Vec<usize>,
}

impl EdgeIndex {
    pub fn new(graph: &SequentialGraph, alpha: usize, normalize: bool) -> Self {
        let (m, n) = (graph.n_items(), graph.n_accounts());
        let mut ui_user = Vec::new();
        let mut ui_item = Vec::new();
        let mut ui_weight = Vec::new();
        for k in 0..n {
            let items = graph.items_of_account(k);
            for h in 0..alpha {
                for &j in items {
                    ui_user.push(k * alpha + h);
                    ui_item.push(j);
                    let item_deg = alpha * graph.accounts_of_item(j).len();
                    ui_weight.push(1.0 / ((items.len() * item_deg) as f64).sqrt());
                }
            }
        }
        let mut ii_src = Vec::new();
        let mut ii_dst = Vec::new();
        let mut ii_weight = Vec::new();
        for i in 0..m {
            let preds = graph.predecessors(i);
            for &j in preds {
                ii_src.push(j);
                ii_dst.push(i);
                ii_weight.push(1.0 / ((preds.len() * graph.successors(j).len()) as f64).sqrt());
            }
        }
        Self {
            n_items: m,
            n_accounts: n,
            alpha,
            ui_user,
            ui_item,
            ui_weight: normalize.then_some(ui_weight),
            ii_src,
            ii_dst,
            ii_weight: normalize.then_some(ii_weight),
            account_of_user: (0..n * alpha).map(|u| u / alpha).collect(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_accounts * self.alpha
    }
}

/// Propagation weights of one layer: `W₁ … W₅`, each `d₂ × d₂`.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub w4: Var,
    pub w5: Var,
}

/// Tape handles of every capsule-convolution input.
#[derive(Clone, Debug)]
pub struct Gc2nVars {
    pub item_embeddings: Var,
    pub account_embeddings: Var,
    pub w_l: Var,
    pub b_l: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub layers: Vec<LayerVars>,
    pub w_d: Var,
}

#[derive(Clone, Debug)]
pub struct Gc2nOutput {
    /// Final item embeddings `E_I`, `m × d₂`.
    pub items: Var,
    /// Final latent-user embeddings `E_u`, `n·α × d₂`.
    pub users: Var,
    /// Routed account capsules `E_A`, `n × d₂`.
    pub accounts: Var,
    /// Coupling coefficients after the last routing update, `n × α`.
    pub coupling: Tensor,
    /// Item capsules per layer `0..=L`.
    pub item_layers: Vec<Var>,
    /// User capsules per layer `0..=L`.
    pub user_layers: Vec<Var>,
    /// Correlation weights used by layer `l + 1`, one per user–item edge.
    pub correlations: Vec<Var>,
}

/// `Q · softmax(Kᵀ V / √d₁) · W_l + b_l` with `Q = K = V = E`.
///
/// The attention map is `d₁ × d₁` and normalized row-wise, so the cost is
/// `O(m · d₁²)`.
pub fn project_items(tape: &mut Tape, e: Var, w_l: Var, b_l: Var) -> Result<Var> {
    let d1 = tape.value(e).cols();
    if tape.value(w_l).rows() != d1 {
        return Err(Error::shape("project_items", &tape.value(e).shape(), &tape.value(w_l).shape()));
    }
    let kt = tape.transpose(e)?;
    let kv = tape.matmul(kt, e)?;
    let scaled = tape.scale(kv, 1.0 / (d1 as f64).sqrt())?;
    let map = tape.softmax(scaled, 1)?;
    let attended = tape.matmul(e, map)?;
    let projected = tape.matmul(attended, w_l)?;
    tape.add_row(projected, b_l)
}

/// Item projection without attention: `E · W_l + b_l`.
pub fn project_items_pointwise(tape: &mut Tape, e: Var, w_l: Var, b_l: Var) -> Result<Var> {
    let projected = tape.matmul(e, w_l)?;
    tape.add_row(projected, b_l)
}

/// Point-wise (kernel 1, stride 1) convolution of the account embeddings.
///
/// `w_c` is the `d₁ × α·d₂` kernel; the output is reshaped so that each
/// account contributes `α` consecutive user-capsule rows.
pub fn project_accounts(tape: &mut Tape, e: Var, w_c: Var, b_c: Var, alpha: usize) -> Result<Var> {
    let [n, _] = tape.value(e).shape();
    let width = tape.value(w_c).cols();
    if !width.is_multiple_of(alpha) {
        return Err(Error::shape("project_accounts", &tape.value(w_c).shape(), &[alpha]));
    }
    let projected = tape.matmul(e, w_c)?;
    let biased = tape.add_row(projected, b_c)?;
    tape.reshape(biased, n * alpha, width / alpha)
}

/// Correlation `exp(C_u · C_j) / Σ_{i ∈ N} sqrt(exp(C_u · C_i))` of every
/// user–item edge, normalized over the items of the user's account.
/// With `cosine`, both capsules are unit-normalized before the product.
pub fn correlation_weights(tape: &mut Tape, users: Var, items: Var, edges: &EdgeIndex, cosine: bool) -> Result<Var> {
    let (users, items) = if cosine {
        (tape.l2_normalize(users, 1)?, tape.l2_normalize(items, 1)?)
    } else {
        (users, items)
    };
    let cu = tape.gather_rows(users, &edges.ui_user)?;
    let ci = tape.gather_rows(items, &edges.ui_item)?;
    let scores = tape.row_dot(cu, ci)?;
    tape.correlation_weights(scores, &edges.ui_user, edges.n_users())
}

/// User-side update:
/// `Ĉ_u = Σ_{j ∈ N} (C_j W₁ + a_j C_j W₂) + C_u W₃`.
pub fn propagate_to_users(
    tape: &mut Tape,
    layer: &LayerVars,
    users: Var,
    items: Var,
    corr: Var,
    edges: &EdgeIndex,
) -> Result<Var> {
    let n_users = edges.n_users();
    let w = edges.ui_weight.as_deref();
    let neighbor = tape.gather_rows(items, &edges.ui_item)?;
    let plain = tape.scatter_add_rows(neighbor, &edges.ui_user, n_users, w)?;
    let weighted = tape.mul_col(neighbor, corr)?;
    let attentive = tape.scatter_add_rows(weighted, &edges.ui_user, n_users, w)?;
    let m1 = tape.matmul(plain, layer.w1)?;
    let m2 = tape.matmul(attentive, layer.w2)?;
    let m3 = tape.matmul(users, layer.w3)?;
    let sum = tape.add(m1, m2)?;
    tape.add(sum, m3)
}

/// Item-side update: `Ĉ_j = Σ_{u ∈ N_u(j)} C_u W₄ + Σ_{p ∈ pred(j)} C_p W₅`.
/// No self term.
pub fn propagate_to_items(
    tape: &mut Tape,
    layer: &LayerVars,
    users: Var,
    items: Var,
    edges: &EdgeIndex,
) -> Result<Var> {
    let from_users = tape.gather_rows(users, &edges.ui_user)?;
    let user_sum = tape.scatter_add_rows(from_users, &edges.ui_item, edges.n_items, edges.ui_weight.as_deref())?;
    let from_items = tape.gather_rows(items, &edges.ii_src)?;
    let item_sum = tape.scatter_add_rows(from_items, &edges.ii_dst, edges.n_items, edges.ii_weight.as_deref())?;
    let m4 = tape.matmul(user_sum, layer.w4)?;
    let m5 = tape.matmul(item_sum, layer.w5)?;
    tape.add(m4, m5)
}

/// Layer-wise sum `Σ_{l=0}^{L} Ĉ^{(l)}`.
pub fn aggregate_layers(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let (&first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::Contract("no layers to aggregate".into()))?;
    rest.iter().try_fold(first, |acc, &l| tape.add(acc, l))
}

/// Account-level dynamic routing over contiguous groups of `α` user rows.
///
/// Iteration `j` computes `C̃ = squash(Σ_p b_p E_{u_p})` and then
/// `b ← b + (Σ_h E_{u_h} ⊙ C̃) · W_dᵀ`. The coupling updates stay on the
/// tape, so `W_d` receives gradients. Returns `C̃^{(θ)}` and the final `b`.
pub fn dynamic_routing(
    tape: &mut Tape,
    users: Var,
    initial_coupling: &Tensor,
    w_d: Var,
    iterations: usize,
    variant: RoutingVariant,
    account_of_user: &[usize],
) -> Result<(Var, Tensor)> {
    if iterations == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let [n, alpha] = initial_coupling.shape();
    if tape.value(users).rows() != n * alpha || account_of_user.len() != n * alpha {
        return Err(Error::shape("dynamic_routing", &tape.value(users).shape(), &[n, alpha]));
    }
    let user_sum = tape.scatter_add_rows(users, account_of_user, n, None)?;
    let w_d_t = tape.transpose(w_d)?;
    let mut coupling = tape.constant(initial_coupling.clone());
    let mut capsule = None;
    for _ in 0..iterations {
        let routed = match variant {
            RoutingVariant::Standard => {
                let per_user = tape.reshape(coupling, n * alpha, 1)?;
                let weighted = tape.mul_col(users, per_user)?;
                let total = tape.scatter_add_rows(weighted, account_of_user, n, None)?;
                tape.squash(total, 1)?
            }
            RoutingVariant::LiteralDoubleSum => {
                let b_sum = tape.reduce_sum(coupling, 1)?;
                let per_user = tape.gather_rows(b_sum, account_of_user)?;
                let weighted = tape.mul_col(users, per_user)?;
                let squashed = tape.squash(weighted, 1)?;
                tape.scatter_add_rows(squashed, account_of_user, n, None)?
            }
        };
        let agreement = tape.mul(user_sum, routed)?;
        let delta = tape.matmul(agreement, w_d_t)?;
        coupling = tape.add(coupling, delta)?;
        capsule = Some(routed);
    }
    let final_coupling = tape.value(coupling).clone();
    Ok((capsule.expect("at least one iteration"), final_coupling))
}

/// Account representation without routing: mean of the account's user capsules.
pub fn mean_users(tape: &mut Tape, users: Var, edges: &EdgeIndex) -> Result<Var> {
    let w = vec![1.0 / edges.alpha as f64; edges.n_users()];
    tape.scatter_add_rows(users, &edges.account_of_user, edges.n_accounts, Some(&w))
}

/// Inverted dropout mask (`0` or `1 / (1 − p)`).
pub fn dropout_mask<R: Rng>(rng: &mut R, rows: usize, cols: usize, p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(rows, cols, data).expect("length matches shape")
}

/// Runs projection, `L` propagation layers, aggregation and routing.
///
/// `dropout` applies masks of the given rate to the projected capsules.
pub fn forward<R: Rng>(
    tape: &mut Tape,
    cfg: &Gc2nConfig,
    edges: &EdgeIndex,
    vars: &Gc2nVars,
    initial_coupling: &Tensor,
    dropout: Option<(&mut R, f64)>,
) -> Result<Gc2nOutput> {
    cfg.validate()?;
    if vars.layers.len() != cfg.layers {
        return Err(Error::Config(format!(
            "{} layer weight sets for {} layers",
            vars.layers.len(),
            cfg.layers
        )));
    }
    let mut items = if cfg.use_linear_attention {
        project_items(tape, vars.item_embeddings, vars.w_l, vars.b_l)?
    } else {
        project_items_pointwise(tape, vars.item_embeddings, vars.w_l, vars.b_l)?
    };
    let mut users = project_accounts(tape, vars.account_embeddings, vars.w_c, vars.b_c, cfg.alpha)?;
    if let Some((rng, p)) = dropout {
        if p > 0.0 {
            let [r, c] = tape.value(items).shape();
            let mask = tape.constant(dropout_mask(rng, r, c, p));
            items = tape.mul(items, mask)?;
            let [r, c] = tape.value(users).shape();
            let mask = tape.constant(dropout_mask(rng, r, c, p));
            users = tape.mul(users, mask)?;
        }
    }

    let mut item_layers = vec![items];
    let mut user_layers = vec![users];
    let mut correlations = Vec::with_capacity(cfg.layers);
    for layer in &vars.layers {
        let corr = correlation_weights(tape, users, items, edges, cfg.cosine_correlation)?;
        let next_users = propagate_to_users(tape, layer, users, items, corr, edges)?;
        let next_items = propagate_to_items(tape, layer, users, items, edges)?;
        correlations.push(corr);
        users = next_users;
        items = next_items;
        user_layers.push(users);
        item_layers.push(items);
    }
    let final_items = aggregate_layers(tape, &item_layers)?;
    let final_users = aggregate_layers(tape, &user_layers)?;

    let (accounts, coupling) = if cfg.use_dynamic_routing {
        dynamic_routing(
            tape,
            final_users,
            initial_coupling,
            vars.w_d,
            cfg.routing_iters,
            cfg.routing_variant,
            &edges.account_of_user,
        )?
    } else {
        (mean_users(tape, final_users, edges)?, initial_coupling.clone())
    };

    Ok(Gc2nOutput {
        items: final_items,
        users: final_users,
        accounts,
        coupling,
        item_layers,
        user_layers,
        correlations,
    })
}

/// Row `k` of `E_A` and the item stack of a sequence, read off a forward pass.
pub fn finalize(tape: &Tape, out: &Gc2nOutput, items: &[usize]) -> (Tensor, Tensor) {
    let e_i = tape.value(out.items);
    let rows: Vec<&[f64]> = items.iter().map(|&i| e_i.row(i)).collect();
    let stack = Tensor::from_rows(&rows).expect("rows share a width");
    (tape.value(out.accounts).clone(), stack)
}

/// Correlation weights of one user capsule against a neighbor set, as plain values.
pub fn correlation_row(user: &[f64], neighbors: &[&[f64]]) -> Vec<f64> {
    let scores: Vec<f64> = neighbors
        .iter()
        .map(|c| c.iter().zip(user).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (0.5 * (s - max)).exp()).sum();
    scores.iter().map(|s| (s - 0.5 * max).exp() / denom).collect()
}

#[cfg(test)]
mod tests;

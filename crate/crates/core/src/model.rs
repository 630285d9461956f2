//! Prediction head, losses, the training loop and checkpoints.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::data::{seeded_permutation, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{ranks, MetricReport};
use crate::gc2n::{self, EdgeIndex, Gc2nConfig, Gc2nOutput, Gc2nVars, LayerVars};
use crate::graph::SequentialGraph;
use crate::numeric::{xavier_with, AdamConfig, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::subspace::{self, RefineMode, SubspaceBases};

/// Components switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Point-wise item projection instead of linear attention.
    pub no_linear_attention: bool,
    /// Mean of user capsules instead of dynamic routing.
    pub no_dynamic_routing: bool,
    /// Contrastive weight forced to zero.
    pub no_contrastive: bool,
    /// Skip subspace alignment; sequences are summed normalized item rows.
    pub no_subspace: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_linear_attention: false,
        no_dynamic_routing: false,
        no_contrastive: false,
        no_subspace: false,
    };

    /// The four single-component variants, with their conventional names.
    pub fn variants() -> [(&'static str, Ablation); 4] {
        [
            ("w/oLA", Ablation { no_linear_attention: true, ..Self::FULL }),
            ("w/oDR", Ablation { no_dynamic_routing: true, ..Self::FULL }),
            ("w/oCL", Ablation { no_contrastive: true, ..Self::FULL }),
            ("w/oSA", Ablation { no_subspace: true, ..Self::FULL }),
        ]
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_linear_attention, "w/oLA"),
            (self.no_dynamic_routing, "w/oDR"),
            (self.no_contrastive, "w/oCL"),
            (self.no_subspace, "w/oSA"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// L2 penalty used by default; without it the small synthetic sets are
/// memorized within a few dozen epochs.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-2;

/// How per-anchor contrastive terms are combined within a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveReduction {
    /// Plain sum over every anchor of every sequence.
    Sum,
    /// Sum divided by the number of anchors in the batch.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub epochs: usize,
    /// Contrastive weight `γ`.
    pub gamma: f64,
    /// InfoNCE temperature `β`.
    pub beta: f64,
    /// Affinity smoothing `λ`.
    pub lambda: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub refine: RefineMode,
    pub contrastive_reduction: ContrastiveReduction,
    /// Compare `ê` against unit-length refined rows in the contrastive term.
    /// Without it the loss can be lowered by inflating embedding norms.
    pub normalize_refined: bool,
    /// Epochs between K-means refreshes of the subspace bases.
    pub base_refresh: usize,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            adam: AdamConfig {
                weight_decay: DEFAULT_WEIGHT_DECAY,
                ..AdamConfig::default()
            },
            dropout: 0.1,
            epochs: 200,
            gamma: 0.9,
            beta: 0.8,
            lambda: subspace::DEFAULT_LAMBDA,
            seed: 42,
            ablation: Ablation::FULL,
            refine: RefineMode::Soft,
            contrastive_reduction: ContrastiveReduction::Mean,
            normalize_refined: false,
            base_refresh: 5,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return fail("gamma must be non-negative");
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return fail("beta must be positive");
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 {
            return fail("lambda must be positive");
        }
        if self.base_refresh == 0 {
            return fail("base_refresh must be positive");
        }
        Ok(())
    }

    /// `γ` as used in the loss; zero under the contrastive ablation.
    pub fn effective_gamma(&self) -> f64 {
        if self.ablation.no_contrastive {
            0.0
        } else {
            self.gamma
        }
    }
}

/// Handles of every registered parameter.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub item_embeddings: ParamId,
    pub account_embeddings: ParamId,
    pub w_l: ParamId,
    pub b_l: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    /// `W₁ … W₅` per layer.
    pub layers: Vec<[ParamId; 5]>,
    pub w_d: ParamId,
    pub w_s: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
}

/// Scalar count of the registry for `m` items and `n` accounts.
pub fn parameter_count(cfg: &Gc2nConfig, m: usize, n: usize) -> usize {
    let (d1, d2, a, l) = (cfg.d1, cfg.d2, cfg.alpha, cfg.layers);
    m * d1 + n * d1 // base embeddings
        + d1 * d2 + d2 // item projection
        + d1 * a * d2 + a * d2 // account projection
        + 5 * l * d2 * d2 // propagation
        + a * d2 // routing
        + d2 * d2 // fusion
        + 2 * d2 * m + m // head
}

/// Item distribution `softmax([fused, account] W_f + b_f)` for each row pair.
pub fn predict(fused: &Tensor, accounts: &Tensor, w_f: &Tensor, b_f: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let parts = [tape.constant(fused.clone()), tape.constant(accounts.clone())];
    let x = tape.concat_cols(&parts)?;
    let (w, b) = (tape.constant(w_f.clone()), tape.constant(b_f.clone()));
    let projected = tape.matmul(x, w)?;
    let logits = tape.add_row(projected, b)?;
    let probs = tape.softmax(logits, 1)?;
    Ok(tape.value(probs).clone())
}

/// Values produced by one batch.
#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: Var,
    pub loss_s: Var,
    pub loss_c: Var,
    pub logits: Var,
}

/// Parameter handles placed on a tape.
#[derive(Clone, Debug)]
pub struct Vars {
    pub gc2n: Gc2nVars,
    pub w_s: Var,
    pub w_f: Var,
    pub b_f: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_s: f64,
    pub loss_c: f64,
    pub report: Option<MetricReport>,
}

pub const METRICS_HEADER: &str = "epoch,loss_S,loss_C,recall@5,recall@20,mrr@5,mrr@20";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{:.6},{:.6}", self.epoch, self.loss_s, self.loss_c);
        match &self.report {
            Some(r) => write!(row, ",{:.6},{:.6},{:.6},{:.6}", r.recall_5, r.recall_20, r.mrr_5, r.mrr_20),
            None => write!(row, ",,,,"),
        }
        .expect("writing to a string");
        row
    }
}

pub fn write_metrics_csv(log: &[EpochMetrics], mut out: impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in log {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Model {
    /// Architecture with ablation switches already applied.
    pub gc2n: Gc2nConfig,
    pub train: TrainConfig,
    pub params: ParameterSet,
    pub ids: ParamIds,
    /// Seeded initial coupling coefficients, `n × α`, fixed for the model.
    pub coupling_init: Tensor,
    pub bases: Option<SubspaceBases>,
    pub n_items: usize,
    pub n_accounts: usize,
    /// Vocabulary fingerprint of the dataset the model was built for.
    pub fingerprint: u64,
}

const CHECKPOINT_MAGIC: &str = "lightgc2n-checkpoint v1";

impl Model {
    /// Initializes parameters (Xavier uniform weights, zero biases) for `d`.
    pub fn new(gc2n: Gc2nConfig, train: TrainConfig, d: &Dataset) -> Result<Self> {
        Self::with_sizes(gc2n, train, d.n_items(), d.n_accounts(), d.vocabulary_fingerprint())
    }

    pub fn with_sizes(
        mut gc2n: Gc2nConfig,
        train: TrainConfig,
        n_items: usize,
        n_accounts: usize,
        fingerprint: u64,
    ) -> Result<Self> {
        if train.ablation.no_linear_attention {
            gc2n.use_linear_attention = false;
        }
        if train.ablation.no_dynamic_routing {
            gc2n.use_dynamic_routing = false;
        }
        gc2n.validate()?;
        train.validate()?;
        if n_items == 0 || n_accounts == 0 {
            return Err(Error::EmptyDataset("no items or no accounts".into()));
        }
        let (d1, d2, a) = (gc2n.d1, gc2n.d2, gc2n.alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut params = ParameterSet::new();
        let weight = |params: &mut ParameterSet, rng: &mut ChaCha8Rng, name: String, r: usize, c: usize| {
            params.register(name, xavier_with(rng, r, c, r, c))
        };
        let item_embeddings = weight(&mut params, &mut rng, "E_I".into(), n_items, d1)?;
        let account_embeddings = weight(&mut params, &mut rng, "E_A".into(), n_accounts, d1)?;
        let w_l = weight(&mut params, &mut rng, "W_l".into(), d1, d2)?;
        let b_l = params.register("b_l", Tensor::zeros(1, d2))?;
        let w_c = weight(&mut params, &mut rng, "W_c".into(), d1, a * d2)?;
        let b_c = params.register("b_c", Tensor::zeros(1, a * d2))?;
        let mut layers = Vec::with_capacity(gc2n.layers);
        for l in 1..=gc2n.layers {
            let mut ids = [w_l; 5];
            for (i, id) in ids.iter_mut().enumerate() {
                *id = weight(&mut params, &mut rng, format!("W{}.{l}", i + 1), d2, d2)?;
            }
            layers.push(ids);
        }
        let w_d = weight(&mut params, &mut rng, "W_d".into(), a, d2)?;
        let w_s = weight(&mut params, &mut rng, "W_s".into(), d2, d2)?;
        let w_f = weight(&mut params, &mut rng, "W_f".into(), 2 * d2, n_items)?;
        let b_f = params.register("b_f", Tensor::zeros(1, n_items))?;
        let coupling = (0..n_accounts * a).map(|_| rng.random::<f64>()).collect();
        Ok(Self {
            coupling_init: Tensor::new(n_accounts, a, coupling)?,
            gc2n,
            train,
            params,
            ids: ParamIds {
                item_embeddings,
                account_embeddings,
                w_l,
                b_l,
                w_c,
                b_c,
                layers,
                w_d,
                w_s,
                w_f,
                b_f,
            },
            bases: None,
            n_items,
            n_accounts,
            fingerprint,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn edges(&self, graph: &SequentialGraph) -> Result<EdgeIndex> {
        if graph.n_items() != self.n_items || graph.n_accounts() != self.n_accounts {
            return Err(Error::Compatibility(format!(
                "graph has {} items and {} accounts, model expects {} and {}",
                graph.n_items(),
                graph.n_accounts(),
                self.n_items,
                self.n_accounts
            )));
        }
        Ok(EdgeIndex::new(graph, self.gc2n.alpha, self.gc2n.normalize_adjacency))
    }

    /// Fails unless `d` has the vocabularies the model was built for.
    pub fn check_compatible(&self, d: &Dataset) -> Result<()> {
        if d.vocabulary_fingerprint() != self.fingerprint || d.n_items() != self.n_items {
            return Err(Error::Compatibility(format!(
                "dataset vocabulary {:016x} does not match the model's {:016x}",
                d.vocabulary_fingerprint(),
                self.fingerprint
            )));
        }
        Ok(())
    }

    pub fn vars(&self, tape: &mut Tape) -> Vars {
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let ids = &self.ids;
        let layers = ids
            .layers
            .iter()
            .map(|w| LayerVars {
                w1: p(tape, w[0]),
                w2: p(tape, w[1]),
                w3: p(tape, w[2]),
                w4: p(tape, w[3]),
                w5: p(tape, w[4]),
            })
            .collect();
        Vars {
            gc2n: Gc2nVars {
                item_embeddings: p(tape, ids.item_embeddings),
                account_embeddings: p(tape, ids.account_embeddings),
                w_l: p(tape, ids.w_l),
                b_l: p(tape, ids.b_l),
                w_c: p(tape, ids.w_c),
                b_c: p(tape, ids.b_c),
                layers,
                w_d: p(tape, ids.w_d),
            },
            w_s: p(tape, ids.w_s),
            w_f: p(tape, ids.w_f),
            b_f: p(tape, ids.b_f),
        }
    }

    /// Capsule convolution over the full training graph. `dropout` enables training-mode masks.
    pub fn encode(&self, tape: &mut Tape, edges: &EdgeIndex, dropout: Option<&mut ChaCha8Rng>) -> Result<(Vars, Gc2nOutput)> {
        let vars = self.vars(tape);
        let drop = dropout.map(|rng| (rng, self.train.dropout));
        let out = gc2n::forward(tape, &self.gc2n, edges, &vars.gc2n, &self.coupling_init, drop)?;
        Ok((vars, out))
    }

    /// Sequence fusion, prediction and losses for the sequences `batch` of `d`.
    ///
    /// The batch is processed in ascending index order, so the result does
    /// not depend on the order in which indices are given.
    pub fn head(&self, tape: &mut Tape, vars: &Vars, out: &Gc2nOutput, d: &Dataset, batch: &[usize]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut batch = batch.to_vec();
        batch.sort_unstable();
        let b = batch.len();
        let mut rows = Vec::new();
        let mut segment_of_row = Vec::new();
        let mut segments = Vec::with_capacity(b);
        let mut accounts = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for (s, &i) in batch.iter().enumerate() {
            let seq = d.sequences.get(i).ok_or(Error::Index {
                what: "sequence",
                index: i,
                len: d.sequences.len(),
            })?;
            let start = rows.len();
            rows.extend(seq.history().iter().map(|it| it.0));
            segment_of_row.resize(rows.len(), s);
            segments.push(start..rows.len());
            accounts.push(seq.account.0);
            targets.push(seq.target().0);
        }

        let e = tape.gather_rows(out.items, &rows)?;
        let e_hat = tape.l2_normalize(e, 1)?;
        let (fused, loss_c) = if self.train.ablation.no_subspace {
            let fused = tape.scatter_add_rows(e_hat, &segment_of_row, b, None)?;
            (fused, tape.constant(Tensor::scalar(0.0)))
        } else {
            let bases = self
                .bases
                .as_ref()
                .ok_or_else(|| Error::Contract("subspace bases are not initialized".into()))?;
            let s = subspace::affinity(tape, e, &bases.bases, self.train.lambda)?;
            let z = subspace::refine(tape, e, s, &bases.bases, self.train.refine)?;
            let z_c = if self.train.normalize_refined { tape.l2_normalize(z, 1)? } else { z };
            let mut lc = subspace::contrastive_loss_segments(tape, e_hat, z_c, &segments, self.train.beta)?;
            if self.train.contrastive_reduction == ContrastiveReduction::Mean {
                lc = tape.scale(lc, 1.0 / rows.len() as f64)?;
            }
            (subspace::fuse(tape, e_hat, z, vars.w_s, &segment_of_row, b)?, lc)
        };
        let account_rows = tape.gather_rows(out.accounts, &accounts)?;
        let x = tape.concat_cols(&[fused, account_rows])?;
        let projected = tape.matmul(x, vars.w_f)?;
        let logits = tape.add_row(projected, vars.b_f)?;
        let log_probs = tape.log_softmax_rows(logits)?;
        let picked = tape.pick(log_probs, &targets)?;
        let total = tape.sum_all(picked)?;
        let loss_s = tape.scale(total, -1.0 / b as f64)?;
        let weighted = tape.scale(loss_c, self.train.effective_gamma())?;
        let loss = tape.add(loss_s, weighted)?;
        Ok(Forward { loss, loss_s, loss_c, logits })
    }

    /// Recomputes the subspace bases by K-means over the current item
    /// embeddings of every training history.
    pub fn refresh_bases(&mut self, edges: &EdgeIndex, d: &Dataset, epoch: usize) -> Result<()> {
        let mut tape = Tape::new();
        let (_, out) = self.encode(&mut tape, edges, None)?;
        let items = tape.value(out.items);
        let rows: Vec<&[f64]> = d.train().flat_map(|s| s.history().iter().map(|i| items.row(i.0))).collect();
        let stack = if rows.is_empty() {
            Tensor::zeros(0, self.gc2n.d2)
        } else {
            Tensor::from_rows(&rows)?
        };
        let mut bases = subspace::init_bases(&stack, self.gc2n.alpha, self.train.seed.wrapping_add(epoch as u64))?;
        bases.refresh_epoch = epoch;
        self.bases = Some(bases);
        Ok(())
    }

    /// Scores of every item for each of the given sequences.
    pub fn scores(&self, edges: &EdgeIndex, d: &Dataset, seqs: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (vars, out) = self.encode(&mut tape, edges, None)?;
        let mut sorted = seqs.to_vec();
        sorted.sort_unstable();
        if sorted != seqs {
            return Err(Error::Contract("sequence indices must be ascending".into()));
        }
        let mut rows = Vec::with_capacity(seqs.len() * self.n_items);
        for chunk in seqs.chunks(self.train.batch_size) {
            let f = self.head(&mut tape, &vars, &out, d, chunk)?;
            rows.extend_from_slice(tape.value(f.logits).data());
        }
        Tensor::new(seqs.len(), self.n_items, rows)
    }

    /// Full-ranking metrics on the test split of `d`.
    pub fn evaluate(&self, graph: &SequentialGraph, d: &Dataset) -> Result<MetricReport> {
        self.check_compatible(d)?;
        self.evaluate_with(&self.edges(graph)?, d, &d.indices(Split::Test))
    }

    fn evaluate_with(&self, edges: &EdgeIndex, d: &Dataset, seqs: &[usize]) -> Result<MetricReport> {
        if seqs.is_empty() {
            return Err(Error::Evaluation("no test sequences to evaluate".into()));
        }
        let scores = self.scores(edges, d, seqs)?;
        let targets: Vec<_> = seqs.iter().map(|&i| d.sequences[i].target()).collect();
        MetricReport::from_ranks(&ranks(&scores, &targets)?)
    }

    /// Final item and latent-user embeddings (no dropout).
    pub fn embeddings(&self, graph: &SequentialGraph) -> Result<(Tensor, Tensor)> {
        let edges = self.edges(graph)?;
        let mut tape = Tape::new();
        let (_, out) = self.encode(&mut tape, &edges, None)?;
        Ok((tape.value(out.items).clone(), tape.value(out.users).clone()))
    }

    /// Latent-user attribution accuracy on the labelled sequences of `d`,
    /// scored on the final capsules the correlation weights would see.
    pub fn attribution_accuracy(&self, graph: &SequentialGraph, d: &Dataset) -> Result<f64> {
        self.check_compatible(d)?;
        let (mut items, mut users) = self.embeddings(graph)?;
        if self.gc2n.cosine_correlation {
            items = unit_rows(items);
            users = unit_rows(users);
        }
        crate::eval::attribution_accuracy(&users, &items, self.gc2n.alpha, graph, d)
    }

    /// Trains with Adam for `train.epochs` epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        d: &Dataset,
        graph: &SequentialGraph,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        self.check_compatible(d)?;
        let edges = self.edges(graph)?;
        let train = d.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Split("no training sequences".into()));
        }
        let test = d.indices(Split::Test);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ 0x000d_5090_u64);
        let mut log = Vec::with_capacity(self.train.epochs);
        let mut tape = Tape::new();
        let subspace = !self.train.ablation.no_subspace;
        // Bases exist even after zero epochs so an untrained model evaluates.
        if subspace && (self.bases.is_none() || self.train.epochs > 0) {
            self.refresh_bases(&edges, d, 0)?;
        }
        for epoch in 0..self.train.epochs {
            if subspace && epoch > 0 && epoch % self.train.base_refresh == 0 {
                self.refresh_bases(&edges, d, epoch)?;
            }
            let order = seeded_permutation(train.len(), self.train.seed.wrapping_add(1 + epoch as u64));
            let shuffled: Vec<usize> = order.iter().map(|&p| train[p]).collect();
            let (mut sum_s, mut sum_c, mut batches) = (0.0, 0.0, 0);
            for (bi, batch) in shuffled.chunks(self.train.batch_size).enumerate() {
                let (vars, out) = self.encode(&mut tape, &edges, Some(&mut drop_rng))?;
                let f = self.head(&mut tape, &vars, &out, d, batch)?;
                let loss = tape.value(f.loss).item()?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch: bi, loss });
                }
                sum_s += tape.value(f.loss_s).item()?;
                sum_c += tape.value(f.loss_c).item()?;
                batches += 1;
                tape.backward(f.loss, &mut self.params)?;
                self.params.adam_step(&self.train.adam)?;
                if self.params.iter().any(|p| !p.value.is_finite()) {
                    return Err(Error::Divergence { epoch, batch: bi, loss });
                }
            }
            let last = epoch + 1 == self.train.epochs;
            let due = self.train.eval_every > 0 && (epoch + 1) % self.train.eval_every == 0;
            let report = if !test.is_empty() && (due || last) {
                Some(self.evaluate_with(&edges, d, &test)?)
            } else {
                None
            };
            let metrics = EpochMetrics {
                epoch: epoch + 1,
                loss_s: sum_s / batches as f64,
                loss_c: sum_c / batches as f64,
                report,
            };
            on_epoch(&metrics);
            log.push(metrics);
        }
        Ok(log)
    }

    /// Mean batch loss over the given training sequences, without updating.
    pub fn loss(&self, graph: &SequentialGraph, d: &Dataset, seqs: &[usize]) -> Result<f64> {
        let edges = self.edges(graph)?;
        let mut tape = Tape::new();
        let (vars, out) = self.encode(&mut tape, &edges, None)?;
        let f = self.head(&mut tape, &vars, &out, d, seqs)?;
        tape.value(f.loss).item()
    }

    /// Plain-text checkpoint: header, configuration, coupling, bases, parameters.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::file(path))?);
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "fingerprint {:016x}", self.fingerprint)?;
        writeln!(out, "sizes {} {}", self.n_items, self.n_accounts)?;
        writeln!(out, "steps {}", self.params.steps_taken())?;
        for (k, v) in self.gc2n.pairs().into_iter().chain(self.train.pairs()) {
            writeln!(out, "config {k}={v}")?;
        }
        write_tensor(&mut out, "coupling", &self.coupling_init)?;
        if let Some(b) = &self.bases {
            writeln!(out, "refresh {}", b.refresh_epoch)?;
            write_tensor(&mut out, "bases", &b.bases)?;
        }
        for p in self.params.iter() {
            write_tensor(&mut out, &format!("param {}", p.name), &p.value)?;
        }
        writeln!(out, "end")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let path = path.as_ref();
        let reader = BufReader::new(std::fs::File::open(path).map_err(Error::file(path))?);
        let mut lines = reader.lines();
        let mut next = move || -> Result<String> {
            lines.next().transpose()?.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))
        };
        if next()? != CHECKPOINT_MAGIC {
            return Err(bad("unrecognized header".into()));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::Checkpoint(format!("expected `{key}`, found `{line}`")))
        };
        let fingerprint = u64::from_str_radix(&field(next()?, "fingerprint")?, 16).map_err(|e| bad(e.to_string()))?;
        let sizes = field(next()?, "sizes")?;
        let (m, n) = sizes
            .split_once(' ')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| bad(format!("bad sizes `{sizes}`")))?;
        let steps: u64 = field(next()?, "steps")?.parse().map_err(|_| bad("bad step count".into()))?;

        let mut gc2n = Gc2nConfig::default();
        let mut train = TrainConfig::default();
        let mut line = next()?;
        while let Some(kv) = line.strip_prefix("config ") {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
            let known = gc2n.set(k, v)? || train.set(k, v)?;
            if !known {
                return Err(bad(format!("unknown configuration key `{k}`")));
            }
            line = next()?;
        }
        let mut model = Model::with_sizes(gc2n, train, m, n, fingerprint)?;
        model.coupling_init = read_tensor(&line, "coupling", &mut next)?;
        line = next()?;
        if let Some(epoch) = line.strip_prefix("refresh ") {
            let refresh_epoch = epoch.parse().map_err(|_| bad("bad refresh epoch".into()))?;
            let bases = read_tensor(&next()?, "bases", &mut next)?;
            model.bases = Some(SubspaceBases { bases, refresh_epoch });
            line = next()?;
        }
        let mut seen = 0;
        while line != "end" {
            let name = line
                .strip_prefix("param ")
                .and_then(|r| r.rsplitn(3, ' ').nth(2))
                .ok_or_else(|| bad(format!("expected a parameter, found `{line}`")))?
                .to_string();
            let value = read_tensor(&line, &format!("param {name}"), &mut next)?;
            let id = model.params.find(&name).ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
            if value.shape() != model.params.value(id).shape() {
                return Err(bad(format!("parameter `{name}` has shape {:?}", value.shape())));
            }
            model.params.get_mut(id).value = value;
            seen += 1;
            line = next()?;
        }
        if seen != model.params.len() {
            return Err(bad(format!("{seen} of {} parameters present", model.params.len())));
        }
        if model.coupling_init.shape() != [n, model.gc2n.alpha] {
            return Err(bad("coupling shape does not match the configuration".into()));
        }
        model.params.set_steps_taken(steps);
        Ok(model)
    }
}

fn unit_rows(mut t: Tensor) -> Tensor {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::numeric::NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn write_tensor(out: &mut impl Write, label: &str, t: &Tensor) -> Result<()> {
    writeln!(out, "{label} {} {}", t.rows(), t.cols())?;
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

fn read_tensor(header: &str, label: &str, next: &mut impl FnMut() -> Result<String>) -> Result<Tensor> {
    let bad = |m: String| Error::Checkpoint(m);
    let dims = header
        .strip_prefix(label)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{label}`, found `{header}`")))?;
    let (rows, cols) = dims
        .split_once(' ')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| bad(format!("bad dimensions in `{header}`")))?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = next()?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| bad(format!("bad number `{tok}` in {label}")))?);
        }
        if data.len() - before != cols {
            return Err(bad(format!("row of {label} has the wrong width")));
        }
    }
    Tensor::new(rows, cols, data)
}

#[cfg(test)]
mod tests;

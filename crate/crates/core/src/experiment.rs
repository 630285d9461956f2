//! Experiment drivers shared by the command-line tool and the acceptance
//! suite: data preparation, single training runs, efficiency benches and
//! one-key hyperparameter sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, RunConfig};
use crate::data::{load_dataset, read_metadata, split_train_test, synthesize_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{popularity_report, MetricReport};
use crate::gc2n::project_items;
use crate::graph::{build_graph, SequentialGraph};
use crate::model::{EpochMetrics, Model};
use crate::numeric::{Tape, Tensor};

/// A split dataset together with the graph of its training part.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub graph: SequentialGraph,
}

pub fn prepare(raw: &Dataset, data: &DataConfig) -> Result<Prepared> {
    let dataset = split_train_test(raw, data.train_fraction, data.split_seed)?;
    let graph = build_graph(&dataset)?;
    Ok(Prepared { dataset, graph })
}

/// Generates, splits and indexes the synthetic dataset described by `cfg`.
pub fn synthetic(cfg: &RunConfig) -> Result<Prepared> {
    prepare(&synthesize_dataset(&cfg.synthetic)?, &cfg.data)
}

/// Sidecar metadata path written next to a dataset file.
pub fn metadata_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

/// Loads a TSV log. Without an explicit `session_gap`, the gap recorded in
/// the sidecar (if any) is used so generated files reload as generated.
pub fn load(path: &Path, data: &DataConfig) -> Result<Dataset> {
    let mut opts = data.load_options();
    let meta = metadata_path(path);
    if opts.session_gap.is_none() && meta.exists() {
        if let Some((_, g)) = read_metadata(&meta)?.into_iter().find(|(k, _)| k == "session_gap") {
            opts.session_gap = Some(
                g.parse()
                    .map_err(|_| Error::Config(format!("{}: bad session_gap `{g}`", meta.display())))?,
            );
        }
    }
    load_dataset(path, &opts)
}

/// Number of distinct latent-user labels, when the dataset carries them.
pub fn labelled_users(d: &Dataset) -> Option<usize> {
    if !d.has_labels() {
        return None;
    }
    d.sequences.iter().flat_map(|s| s.labels.iter().flatten()).max().map(|&l| l + 1)
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub parameters: usize,
    pub report: MetricReport,
    pub popularity: MetricReport,
    /// Only for labelled data whose user count fits the model's `α`.
    pub attribution: Option<f64>,
    pub seconds: f64,
    pub log: Vec<EpochMetrics>,
}

/// Attribution accuracy when the labels allow it.
pub fn attribution(model: &Model, p: &Prepared) -> Result<Option<f64>> {
    match labelled_users(&p.dataset) {
        Some(users) if users <= model.gc2n.alpha => model.attribution_accuracy(&p.graph, &p.dataset).map(Some),
        _ => Ok(None),
    }
}

/// Builds a model for `cfg`, trains it on `p` and evaluates the result.
pub fn train(cfg: &RunConfig, p: &Prepared, on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Model, RunSummary)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = Model::new(cfg.gc2n.clone(), cfg.train.clone(), &p.dataset)?;
    let log = model.fit(&p.dataset, &p.graph, on_epoch)?;
    let seconds = start.elapsed().as_secs_f64();
    let report = match log.last().and_then(|m| m.report) {
        Some(r) => r,
        None => model.evaluate(&p.graph, &p.dataset)?,
    };
    let summary = RunSummary {
        parameters: model.parameter_count(),
        report,
        popularity: popularity_report(&p.dataset)?,
        attribution: attribution(&model, p)?,
        seconds,
        log,
    };
    Ok((model, summary))
}

/// Parameter scalars grouped by the component that owns them.
pub fn parameters_by_module(model: &Model) -> Vec<(&'static str, usize)> {
    type Owns = fn(&str) -> bool;
    let groups: [(&str, Owns); 7] = [
        ("embeddings", |n| n == "E_I" || n == "E_A"),
        ("item_projection", |n| n == "W_l" || n == "b_l"),
        ("account_projection", |n| n == "W_c" || n == "b_c"),
        ("propagation", |n| n.contains('.')),
        ("routing", |n| n == "W_d"),
        ("fusion", |n| n == "W_s"),
        ("head", |n| n == "W_f" || n == "b_f"),
    ];
    groups
        .iter()
        .map(|(name, owns)| {
            let total = model.params.iter().filter(|p| owns(&p.name)).map(|p| p.value.len()).sum();
            (*name, total)
        })
        .collect()
}

/// Least-squares line `y = a + b x` and its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

impl LinearFit {
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::Contract("a linear fit needs at least two paired points".into()));
        }
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        if sxx == 0.0 {
            return Err(Error::Contract("a linear fit needs distinct x values".into()));
        }
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
        Ok(Self { intercept, slope, r_squared })
    }

    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }

    /// Largest `|y - fit(x)| / fit(x)` over the points.
    pub fn max_relative_deviation(&self, xs: &[f64], ys: &[f64]) -> f64 {
        xs.iter().zip(ys).map(|(&x, &y)| (y - self.at(x)).abs() / self.at(x).abs()).fold(0.0, f64::max)
    }
}

/// Training-set fractions timed by [`bench`].
pub const BENCH_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
/// Item counts timed for the linear-attention projection.
pub const BENCH_ITEM_COUNTS: [usize; 3] = [1000, 2000, 4000];

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub parameters: usize,
    pub by_module: Vec<(&'static str, usize)>,
    /// `(fraction, training sequences, seconds per epoch)`.
    pub epoch_times: Vec<(f64, usize, f64)>,
    pub epoch_fit: LinearFit,
    /// `(m, seconds per projection)`.
    pub attention_times: Vec<(usize, f64)>,
    pub attention_fit: LinearFit,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |t: String| writeln!(s, "{t}").expect("writing to a string");
        line(format!("parameters\t{}", self.parameters));
        for (name, count) in &self.by_module {
            line(format!("parameters.{name}\t{count}"));
        }
        line("fraction\ttrain_sequences\tseconds_per_epoch".into());
        for (f, n, t) in &self.epoch_times {
            line(format!("{f}\t{n}\t{t:.6}"));
        }
        line(format!("epoch_fit\tslope={:.6e}\tr2={:.4}", self.epoch_fit.slope, self.epoch_fit.r_squared));
        line("items\tseconds_per_projection".into());
        for (m, t) in &self.attention_times {
            line(format!("{m}\t{t:.6e}"));
        }
        let xs: Vec<f64> = self.attention_times.iter().map(|(m, _)| *m as f64).collect();
        let ys: Vec<f64> = self.attention_times.iter().map(|(_, t)| *t).collect();
        line(format!(
            "attention_fit\tslope={:.6e}\tmax_deviation={:.4}",
            self.attention_fit.slope,
            self.attention_fit.max_relative_deviation(&xs, &ys)
        ));
        s
    }
}

/// Median of `reps` timings of `f`, in seconds.
fn median_time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Seconds per epoch when training on growing fractions of the training
/// split, plus the item-projection cost as the vocabulary grows.
pub fn bench(cfg: &RunConfig, p: &Prepared, epochs_per_point: usize) -> Result<BenchReport> {
    cfg.validate()?;
    if epochs_per_point == 0 {
        return Err(Error::Config("bench needs at least one epoch per point".into()));
    }
    let full = Model::new(cfg.gc2n.clone(), cfg.train.clone(), &p.dataset)?;
    let train = p.dataset.indices(Split::Train);
    let order = crate::data::seeded_permutation(train.len(), cfg.data.split_seed);
    let mut epoch_times = Vec::new();
    for &fraction in &BENCH_FRACTIONS {
        let n = ((fraction * train.len() as f64).round() as usize).max(1);
        let keep: Vec<usize> = order[..n].iter().map(|&i| train[i]).collect();
        let subset = p.dataset.subset(&keep);
        let graph = build_graph(&subset)?;
        let train_cfg = crate::model::TrainConfig {
            epochs: 1,
            eval_every: 0,
            ..cfg.train.clone()
        };
        let mut model = Model::new(cfg.gc2n.clone(), train_cfg, &subset)?;
        // One untimed epoch settles allocations and the first base refresh.
        model.fit(&subset, &graph, |_| {})?;
        let t = median_time(epochs_per_point, || model.fit(&subset, &graph, |_| {}).map(|_| ()))?;
        epoch_times.push((fraction, n, t));
    }
    let xs: Vec<f64> = epoch_times.iter().map(|e| e.0).collect();
    let ys: Vec<f64> = epoch_times.iter().map(|e| e.2).collect();
    let epoch_fit = LinearFit::new(&xs, &ys)?;

    let attention_times = attention_timings(cfg.gc2n.d1, cfg.gc2n.d2, &BENCH_ITEM_COUNTS, 7)?;
    let xs: Vec<f64> = attention_times.iter().map(|a| a.0 as f64).collect();
    let ys: Vec<f64> = attention_times.iter().map(|a| a.1).collect();
    Ok(BenchReport {
        parameters: full.parameter_count(),
        by_module: parameters_by_module(&full),
        epoch_times,
        epoch_fit,
        attention_fit: LinearFit::new(&xs, &ys)?,
        attention_times,
    })
}

/// Median seconds per linear-attention projection of `m × d1` embeddings.
pub fn attention_timings(d1: usize, d2: usize, sizes: &[usize], reps: usize) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut random = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(r, c, data)
    };
    let w = random(d1, d2)?;
    let mut out = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let e = random(m, d1)?;
        // Repeat inside each timing so small vocabularies are not timer noise.
        let inner = (40_000 / m).max(1);
        let t = median_time(reps, || {
            for _ in 0..inner {
                let mut tape = Tape::new();
                let (ev, wv) = (tape.constant(e.clone()), tape.constant(w.clone()));
                let bv = tape.constant(Tensor::zeros(1, d2));
                project_items(&mut tape, ev, wv, bv)?;
            }
            Ok(())
        })?;
        out.push((m, t / inner as f64));
    }
    Ok(out)
}

/// One swept key with the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

/// Base settings plus any number of one-key sweeps.
///
/// ```text
/// epochs = 50
/// sweep alpha = 1,2,3,4,5
/// sweep gamma = 0.5,0.7,0.9
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid {
    pub base: Vec<(String, String)>,
    pub sweeps: Vec<Sweep>,
}

impl Grid {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut grid = Grid::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |m: &str| Error::Config(format!("{origin}:{}: {m}", n + 1));
            let (lhs, rhs) = line.split_once('=').ok_or_else(|| at("expected key=value"))?;
            let (lhs, rhs) = (lhs.trim(), rhs.trim());
            // Validate keys and values against a scratch configuration.
            let mut probe = RunConfig::default();
            if let Some(key) = lhs.strip_prefix("sweep ") {
                let key = key.trim();
                let values: Vec<String> = rhs.split(',').map(|v| v.trim().to_string()).collect();
                if values.iter().any(String::is_empty) {
                    return Err(at("empty sweep value"));
                }
                for v in &values {
                    probe.set(key, v).map_err(|e| at(&e.to_string()))?;
                }
                grid.sweeps.push(Sweep { key: key.to_string(), values });
            } else {
                probe.set(lhs, rhs).map_err(|e| at(&e.to_string()))?;
                grid.base.push((lhs.to_string(), rhs.to_string()));
            }
        }
        if grid.sweeps.is_empty() {
            return Err(Error::Config(format!("{origin}: no `sweep` lines")));
        }
        Ok(grid)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// `cfg` with the base settings applied.
    pub fn base_config(&self, cfg: &RunConfig) -> Result<RunConfig> {
        let mut out = cfg.clone();
        for (k, v) in &self.base {
            out.set(k, v)?;
        }
        Ok(out)
    }

    /// Every `(sweep index, value index, configuration)` point.
    pub fn points(&self, cfg: &RunConfig) -> Result<Vec<(usize, usize, RunConfig)>> {
        let base = self.base_config(cfg)?;
        let mut out = Vec::new();
        for (s, sweep) in self.sweeps.iter().enumerate() {
            for (v, value) in sweep.values.iter().enumerate() {
                let mut point = base.clone();
                point.set(&sweep.key, value)?;
                point.validate()?;
                out.push((s, v, point));
            }
        }
        Ok(out)
    }
}

/// One trained grid point.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub key: String,
    pub value: String,
    pub summary: RunSummary,
}

pub const SWEEP_HEADER: &str = "key,value,parameters,recall@5,recall@20,mrr@5,mrr@20,attribution,seconds";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let s = &self.summary;
        let r = &s.report;
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.3}",
            self.key,
            self.value,
            s.parameters,
            r.recall_5,
            r.recall_20,
            r.mrr_5,
            r.mrr_20,
            s.attribution.map_or(String::new(), |a| format!("{a:.6}")),
            s.seconds
        )
    }
}

/// Trains every grid point, spreading points over `cfg.data.threads`
/// workers. Each point is seeded independently, so results do not depend on
/// the thread count. Rows come back grouped by sweep, in grid order.
pub fn run_sweeps(grid: &Grid, cfg: &RunConfig, p: &Prepared) -> Result<Vec<Vec<SweepRow>>> {
    let points = grid.points(cfg)?;
    let threads = cfg.data.threads.clamp(1, points.len().max(1));
    let run_point = |(s, v, point): &(usize, usize, RunConfig)| -> Result<SweepRow> {
        log::info!("sweep {}={}", grid.sweeps[*s].key, grid.sweeps[*s].values[*v]);
        let (_, summary) = train(point, p, |_| {})?;
        Ok(SweepRow {
            key: grid.sweeps[*s].key.clone(),
            value: grid.sweeps[*s].values[*v].clone(),
            summary,
        })
    };
    let rows: Vec<Result<SweepRow>> = if threads == 1 {
        points.iter().map(run_point).collect()
    } else {
        let chunks: Vec<Vec<usize>> = (0..threads).map(|t| (t..points.len()).step_by(threads).collect()).collect();
        let mut slots: Vec<Option<Result<SweepRow>>> = (0..points.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|idx| {
                    let (points, run_point) = (&points, &run_point);
                    scope.spawn(move || idx.iter().map(|&i| (i, run_point(&points[i]))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("sweep worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every point assigned")).collect()
    };
    let mut grouped: Vec<Vec<SweepRow>> = vec![Vec::new(); grid.sweeps.len()];
    for ((s, _, _), row) in points.iter().zip(rows) {
        grouped[*s].push(row?);
    }
    Ok(grouped)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{SWEEP_HEADER}").expect("writing to a string");
    for r in rows {
        writeln!(s, "{}", r.csv_row()).expect("writing to a string");
    }
    s
}

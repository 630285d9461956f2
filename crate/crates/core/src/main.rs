// Index loops mirror the math in numeric kernels and oracles.
#![allow(clippy::needless_range_loop)]

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use lightgc2n::config::{RunConfig, KEYS};
use lightgc2n::data::{write_dataset, write_metadata, SYNTHETIC_SESSION_GAP};
use lightgc2n::eval::{popularity_report, MetricReport};
use lightgc2n::experiment::{self, Grid, Prepared, RunSummary};
use lightgc2n::model::{write_metrics_csv, Model};
use lightgc2n::subspace::{affinity_table, dominant};
use lightgc2n::{config::KeyValues, Error};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// One `--flag VALUE` per configuration key; booleans may omit the value.
fn key_args() -> Vec<Arg> {
    let defaults = RunConfig::default().pairs();
    KEYS.iter()
        .map(|&(key, help)| {
            let arg = Arg::new(key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(help)
                .help_heading("Configuration");
            let arg = if key != flag_name(key) { arg.alias(key) } else { arg };
            let is_bool = defaults.iter().any(|(k, v)| *k == key && (v == "true" || v == "false"));
            if is_bool {
                arg.num_args(0..=1).default_missing_value("true")
            } else {
                arg
            }
        })
        .collect()
}

fn with_common(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key=value file applied before command-line flags"),
    )
    .args(key_args())
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name(if name == "out" { "DIR" } else { "FILE" })
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    let data = path_arg("data", "TSV interaction log (default: synthetic data from the configuration)");
    let out = path_arg("out", "output directory").required(true);
    let checkpoint = path_arg("checkpoint", "model checkpoint").required(true);
    Command::new("lightgc2n")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Shared-account sequential recommendation with graph capsule networks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_common(
            Command::new("generate").about("Write a synthetic shared-account dataset").arg(out.clone()),
        ))
        .subcommand(with_common(
            Command::new("train")
                .about("Train a model and write a checkpoint and metrics log")
                .arg(data.clone())
                .arg(out.clone())
                .arg(
                    Arg::new("ablate")
                        .long("ablate")
                        .value_name("PARTS")
                        .value_delimiter(',')
                        .value_parser(["la", "dr", "cl", "sa"])
                        .help("components to remove: la, dr, cl, sa (comma separated)"),
                ),
        ))
        .subcommand(with_common(
            Command::new("evaluate")
                .about("Full-ranking metrics of a checkpoint on the test split")
                .arg(checkpoint.clone())
                .arg(data.clone())
                .arg(path_arg("out", "also write the report here"))
                .arg(
                    Arg::new("baseline")
                        .long("baseline")
                        .action(ArgAction::SetTrue)
                        .help("also report the popularity ranking"),
                ),
        ))
        .subcommand(with_common(
            Command::new("inspect")
                .about("Dump correlation weights, coupling coefficients or subspace affinities as TSV")
                .arg(checkpoint)
                .arg(data.clone())
                .arg(path_arg("out", "write <what>.tsv here instead of stdout"))
                .arg(
                    Arg::new("what")
                        .long("what")
                        .required(true)
                        .value_parser(["correlation", "coupling", "affinity"]),
                ),
        ))
        .subcommand(with_common(
            Command::new("bench")
                .about("Parameter counts, epoch time against data fraction, attention scaling")
                .arg(data.clone())
                .arg(out.clone())
                .arg(
                    Arg::new("epochs-per-point")
                        .long("epochs-per-point")
                        .value_name("N")
                        .default_value("3")
                        .value_parser(clap::value_parser!(usize))
                        .help("timed epochs per data fraction (median reported)"),
                ),
        ))
        .subcommand(with_common(
            Command::new("sweep")
                .about("Train every point of a hyperparameter grid and write one CSV per swept key")
                .arg(path_arg("grid", "grid file: base key=value lines plus `sweep key = v1,v2,...`").required(true))
                .arg(data)
                .arg(out),
        ))
}

/// Defaults, then `--config`, then individual flags.
fn effective_config(m: &ArgMatches) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if let Some(parts) = m.try_get_many::<String>("ablate").ok().flatten() {
        for p in parts {
            let key = match p.as_str() {
                "la" => "no_linear_attention",
                "dr" => "no_dynamic_routing",
                "cl" => "no_contrastive",
                _ => "no_subspace",
            };
            cfg.set(key, "true")?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Collects artifacts written to an output directory for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Error> {
        let path = self.path(name);
        std::fs::write(path, contents)?;
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<(), Error> {
        self.write("config.txt", &cfg.to_text())?;
        let mut manifest = format!(
            "tool=lightgc2n {}\ncommand={command}\nargs={}\n",
            env!("CARGO_PKG_VERSION"),
            std::env::args().skip(1).collect::<Vec<_>>().join(" ")
        );
        for f in &self.files {
            let bytes = std::fs::metadata(self.dir.join(f))?.len();
            manifest.push_str(&format!("artifact={f} bytes={bytes}\n"));
        }
        std::fs::write(self.dir.join("manifest.txt"), manifest)?;
        Ok(())
    }
}

fn dataset(m: &ArgMatches, cfg: &RunConfig) -> Result<Prepared, Error> {
    match m.get_one::<PathBuf>("data") {
        Some(path) => experiment::prepare(&experiment::load(path, &cfg.data)?, &cfg.data),
        None => experiment::synthetic(cfg),
    }
}

fn report_text(summary: Option<&RunSummary>, report: &MetricReport, popularity: Option<&MetricReport>) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
    for (k, v) in [
        ("recall@5", report.recall_5),
        ("recall@20", report.recall_20),
        ("mrr@5", report.mrr_5),
        ("mrr@20", report.mrr_20),
    ] {
        put(k, format!("{v:.6}"));
    }
    put("evaluated", report.n_evaluated.to_string());
    if let Some(p) = popularity {
        put("popularity.recall@5", format!("{:.6}", p.recall_5));
        put("popularity.recall@20", format!("{:.6}", p.recall_20));
        put("popularity.mrr@5", format!("{:.6}", p.mrr_5));
        put("popularity.mrr@20", format!("{:.6}", p.mrr_20));
    }
    if let Some(sum) = summary {
        put("parameters", sum.parameters.to_string());
        put("seconds", format!("{:.3}", sum.seconds));
        if let Some(a) = sum.attribution {
            put("attribution", format!("{a:.6}"));
        }
    }
    s
}

fn cmd_generate(m: &ArgMatches, cfg: &RunConfig) -> Result<(), Error> {
    let d = lightgc2n::data::synthesize_dataset(&cfg.synthetic)?;
    let mut out = Outputs::create(m.get_one::<PathBuf>("out").expect("required"))?;
    write_dataset(&d, out.path("interactions.tsv"))?;
    let mut extra: Vec<(&str, String)> = vec![("session_gap", SYNTHETIC_SESSION_GAP.to_string())];
    extra.extend(cfg.synthetic.pairs());
    write_metadata(&d, &extra, out.path("interactions.tsv.meta"))?;
    eprintln!(
        "wrote {} sequences ({} interactions, m={}, n={})",
        d.sequences.len(),
        d.interaction_count(),
        d.n_items(),
        d.n_accounts()
    );
    out.finish("generate", cfg)
}

fn cmd_train(m: &ArgMatches, cfg: &RunConfig) -> Result<(), Error> {
    let p = dataset(m, cfg)?;
    let mut out = Outputs::create(m.get_one::<PathBuf>("out").expect("required"))?;
    eprintln!("{}", lightgc2n::model::METRICS_HEADER);
    let (model, summary) = experiment::train(cfg, &p, |e| eprintln!("{}", e.csv_row()))?;
    model.save(out.path("model.ckpt"))?;
    let mut csv = Vec::new();
    write_metrics_csv(&summary.log, &mut csv)?;
    out.write("metrics.csv", &String::from_utf8(csv).expect("ascii csv"))?;
    let report = report_text(Some(&summary), &summary.report, Some(&summary.popularity));
    print!("{report}");
    out.write("report.txt", &report)?;
    out.finish("train", cfg)
}

fn load_checkpoint(m: &ArgMatches, cfg: &RunConfig) -> Result<(Model, Prepared), Error> {
    let model = Model::load(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let p = dataset(m, cfg)?;
    model.check_compatible(&p.dataset)?;
    Ok((model, p))
}

fn cmd_evaluate(m: &ArgMatches, cfg: &RunConfig) -> Result<(), Error> {
    let (model, p) = load_checkpoint(m, cfg)?;
    let report = model.evaluate(&p.graph, &p.dataset)?;
    let popularity = if m.get_flag("baseline") { Some(popularity_report(&p.dataset)?) } else { None };
    let mut text = report_text(None, &report, popularity.as_ref());
    if let Some(a) = experiment::attribution(&model, &p)? {
        text.push_str(&format!("attribution={a:.6}\n"));
    }
    print!("{text}");
    if let Some(dir) = m.get_one::<PathBuf>("out") {
        let mut out = Outputs::create(dir)?;
        out.write("report.txt", &text)?;
        out.finish("evaluate", cfg)?;
    }
    Ok(())
}

fn cmd_inspect(m: &ArgMatches, cfg: &RunConfig) -> Result<(), Error> {
    let (model, p) = load_checkpoint(m, cfg)?;
    let d = &p.dataset;
    let edges = model.edges(&p.graph)?;
    let mut tape = lightgc2n::numeric::Tape::new();
    let (_, enc) = model.encode(&mut tape, &edges, None)?;
    let alpha = model.gc2n.alpha;
    let what = m.get_one::<String>("what").expect("required").as_str();
    let mut tsv = String::new();
    match what {
        "correlation" => {
            tsv.push_str("layer\taccount\tuser\titem\tweight\n");
            for (l, &w) in enc.correlations.iter().enumerate() {
                let w = tape.value(w);
                for (e, (&u, &i)) in edges.ui_user.iter().zip(&edges.ui_item).enumerate() {
                    let line = format!(
                        "{}\t{}\t{}\t{}\t{:.9}\n",
                        l + 1,
                        d.account_tokens[u / alpha],
                        u % alpha,
                        d.item_tokens[i],
                        w.data()[e]
                    );
                    tsv.push_str(&line);
                }
            }
        }
        "coupling" => {
            tsv.push_str("account\tuser\tcoupling\n");
            for k in 0..d.n_accounts() {
                for h in 0..alpha {
                    tsv.push_str(&format!("{}\t{h}\t{:.9}\n", d.account_tokens[k], enc.coupling.get(k, h)));
                }
            }
        }
        _ => {
            let bases = model
                .bases
                .as_ref()
                .ok_or_else(|| Error::Contract("this model has no subspace bases".into()))?;
            let s = affinity_table(tape.value(enc.items), &bases.bases, model.train.lambda)?;
            let dom = dominant(&s);
            let cols: Vec<String> = (0..alpha).map(|j| format!("s{j}")).collect();
            tsv.push_str(&format!("item\t{}\tdominant\n", cols.join("\t")));
            for i in 0..d.n_items() {
                let row: Vec<String> = s.row(i).iter().map(|v| format!("{v:.9}")).collect();
                tsv.push_str(&format!("{}\t{}\t{}\n", d.item_tokens[i], row.join("\t"), dom[i]));
            }
        }
    }
    match m.get_one::<PathBuf>("out") {
        Some(dir) => {
            let mut out = Outputs::create(dir)?;
            out.write(&format!("{what}.tsv"), &tsv)?;
            out.finish("inspect", cfg)
        }
        None => {
            std::io::stdout().write_all(tsv.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_bench(m: &ArgMatches, cfg: &RunConfig) -> Result<(), Error> {
    let p = dataset(m, cfg)?;
    let report = experiment::bench(cfg, &p, *m.get_one::<usize>("epochs-per-point").expect("defaulted"))?;
    let text = report.to_text();
    print!("{text}");
    let mut out = Outputs::create(m.get_one::<PathBuf>("out").expect("required"))?;
    out.write("bench.tsv", &text)?;
    out.finish("bench", cfg)
}

fn cmd_sweep(m: &ArgMatches, cfg: &RunConfig) -> Result<(), Error> {
    let grid = Grid::from_file(m.get_one::<PathBuf>("grid").expect("required"))?;
    let p = dataset(m, cfg)?;
    let groups = experiment::run_sweeps(&grid, cfg, &p)?;
    let mut out = Outputs::create(m.get_one::<PathBuf>("out").expect("required"))?;
    let mut used: Vec<String> = Vec::new();
    for (sweep, rows) in grid.sweeps.iter().zip(&groups) {
        let mut name = format!("sweep_{}.csv", sweep.key);
        let mut n = 2;
        while used.contains(&name) {
            name = format!("sweep_{}_{n}.csv", sweep.key);
            n += 1;
        }
        used.push(name.clone());
        let csv = experiment::sweep_csv(rows);
        print!("{csv}");
        out.write(&name, &csv)?;
    }
    out.finish("sweep", &grid.base_config(cfg)?)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let result = effective_config(sub).and_then(|cfg| {
        // The effective configuration fully determines the run.
        for line in cfg.to_text().lines() {
            log::info!("config {line}");
        }
        match name {
            "generate" => cmd_generate(sub, &cfg),
            "train" => cmd_train(sub, &cfg),
            "evaluate" => cmd_evaluate(sub, &cfg),
            "inspect" => cmd_inspect(sub, &cfg),
            "bench" => cmd_bench(sub, &cfg),
            "sweep" => cmd_sweep(sub, &cfg),
            _ => unreachable!("clap only accepts known subcommands"),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

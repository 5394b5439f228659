use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dagrank::autodiff::checkpoint;
use dagrank::cascade::Evaluator;
use dagrank::config::{Precision, RunConfig, TrainMode};
use dagrank::data::{generate_synthetic, Dataset, RerankRequest};
use dagrank::decode::Strategy;
use dagrank::metrics::{write_csv, MetricRow};
use dagrank::model::{DecoderKind, Generator, CHECKPOINT_PREFIX};
use dagrank::oracle::{check_marginals, slate_mass, GradInstance};
use dagrank::train::{
    decode_report, evaluator_auc, mean_utility, random_recall, sample_diversity, sweep_lambda, train_evaluator,
    train_generator, write_log_csv, write_sweep_csv, EpochLog,
};
use dagrank::Real;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dagrank", version, about = "Graph-structured slate reranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic logged dataset.
    GenData(Overrides),
    /// Train the evaluator or a generator (`--mode`).
    Train(Overrides),
    /// Decode held-out requests with `--strategy`.
    Decode(Overrides),
    /// Score a trained generator across strategies.
    Eval(Overrides),
    /// Train one generator per value of `--lambdas`.
    SweepLambda(Overrides),
    /// Run the brute-force and finite-difference self-checks.
    OracleCheck(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// `key = value` file applied before command-line overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` or `--key=value` pairs for any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let mut args = self.rest.iter();
        while let Some(a) = args.next() {
            let Some(flag) = a.strip_prefix("--") else {
                bail!("unexpected argument `{a}`")
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = args.next().with_context(|| format!("missing value for --{flag}"))?;
                    (flag.to_string(), v.clone())
                }
            };
            cfg.set(&key.replace('-', "_"), &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug)]
struct ChecksFailed(Vec<String>);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "oracle checks failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for ChecksFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<dagrank::Error>()
            .is_some_and(dagrank::Error::is_numerical)
            || e.is::<ChecksFailed>()
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    let (ov, name) = match &command {
        Command::GenData(o) => (o, "gen-data"),
        Command::Train(o) => (o, "train"),
        Command::Decode(o) => (o, "decode"),
        Command::Eval(o) => (o, "eval"),
        Command::SweepLambda(o) => (o, "sweep-lambda"),
        Command::OracleCheck(o) => (o, "oracle-check"),
    };
    let mut cfg = ov.resolve()?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    match command {
        Command::GenData(_) => gen_data(&cfg),
        Command::OracleCheck(_) => oracle_check(&cfg),
        Command::SweepLambda(_) => {
            let dropped = cfg.dedup_lambdas();
            if !dropped.is_empty() {
                eprintln!("warning: dropping duplicate lambdas {dropped:?}");
            }
            dispatch(&cfg, name)
        }
        _ => dispatch(&cfg, name),
    }
}

fn dispatch(cfg: &RunConfig, name: &str) -> Result<()> {
    match cfg.precision {
        Precision::F32 => typed::<f32>(cfg, name),
        Precision::F64 => typed::<f64>(cfg, name),
    }
}

fn typed<T: Real>(cfg: &RunConfig, name: &str) -> Result<()> {
    let data = Dataset::load(&cfg.data).with_context(|| format!("loading {}", cfg.data.display()))?;
    check_manifest(cfg, &data)?;
    let (train, test) = data.split(cfg.holdout);
    match name {
        "train" => train_cmd::<T>(cfg, train, test),
        "decode" => decode_cmd::<T>(cfg, test),
        "eval" => eval_cmd::<T>(cfg, test),
        "sweep-lambda" => sweep_cmd::<T>(cfg, train, test),
        _ => unreachable!("{name}"),
    }
}

fn check_manifest(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    if (m.n, m.m, m.d_u, m.d_x) != (cfg.n, cfg.m, cfg.d_u, cfg.d_x) {
        bail!(
            "dataset has n={} m={} d_u={} d_x={} but the config says n={} m={} d_u={} d_x={}",
            m.n,
            m.m,
            m.d_u,
            m.d_x,
            cfg.n,
            cfg.m,
            cfg.d_u,
            cfg.d_x
        );
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let data = generate_synthetic(&cfg.synth())?;
    data.write(create(&cfg.data)?)?;
    eprintln!("wrote {} records to {}", data.len(), cfg.data.display());
    Ok(())
}

fn print_epoch(log: &EpochLog) {
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "epoch {:>3}  l_gen {}  l_con {}  l_total {:.4}  |g| {:.3}  {:.1}s",
        log.epoch,
        show(log.l_gen),
        show(log.l_con),
        log.l_total,
        log.grad_norm,
        log.wall_clock_s
    );
}

fn load_evaluator<T: Real>(cfg: &RunConfig) -> Result<Evaluator<T>> {
    Evaluator::load(cfg.evaluator_config(), &cfg.evaluator)
        .with_context(|| format!("loading evaluator {}", cfg.evaluator.display()))
}

fn load_generator<T: Real>(cfg: &RunConfig) -> Result<Generator<T>> {
    let entries =
        checkpoint::load(&cfg.checkpoint).with_context(|| format!("loading generator {}", cfg.checkpoint.display()))?;
    let graph = entries
        .iter()
        .any(|(n, _)| n.starts_with(&format!("{CHECKPOINT_PREFIX}trans.")));
    let kind = if graph {
        DecoderKind::Graph
    } else {
        DecoderKind::Vanilla
    };
    let mut model = Generator::new(cfg.model_config(kind), cfg.seed)?;
    model
        .import(&entries)
        .with_context(|| format!("loading generator {}", cfg.checkpoint.display()))?;
    Ok(model)
}

fn train_cmd<T: Real>(cfg: &RunConfig, train: &[dagrank::data::Record], test: &[dagrank::data::Record]) -> Result<()> {
    let log_path = cfg.out.join(format!("train_{}.csv", cfg.mode.name()));
    if cfg.mode == TrainMode::Evaluator {
        let (ev, logs) = train_evaluator::<T>(cfg, train, print_epoch)?;
        write_log_csv(create(&log_path)?, &logs)?;
        ev.save(&cfg.evaluator)?;
        if !test.is_empty() {
            let rows: Vec<MetricRow> = evaluator_auc(&ev, test)?
                .into_iter()
                .map(|(t, v)| MetricRow::new("auc", t, v))
                .collect();
            for r in &rows {
                eprintln!("held-out auc {}: {:.4}", r.name, r.value);
            }
            write_csv(create(&cfg.out.join("metrics_evaluator.csv"))?, &rows)?;
        }
        return Ok(());
    }
    let ev = if cfg.mode.needs_evaluator() {
        Some(load_evaluator::<T>(cfg)?)
    } else {
        None
    };
    let (model, logs) = train_generator(cfg, cfg.mode, train, ev.as_ref(), print_epoch)?;
    write_log_csv(create(&log_path)?, &logs)?;
    model.save(&cfg.checkpoint)?;
    eprintln!("saved {}", cfg.checkpoint.display());
    Ok(())
}

fn slate_line(req: &RerankRequest, res: &dagrank::decode::DecodeResult) -> serde_json::Value {
    json!({
        "request_id": req.request_id,
        "slate": res.slate.iter().map(|&c| req.candidates[c].id).collect::<Vec<_>>(),
        "path": res.path.vertices(),
        "joint_log_prob": res.joint_log_prob,
    })
}

fn decode_cmd<T: Real>(cfg: &RunConfig, test: &[dagrank::data::Record]) -> Result<()> {
    if test.is_empty() {
        bail!("no held-out records to decode (holdout = {})", cfg.holdout);
    }
    let model = load_generator::<T>(cfg)?;
    let strategy = cfg.strategy()?;
    let report = decode_report(
        &model,
        test,
        &cfg.batch_options(strategy),
        cfg.catalog,
        cfg.distinct2_per_list,
    )?;
    let mut w = create(&cfg.out.join(format!("slates_{}.jsonl", strategy.name())))?;
    for (rec, res) in test.iter().zip(&report.results) {
        serde_json::to_writer(&mut w, &slate_line(&rec.request, res))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_csv(
        create(&cfg.out.join(format!("metrics_{}.csv", strategy.name())))?,
        &report.rows,
    )?;
    for r in &report.rows {
        eprintln!("{} {}: {:.4}", r.metric, r.name, r.value);
    }
    Ok(())
}

fn eval_cmd<T: Real>(cfg: &RunConfig, test: &[dagrank::data::Record]) -> Result<()> {
    if test.len() < 2 {
        bail!("eval needs at least two held-out records (holdout = {})", cfg.holdout);
    }
    let model = load_generator::<T>(cfg)?;
    let mut rows = vec![MetricRow::new("recall_at_m", "random", random_recall(cfg.n, cfg.m))];
    for strategy in [
        Strategy::Lookahead,
        Strategy::Sample {
            temperature: cfg.temperature,
        },
        Strategy::Vanilla,
    ] {
        let opts = cfg.batch_options(strategy);
        rows.extend(decode_report(&model, test, &opts, cfg.catalog, cfg.distinct2_per_list)?.rows);
    }
    let opts = cfg.batch_options(Strategy::Lookahead);
    let (div, rep) = sample_diversity(&model, test, cfg.diversity_samples, cfg.temperature, &opts)?;
    rows.push(MetricRow::new("per_request_diversity", "sample", div));
    rows.push(MetricRow::new("per_request_repetition", "sample", rep));
    if cfg.evaluator.exists() {
        let ev = load_evaluator::<T>(cfg)?;
        rows.push(MetricRow::new(
            "evaluator_utility",
            "lookahead",
            mean_utility(&model, &ev, test, &opts)?,
        ));
    }
    write_csv(create(&cfg.out.join("eval.csv"))?, &rows)?;
    for r in &rows {
        eprintln!("{} {}: {:.4}", r.metric, r.name, r.value);
    }
    Ok(())
}

fn sweep_cmd<T: Real>(cfg: &RunConfig, train: &[dagrank::data::Record], test: &[dagrank::data::Record]) -> Result<()> {
    if test.is_empty() {
        bail!("sweep needs held-out records (holdout = {})", cfg.holdout);
    }
    let ev = if matches!(cfg.mode, TrainMode::GenOnly) {
        None
    } else {
        Some(load_evaluator::<T>(cfg)?)
    };
    let rows = sweep_lambda(cfg, train, test, ev.as_ref(), |r| {
        eprintln!(
            "lambda {:>2}  recall@m {:.4}  {:.1}s",
            r.lambda, r.recall_at_m, r.wall_clock_s
        )
    })?;
    write_sweep_csv(create(&cfg.out.join("sweep.csv"))?, &rows)?;
    Ok(())
}

fn oracle_check(cfg: &RunConfig) -> Result<()> {
    let mut failed = Vec::new();
    let mut report = |name: &str, value: f64, tol: f64| {
        let ok = value <= tol;
        println!(
            "{} {name}: {value:.3e} (tol {tol:.0e})",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(name.to_string());
        }
    };
    let marg = check_marginals(200, cfg.seed)?;
    report("dag marginal vs enumeration", marg.max_rel_err, 1e-9);
    report(
        "slate mass minus one",
        (slate_mass(3, 3, 6, cfg.seed)? - 1.0).abs(),
        1e-9,
    );
    let inst = GradInstance::new(cfg.seed)?;
    report("grad l_gen", inst.check_gen(cfg.seed)?.max_rel_err, 1e-4);
    report("grad l_eval", inst.check_eval(cfg.seed)?.max_rel_err, 1e-4);
    report("grad l_con", inst.check_con(cfg.seed, cfg.tau)?.max_rel_err, 1e-4);
    if !failed.is_empty() {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

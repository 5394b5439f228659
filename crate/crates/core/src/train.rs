//! Training loops, evaluation reports and the graph-size sweep.

use std::io::Write;
use std::time::Instant;

use crate::autodiff::{AdamConfig, Graph};
use crate::cascade::{consistency_loss, draw_relaxations, eval_loss, total_loss, Evaluator};
use crate::config::{RunConfig, TrainMode};
use crate::dag::gen_loss;
use crate::data::{batches, Record, RerankRequest};
use crate::decode::{batch_decode, decode_one, BatchOptions, DecodeResult, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{auc, csv_err, diversity_report, diversity_score, recall_at_k, repetition_rate, MetricRow};
use crate::model::{DecoderKind, Generator};
use crate::rng::{stream, substream, Stream};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_gen: Option<f64>,
    pub l_con: Option<f64>,
    pub l_total: f64,
    pub grad_norm: f64,
    pub wall_clock_s: f64,
}

/// `epoch,l_gen,l_con,l_total,grad_norm,wall_clock_s`; inapplicable columns are empty.
pub fn write_log_csv<W: Write>(w: W, logs: &[EpochLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "l_gen", "l_con", "l_total", "grad_norm", "wall_clock_s"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for l in logs {
        out.write_record([
            l.epoch.to_string(),
            opt(l.l_gen),
            opt(l.l_con),
            l.l_total.to_string(),
            l.grad_norm.to_string(),
            l.wall_clock_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn adam(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    }
}

fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFiniteLoss(s) => Error::NonFiniteLoss(format!("{s} (epoch {epoch}, step {step})")),
        Error::NonFiniteGradient(s) => Error::NonFiniteGradient(format!("{s} (epoch {epoch}, step {step})")),
        e => e,
    }
}

#[derive(Default)]
struct Running {
    gen: (f64, usize),
    con: (f64, usize),
    total: (f64, usize),
    norm: (f64, usize),
}

impl Running {
    fn add(slot: &mut (f64, usize), v: f64) {
        slot.0 += v;
        slot.1 += 1;
    }

    fn mean(slot: (f64, usize)) -> Option<f64> {
        (slot.1 > 0).then(|| slot.0 / slot.1 as f64)
    }

    fn log(&self, epoch: usize, start: Instant) -> EpochLog {
        EpochLog {
            epoch,
            l_gen: Self::mean(self.gen),
            l_con: Self::mean(self.con),
            l_total: Self::mean(self.total).unwrap_or(f64::NAN),
            grad_norm: Self::mean(self.norm).unwrap_or(0.0),
            wall_clock_s: start.elapsed().as_secs_f64(),
        }
    }
}

/// Fit the evaluator to logged labels.
pub fn train_evaluator<T: Real>(
    cfg: &RunConfig,
    train: &[Record],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Evaluator<T>, Vec<EpochLog>)> {
    let mut ev = Evaluator::<T>::new(cfg.evaluator_config(), cfg.seed)?;
    let opt = adam(cfg);
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut run = Running::default();
        for (step, batch) in batches(train, cfg.batch_size, cfg.seed, epoch as u64).enumerate() {
            let mut g = Graph::new();
            let b = ev.params().bind(&mut g, true);
            let loss = eval_loss(&ev, &mut g, &b, &batch).map_err(|e| at_step(e, epoch, step))?;
            g.backward(loss)?;
            Running::add(&mut run.total, g.value(loss).scalar_value().f64());
            ev.params_mut().accumulate(&g, &b);
            Running::add(&mut run.norm, ev.params().grad_norm());
            ev.params_mut().adam_step(&opt).map_err(|e| at_step(e, epoch, step))?;
        }
        let log = run.log(epoch, start);
        on_epoch(&log);
        logs.push(log);
    }
    Ok((ev, logs))
}

/// Train a generator under one of the generator objectives. `evaluator` is
/// required for modes that use the consistency loss.
pub fn train_generator<T: Real>(
    cfg: &RunConfig,
    mode: TrainMode,
    train: &[Record],
    evaluator: Option<&Evaluator<T>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Generator<T>, Vec<EpochLog>)> {
    let kind = match mode {
        TrainMode::Evaluator => return Err(Error::Config("evaluator mode does not train a generator".into())),
        TrainMode::Vanilla => DecoderKind::Vanilla,
        _ => DecoderKind::Graph,
    };
    let ev = match (mode.needs_evaluator(), evaluator) {
        (true, None) => {
            return Err(Error::Config(format!(
                "mode {} requires a pretrained evaluator",
                mode.name()
            )))
        }
        (true, Some(ev)) => Some(ev),
        (false, _) => None,
    };
    let mut model = Generator::<T>::new(cfg.model_config(kind), cfg.seed)?;
    let m = cfg.m;
    let opt = adam(cfg);
    let mut path_rng = stream(cfg.seed, Stream::PathSample);
    let mut gumbel_rng = stream(cfg.seed, Stream::Gumbel);
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut run = Running::default();
        for (step, batch) in batches(train, cfg.batch_size, cfg.seed, epoch as u64).enumerate() {
            let reqs: Vec<&RerankRequest> = batch.iter().map(|r| &r.request).collect();
            let targets: Vec<Vec<usize>> = batch.iter().map(|r| r.target()).collect();
            let mut g = Graph::new();
            let b = model.params().bind(&mut g, true);
            let outs = model.forward(&mut g, &b, &reqs)?;
            let l_gen = gen_loss(&mut g, &outs, &targets).map_err(|e| at_step(e, epoch, step))?;
            Running::add(&mut run.gen, g.value(l_gen).scalar_value().f64());

            let cascade_now = global_step.is_multiple_of(cfg.cascade_every);
            global_step += 1;
            let l_con = match ev {
                Some(ev) if cascade_now => {
                    let eb = ev.params().bind(&mut g, false);
                    let draws = draw_relaxations(&g, &outs, m, &mut path_rng, &mut gumbel_rng)?;
                    let l = consistency_loss(&mut g, ev, &eb, &outs, &reqs, &draws, cfg.tau)
                        .map_err(|e| at_step(e, epoch, step))?;
                    Running::add(&mut run.con, g.value(l).scalar_value().f64());
                    Some(l)
                }
                _ => None,
            };
            let loss = match (mode, l_con) {
                (TrainMode::GenOnly, _) => Some(l_gen),
                (TrainMode::ConOnly, l) => l,
                (_, Some(l)) => Some(total_loss(&mut g, l, l_gen, cfg.alpha)?),
                (_, None) => Some(g.scale(l_gen, T::of(cfg.alpha))),
            };
            let Some(loss) = loss else { continue };
            let lv = g.value(loss).scalar_value().f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss(format!("total loss (epoch {epoch}, step {step})")));
            }
            Running::add(&mut run.total, lv);
            g.backward(loss)?;
            model.params_mut().accumulate(&g, &b);
            Running::add(&mut run.norm, model.params().grad_norm());
            model
                .params_mut()
                .adam_step(&opt)
                .map_err(|e| at_step(e, epoch, step))?;
        }
        let log = run.log(epoch, start);
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// Held-out AUC per task with both label values present.
pub fn evaluator_auc<T: Real>(ev: &Evaluator<T>, records: &[Record]) -> Result<Vec<(String, f64)>> {
    let targets: Vec<Vec<usize>> = records.iter().map(|r| r.target()).collect();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); ev.config().k()];
    let mut labels: Vec<Vec<bool>> = vec![Vec::new(); ev.config().k()];
    for (chunk, tchunk) in records.chunks(256).zip(targets.chunks(256)) {
        let items: Vec<(&RerankRequest, &[usize])> = chunk
            .iter()
            .zip(tchunk)
            .map(|(r, t)| (&r.request, t.as_slice()))
            .collect();
        for (r, s) in chunk.iter().zip(ev.score_batch(&items)?) {
            for (i, l) in r.outcome.labels.iter().enumerate() {
                for t in 0..l.len() {
                    scores[t].push(s.get(i, t));
                    labels[t].push(l[t] == 1);
                }
            }
        }
    }
    let mut out = Vec::new();
    for (t, name) in ev.config().tasks.iter().enumerate() {
        if let Ok(a) = auc(&scores[t], &labels[t]) {
            out.push((name.clone(), a));
        }
    }
    Ok(out)
}

/// Expected Recall@m of a uniformly random slate.
pub fn random_recall(n: usize, m: usize) -> f64 {
    m as f64 / n as f64
}

#[derive(Clone, Debug)]
pub struct DecodeReport {
    pub results: Vec<DecodeResult>,
    pub recall_at_m: f64,
    pub recall_at_m_plus_4: f64,
    pub rows: Vec<MetricRow>,
}

fn item_ids(req: &RerankRequest, slate: &[usize]) -> Vec<u64> {
    slate.iter().map(|&c| req.candidates[c].id).collect()
}

/// Decode every record and score accuracy and cross-request diversity.
pub fn decode_report<T: Real>(
    model: &Generator<T>,
    records: &[Record],
    opts: &BatchOptions,
    catalog: usize,
    per_list: bool,
) -> Result<DecodeReport> {
    let reqs: Vec<&RerankRequest> = records.iter().map(|r| &r.request).collect();
    let results = batch_decode(model, &reqs, opts)?;
    let m = model.config().m;
    let (mut r_m, mut r_m4) = (0.0, 0.0);
    let mut slates = Vec::with_capacity(records.len());
    for (rec, res) in records.iter().zip(&results) {
        let ranked = item_ids(&rec.request, &res.ranking);
        r_m += recall_at_k(&ranked, &rec.outcome.exposed, m)?;
        r_m4 += recall_at_k(&ranked, &rec.outcome.exposed, m + 4)?;
        slates.push(item_ids(&rec.request, &res.slate));
    }
    let count = records.len().max(1) as f64;
    let (recall_at_m, recall_at_m_plus_4) = (r_m / count, r_m4 / count);
    let name = opts.strategy.name();
    let mut rows = vec![
        MetricRow::new("recall_at_m", name, recall_at_m),
        MetricRow::new("recall_at_m_plus_4", name, recall_at_m_plus_4),
    ];
    if slates.len() >= 2 {
        rows.extend(diversity_report(&slates, catalog, per_list, name)?);
    }
    Ok(DecodeReport {
        results,
        recall_at_m,
        recall_at_m_plus_4,
        rows,
    })
}

/// Mean per-request diversity score and repetition rate over `samples`
/// stochastic decodes of the same request.
pub fn sample_diversity<T: Real>(
    model: &Generator<T>,
    records: &[Record],
    samples: usize,
    temperature: f64,
    opts: &BatchOptions,
) -> Result<(f64, f64)> {
    let m = model.config().m;
    let (mut div, mut rep) = (0.0, 0.0);
    for chunk in records.chunks(opts.chunk.max(1)) {
        let reqs: Vec<&RerankRequest> = chunk.iter().map(|r| &r.request).collect();
        for (r, inf) in reqs.iter().zip(model.infer(&reqs)?) {
            let mut rng = substream(opts.seed, Stream::Decode, r.request_id);
            let slates = (0..samples)
                .map(|_| {
                    decode_one(&inf, m, Strategy::Sample { temperature }, opts.decode, &mut rng)
                        .map(|d| item_ids(r, &d.slate))
                })
                .collect::<Result<Vec<_>>>()?;
            div += diversity_score(&slates)?;
            rep += repetition_rate(&slates)?;
        }
    }
    let count = records.len().max(1) as f64;
    Ok((div / count, rep / count))
}

/// Mean evaluator utility of lookahead slates.
pub fn mean_utility<T: Real>(
    model: &Generator<T>,
    ev: &Evaluator<T>,
    records: &[Record],
    opts: &BatchOptions,
) -> Result<f64> {
    let reqs: Vec<&RerankRequest> = records.iter().map(|r| &r.request).collect();
    let results = batch_decode(model, &reqs, opts)?;
    let items: Vec<(&RerankRequest, &[usize])> = reqs
        .iter()
        .zip(&results)
        .map(|(r, d)| (*r, d.slate.as_slice()))
        .collect();
    let mut total = 0.0;
    for chunk in items.chunks(256) {
        total += ev.utility(chunk)?.iter().sum::<f64>();
    }
    Ok(total / items.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: usize,
    pub recall_at_m: f64,
    pub wall_clock_s: f64,
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lambda", "recall_at_m", "wall_clock_s"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.lambda.to_string(),
            r.recall_at_m.to_string(),
            r.wall_clock_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Train and evaluate one graph generator per lambda with identical seeds.
/// Wall-clock covers training plus held-out decoding.
pub fn sweep_lambda<T: Real>(
    cfg: &RunConfig,
    train: &[Record],
    test: &[Record],
    evaluator: Option<&Evaluator<T>>,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mode = match cfg.mode {
        TrainMode::Evaluator | TrainMode::Vanilla => TrainMode::Total,
        m => m,
    };
    let mut rows = Vec::with_capacity(cfg.lambdas.len());
    for &lambda in &cfg.lambdas {
        let run = RunConfig { lambda, ..cfg.clone() };
        run.validate()?;
        let start = Instant::now();
        let (model, _) = train_generator(&run, mode, train, evaluator, |_| {})?;
        let report = decode_report(
            &model,
            test,
            &run.batch_options(Strategy::Lookahead),
            run.catalog,
            run.distinct2_per_list,
        )?;
        let row = SweepRow {
            lambda,
            recall_at_m: report.recall_at_m,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            requests: 96,
            catalog: 40,
            n: 6,
            m: 3,
            d_u: 2,
            d_x: 3,
            d: 8,
            blocks: 1,
            heads: 2,
            ffn_mult: 2,
            lambda: 2,
            epochs: 2,
            batch_size: 16,
            precision: crate::config::Precision::F64,
            ..Default::default()
        }
    }

    fn records(cfg: &RunConfig) -> Vec<Record> {
        let s = SynthConfig { ..cfg.synth() };
        generate_synthetic(&s).unwrap().records
    }

    #[test]
    fn alpha_zero_total_equals_consistency_column() {
        let cfg = RunConfig {
            alpha: 0.0,
            ..tiny_cfg()
        };
        let data = records(&cfg);
        let (ev, _) = train_evaluator::<f64>(&cfg, &data, |_| {}).unwrap();
        let (_, logs) = train_generator(&cfg, TrainMode::Total, &data, Some(&ev), |_| {}).unwrap();
        for l in &logs {
            assert!((l.l_total - l.l_con.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_modes_require_an_evaluator() {
        let cfg = tiny_cfg();
        let data = records(&cfg);
        for mode in [TrainMode::ConOnly, TrainMode::Total, TrainMode::Vanilla] {
            let err = train_generator::<f64>(&cfg, mode, &data, None, |_| {}).err().unwrap();
            assert!(err.to_string().contains("evaluator"));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let data = records(&cfg);
        let (ev, _) = train_evaluator::<f32>(&cfg, &data, |_| {}).unwrap();
        let run = || {
            let (_, logs) = train_generator(&cfg, TrainMode::Total, &data, Some(&ev), |_| {}).unwrap();
            logs.iter()
                .map(|l| (l.l_gen.unwrap().to_bits(), l.l_con.unwrap().to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_csv_layout() {
        let mut buf = Vec::new();
        let log = EpochLog {
            epoch: 1,
            l_gen: Some(2.5),
            l_con: None,
            l_total: 2.5,
            grad_norm: 0.25,
            wall_clock_s: 1.0,
        };
        write_log_csv(&mut buf, &[log]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,l_gen,l_con,l_total,grad_norm,wall_clock_s\n1,2.5,,2.5,0.25,1\n"
        );
    }
}

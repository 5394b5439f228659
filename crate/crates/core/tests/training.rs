use dagrank::autodiff::{Graph, ParamStore};
use dagrank::cascade::{consistency_loss, draw_relaxations, total_loss, Evaluator};
use dagrank::config::{RunConfig, TrainMode};
use dagrank::dag::gen_loss;
use dagrank::data::{generate_synthetic, position_bias, Record, RerankRequest, SynthConfig};
use dagrank::model::{DecoderKind, Generator};
use dagrank::train::{train_evaluator, train_generator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    RunConfig {
        requests: 64,
        catalog: 30,
        n: 6,
        m: 3,
        d_u: 2,
        d_x: 3,
        d: 8,
        blocks: 1,
        heads: 2,
        ffn_mult: 2,
        lambda: 2,
        epochs: 1,
        batch_size: 16,
        ..Default::default()
    }
}

fn records(cfg: &RunConfig) -> Vec<Record> {
    generate_synthetic(&cfg.synth()).unwrap().records
}

fn flat_grads(store: &ParamStore<f64>) -> Vec<f64> {
    store.iter().flat_map(|p| p.grad.data().to_vec()).collect()
}

// Gradients of `l_con + alpha * l_gen` for one batch, with fixed draws.
fn grads(
    model: &Generator<f64>,
    ev: &Evaluator<f64>,
    recs: &[Record],
    alpha: Option<f64>,
) -> (Vec<f64>, Vec<Option<bool>>) {
    let reqs: Vec<&RerankRequest> = recs.iter().map(|r| &r.request).collect();
    let targets: Vec<Vec<usize>> = recs.iter().map(|r| r.target()).collect();
    let mut store = model.params().clone();
    store.zero_grad();
    let mut g = Graph::new();
    let b = store.bind(&mut g, true);
    let eb = ev.params().bind(&mut g, false);
    let outs = model.forward(&mut g, &b, &reqs).unwrap();
    let l_gen = gen_loss(&mut g, &outs, &targets).unwrap();
    let (mut pr, mut gr) = (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2));
    let draws = draw_relaxations(&g, &outs, model.config().m, &mut pr, &mut gr).unwrap();
    let l_con = consistency_loss(&mut g, ev, &eb, &outs, &reqs, &draws, 0.3).unwrap();
    let loss = match alpha {
        Some(a) => total_loss(&mut g, l_con, l_gen, a).unwrap(),
        None => l_gen,
    };
    g.backward(loss).unwrap();
    store.accumulate(&g, &b);
    let frozen = ev
        .params()
        .ids()
        .map(|id| g.grad(eb[id]).map(|m| m.max_abs() > 0.0))
        .collect();
    (flat_grads(&store), frozen)
}

#[test]
fn evaluator_receives_no_gradient_from_the_cascade() {
    let cfg = tiny();
    let data = records(&cfg);
    let ev = Evaluator::<f64>::new(cfg.evaluator_config(), 3).unwrap();
    let model = Generator::<f64>::new(cfg.model_config(DecoderKind::Graph), 4).unwrap();
    let (gen_grads, frozen) = grads(&model, &ev, &data[..8], Some(0.5));
    assert!(frozen.iter().all(|f| f.is_none() || *f == Some(false)), "{frozen:?}");
    assert!(gen_grads.iter().any(|&x| x != 0.0));

    let before: Vec<_> = ev.params().iter().map(|p| p.value.clone()).collect();
    let (model, _) = train_generator(&cfg, TrainMode::Total, &data, Some(&ev), |_| {}).unwrap();
    let after: Vec<_> = ev.params().iter().map(|p| p.value.clone()).collect();
    assert_eq!(before, after);
    assert!(model.params().steps() > 0);
}

#[test]
fn large_alpha_follows_the_likelihood_gradient() {
    let cfg = tiny();
    let data = records(&cfg);
    let ev = Evaluator::<f64>::new(cfg.evaluator_config(), 5).unwrap();
    let model = Generator::<f64>::new(cfg.model_config(DecoderKind::Graph), 6).unwrap();
    let (a, _) = grads(&model, &ev, &data[..8], Some(1e6));
    let (b, _) = grads(&model, &ev, &data[..8], None);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot / (na * nb) > 0.999, "cosine {}", dot / (na * nb));
}

#[test]
fn gen_only_training_reduces_likelihood_loss() {
    let cfg = RunConfig {
        epochs: 4,
        requests: 256,
        lr: 3e-3,
        ..tiny()
    };
    let data = records(&cfg);
    let (_, logs) = train_generator::<f64>(&cfg, TrainMode::GenOnly, &data, None, |_| {}).unwrap();
    assert!(logs.last().unwrap().l_gen.unwrap() < logs[0].l_gen.unwrap());
    assert!(logs.iter().all(|l| l.l_con.is_none()));
}

#[test]
fn evaluator_training_reduces_its_loss() {
    let cfg = RunConfig {
        epochs: 4,
        requests: 256,
        lr: 3e-3,
        ..tiny()
    };
    let data = records(&cfg);
    let (_, logs) = train_evaluator::<f64>(&cfg, &data, |_| {}).unwrap();
    assert!(logs.last().unwrap().l_total < logs[0].l_total);
}

#[test]
fn click_rate_falls_with_position() {
    let cfg = SynthConfig {
        num_requests: 20_000,
        catalog_size: 200,
        n: 12,
        m: 4,
        d_u: 4,
        d_x: 6,
        seed: 8,
        ..Default::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let mut clicks = [0usize; 4];
    for r in &data.records {
        for (pos, l) in r.outcome.labels.iter().enumerate() {
            assert_eq!(l[0], 1, "every exposed item is shown");
            clicks[pos] += l[1] as usize;
        }
    }
    let rate: Vec<f64> = clicks.iter().map(|&c| c as f64 / data.records.len() as f64).collect();
    assert!(rate.windows(2).all(|w| w[0] > w[1]), "{rate:?}");
    let bias = position_bias(4, cfg.position_bias);
    assert!(
        (bias[0] - 0.5).abs() < 1e-12 && (bias[3] + 0.5).abs() < 1e-12,
        "{bias:?}"
    );
}

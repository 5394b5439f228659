//! Brute-force and finite-difference self-checks.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::cascade::{consistency_loss, eval_loss, gumbel_noise, Evaluator, EvaluatorConfig, Relaxation};
use crate::dag::{dag_log_marginal, enumerate_paths, gen_loss, path_log_prob};
use crate::data::{generate_synthetic, Record, RerankRequest, SynthConfig};
use crate::error::Result;
use crate::gradcheck::{check_store_steps, GradCheck, DEFAULT_FLOOR};
use crate::model::{DecoderKind, EmissionMatrix, Generator, ModelConfig, TransitionMatrix};
use crate::tensor::{log_sum_exp, Matrix};

/// Random strictly-forward row-stochastic transitions and column-stochastic
/// emissions.
pub fn random_instance(rng: &mut impl Rng, g: usize, n: usize) -> (TransitionMatrix, EmissionMatrix) {
    let mut e = Matrix::from_fn(g, g, |_, _| f64::NEG_INFINITY);
    for i in 0..g - 1 {
        let logits: Vec<f64> = (i + 1..g).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = log_sum_exp(&logits);
        for (k, j) in (i + 1..g).enumerate() {
            e.set(i, j, logits[k] - z);
        }
    }
    let mut p = Matrix::zeros(g, n);
    for v in 0..g {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = log_sum_exp(&logits);
        for c in 0..n {
            p.set(v, c, logits[c] - z);
        }
    }
    (TransitionMatrix::from_log(e), EmissionMatrix::from_log_t(p))
}

#[derive(Clone, Debug)]
pub struct MarginalCheck {
    pub instances: usize,
    pub max_rel_err: f64,
    pub elapsed: Duration,
}

/// DP marginal against log-sum-exp over every enumerated path on random
/// instances with `g` in 4..=10, `m` in 2..=5, `n` in 2..=6.
pub fn check_marginals(instances: usize, seed: u64) -> Result<MarginalCheck> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let g = rng.random_range(4..=10);
        let m = rng.random_range(2..=5.min(g));
        let n = rng.random_range(2..=6);
        let (e, p) = random_instance(&mut rng, g, n);
        let y: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let lps = enumerate_paths(g, m)?
            .iter()
            .map(|a| path_log_prob(a, &y, &e, &p))
            .collect::<Result<Vec<_>>>()?;
        let want = log_sum_exp(&lps);
        let got = dag_log_marginal(&y, &e, &p)?;
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    Ok(MarginalCheck {
        instances,
        max_rel_err: worst,
        elapsed: start.elapsed(),
    })
}

/// Sum of `exp(log marginal)` over all `n^m` slates of one random instance.
pub fn slate_mass(n: usize, m: usize, g: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (e, p) = random_instance(&mut rng, g, n);
    let mut total = 0.0;
    let mut y = vec![0usize; m];
    loop {
        total += dag_log_marginal(&y, &e, &p)?.exp();
        let mut i = 0;
        while i < m {
            y[i] += 1;
            if y[i] < n {
                break;
            }
            y[i] = 0;
            i += 1;
        }
        if i == m {
            return Ok(total);
        }
    }
}

/// Gradients of a few 1e-9 carry central-difference rounding noise near
/// 1e-12, so checks over many random instances use this looser floor.
pub const NOISE_FLOOR: f64 = 1e-6;
pub const MODEL_STEPS: [f64; 6] = [1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6];

/// The gradient-check instance: `n = 3`, `m = 2`, `g = 4`, `d = 8`.
pub struct GradInstance {
    pub model: ModelConfig,
    pub evaluator: EvaluatorConfig,
    pub records: Vec<Record>,
    pub floor: f64,
}

impl GradInstance {
    pub fn new(seed: u64) -> Result<Self> {
        let synth = SynthConfig {
            num_requests: 2,
            catalog_size: 12,
            n: 3,
            m: 2,
            d_u: 2,
            d_x: 3,
            seed,
            ..Default::default()
        };
        let records = generate_synthetic(&synth)?.records;
        let model = ModelConfig {
            d: 8,
            blocks: 1,
            heads: 2,
            ffn_mult: 2,
            lambda: 2,
            n: 3,
            m: 2,
            d_u: 2,
            d_x: 3,
            kind: DecoderKind::Graph,
        };
        let evaluator = EvaluatorConfig {
            d: 8,
            heads: 2,
            ffn_mult: 2,
            m: 2,
            d_u: 2,
            d_x: 3,
            ..Default::default()
        };
        Ok(Self {
            model,
            evaluator,
            records,
            floor: DEFAULT_FLOOR,
        })
    }

    fn requests(&self) -> Vec<&RerankRequest> {
        self.records.iter().map(|r| &r.request).collect()
    }

    pub fn check_gen(&self, seed: u64) -> Result<GradCheck> {
        let gen = Generator::<f64>::new(self.model.clone(), seed)?;
        let mut store = gen.params().clone();
        let reqs = self.requests();
        let targets: Vec<Vec<usize>> = self.records.iter().map(|r| r.target()).collect();
        check_store_steps(
            &mut store,
            |g, b| {
                let outs = gen.forward(g, b, &reqs)?;
                gen_loss(g, &outs, &targets)
            },
            &MODEL_STEPS,
            self.floor,
        )
    }

    pub fn check_eval(&self, seed: u64) -> Result<GradCheck> {
        let ev = Evaluator::<f64>::new(self.evaluator.clone(), seed)?;
        let mut store = ev.params().clone();
        let recs: Vec<&Record> = self.records.iter().collect();
        check_store_steps(&mut store, |g, b| eval_loss(&ev, g, b, &recs), &MODEL_STEPS, self.floor)
    }

    /// Consistency loss with frozen paths and Gumbel noise.
    pub fn check_con(&self, seed: u64, tau: f64) -> Result<GradCheck> {
        let gen = Generator::<f64>::new(self.model.clone(), seed)?;
        let ev = Evaluator::<f64>::new(self.evaluator.clone(), seed + 1)?;
        let mut store = gen.params().clone();
        let reqs = self.requests();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g_count = self.model.g();
        let draws: Vec<Relaxation> = reqs
            .iter()
            .map(|r| {
                let path = crate::decode::spread_path(g_count, self.model.m);
                Relaxation {
                    path,
                    noise: gumbel_noise(self.model.m, r.n(), &mut rng),
                }
            })
            .collect();
        check_store_steps(
            &mut store,
            |g: &mut Graph<f64>, b| {
                let outs = gen.forward(g, b, &reqs)?;
                let eb = ev.params().bind(g, false);
                consistency_loss(g, &ev, &eb, &outs, &reqs, &draws, tau)
            },
            &MODEL_STEPS,
            self.floor,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginals_match_enumeration() {
        let r = check_marginals(20, 1).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn slate_mass_is_one() {
        assert!((slate_mass(3, 3, 6, 2).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..2 {
            let inst = GradInstance {
                floor: NOISE_FLOOR,
                ..GradInstance::new(seed).unwrap()
            };
            for (name, r) in [
                ("gen", inst.check_gen(seed)),
                ("eval", inst.check_eval(seed)),
                ("con", inst.check_con(seed, 0.3)),
            ] {
                let r = r.unwrap();
                assert!(r.max_rel_err < 1e-4, "{name} seed {seed}: {r:?}");
            }
        }
    }
}

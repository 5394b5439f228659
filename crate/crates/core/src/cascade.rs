//! Evaluator network, its supervised loss, and the relaxed generator-evaluator
//! objective.

use std::path::Path;

use rand::distr::Open01;
use rand::Rng;

use crate::autodiff::{checkpoint, Bound, Graph, ParamId, ParamStore, Var};
use crate::data::{Record, RerankRequest, NUM_TASKS, TASKS};
use crate::decode::sample_path;
use crate::error::{Error, Result};
use crate::model::{GenOutput, TransitionMatrix};
use crate::nn::{embedding, Block, BlockDims, Linear};
use crate::rng::{stream, Stream};
use crate::tensor::{Matrix, Real};

pub const CHECKPOINT_PREFIX: &str = "evaluator.";

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluatorConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub m: usize,
    pub d_u: usize,
    pub d_x: usize,
    pub tasks: Vec<String>,
    /// Desired label per task when scoring generated slates (0 or 1).
    pub polarity: Vec<f64>,
    /// Learned slot embeddings added to the input rows.
    pub positional: bool,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            ffn_mult: 4,
            m: 4,
            d_u: 8,
            d_x: 16,
            tasks: TASKS.iter().map(|s| s.to_string()).collect(),
            polarity: vec![1.0, 1.0, 0.0],
            positional: true,
        }
    }
}

impl EvaluatorConfig {
    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() {
            return bad("evaluator needs at least one task".into());
        }
        if self.polarity.len() != self.tasks.len() {
            return bad(format!(
                "{} polarities for {} tasks",
                self.polarity.len(),
                self.tasks.len()
            ));
        }
        if self.polarity.iter().any(|&p| p != 0.0 && p != 1.0) {
            return bad("polarities must be 0 or 1".into());
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d ({}) must be a positive multiple of heads ({})",
                self.d, self.heads
            ));
        }
        if self.m == 0 || self.d_u == 0 || self.d_x == 0 || self.ffn_mult == 0 {
            return bad("evaluator dimensions must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Tower {
    hidden: Linear,
    out: Linear,
}

pub struct Evaluator<T: Real> {
    cfg: EvaluatorConfig,
    store: ParamStore<T>,
    input: Linear,
    slots: Option<ParamId>,
    block: Block,
    towers: Vec<Tower>,
}

impl<T: Real> Evaluator<T> {
    pub fn new(cfg: EvaluatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        // Offset keeps evaluator and generator initialisation independent.
        let mut rng = stream(seed ^ 0x5EED_E7A1, Stream::Init);
        let mut store = ParamStore::new();
        let input = Linear::new(&mut store, "in", cfg.d_x + cfg.d_u, cfg.d, &mut rng);
        let slots = cfg
            .positional
            .then(|| embedding(&mut store, "slots", cfg.m, cfg.d, 0.02, &mut rng));
        let dims = BlockDims {
            d: cfg.d,
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
        };
        let block = Block::new(&mut store, "block", dims, false, &mut rng);
        let towers = cfg
            .tasks
            .iter()
            .map(|t| Tower {
                hidden: Linear::new(&mut store, &format!("tower.{t}.hidden"), cfg.d, cfg.d, &mut rng),
                out: Linear::new(&mut store, &format!("tower.{t}.out"), cfg.d, 1, &mut rng),
            })
            .collect();
        Ok(Self {
            cfg,
            store,
            input,
            slots,
            block,
            towers,
        })
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Per-item, per-task logits `(batch*m) x k` for stacked `[item, user]` rows.
    pub fn logits(&self, g: &mut Graph<T>, b: &Bound, rows: Var, batch: usize) -> Result<Var> {
        let m = self.cfg.m;
        let mut h = self.input.forward(g, b, rows)?;
        if let Some(slots) = self.slots {
            let pos = crate::nn::tile_rows(g, b[slots], batch)?;
            h = g.add(h, pos)?;
        }
        let h = self.block.forward(g, b, h, batch, m, None)?;
        let mut cols = Vec::with_capacity(self.towers.len());
        for t in &self.towers {
            let z = t.hidden.forward(g, b, h)?;
            let z = g.relu(z);
            cols.push(t.out.forward(g, b, z)?);
        }
        if cols.len() == 1 {
            return Ok(cols[0]);
        }
        g.concat_cols(&cols)
    }

    /// Probabilities `m x k` for one slate of candidate indices.
    pub fn score(&self, req: &RerankRequest, slate: &[usize]) -> Result<Matrix<f64>> {
        Ok(self.score_batch(&[(req, slate)])?.remove(0))
    }

    pub fn score_batch(&self, items: &[(&RerankRequest, &[usize])]) -> Result<Vec<Matrix<f64>>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.slate_rows(items)?;
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let x = g.constant(rows);
        let z = self.logits(&mut g, &b, x, items.len())?;
        let p = g.sigmoid(z);
        let all = g.value(p).cast::<f64>();
        let (m, k) = (self.cfg.m, self.cfg.k());
        Ok((0..items.len())
            .map(|r| Matrix::from_fn(m, k, |i, j| all.get(r * m + i, j)))
            .collect())
    }

    /// Mean over items and tasks of the probability of the desired outcome.
    pub fn utility(&self, items: &[(&RerankRequest, &[usize])]) -> Result<Vec<f64>> {
        let k = self.cfg.k();
        Ok(self
            .score_batch(items)?
            .iter()
            .map(|s| {
                let total: f64 = (0..s.rows())
                    .flat_map(|i| (0..k).map(move |j| (i, j)))
                    .map(|(i, j)| {
                        let pol = self.cfg.polarity[j];
                        pol * s.get(i, j) + (1.0 - pol) * (1.0 - s.get(i, j))
                    })
                    .sum();
                total / (s.rows() * k) as f64
            })
            .collect())
    }

    /// `[x_item, u]` rows for hard slates.
    pub fn slate_rows(&self, items: &[(&RerankRequest, &[usize])]) -> Result<Matrix<T>> {
        let mut rows = Vec::with_capacity(items.len() * self.cfg.m);
        for (req, slate) in items {
            req.validate(req.n(), self.cfg.d_u, self.cfg.d_x)?;
            if slate.len() != self.cfg.m || slate.iter().any(|&c| c >= req.n()) {
                return Err(Error::InvalidSlate(format!(
                    "request {}: slate {slate:?} does not fit m={} over {} candidates",
                    req.request_id,
                    self.cfg.m,
                    req.n()
                )));
            }
            for &c in *slate {
                rows.push(
                    req.candidates[c]
                        .x
                        .iter()
                        .chain(&req.user)
                        .map(|&v| T::of(v))
                        .collect::<Vec<T>>(),
                );
            }
        }
        Ok(Matrix::from_rows(&rows))
    }

    pub fn export(&self) -> Vec<(String, Matrix<f64>)> {
        self.store.export(CHECKPOINT_PREFIX)
    }

    pub fn import(&mut self, entries: &[(String, Matrix<f64>)]) -> Result<()> {
        self.store.import(CHECKPOINT_PREFIX, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.export())
    }

    pub fn load(cfg: EvaluatorConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut ev = Self::new(cfg, 0)?;
        ev.import(&checkpoint::load(path)?)?;
        Ok(ev)
    }
}

/// Binary cross-entropy on logits, summed over entries and divided by `batch`.
pub fn bce_with_logits<T: Real>(g: &mut Graph<T>, logits: Var, targets: Matrix<T>, batch: usize) -> Result<Var> {
    let y = g.constant(targets.clone());
    let not_y = g.constant(targets.map(|t| T::one() - t));
    let lp = g.log_sigmoid(logits);
    let neg = g.neg(logits);
    let ln = g.log_sigmoid(neg);
    let a = g.mul(y, lp)?;
    let b = g.mul(not_y, ln)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, T::of(-1.0 / batch as f64)))
}

/// Supervised evaluator loss on logged slates and their labels.
pub fn eval_loss<T: Real>(ev: &Evaluator<T>, g: &mut Graph<T>, b: &Bound, records: &[&Record]) -> Result<Var> {
    let k = ev.cfg.k();
    if k != NUM_TASKS {
        return Err(Error::Config(format!(
            "logged data carries {NUM_TASKS} tasks, evaluator has {k}"
        )));
    }
    let targets: Vec<Vec<usize>> = records.iter().map(|r| r.target()).collect();
    let items: Vec<(&RerankRequest, &[usize])> = records
        .iter()
        .zip(&targets)
        .map(|(r, t)| (&r.request, t.as_slice()))
        .collect();
    let rows = g.constant(ev.slate_rows(&items)?);
    let z = ev.logits(g, b, rows, records.len())?;
    let labels: Vec<Vec<T>> = records
        .iter()
        .flat_map(|r| {
            r.outcome
                .labels
                .iter()
                .map(|l| l.iter().map(|&v| T::of(v as f64)).collect())
        })
        .collect();
    let loss = bce_with_logits(g, z, Matrix::from_rows(&labels), records.len())?;
    if !g.value(loss).scalar_value().is_finite() {
        return Err(Error::NonFiniteLoss("evaluator loss".into()));
    }
    Ok(loss)
}

/// `m x n` Gumbel(0, 1) noise.
pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    })
}

/// Relaxed one-hot rows `softmax((logits[path[i]] + noise[i]) / tau)`.
pub fn gumbel_relaxed_sample<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    path: &[usize],
    noise: &Matrix<f64>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Temperature(tau));
    }
    let rows = g.select_rows(logits, path)?;
    let r = g.constant(noise.cast());
    let z = g.add(rows, r)?;
    let z = g.scale(z, T::of(1.0 / tau));
    Ok(g.softmax_rows(z))
}

/// Row `i` is `S_i · features`.
pub fn relaxed_slate_embeddings<T: Real>(g: &mut Graph<T>, s: Var, features: Var) -> Result<Var> {
    g.matmul(s, features)
}

/// The random choices behind one relaxed slate: a vertex path and its Gumbel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Relaxation {
    pub path: Vec<usize>,
    pub noise: Matrix<f64>,
}

/// Draw a path from the band-renormalised transitions (the chain when there
/// are none) plus fresh noise.
pub fn draw_relaxation(
    transition: Option<&TransitionMatrix>,
    m: usize,
    n: usize,
    path_rng: &mut impl Rng,
    gumbel_rng: &mut impl Rng,
) -> Result<Relaxation> {
    let path = match transition {
        Some(e) => sample_path(e, m, 1.0, path_rng)?.into_vec(),
        None => (0..m).collect(),
    };
    Ok(Relaxation {
        path,
        noise: gumbel_noise(m, n, gumbel_rng),
    })
}

/// Draw one relaxation per generator output, reading transitions off the graph.
pub fn draw_relaxations<T: Real>(
    g: &Graph<T>,
    outs: &[GenOutput],
    m: usize,
    path_rng: &mut impl Rng,
    gumbel_rng: &mut impl Rng,
) -> Result<Vec<Relaxation>> {
    outs.iter()
        .map(|o| {
            let e = o.log_e.map(|v| TransitionMatrix::from_log(g.value(v).cast()));
            let n = g.shape(o.log_p_t).1;
            draw_relaxation(e.as_ref(), m, n, path_rng, gumbel_rng)
        })
        .collect()
}

/// Cross-entropy of the frozen evaluator's scores on relaxed generated slates
/// against the per-task target polarities, averaged over the batch. `eb`
/// should be a constant binding so the evaluator receives no gradient.
pub fn consistency_loss<T: Real>(
    g: &mut Graph<T>,
    ev: &Evaluator<T>,
    eb: &Bound,
    outs: &[GenOutput],
    reqs: &[&RerankRequest],
    draws: &[Relaxation],
    tau: f64,
) -> Result<Var> {
    assert!(
        outs.len() == reqs.len() && outs.len() == draws.len(),
        "one draw per request"
    );
    let (m, k) = (ev.cfg.m, ev.cfg.k());
    let mut rows = Vec::with_capacity(outs.len());
    for ((o, req), d) in outs.iter().zip(reqs).zip(draws) {
        if d.path.len() != m {
            return Err(Error::InvalidPath(format!(
                "relaxed path {:?} has length != {m}",
                d.path
            )));
        }
        let s = gumbel_relaxed_sample(g, o.log_p_t, &d.path, &d.noise, tau)?;
        let feats: Vec<Vec<T>> = req
            .candidates
            .iter()
            .map(|c| c.x.iter().map(|&v| T::of(v)).collect())
            .collect();
        let feats = g.constant(Matrix::from_rows(&feats));
        let items = relaxed_slate_embeddings(g, s, feats)?;
        let user = g.constant(Matrix::from_fn(m, req.user.len(), |_, j| T::of(req.user[j])));
        rows.push(g.concat_cols(&[items, user])?);
    }
    let x = g.concat_rows(&rows)?;
    let z = ev.logits(g, eb, x, outs.len())?;
    let targets = Matrix::from_fn(outs.len() * m, k, |_, j| T::of(ev.cfg.polarity[j]));
    let loss = bce_with_logits(g, z, targets, outs.len())?;
    if !g.value(loss).scalar_value().is_finite() {
        return Err(Error::NonFiniteLoss("consistency loss".into()));
    }
    Ok(loss)
}

/// `l_con + alpha * l_gen`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, l_con: Var, l_gen: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let w = g.scale(l_gen, T::of(alpha));
    g.add(l_con, w)
}

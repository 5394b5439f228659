//! Paths through the vertex DAG, slate likelihoods and the path-marginalised
//! generative loss.
//!
//! Vertices and candidates are 0-based. A path of length `m` starts at vertex
//! 0 and ends at vertex `g - 1`. At step `t` (0-based, `t >= 1`) the walk
//! from `u` may only move to a vertex that still leaves room for the
//! remaining steps, `u < v <= g - m + t`; the transition row is renormalised
//! over that band, and the final step to `g - 1` has probability 1. Under
//! this rule the slate likelihoods of a fixed-length walk sum to one.

use std::ops::RangeInclusive;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{EmissionMatrix, GenOutput, TransitionMatrix};
use crate::tensor::{log_sum_exp, Matrix, Real};

pub const MAX_PATHS: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path(Vec<usize>);

impl Path {
    /// A path over `g` vertices: starts at 0, ends at `g - 1`, strictly increasing.
    pub fn new(vertices: Vec<usize>, g: usize) -> Result<Self> {
        let p = Self::free(vertices, g)?;
        if p.0.last() != Some(&(g - 1)) {
            return Err(Error::InvalidPath(format!("{:?} must end at vertex {}", p.0, g - 1)));
        }
        Ok(p)
    }

    /// Like [`Path::new`] without the endpoint constraint.
    pub fn free(vertices: Vec<usize>, g: usize) -> Result<Self> {
        if vertices.first() != Some(&0) {
            return Err(Error::InvalidPath(format!("{vertices:?} must start at vertex 0")));
        }
        if vertices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPath(format!("{vertices:?} is not strictly increasing")));
        }
        if vertices.iter().any(|&v| v >= g) {
            return Err(Error::InvalidPath(format!("{vertices:?} leaves the {g}-vertex graph")));
        }
        Ok(Self(vertices))
    }

    pub fn vertices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

/// Vertices reachable at step `t >= 1` from `from` on a length-`m` path.
pub fn admissible(from: usize, t: usize, g: usize, m: usize) -> RangeInclusive<usize> {
    if t + 1 == m {
        // Empty when `from` already sits on the last vertex.
        return if from + 1 < g {
            (g - 1)..=(g - 1)
        } else {
            std::ops::RangeInclusive::new(1, 0)
        };
    }
    (from + 1)..=(g + t - m)
}

/// Log-probability of stepping `from -> to` at step `t`, renormalised over
/// the admissible band. `-inf` outside the band.
pub fn step_log_prob(e: &TransitionMatrix, from: usize, to: usize, t: usize, m: usize) -> f64 {
    let band = admissible(from, t, e.g(), m);
    if !band.contains(&to) {
        return f64::NEG_INFINITY;
    }
    if t + 1 == m {
        return 0.0;
    }
    let row = &e.log_matrix().row(from)[band];
    e.log(from, to) - log_sum_exp(row)
}

fn check_slate(y: &[usize], n: usize, m: usize) -> Result<()> {
    if y.len() != m {
        return Err(Error::InvalidSlate(format!("length {} != path length {m}", y.len())));
    }
    if let Some(c) = y.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidSlate(format!("candidate {c} out of range 0..{n}")));
    }
    Ok(())
}

/// `log P(y, path)` under the band-renormalised walk.
pub fn path_log_prob(path: &Path, y: &[usize], e: &TransitionMatrix, p: &EmissionMatrix) -> Result<f64> {
    let g = e.g();
    let a = Path::new(path.0.clone(), g)?.0;
    let m = a.len();
    check_slate(y, p.n(), m)?;
    let mut lp = p.log(y[0], a[0]);
    for t in 1..m {
        lp += step_log_prob(e, a[t - 1], a[t], t, m) + p.log(y[t], a[t]);
    }
    Ok(lp)
}

/// All valid length-`m` paths over `g` vertices in lexicographic order.
pub fn enumerate_paths(g: usize, m: usize) -> Result<Vec<Path>> {
    if m == 0 || g < m {
        return Ok(Vec::new());
    }
    if m == 1 {
        return Ok(if g == 1 { vec![Path(vec![0])] } else { Vec::new() });
    }
    let (inner, pick) = (g - 2, m - 2);
    let mut count: u128 = 1;
    for i in 0..pick {
        count = count * (inner - i) as u128 / (i + 1) as u128;
        if count > MAX_PATHS {
            return Err(Error::TooManyPaths(inner, pick));
        }
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut idx: Vec<usize> = (1..=pick).collect();
    loop {
        let mut v = Vec::with_capacity(m);
        v.push(0);
        v.extend(&idx);
        v.push(g - 1);
        out.push(Path(v));
        // Next combination of `pick` interior vertices from 1..=g-2.
        let mut i = pick;
        while i > 0 && idx[i - 1] == inner - pick + i {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..pick {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Forward/backward lattice of one (slate, E, P) triple.
struct Lattice {
    /// `alpha[t][v]`, `beta[t][v]`.
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    /// `step[t][u]`: log normaliser of the admissible band from `u` at step `t`.
    norm: Vec<Vec<f64>>,
    log_z: f64,
}

/// `log_e`: `g x g` log transitions (`None` = chain); `log_p_t`: `g x n`.
fn lattice(log_e: Option<&Matrix<f64>>, log_p_t: &Matrix<f64>, y: &[usize], with_beta: bool) -> Lattice {
    let g = log_p_t.rows();
    let m = y.len();
    let ninf = f64::NEG_INFINITY;
    let trans = |t: usize, u: usize, v: usize, norm: &[f64]| -> f64 {
        match log_e {
            None => {
                if v == u + 1 {
                    0.0
                } else {
                    ninf
                }
            }
            Some(_) if t + 1 == m => 0.0,
            Some(le) => le.get(u, v) - norm[u],
        }
    };
    let mut norm = vec![vec![ninf; g]; m];
    if let Some(le) = log_e {
        for (t, nt) in norm.iter_mut().enumerate().take(m.saturating_sub(1)).skip(1) {
            for (u, slot) in nt.iter_mut().enumerate() {
                let band = admissible(u, t, g, m);
                if !band.is_empty() {
                    *slot = log_sum_exp(&le.row(u)[band]);
                }
            }
        }
    }
    let band = |u: usize, t: usize| -> RangeInclusive<usize> {
        match log_e {
            None => {
                if u + 1 < g {
                    (u + 1)..=(u + 1)
                } else {
                    std::ops::RangeInclusive::new(1, 0)
                }
            }
            Some(_) => admissible(u, t, g, m),
        }
    };

    let mut alpha = vec![vec![ninf; g]; m];
    alpha[0][0] = log_p_t.get(0, y[0]);
    for t in 1..m {
        let (prev, cur) = alpha.split_at_mut(t);
        let (prev, cur) = (&prev[t - 1], &mut cur[0]);
        for u in 0..g {
            if prev[u] == ninf {
                continue;
            }
            for v in band(u, t) {
                let s = prev[u] + trans(t, u, v, &norm[t]);
                cur[v] = log_add(cur[v], s);
            }
        }
        for (v, a) in cur.iter_mut().enumerate() {
            if *a != ninf {
                *a += log_p_t.get(v, y[t]);
            }
        }
    }
    let log_z = alpha[m - 1][g - 1];

    let mut beta = Vec::new();
    if with_beta {
        beta = vec![vec![ninf; g]; m];
        beta[m - 1][g - 1] = 0.0;
        for t in (1..m).rev() {
            for u in 0..g {
                if alpha[t - 1][u] == ninf {
                    continue;
                }
                let mut acc = ninf;
                for v in band(u, t) {
                    if beta[t][v] == ninf {
                        continue;
                    }
                    acc = log_add(acc, trans(t, u, v, &norm[t]) + log_p_t.get(v, y[t]) + beta[t][v]);
                }
                beta[t - 1][u] = acc;
            }
        }
    }
    Lattice {
        alpha,
        beta,
        norm,
        log_z,
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log Σ_paths P(y, path)` by dynamic programming in `O(m g^2)`.
pub fn dag_log_marginal(y: &[usize], e: &TransitionMatrix, p: &EmissionMatrix) -> Result<f64> {
    check_slate(y, p.n(), y.len())?;
    if y.is_empty() || e.g() != p.g() || e.g() < y.len() {
        return Err(Error::InvalidSlate(format!(
            "cannot place {} items on {} vertices",
            y.len(),
            e.g()
        )));
    }
    Ok(lattice(Some(e.log_matrix()), p.log_t(), y, false).log_z)
}

/// Gradients of `log Z` with respect to the log-transition and log-emission inputs.
fn lattice_grads(
    log_e: Option<&Matrix<f64>>,
    log_p_t: &Matrix<f64>,
    y: &[usize],
) -> (Option<Matrix<f64>>, Matrix<f64>) {
    let lat = lattice(log_e, log_p_t, y, true);
    let (g, m) = (log_p_t.rows(), y.len());
    let z = lat.log_z;
    let post = |t: usize, v: usize| (lat.alpha[t][v] + lat.beta[t][v] - z).exp();

    let mut dp = Matrix::zeros(g, log_p_t.cols());
    for (t, &c) in y.iter().enumerate() {
        for v in 0..g {
            if lat.alpha[t][v] != f64::NEG_INFINITY && lat.beta[t][v] != f64::NEG_INFINITY {
                let cur = dp.get(v, c);
                dp.set(v, c, cur + post(t, v));
            }
        }
    }

    let de = log_e.map(|le| {
        let mut de = Matrix::zeros(g, g);
        for t in 1..m.saturating_sub(1) {
            for u in 0..g {
                if lat.alpha[t - 1][u] == f64::NEG_INFINITY || lat.beta[t - 1][u] == f64::NEG_INFINITY {
                    continue;
                }
                let occ = post(t - 1, u);
                for v in admissible(u, t, g, m) {
                    let l = le.get(u, v) - lat.norm[t][u];
                    let mut d = -l.exp() * occ;
                    if lat.beta[t][v] != f64::NEG_INFINITY {
                        d += (lat.alpha[t - 1][u] + l + log_p_t.get(v, y[t]) + lat.beta[t][v] - z).exp();
                    }
                    de.set(u, v, de.get(u, v) + d);
                }
            }
        }
        de
    });
    (de, dp)
}

struct DagMarginal {
    y: Vec<usize>,
    chain: bool,
}

impl<T: Real> CustomOp<T> for DagMarginal {
    fn name(&self) -> &'static str {
        "dag_marginal"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>> {
        let upstream = grad.scalar_value().f64();
        let (le, lp) = if self.chain {
            (None, inputs[0].cast::<f64>())
        } else {
            (Some(inputs[0].cast::<f64>()), inputs[1].cast::<f64>())
        };
        let (de, dp) = lattice_grads(le.as_ref(), &lp, &self.y);
        let scale = |m: Matrix<f64>| m.map(|x| x * upstream).cast::<T>();
        let mut out = Vec::new();
        if let Some(de) = de {
            out.push(Some(scale(de)));
        }
        out.push(Some(scale(dp)));
        out
    }
}

/// Differentiable `log Σ_paths P(y, path)` for one request's generator output.
/// Without transitions the single chain path `0, 1, ..., m-1` is used.
pub fn log_marginal_var<T: Real>(g: &mut Graph<T>, out: &GenOutput, y: &[usize]) -> Result<Var> {
    let lp = g.value(out.log_p_t).cast::<f64>();
    check_slate(y, lp.cols(), y.len())?;
    if y.is_empty() || lp.rows() < y.len() || (out.log_e.is_none() && lp.rows() != y.len()) {
        return Err(Error::InvalidSlate(format!(
            "cannot place {} items on {} vertices",
            y.len(),
            lp.rows()
        )));
    }
    let le = out.log_e.map(|v| g.value(v).cast::<f64>());
    let z = lattice(le.as_ref(), &lp, y, false).log_z;
    let op = Box::new(DagMarginal {
        y: y.to_vec(),
        chain: le.is_none(),
    });
    let inputs: Vec<Var> = out.log_e.into_iter().chain([out.log_p_t]).collect();
    Ok(g.custom(&inputs, Matrix::scalar(T::of(z)), op))
}

/// Mean negative log-marginal over a batch.
pub fn gen_loss<T: Real>(g: &mut Graph<T>, outs: &[GenOutput], targets: &[Vec<usize>]) -> Result<Var> {
    assert_eq!(outs.len(), targets.len(), "one target per output");
    let mut terms = Vec::with_capacity(outs.len());
    for (i, (o, y)) in outs.iter().zip(targets).enumerate() {
        let v = log_marginal_var(g, o, y)?;
        if !g.value(v).scalar_value().is_finite() {
            return Err(Error::NonFiniteLoss(format!("generative loss, batch index {i}")));
        }
        terms.push(v);
    }
    let row = g.concat_cols(&terms)?;
    let mean = g.mean(row);
    Ok(g.neg(mean))
}

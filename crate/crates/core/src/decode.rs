//! Slate construction from a transition matrix and emission matrix.

use std::collections::HashSet;

use rand::Rng;

use crate::dag::{admissible, path_log_prob, step_log_prob, Path};
use crate::data::RerankRequest;
use crate::error::{Error, Result};
use crate::model::{EmissionMatrix, Generator, Inferred, TransitionMatrix};
use crate::rng::{substream, Stream};
use crate::tensor::{log_sum_exp, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Candidate indices, distinct, in slot order.
    pub slate: Vec<usize>,
    pub path: Path,
    pub joint_log_prob: f64,
    /// Transition decisions taken (always `m - 1`).
    pub transitions: usize,
    /// Every candidate: slate first, then the rest by their best emission
    /// probability over the path's vertices (ties by index).
    pub ranking: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Lookahead,
    Sample { temperature: f64 },
    Vanilla,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Lookahead => "lookahead",
            Strategy::Sample { .. } => "sample",
            Strategy::Vanilla => "vanilla",
        }
    }
}

/// With `free_endpoint` the last vertex is chosen like any other step
/// instead of being pinned to `g - 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    pub free_endpoint: bool,
}

fn step_band(from: usize, t: usize, g: usize, m: usize, free: bool) -> std::ops::RangeInclusive<usize> {
    if free {
        (from + 1)..=(g + t - m)
    } else {
        admissible(from, t, g, m)
    }
}

/// Transition log-prob over the step's band; the forced last step scores 0.
fn band_log_prob(e: &TransitionMatrix, from: usize, to: usize, t: usize, m: usize, free: bool) -> f64 {
    if !free {
        return step_log_prob(e, from, to, t, m);
    }
    let band = step_band(from, t, e.g(), m, true);
    e.log(from, to) - log_sum_exp(&e.log_matrix().row(from)[band])
}

fn finish(
    slate: Vec<usize>,
    verts: Vec<usize>,
    e: &TransitionMatrix,
    p: &EmissionMatrix,
    free: bool,
) -> Result<DecodeResult> {
    let m = slate.len();
    let (path, joint_log_prob) = if free {
        let path = Path::free(verts, e.g())?;
        let a = path.vertices();
        let mut lp = p.log(slate[0], a[0]);
        for t in 1..m {
            lp += band_log_prob(e, a[t - 1], a[t], t, m, true) + p.log(slate[t], a[t]);
        }
        (path, lp)
    } else {
        let path = Path::new(verts, e.g())?;
        let lp = path_log_prob(&path, &slate, e, p)?;
        (path, lp)
    };
    let ranking = rank_candidates(p, &slate, path.vertices());
    Ok(DecodeResult {
        slate,
        path,
        joint_log_prob,
        transitions: m - 1,
        ranking,
    })
}

/// Candidate order used for Recall@K beyond the slate length.
pub fn rank_candidates(p: &EmissionMatrix, slate: &[usize], path: &[usize]) -> Vec<usize> {
    let chosen: HashSet<usize> = slate.iter().copied().collect();
    let mut rest: Vec<(f64, usize)> = (0..p.n())
        .filter(|c| !chosen.contains(c))
        .map(|c| (path.iter().map(|&v| p.log(c, v)).fold(f64::NEG_INFINITY, f64::max), c))
        .collect();
    rest.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    slate.iter().copied().chain(rest.into_iter().map(|r| r.1)).collect()
}

fn check_dims(e: &TransitionMatrix, p: &EmissionMatrix, m: usize) -> Result<()> {
    if e.g() != p.g() {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: (e.g(), e.g()),
            rhs: (p.n(), p.g()),
        });
    }
    if m == 0 || m > e.g() || m > p.n() {
        return Err(Error::InvalidSlate(format!(
            "cannot decode {m} items from {} candidates on {} vertices",
            p.n(),
            e.g()
        )));
    }
    Ok(())
}

fn best_candidate(p: &EmissionMatrix, v: usize, used: &[bool]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (c, &lp) in p.vertex_log(v).iter().enumerate() {
        if !used[c] && best.is_none_or(|(_, b)| lp > b) {
            best = Some((c, lp));
        }
    }
    best
}

/// Greedy joint search: at each step pick the admissible (vertex, candidate)
/// pair maximising `E[prev][v] * P[c][v]`, lowest vertex then lowest candidate
/// on ties.
pub fn lookahead_decode(
    e: &TransitionMatrix,
    p: &EmissionMatrix,
    m: usize,
    opts: DecodeOptions,
) -> Result<DecodeResult> {
    check_dims(e, p, m)?;
    let g = e.g();
    let mut used = vec![false; p.n()];
    let (c0, _) = best_candidate(p, 0, &used).expect("n >= 1");
    used[c0] = true;
    let (mut slate, mut verts) = (vec![c0], vec![0]);
    for t in 1..m {
        let from = verts[t - 1];
        let mut best: Option<(usize, usize, f64)> = None;
        for v in step_band(from, t, g, m, opts.free_endpoint) {
            let Some((c, lp)) = best_candidate(p, v, &used) else {
                continue;
            };
            let s = e.log(from, v) + lp;
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((v, c, s));
            }
        }
        let (v, c, _) = best.ok_or(Error::NoAdmissibleVertex(t))?;
        used[c] = true;
        slate.push(c);
        verts.push(v);
    }
    finish(slate, verts, e, p, opts.free_endpoint)
}

fn sample_index(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            if u < wi {
                return i;
            }
            u -= wi;
        }
    }
    // Rounding left `u` past the end: take the last positive weight.
    w.iter().rposition(|&x| x > 0.0).expect("at least one finite logit")
}

/// Ancestral walk along the band-renormalised transitions, logits divided by
/// `temperature`.
pub fn sample_path(e: &TransitionMatrix, m: usize, temperature: f64, rng: &mut impl Rng) -> Result<Path> {
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    let g = e.g();
    let mut verts = vec![0];
    for t in 1..m {
        let from = verts[t - 1];
        let band = admissible(from, t, g, m);
        if band.is_empty() {
            return Err(Error::NoAdmissibleVertex(t));
        }
        let lo = *band.start();
        let logits = &e.log_matrix().row(from)[band];
        verts.push(lo + sample_index(logits, temperature, rng));
    }
    Path::new(verts, g)
}

/// Ancestral decode: each step draws the next vertex from its band of the
/// transition row, then an item from that vertex's emissions restricted to
/// unused candidates. Both draws divide their logits by `temperature`.
pub fn sample_decode(
    e: &TransitionMatrix,
    p: &EmissionMatrix,
    m: usize,
    temperature: f64,
    opts: DecodeOptions,
    rng: &mut impl Rng,
) -> Result<DecodeResult> {
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    check_dims(e, p, m)?;
    let g = e.g();
    let mut used = vec![false; p.n()];
    let item = |v: usize, used: &mut [bool], rng: &mut _| {
        let logits: Vec<f64> = p
            .vertex_log(v)
            .iter()
            .zip(used.iter())
            .map(|(&lp, &u)| if u { f64::NEG_INFINITY } else { lp })
            .collect();
        let c = sample_index(&logits, temperature, rng);
        used[c] = true;
        c
    };
    let (mut slate, mut verts) = (vec![item(0, &mut used, rng)], vec![0]);
    for t in 1..m {
        let from = verts[t - 1];
        let band = step_band(from, t, g, m, opts.free_endpoint);
        if band.is_empty() {
            return Err(Error::NoAdmissibleVertex(t));
        }
        let lo = *band.start();
        let v = lo + sample_index(&e.log_matrix().row(from)[band], temperature, rng);
        slate.push(item(v, &mut used, rng));
        verts.push(v);
    }
    finish(slate, verts, e, p, opts.free_endpoint)
}

/// Evenly spaced vertices `round(i * (g - 1) / (m - 1))`; the identity path when `g = m`.
pub fn spread_path(g: usize, m: usize) -> Vec<usize> {
    if m == 1 {
        return vec![0];
    }
    (0..m)
        .map(|i| ((i * (g - 1)) as f64 / (m - 1) as f64).round() as usize)
        .collect()
}

/// Position-wise decoding: slot `i` takes the most likely unused candidate of
/// its own vertex, with no transition search.
pub fn vanilla_decode(e: &TransitionMatrix, p: &EmissionMatrix, m: usize) -> Result<DecodeResult> {
    check_dims(e, p, m)?;
    let verts = spread_path(e.g(), m);
    let mut used = vec![false; p.n()];
    let mut slate = Vec::with_capacity(m);
    for &v in &verts {
        let (c, _) = best_candidate(p, v, &used).expect("m <= n");
        used[c] = true;
        slate.push(c);
    }
    finish(slate, verts, e, p, false)
}

pub fn decode_one(
    inf: &Inferred,
    m: usize,
    strategy: Strategy,
    opts: DecodeOptions,
    rng: &mut impl Rng,
) -> Result<DecodeResult> {
    let e = inf.transition_or_chain();
    match strategy {
        Strategy::Lookahead => lookahead_decode(&e, &inf.emission, m, opts),
        Strategy::Sample { temperature } => sample_decode(&e, &inf.emission, m, temperature, opts, rng),
        Strategy::Vanilla => vanilla_decode(&e, &inf.emission, m),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub strategy: Strategy,
    pub decode: DecodeOptions,
    /// Root seed; request `r` samples from its own sub-stream keyed by `request_id`.
    pub seed: u64,
    pub workers: usize,
    /// Requests per forward pass.
    pub chunk: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Lookahead,
            decode: DecodeOptions::default(),
            seed: 0,
            workers: 1,
            chunk: 64,
        }
    }
}

fn decode_chunk<T: Real>(
    model: &Generator<T>,
    reqs: &[&RerankRequest],
    opts: &BatchOptions,
) -> Result<Vec<DecodeResult>> {
    let m = model.config().m;
    let mut out = Vec::with_capacity(reqs.len());
    for part in reqs.chunks(opts.chunk.max(1)) {
        let infs = model.infer(part)?;
        for (r, inf) in part.iter().zip(&infs) {
            let mut rng = substream(opts.seed, Stream::Decode, r.request_id);
            let res = decode_one(inf, m, opts.strategy, opts.decode, &mut rng).map_err(|e| match e {
                e if e.is_numerical() => e,
                e => Error::Request {
                    request_id: r.request_id,
                    reason: e.to_string(),
                },
            })?;
            out.push(res);
        }
    }
    Ok(out)
}

/// Forward + decode for every request; results keep input order and do not
/// depend on the worker count.
pub fn batch_decode<T: Real>(
    model: &Generator<T>,
    reqs: &[&RerankRequest],
    opts: &BatchOptions,
) -> Result<Vec<DecodeResult>> {
    let workers = opts.workers.max(1);
    if workers == 1 || reqs.len() < 2 {
        return decode_chunk(model, reqs, opts);
    }
    let per = reqs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = reqs
            .chunks(per)
            .map(|part| s.spawn(move || decode_chunk(model, part, opts)))
            .collect();
        let mut out = Vec::with_capacity(reqs.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

//! Naive reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use dagrank::model::{EmissionMatrix, TransitionMatrix};

pub fn uniq(xs: &[u64]) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    for &x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

pub fn naive_jaccard(a: &[u64], b: &[u64]) -> f64 {
    let (a, b) = (uniq(a), uniq(b));
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

pub fn naive_pairs(slates: &[Vec<u64>], f: impl Fn(&[u64], &[u64]) -> f64) -> f64 {
    let mut vals = Vec::new();
    for i in 0..slates.len() {
        for j in 0..slates.len() {
            if i < j {
                vals.push(f(&slates[i], &slates[j]));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn naive_repetition(slates: &[Vec<u64>]) -> f64 {
    let m = slates[0].len() as f64;
    naive_pairs(slates, |a, b| {
        uniq(a).iter().filter(|x| b.contains(x)).count() as f64 / m
    })
}

pub fn naive_coverage(slates: &[Vec<u64>], catalog: usize) -> f64 {
    let all: Vec<u64> = slates.iter().flatten().copied().collect();
    uniq(&all).len() as f64 / catalog as f64
}

pub fn naive_distinct2(slates: &[Vec<u64>]) -> f64 {
    let mut seen: Vec<(u64, u64)> = Vec::new();
    let mut total = 0;
    for s in slates {
        for i in 0..s.len() - 1 {
            total += 1;
            if !seen.contains(&(s[i], s[i + 1])) {
                seen.push((s[i], s[i + 1]));
            }
        }
    }
    seen.len() as f64 / total as f64
}

// Probability that a random positive outscores a random negative.
pub fn naive_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn naive_ndcg(labels: &[u8], k: usize) -> f64 {
    let k = k.min(labels.len());
    let mut dcg = 0.0;
    for i in 0..k {
        dcg += (2f64.powi(labels[i] as i32) - 1.0) / (i as f64 + 2.0).log2();
    }
    let mut sorted = labels.to_vec();
    sorted.sort();
    sorted.reverse();
    let mut idcg = 0.0;
    for i in 0..k {
        idcg += (2f64.powi(sorted[i] as i32) - 1.0) / (i as f64 + 2.0).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

// Exhaustive search over every admissible (vertex, candidate) pair at each
// step, scored by `log E[prev][v] + log P[c][v]`. The first vertex is 0, the
// last is g-1, and interior steps must leave room for the remaining ones.
pub fn brute_lookahead(e: &TransitionMatrix, p: &EmissionMatrix, m: usize) -> (Vec<usize>, Vec<usize>) {
    let (g, n) = (e.g(), p.n());
    let mut used = vec![false; n];
    let first = (0..n)
        .max_by(|&a, &b| p.log(a, 0).total_cmp(&p.log(b, 0)).then(b.cmp(&a)))
        .unwrap();
    used[first] = true;
    let (mut slate, mut verts) = (vec![first], vec![0]);
    for t in 1..m {
        let from = verts[t - 1];
        let allowed: Vec<usize> = if t == m - 1 {
            vec![g - 1]
        } else {
            (from + 1..=g - m + t).collect()
        };
        let mut best: Option<(f64, usize, usize)> = None;
        for &v in &allowed {
            for c in 0..n {
                if used[c] {
                    continue;
                }
                let s = e.log(from, v) + p.log(c, v);
                // Strictly greater keeps the lowest vertex, then lowest candidate.
                if best.is_none() || s > best.unwrap().0 {
                    best = Some((s, v, c));
                }
            }
        }
        let (_, v, c) = best.unwrap();
        used[c] = true;
        slate.push(c);
        verts.push(v);
    }
    (slate, verts)
}

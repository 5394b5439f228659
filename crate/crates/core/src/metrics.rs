//! Accuracy and cross-list diversity metrics.

use std::collections::HashSet;
use std::io::Write;

use crate::error::{Error, Result};

/// `|top-k ∩ exposed| / |exposed|`.
pub fn recall_at_k(ranked: &[u64], exposed: &[u64], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Metric("recall@k needs k >= 1".into()));
    }
    if exposed.is_empty() {
        return Err(Error::Metric("recall@k needs at least one exposed item".into()));
    }
    let want: HashSet<u64> = exposed.iter().copied().collect();
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| want.contains(i))
        .collect::<HashSet<_>>()
        .len();
    Ok(hits as f64 / want.len() as f64)
}

/// Rank-sum AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("auc needs both positive and negative labels".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Tied block shares the average of ranks i+1 ..= j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// NDCG@k with gain `2^rel - 1` and discount `log2(position + 1)`; 0 without
/// positives. `k` beyond the list length is clamped.
pub fn ndcg(ranked_labels: &[u8], k: usize) -> f64 {
    let k = k.min(ranked_labels.len());
    let dcg = |labels: &[u8]| -> f64 {
        labels
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &r)| ((1u64 << r) - 1) as f64 / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = ranked_labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let best = dcg(&ideal);
    if best == 0.0 {
        return 0.0;
    }
    dcg(ranked_labels) / best
}

fn check_set(slates: &[Vec<u64>], min: usize) -> Result<()> {
    if slates.len() < min {
        return Err(Error::Metric(format!(
            "need at least {min} slates, got {}",
            slates.len()
        )));
    }
    if slates.iter().any(Vec::is_empty) {
        return Err(Error::Metric("slates must be non-empty".into()));
    }
    Ok(())
}

fn pairwise_mean(slates: &[Vec<u64>], f: impl Fn(&HashSet<u64>, &HashSet<u64>) -> f64) -> f64 {
    let sets: Vec<HashSet<u64>> = slates.iter().map(|s| s.iter().copied().collect()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            total += f(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Mean pairwise Jaccard similarity of slates taken as sets.
pub fn mean_jaccard(slates: &[Vec<u64>]) -> Result<f64> {
    check_set(slates, 2)?;
    Ok(pairwise_mean(slates, |a, b| {
        a.intersection(b).count() as f64 / a.union(b).count() as f64
    }))
}

/// `1 - mean pairwise Jaccard`.
pub fn diversity_score(slates: &[Vec<u64>]) -> Result<f64> {
    Ok(1.0 - mean_jaccard(slates)?)
}

/// Mean over pairs of `|S_i ∩ S_j| / m`.
pub fn repetition_rate(slates: &[Vec<u64>]) -> Result<f64> {
    check_set(slates, 2)?;
    let m = slates[0].len();
    if slates.iter().any(|s| s.len() != m) {
        return Err(Error::Metric("repetition rate needs slates of equal length".into()));
    }
    Ok(pairwise_mean(slates, |a, b| {
        a.intersection(b).count() as f64 / m as f64
    }))
}

/// Distinct recommended items over the catalog size.
pub fn item_coverage(slates: &[Vec<u64>], catalog_size: usize) -> Result<f64> {
    if catalog_size == 0 {
        return Err(Error::Metric("catalog size must be >= 1".into()));
    }
    let all: HashSet<u64> = slates.iter().flatten().copied().collect();
    Ok(all.len() as f64 / catalog_size as f64)
}

/// Unique ordered bigrams over total bigrams, pooled across the set, or the
/// mean of per-slate ratios when `per_list` is set.
pub fn distinct2(slates: &[Vec<u64>], per_list: bool) -> Result<f64> {
    check_set(slates, 1)?;
    if slates.iter().any(|s| s.len() < 2) {
        return Err(Error::Metric("distinct-2 needs slates of length >= 2".into()));
    }
    let ratio = |lists: &[Vec<u64>]| {
        let bigrams: Vec<(u64, u64)> = lists.iter().flat_map(|s| s.windows(2).map(|w| (w[0], w[1]))).collect();
        bigrams.iter().collect::<HashSet<_>>().len() as f64 / bigrams.len() as f64
    };
    if per_list {
        let sum: f64 = slates.iter().map(|s| ratio(std::slice::from_ref(s))).sum();
        return Ok(sum / slates.len() as f64);
    }
    Ok(ratio(slates))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub name: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, name: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            name: name.into(),
            value,
        }
    }
}

/// `metric,name,value` CSV.
pub fn write_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "name", "value"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([r.metric.as_str(), r.name.as_str(), &r.value.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Diversity metric rows for a slate set, named by `name`.
pub fn diversity_report(
    slates: &[Vec<u64>],
    catalog_size: usize,
    per_list: bool,
    name: &str,
) -> Result<Vec<MetricRow>> {
    Ok(vec![
        MetricRow::new("diversity_score", name, diversity_score(slates)?),
        MetricRow::new("repetition_rate", name, repetition_rate(slates)?),
        MetricRow::new("item_coverage", name, item_coverage(slates, catalog_size)?),
        MetricRow::new("distinct2", name, distinct2(slates, per_list)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_cases() {
        let exposed = [1, 2, 3, 4, 5, 6];
        assert_eq!(recall_at_k(&[1, 2, 3, 4, 5, 6, 7], &exposed, 6).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[9, 8, 7], &exposed, 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[1, 9, 2, 8, 3, 4], &exposed, 6).unwrap(), 4.0 / 6.0);
        assert!(recall_at_k(&[1], &exposed, 0).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1, 0.8], &[true, false, false]).unwrap(), 1.0);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg(&[1, 1, 0, 0], 4), 1.0);
        assert_eq!(ndcg(&[0, 0, 0], 3), 0.0);
        assert!((ndcg(&[0, 1], 2) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((ndcg(&[0, 1], 2) - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn diversity_cases() {
        let same = vec![vec![1, 2, 3], vec![1, 2, 3]];
        let disjoint = vec![vec![1, 2], vec![3, 4], vec![5, 6]];
        assert_eq!(diversity_score(&same).unwrap(), 0.0);
        assert_eq!(diversity_score(&disjoint).unwrap(), 1.0);
        assert_eq!(diversity_score(&[vec![1, 2, 3], vec![1, 2, 4]]).unwrap(), 0.5);
        assert!(diversity_score(&[vec![1]]).is_err());
        assert_eq!(repetition_rate(&same).unwrap(), 1.0);
        assert_eq!(repetition_rate(&disjoint).unwrap(), 0.0);
        assert_eq!(repetition_rate(&[vec![1, 2, 3, 4], vec![4, 5, 6, 7]]).unwrap(), 0.25);
        assert!(repetition_rate(&[vec![1, 2], vec![1]]).is_err());
    }

    #[test]
    fn coverage_and_distinct2_cases() {
        assert_eq!(item_coverage(&[vec![0, 1], vec![2]], 3).unwrap(), 1.0);
        assert_eq!(item_coverage(&[vec![1, 2, 3]], 10).unwrap(), 0.3);
        assert_eq!(item_coverage(&[vec![1, 2], vec![2, 3]], 10).unwrap(), 0.3);
        assert_eq!(distinct2(&[vec![1, 2, 3], vec![4, 5, 6]], false).unwrap(), 1.0);
        assert!((distinct2(&[vec![1, 2, 1, 2]], false).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct2(&[vec![1, 2, 3], vec![1, 2, 3]], false).unwrap(), 0.5);
        assert_eq!(distinct2(&[vec![1, 2, 3], vec![1, 2, 3]], true).unwrap(), 1.0);
        assert!(distinct2(&[vec![1]], false).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[MetricRow::new("recall_at_m", "lookahead", 0.5)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "metric,name,value\nrecall_at_m,lookahead,0.5\n"
        );
    }
}

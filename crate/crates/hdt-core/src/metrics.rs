//! Retrieval quality metrics: recall@k, average precision, micro-averaged
//! precision/recall for Hamming-ball retrieval, and a nearest-rank
//! percentile for latency summaries.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Fraction of `relevant` found in the first `k` entries of `retrieved`.
/// Duplicate retrieved ids count once.
pub fn recall_at_k(retrieved: &[u64], relevant: &[u64], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::invalid("recall needs a nonempty relevant set"));
    }
    if k == 0 {
        return Err(Error::invalid("recall@k needs k >= 1"));
    }
    let relevant: HashSet<u64> = relevant.iter().copied().collect();
    let mut seen = HashSet::new();
    let hits = retrieved
        .iter()
        .take(k)
        .filter(|&&id| relevant.contains(&id) && seen.insert(id))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Average precision over the first `k` entries, with the denominator
/// `min(|relevant|, k)` so a full-length perfect ranking scores 1 even when
/// `k` cannot cover every relevant item.
pub fn average_precision_at_k(retrieved: &[u64], relevant: &[u64], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::invalid("average precision needs a nonempty relevant set"));
    }
    if k == 0 {
        return Err(Error::invalid("average precision needs k >= 1"));
    }
    let relevant_set: HashSet<u64> = relevant.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &id) in retrieved.iter().take(k).enumerate() {
        if relevant_set.contains(&id) && seen.insert(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / relevant_set.len().min(k) as f64)
}

/// Mean average precision at `k` across queries.
pub fn mean_average_precision_at_k(
    retrieved: &[Vec<u64>],
    relevant: &[Vec<u64>],
    k: usize,
) -> Result<f64> {
    if retrieved.len() != relevant.len() {
        return Err(Error::shape(format!(
            "{} retrieved lists vs {} relevant lists",
            retrieved.len(),
            relevant.len()
        )));
    }
    if retrieved.is_empty() {
        return Err(Error::invalid("mean average precision needs at least one query"));
    }
    let mut sum = 0.0;
    for (ret, rel) in retrieved.iter().zip(relevant) {
        sum += average_precision_at_k(ret, rel, k)?;
    }
    Ok(sum / retrieved.len() as f64)
}

/// Micro-averaged precision and recall over per-query retrieved sets (the
/// natural summary for radius-ball retrieval, where result counts vary
/// per query): both ratios pool hits, retrieved, and relevant counts across
/// queries. An empty pooled retrieval has precision 0 by convention.
pub fn micro_precision_recall(
    retrieved: &[Vec<u64>],
    relevant: &[Vec<u64>],
) -> Result<(f64, f64)> {
    if retrieved.len() != relevant.len() {
        return Err(Error::shape(format!(
            "{} retrieved lists vs {} relevant lists",
            retrieved.len(),
            relevant.len()
        )));
    }
    let mut hits = 0usize;
    let mut total_retrieved = 0usize;
    let mut total_relevant = 0usize;
    for (ret, rel) in retrieved.iter().zip(relevant) {
        let rel_set: HashSet<u64> = rel.iter().copied().collect();
        let mut seen = HashSet::new();
        hits += ret.iter().filter(|&&id| rel_set.contains(&id) && seen.insert(id)).count();
        total_retrieved += ret.len();
        total_relevant += rel_set.len();
    }
    if total_relevant == 0 {
        return Err(Error::invalid("precision/recall needs a nonempty relevant pool"));
    }
    let precision = if total_retrieved == 0 { 0.0 } else { hits as f64 / total_retrieved as f64 };
    Ok((precision, hits as f64 / total_relevant as f64))
}

/// Nearest-rank percentile (`q` in (0, 100]) of unsorted samples.
pub fn percentile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("percentile needs at least one sample"));
    }
    if !(0.0..=100.0).contains(&q) || q == 0.0 {
        return Err(Error::invalid(format!("percentile q={q} must lie in (0, 100]")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("percentile samples must be finite"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

use crate::error::{Error, Result};

/// One query's gallery ordering and the relevance of each gallery item.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRetrieval {
    order: Vec<usize>,
    relevant: Vec<bool>,
}

impl RankedRetrieval {
    /// `order` lists gallery indices best first; `relevant` is indexed by
    /// gallery index.
    pub fn new(order: Vec<usize>, relevant: Vec<bool>) -> Result<Self> {
        let mut seen = vec![false; relevant.len()];
        if order.len() != relevant.len() {
            return Err(Error::Metric(format!(
                "ranking has {} entries for a gallery of {}",
                order.len(),
                relevant.len()
            )));
        }
        for &i in &order {
            if i >= seen.len() || seen[i] {
                return Err(Error::Metric("ranking is not a permutation of the gallery".into()));
            }
            seen[i] = true;
        }
        Ok(Self { order, relevant })
    }

    /// Ranks by ascending distance, ties broken by ascending gallery index.
    pub fn from_distances(distances: &[f64], relevant: Vec<bool>) -> Result<Self> {
        if distances.iter().any(|d| d.is_nan()) {
            return Err(Error::Metric("NaN distance".into()));
        }
        let mut order: Vec<usize> = (0..distances.len()).collect();
        order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
        Self::new(order, relevant)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn gallery_size(&self) -> usize {
        self.order.len()
    }

    pub fn relevant_count(&self) -> usize {
        self.relevant.iter().filter(|r| **r).count()
    }

    /// Relevance of the top `k` results in rank order.
    pub fn hits(&self, k: usize) -> impl Iterator<Item = bool> + '_ {
        self.order.iter().take(k).map(|&i| self.relevant[i])
    }
}

fn check(rankings: &[RankedRetrieval], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Metric("k must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Metric("no queries".into()));
    }
    Ok(())
}

/// Mean truncated average precision. Each query's AP sums precision at
/// every relevant hit within the top `k` and divides by `min(k, R)`.
/// Queries without relevant items are skipped.
pub fn map_at_k(rankings: &[RankedRetrieval], k: usize) -> Result<f64> {
    check(rankings, k)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (q, r) in rankings.iter().enumerate() {
        let rel = r.relevant_count();
        if rel == 0 {
            log::warn!("query {q} has no relevant gallery items; excluded from mAP@{k}");
            continue;
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (rank, hit) in r.hits(k).enumerate() {
            if hit {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        total += ap / k.min(rel) as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Metric("every query lacks relevant items".into()));
    }
    Ok(total / counted as f64)
}

/// Mean fraction of relevant items among the top `k`. `k` larger than the
/// gallery is clamped.
pub fn precision_at_k(rankings: &[RankedRetrieval], k: usize) -> Result<f64> {
    check(rankings, k)?;
    let mut total = 0.0;
    for r in rankings {
        let kk = if k > r.gallery_size() {
            log::warn!("P@{k} clamped to gallery size {}", r.gallery_size());
            r.gallery_size()
        } else {
            k
        };
        if kk == 0 {
            return Err(Error::Metric("empty gallery".into()));
        }
        total += r.hits(kk).filter(|h| *h).count() as f64 / kk as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn acc_at_k(rankings: &[RankedRetrieval], k: usize) -> Result<f64> {
    check(rankings, k)?;
    let n = rankings.iter().filter(|r| r.hits(k).any(|h| h)).count();
    Ok(n as f64 / rankings.len() as f64)
}

/// Fraction of samples whose label is within the predicted top-`k` list.
pub fn top_k_accuracy(predictions: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if k == 0 || labels.is_empty() {
        return Err(Error::Metric("top-k accuracy needs k ≥ 1 and at least one sample".into()));
    }
    let n = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.iter().take(k).any(|c| c == *l))
        .count();
    Ok(n as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked(rel_in_rank_order: &[bool]) -> RankedRetrieval {
        RankedRetrieval::new((0..rel_in_rank_order.len()).collect(), rel_in_rank_order.to_vec()).unwrap()
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_at_k(&[ranked(&[true, false, false])], 1).unwrap(), 1.0);
        assert_eq!(map_at_k(&[ranked(&[true, false, false])], 3).unwrap(), 1.0);
        let r = ranked(&[false, true, false, true, false]);
        assert!((map_at_k(&[r], 5).unwrap() - 0.5).abs() < 1e-12);
        let mut rel = vec![false; 200];
        rel[199] = true;
        assert!((map_at_k(&[ranked(&rel)], 200).unwrap() - 0.005).abs() < 1e-12);
    }

    #[test]
    fn map_skips_queries_without_relevant_items() {
        let rs = [ranked(&[true, false]), ranked(&[false, false])];
        assert_eq!(map_at_k(&rs, 2).unwrap(), 1.0);
        assert!(map_at_k(&rs[1..], 2).is_err());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[ranked(&[true; 4])], 4).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[ranked(&[false; 4])], 4).unwrap(), 0.0);
        let mut rel = vec![false; 12];
        rel[1] = true;
        rel[4] = true;
        rel[9] = true;
        rel[11] = true;
        assert!((precision_at_k(&[ranked(&rel)], 10).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(precision_at_k(&[ranked(&[true, false])], 10).unwrap(), 0.5);
    }

    #[test]
    fn acc_examples() {
        let first = ranked(&[true, false, false, false, false, false]);
        for k in 1..=6 {
            assert_eq!(acc_at_k(&[first.clone()], k).unwrap(), 1.0);
        }
        let sixth = ranked(&[false, false, false, false, false, true]);
        assert_eq!(acc_at_k(&[sixth.clone()], 5).unwrap(), 0.0);
        let rs = [first.clone(), first.clone(), first, sixth];
        assert_eq!(acc_at_k(&rs, 5).unwrap(), 0.75);
    }

    #[test]
    fn distance_ties_break_by_index() {
        let r = RankedRetrieval::from_distances(&[0.5, 0.1, 0.5, 0.1], vec![false; 4]).unwrap();
        assert_eq!(r.order(), &[1, 3, 0, 2]);
    }

    #[test]
    fn invalid_rankings() {
        assert!(RankedRetrieval::new(vec![0, 0], vec![true, false]).is_err());
        assert!(RankedRetrieval::new(vec![0], vec![true, false]).is_err());
        assert!(map_at_k(&[ranked(&[true])], 0).is_err());
    }

    #[test]
    fn top_k_counts_label_hits() {
        let p = vec![vec![2, 0], vec![1, 2], vec![0, 1]];
        assert_eq!(top_k_accuracy(&p, &[2, 2, 1], 1).unwrap(), 1.0 / 3.0);
        assert_eq!(top_k_accuracy(&p, &[2, 2, 1], 2).unwrap(), 1.0);
    }
}

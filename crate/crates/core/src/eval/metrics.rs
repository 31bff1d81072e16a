use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// How held-out observations turn into relevance gains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// The held-out rating.
    #[default]
    Rating,
    /// 1 for every held-out item.
    Binary,
}

impl Gain {
    pub fn of(self, rating: f64) -> f64 {
        match self {
            Gain::Rating => rating,
            Gain::Binary => 1.0,
        }
    }
}

impl std::str::FromStr for Gain {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "rating" => Ok(Gain::Rating),
            "binary" => Ok(Gain::Binary),
            other => Err(crate::Error::Validation(format!("unknown gain mode {other:?}"))),
        }
    }
}

/// NDCG at cutoff `k` of `ranked` against `relevance` (item -> gain).
/// Rank `r` (1-based) is discounted by `log2(r + 1)`; the ideal DCG uses
/// the `k` largest gains. Returns 0 when nothing relevant exists.
pub fn ndcg_at_k(ranked: &[usize], relevance: &BTreeMap<usize, f64>, k: usize) -> f64 {
    let discount = |pos: usize| ((pos + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, item)| relevance.get(item).copied().unwrap_or(0.0) / discount(pos))
        .sum();
    let mut ideal: Vec<f64> = relevance.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, g)| g / discount(pos))
        .sum();
    if idcg <= 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_edge_cases() {
        let rel: BTreeMap<usize, f64> = [(3, 5.0), (1, 2.0)].into();
        assert_eq!(ndcg_at_k(&[3, 1, 0], &rel, 10), 1.0);
        assert_eq!(ndcg_at_k(&[0, 2, 4], &rel, 3), 0.0);
        assert_eq!(ndcg_at_k(&[0], &BTreeMap::new(), 3), 0.0);
    }

    #[test]
    fn five_item_hand_case() {
        // ranking [a, b, c, d, e] with gains a=0, b=3, c=0, d=1, e=2
        let rel: BTreeMap<usize, f64> = [(1, 3.0), (3, 1.0), (4, 2.0)].into();
        let dcg = 3.0 / 3f64.log2() + 1.0 / 5f64.log2() + 2.0 / 6f64.log2();
        let idcg = 3.0 + 2.0 / 3f64.log2() + 1.0 / 4f64.log2();
        assert!((ndcg_at_k(&[0, 1, 2, 3, 4], &rel, 5) - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}

use serde::{Deserialize, Serialize};

use super::assignment::hungarian;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    Pearson,
    Spearman,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccScore {
    pub score: f64,
    /// `permutation[j]` is the true component matched to estimated column `j`.
    pub permutation: Vec<usize>,
}

/// Column `j` of a row-major `[m × k]` matrix.
fn column(data: &[f64], k: usize, j: usize) -> Vec<f64> {
    data.iter().skip(j).step_by(k).copied().collect()
}

/// Ranks starting at 1; ties receive their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            out[p] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// `|corr|` between every estimated column (rows) and true column (cols).
pub fn correlation_matrix(est: &[f64], truth: &[f64], k: usize, method: Correlation) -> Vec<Vec<f64>> {
    let prep = |data: &[f64]| -> Vec<Vec<f64>> {
        (0..k)
            .map(|j| {
                let c = column(data, k, j);
                match method {
                    Correlation::Pearson => c,
                    Correlation::Spearman => ranks(&c),
                }
            })
            .collect()
    };
    let (e, t) = (prep(est), prep(truth));
    e.iter()
        .map(|ec| t.iter().map(|tc| pearson(ec, tc).abs()).collect())
        .collect()
}

/// Mean absolute correlation under the best one-to-one matching of
/// estimated and true components. Both inputs are row-major `[m × k]`.
pub fn mcc(est: &[f64], truth: &[f64], k: usize, method: Correlation) -> Result<MccScore> {
    if k == 0 || est.len() != truth.len() || est.len() % k != 0 {
        return Err(Error::shape(
            "mcc",
            format!("{} and {} values for {} components", est.len(), truth.len(), k),
        ));
    }
    if est.len() / k < 2 {
        return Err(Error::domain("mcc", "need at least two samples"));
    }
    let corr = correlation_matrix(est, truth, k, method);
    let cost: Vec<Vec<f64>> = corr.iter().map(|r| r.iter().map(|c| 1.0 - c).collect()).collect();
    let permutation = hungarian(&cost)?;
    let score = permutation.iter().enumerate().map(|(j, &p)| corr[j][p]).sum::<f64>() / k as f64;
    Ok(MccScore { score, permutation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_ranks_for_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_column_scores_zero() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }
}

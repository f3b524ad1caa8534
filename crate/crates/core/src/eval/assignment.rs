use crate::error::{Error, Result};

/// Minimum-cost perfect matching on a square cost matrix (Kuhn–Munkres
/// with potentials, `O(n³)`). `result[row]` is the column assigned to `row`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::shape("hungarian", "cost matrix must be square"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::domain("hungarian", "costs must be finite"));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    // 1-based potentials; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[r0 - 1][j - 1] - u[r0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = col0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[owner[j] - 1] = j - 1;
    }
    Ok(result)
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_diagonal_is_identity() {
        let c = vec![vec![0.0, 5.0, 4.0], vec![3.0, 0.0, 9.0], vec![1.0, 2.0, 0.0]];
        assert_eq!(hungarian(&c).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn single_entry() {
        assert_eq!(hungarian(&[vec![7.0]]).unwrap(), vec![0]);
    }

    #[test]
    fn rejects_non_square() {
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn known_three_by_three() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&c).unwrap();
        assert_eq!(assignment_cost(&c, &a), 5.0);
    }
}

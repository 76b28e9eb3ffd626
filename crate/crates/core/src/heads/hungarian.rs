//! Minimum-cost bipartite assignment (Kuhn–Munkres with potentials).

use crate::error::{ModelError, Result};

/// Assign each row to a distinct column minimising the total cost of an
/// `rows×cols` matrix with `rows ≤ cols`. Returns the column of every row.
pub fn assign(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(vec![]);
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(ModelError::Data("ragged cost matrix".into()));
    }
    if n > m {
        return Err(ModelError::Data(format!(
            "{n} ground truths exceed {m} queries"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(ModelError::Data("non-finite matching cost".into()));
    }
    // 1-based potentials; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert_eq!(assign(&[vec![3.0]]).unwrap(), vec![0]);
        assert_eq!(
            assign(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            assign(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![1, 0]
        );
        assert_eq!(assign(&[vec![5.0, 1.0, 3.0]]).unwrap(), vec![1]);
        assert!(assign(&[vec![1.0], vec![2.0]]).is_err());
        assert!(assign(&[]).unwrap().is_empty());
    }
}

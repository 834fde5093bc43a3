//! Minimum-cost bipartite assignment of predictions to targets.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(prediction, target)` pairs ordered by target.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the assigned costs in target order.
    pub total: f64,
}

impl Assignment {
    /// Prediction assigned to each target.
    pub fn by_target(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(p, _)| p).collect()
    }
}

/// Potentials-based Hungarian solve over `rows × cols` of `cost` (row-major
/// with stride `stride`), `rows.len() <= cols.len()`. Returns the optimum and
/// the column chosen for each row.
fn solve(cost: &[f64], stride: usize, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost[rows[i - 1] * stride + cols[j - 1]];
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut choice = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            choice[p[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[rows[i] * stride + choice[i]]).sum();
    (total, choice)
}

/// Assign each of `targets` columns of `cost` (`[preds, targets]`, row-major)
/// to a distinct prediction at minimum total cost. Among optimal assignments
/// the one whose prediction list, read in target order, is lexicographically
/// smallest is returned.
pub fn hungarian(cost: &[f64], preds: usize, targets: usize) -> Result<Assignment> {
    if cost.len() != preds * targets {
        return Err(input_err!("cost of length {} is not {preds}x{targets}", cost.len()));
    }
    if preds < targets {
        return Err(input_err!("{preds} predictions cannot cover {targets} targets"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    // rows are targets, columns predictions
    let mut t = vec![0f64; cost.len()];
    for pr in 0..preds {
        for tg in 0..targets {
            t[tg * preds + pr] = cost[pr * targets + tg];
        }
    }
    let all_rows: Vec<usize> = (0..targets).collect();
    let all_cols: Vec<usize> = (0..preds).collect();
    let (best, _) = solve(&t, preds, &all_rows, &all_cols);
    let scale = t.iter().fold(1f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * targets.max(1) as f64;

    let mut free = vec![true; preds];
    let mut fixed = 0f64;
    let mut pairs = Vec::with_capacity(targets);
    for tg in 0..targets {
        let rest_rows: Vec<usize> = (tg + 1..targets).collect();
        let mut chosen = None;
        for pr in 0..preds {
            if !free[pr] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..preds).filter(|&c| free[c] && c != pr).collect();
            let (rest, _) = solve(&t, preds, &rest_rows, &rest_cols);
            let c = t[tg * preds + pr];
            if fixed + c + rest <= best + tol {
                chosen = Some((pr, c));
                break;
            }
        }
        let (pr, c) = chosen.expect("the optimum is always feasible");
        free[pr] = false;
        fixed += c;
        pairs.push((pr, tg));
    }
    let total = pairs.iter().map(|&(p, g)| cost[p * targets + g]).sum();
    Ok(Assignment { pairs, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = hungarian(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total, 2.0);
    }

    #[test]
    fn three_by_three() {
        let a = hungarian(&[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0], 3, 3).unwrap();
        let mut pairs = a.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.total, 5.0);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let a = hungarian(&[1.0; 9], 3, 3).unwrap();
        assert_eq!(a.by_target(), vec![0, 1, 2]);
        let a = hungarian(&[0.0; 8], 4, 2).unwrap();
        assert_eq!(a.by_target(), vec![0, 1]);
    }

    #[test]
    fn rectangular_prefers_cheap_rows() {
        // 4 predictions, 1 target: the cheapest prediction wins
        let a = hungarian(&[3.0, 1.0, 0.5, 0.5], 4, 1).unwrap();
        assert_eq!(a.pairs, vec![(2, 0)]);
    }

    #[test]
    fn too_few_predictions_rejected() {
        assert!(hungarian(&[1.0, 2.0], 1, 2).is_err());
        assert!(hungarian(&[f64::NAN], 1, 1).is_err());
    }

    #[test]
    fn empty_targets() {
        let a = hungarian(&[], 3, 0).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total, 0.0);
    }
}

//! Minimum-cost bipartite assignment between predictions and targets.

use crate::error::{Error, Result};

/// Injective pairing of predictions with targets; unpaired predictions are background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    /// `(prediction_index, target_index)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `target_of[i]` for each of `num_predictions`.
    pub fn target_of(&self, num_predictions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_predictions];
        for &(p, t) in &self.pairs {
            out[p] = Some(t);
        }
        out
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, t)| cost[p][t]).sum()
    }
}

/// Solves the rectangular assignment problem for a `predictions × targets`
/// cost matrix with at least as many predictions as targets.
///
/// Shortest augmenting path with potentials, O(n²·m).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let n_pred = cost.len();
    let n_tgt = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != n_tgt) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if n_tgt == 0 {
        return Ok(MatchAssignment::default());
    }
    if n_tgt > n_pred {
        return Err(Error::InvalidInput(format!(
            "{n_tgt} targets exceed {n_pred} predictions"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite matching cost".into()));
    }

    // Rows are targets (the smaller side), columns are predictions; 1-based with a virtual column 0.
    let (n, m) = (n_tgt, n_pred);
    let at = |i: usize, j: usize| cost[j - 1][i - 1];
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
                let cur = at(i0, j) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_unstable();
    Ok(MatchAssignment { pairs })
}

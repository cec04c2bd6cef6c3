//! Linear-chain CRF over `k` tags.
//!
//! Transitions are a `(k + 2) × (k + 2)` matrix whose last two indices are
//! the START and END states. A path of length `n` scores
//! `A[START, y_0] + Σ A[y_i, y_{i+1}] + A[y_{n-1}, END] + Σ E[i, y_i]`.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CrfError {
    #[error("path has {path} tags but emissions have {rows} rows")]
    LengthMismatch { path: usize, rows: usize },
    #[error("transition matrix is {found}×{found}, expected {expected}×{expected}")]
    TransitionShape { expected: usize, found: usize },
    #[error("tag index {0} out of range")]
    TagOutOfRange(usize),
    #[error("empty sequence")]
    Empty,
}

pub fn start_index(k: usize) -> usize {
    k
}

pub fn end_index(k: usize) -> usize {
    k + 1
}

fn check(emissions: &ArrayView2<f64>, transitions: &ArrayView2<f64>) -> Result<usize, CrfError> {
    let (n, k) = emissions.dim();
    if n == 0 {
        return Err(CrfError::Empty);
    }
    let (r, c) = transitions.dim();
    if r != k + 2 || c != k + 2 {
        return Err(CrfError::TransitionShape { expected: k + 2, found: r.max(c) });
    }
    Ok(k)
}

fn check_path(emissions: &ArrayView2<f64>, path: &[usize]) -> Result<(), CrfError> {
    let (n, k) = emissions.dim();
    if path.len() != n {
        return Err(CrfError::LengthMismatch { path: path.len(), rows: n });
    }
    match path.iter().find(|&&y| y >= k) {
        Some(&y) => Err(CrfError::TagOutOfRange(y)),
        None => Ok(()),
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn path_score(emissions: ArrayView2<f64>, transitions: ArrayView2<f64>, path: &[usize]) -> Result<f64, CrfError> {
    let k = check(&emissions, &transitions)?;
    check_path(&emissions, path)?;
    let mut score = transitions[[start_index(k), path[0]]] + transitions[[path[path.len() - 1], end_index(k)]];
    for (i, &y) in path.iter().enumerate() {
        score += emissions[[i, y]];
        if i > 0 {
            score += transitions[[path[i - 1], y]];
        }
    }
    Ok(score)
}

/// Log-space forward table; `alpha[i][j]` covers paths ending in tag `j` at `i`.
fn forward(emissions: &ArrayView2<f64>, transitions: &ArrayView2<f64>, k: usize) -> Array2<f64> {
    let n = emissions.nrows();
    let mut alpha = Array2::zeros((n, k));
    for j in 0..k {
        alpha[[0, j]] = transitions[[start_index(k), j]] + emissions[[0, j]];
    }
    for i in 1..n {
        for j in 0..k {
            let prev = (0..k).map(|a| alpha[[i - 1, a]] + transitions[[a, j]]);
            alpha[[i, j]] = log_sum_exp(prev) + emissions[[i, j]];
        }
    }
    alpha
}

/// `beta[i][j]` covers the remainder of paths that are in tag `j` at `i`,
/// excluding the emission at `i`.
fn backward(emissions: &ArrayView2<f64>, transitions: &ArrayView2<f64>, k: usize) -> Array2<f64> {
    let n = emissions.nrows();
    let mut beta = Array2::zeros((n, k));
    for j in 0..k {
        beta[[n - 1, j]] = transitions[[j, end_index(k)]];
    }
    for i in (0..n - 1).rev() {
        for a in 0..k {
            let next = (0..k).map(|b| transitions[[a, b]] + emissions[[i + 1, b]] + beta[[i + 1, b]]);
            beta[[i, a]] = log_sum_exp(next);
        }
    }
    beta
}

fn final_log_z(alpha: &Array2<f64>, transitions: &ArrayView2<f64>, k: usize) -> f64 {
    let last = alpha.nrows() - 1;
    log_sum_exp((0..k).map(|j| alpha[[last, j]] + transitions[[j, end_index(k)]]))
}

pub fn log_partition(emissions: ArrayView2<f64>, transitions: ArrayView2<f64>) -> Result<f64, CrfError> {
    let k = check(&emissions, &transitions)?;
    let alpha = forward(&emissions, &transitions, k);
    Ok(final_log_z(&alpha, &transitions, k))
}

/// Negative log-likelihood of `path` with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfLoss {
    pub loss: f64,
    /// n × k: node marginals minus gold one-hot rows.
    pub d_emissions: Array2<f64>,
    /// (k + 2) × (k + 2): expected minus gold transition counts.
    pub d_transitions: Array2<f64>,
}

pub fn nll_and_grad(
    emissions: ArrayView2<f64>,
    transitions: ArrayView2<f64>,
    path: &[usize],
) -> Result<CrfLoss, CrfError> {
    let k = check(&emissions, &transitions)?;
    check_path(&emissions, path)?;
    let n = emissions.nrows();
    let alpha = forward(&emissions, &transitions, k);
    let beta = backward(&emissions, &transitions, k);
    let log_z = final_log_z(&alpha, &transitions, k);
    let gold = path_score(emissions, transitions, path)?;

    let mut d_emissions = Array2::zeros((n, k));
    let mut d_transitions = Array2::zeros((k + 2, k + 2));
    for i in 0..n {
        for j in 0..k {
            d_emissions[[i, j]] = (alpha[[i, j]] + beta[[i, j]] - log_z).exp();
        }
    }
    for j in 0..k {
        d_transitions[[start_index(k), j]] = d_emissions[[0, j]];
        d_transitions[[j, end_index(k)]] = d_emissions[[n - 1, j]];
    }
    for i in 0..n - 1 {
        for a in 0..k {
            for b in 0..k {
                let lp = alpha[[i, a]] + transitions[[a, b]] + emissions[[i + 1, b]] + beta[[i + 1, b]] - log_z;
                d_transitions[[a, b]] += lp.exp();
            }
        }
    }

    for (i, &y) in path.iter().enumerate() {
        d_emissions[[i, y]] -= 1.0;
        if i > 0 {
            d_transitions[[path[i - 1], y]] -= 1.0;
        }
    }
    d_transitions[[start_index(k), path[0]]] -= 1.0;
    d_transitions[[path[n - 1], end_index(k)]] -= 1.0;

    Ok(CrfLoss { loss: log_z - gold, d_emissions, d_transitions })
}

/// Highest-scoring path. Among equal scores the lowest tag index wins, both
/// for the final tag and for each back-pointer.
pub fn viterbi(emissions: ArrayView2<f64>, transitions: ArrayView2<f64>) -> Result<Vec<usize>, CrfError> {
    let k = check(&emissions, &transitions)?;
    let n = emissions.nrows();
    let mut delta = Array1::from_shape_fn(k, |j| transitions[[start_index(k), j]] + emissions[[0, j]]);
    let mut back = Array2::<usize>::zeros((n, k));
    for i in 1..n {
        let mut next = Array1::zeros(k);
        for j in 0..k {
            let (arg, best) = argmax((0..k).map(|a| delta[a] + transitions[[a, j]]));
            back[[i, j]] = arg;
            next[j] = best + emissions[[i, j]];
        }
        delta = next;
    }
    let (mut tag, _) = argmax((0..k).map(|j| delta[j] + transitions[[j, end_index(k)]]));
    let mut path = vec![0; n];
    for i in (0..n).rev() {
        path[i] = tag;
        tag = back[[i, tag]];
    }
    Ok(path)
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

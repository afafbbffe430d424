//! Quantitative checks of the spectral assumptions behind the recovery
//! method: relative boundedness of the higher-order derived matrices against
//! `F`, incoherence of `F`, block conditioning under random partitions, and
//! permutation-aware column error reporting.

use serde::{Deserialize, Serialize};

use crate::linalg::{singular_values, spectral_tau_with_rank, truncated_svd, Matrix, TOL};
use crate::model::{derived_matrix, NoisyOrModel};
use crate::pmi::Partition;
use crate::{Error, Result};

/// Beyond this size the assignment problem falls back to a greedy matching.
pub const EXACT_ASSIGNMENT_MAX: usize = 64;

/// Summary of the model-level quantities the recovery guarantees depend on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    /// Boundedness of `GG^T` (and `HH^T`, `LL^T`) relative to `F`.
    pub tau_g: f64,
    pub tau_h: f64,
    pub tau_l: f64,
    /// Same measures restricted to the three partition blocks.
    pub tau_g_blocks: [f64; 3],
    pub tau_h_blocks: [f64; 3],
    pub tau_l_blocks: [f64; 3],
    /// Incoherence of `F` (row-norm uniformity of its left singular basis).
    pub mu: f64,
    pub sigma_min_f_blocks: [f64; 3],
    /// `rho * empirical density * m`; should be well below 1.
    pub rho_pm: f64,
    /// Max relative column error, when a recovered matrix was evaluated.
    pub eta_hat: Option<f64>,
}

/// Incoherence of `F` using its full column count as the rank.
///
/// `mu = (n/m) max_i |U_i|^2` over rows of the left singular factor; `U`'s
/// rows all having norm `sqrt(m/n)` gives the ideal `mu = 1`.
pub fn incoherence(f: &Matrix) -> Result<f64> {
    incoherence_with_rank(f, f.ncols())
}

/// Incoherence at an explicit rank `r` (used when `F` is rank deficient).
pub fn incoherence_with_rank(f: &Matrix, r: usize) -> Result<f64> {
    let svd = truncated_svd(f, r)?;
    let sigma_1 = svd.singular_values[0];
    let sigma_r = svd.singular_values[r - 1];
    if sigma_r <= TOL.relative_rank_cutoff * sigma_1 || sigma_r <= 0.0 {
        return Err(Error::RankDeficient {
            index: r,
            value: sigma_r,
            threshold: TOL.relative_rank_cutoff * sigma_1,
        });
    }
    let n = f.nrows();
    let mut max_row = 0.0f64;
    for i in 0..n {
        let norm_sq: f64 = (0..r).map(|j| svd.u[(i, j)] * svd.u[(i, j)]).sum();
        max_row = max_row.max(norm_sq);
    }
    Ok(n as f64 / r as f64 * max_row)
}

/// Numerical column rank of `f` at the crate-wide relative cutoff.
pub fn numerical_rank(f: &Matrix) -> usize {
    let sigma = singular_values(f);
    let cutoff = TOL.relative_rank_cutoff * sigma[0].max(f64::MIN_POSITIVE);
    sigma.iter().filter(|&&s| s > cutoff).count().max(1)
}

/// Exact minimum-cost assignment (Hungarian algorithm with potentials).
/// `cost` must be square; returns the assigned column for each row.
pub fn min_cost_assignment(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1]; // row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] != 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

fn greedy_assignment(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    let mut taken = vec![false; n];
    let mut assignment = vec![0usize; n];
    for i in 0..n {
        let mut best = None;
        let mut best_cost = f64::INFINITY;
        for j in 0..n {
            if !taken[j] && cost[(i, j)] < best_cost {
                best_cost = cost[(i, j)];
                best = Some(j);
            }
        }
        let j = best.expect("free column exists");
        taken[j] = true;
        assignment[i] = j;
    }
    assignment
}

/// Per-column recovery errors after optimal column matching.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnErrorReport {
    /// `per_column[i]` is the l2 distance from true column `i` to its
    /// matched recovered column.
    pub per_column: Vec<f64>,
    /// `permutation[i]` is the recovered column matched to true column `i`.
    pub permutation: Vec<usize>,
    /// Max and median of the relative errors `per_column[i] / |W_i|`.
    pub eta_max: f64,
    pub eta_median: f64,
}

/// Matches recovered columns to true columns by minimum total squared
/// distance and reports per-column and relative errors.
pub fn column_error(w_true: &Matrix, w_hat: &Matrix) -> Result<ColumnErrorReport> {
    if w_true.nrows() != w_hat.nrows() || w_true.ncols() != w_hat.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "true is {}x{}, estimate is {}x{}",
            w_true.nrows(),
            w_true.ncols(),
            w_hat.nrows(),
            w_hat.ncols()
        )));
    }
    let m = w_true.ncols();
    let cost = Matrix::from_fn(m, m, |i, j| {
        let mut acc = 0.0;
        for r in 0..w_true.nrows() {
            let d = w_true[(r, i)] - w_hat[(r, j)];
            acc += d * d;
        }
        acc
    });
    let permutation = if m <= EXACT_ASSIGNMENT_MAX {
        min_cost_assignment(&cost)
    } else {
        log::warn!("m = {m} > {EXACT_ASSIGNMENT_MAX}: falling back to greedy column matching");
        greedy_assignment(&cost)
    };

    let mut per_column = Vec::with_capacity(m);
    let mut relative = Vec::with_capacity(m);
    for i in 0..m {
        let err = cost[(i, permutation[i])].sqrt();
        per_column.push(err);
        let norm = w_true.column(i).norm();
        relative.push(if norm > 0.0 {
            err / norm
        } else if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        });
    }
    let eta_max = relative.iter().fold(0.0f64, |acc, &x| acc.max(x));
    let mut sorted = relative.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite relative error"));
    let eta_median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Ok(ColumnErrorReport {
        per_column,
        permutation,
        eta_max,
        eta_median,
    })
}

/// Restriction of `m` to the given rows.
pub fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

fn block_tau(p_l: &Matrix, f_block: &Matrix) -> Result<f64> {
    let gram = p_l * p_l.transpose();
    spectral_tau_with_rank(&gram, f_block, numerical_rank(f_block))
}

/// Computes every model-level diagnostic for the given partition.
pub fn model_report(model: &NoisyOrModel, part: &Partition) -> Result<ModelDiagnostics> {
    part.validate(model.n)?;
    let f = derived_matrix(model, 1);
    let g = derived_matrix(model, 2);
    let h = derived_matrix(model, 3);
    let l = derived_matrix(model, 4);

    let tau_g = block_tau(&g, &f)?;
    let tau_h = block_tau(&h, &f)?;
    let tau_l = block_tau(&l, &f)?;

    let blocks = [&part.sa, &part.sb, &part.sc];
    let mut tau_g_blocks = [0.0; 3];
    let mut tau_h_blocks = [0.0; 3];
    let mut tau_l_blocks = [0.0; 3];
    let mut sigma_min_f_blocks = [0.0; 3];
    for (s, rows) in blocks.iter().enumerate() {
        let f_s = select_rows(&f, rows);
        tau_g_blocks[s] = block_tau(&select_rows(&g, rows), &f_s)?;
        tau_h_blocks[s] = block_tau(&select_rows(&h, rows), &f_s)?;
        tau_l_blocks[s] = block_tau(&select_rows(&l, rows), &f_s)?;
        let sigma = singular_values(&f_s);
        sigma_min_f_blocks[s] = sigma[model.m.min(sigma.len()) - 1];
    }

    let mu = incoherence_with_rank(&f, numerical_rank(&f))?;
    let rho_pm = model.rho * model.empirical_density() * model.m as f64;

    Ok(ModelDiagnostics {
        tau_g,
        tau_h,
        tau_l,
        tau_g_blocks,
        tau_h_blocks,
        tau_l_blocks,
        mu,
        sigma_min_f_blocks,
        rho_pm,
        eta_hat: None,
    })
}

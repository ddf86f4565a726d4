//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

/// Singular values sorted in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank with a threshold relative to the largest singular value.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rel_tol * smax).count(),
        _ => 0,
    }
}

/// 2-norm condition estimate; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Orthonormal basis of the null space of `m` (columns of the result).
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    // Pad to a square matrix so the SVD returns a full set of right singular vectors.
    let rows = m.nrows().max(n);
    let mut padded = DMatrix::<f64>::zeros(rows, n);
    padded.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= rel_tol * smax.max(f64::MIN_POSITIVE))
        .map(|(i, _)| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Greedy row pivoting: pick `basis.ncols()` rows of `basis` that are as
/// independent as possible (Gram-Schmidt with largest-residual selection).
pub fn pivot_rows(basis: &DMatrix<f64>) -> Vec<usize> {
    let m = basis.ncols();
    let mut rows: Vec<DVector<f64>> = (0..basis.nrows()).map(|i| basis.row(i).transpose()).collect();
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let best = (0..rows.len())
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| rows[a].norm().total_cmp(&rows[b].norm()));
        let Some(best) = best else { break };
        let pivot = rows[best].clone();
        let norm = pivot.norm();
        chosen.push(best);
        if norm == 0.0 {
            continue;
        }
        let unit = pivot / norm;
        for (i, r) in rows.iter_mut().enumerate() {
            if !chosen.contains(&i) {
                let proj = r.dot(&unit);
                *r -= &unit * proj;
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_single_row() {
        let m = DMatrix::from_row_slice(1, 3, &[-0.5, 0.0, 1.0]);
        let ns = null_space(&m, 1e-10);
        assert_eq!(ns.ncols(), 2);
        let prod = &m * &ns;
        assert!(prod.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn rank_and_condition() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(rank(&m, 1e-10), 1);
        assert!(condition_number(&m) > 1e12);
        assert_eq!(rank(&DMatrix::<f64>::identity(3, 3), 1e-10), 3);
    }

    #[test]
    fn pivot_rows_skips_dependent_rows() {
        // Rows 0 and 1 are parallel; row 2 completes the basis.
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
        let rows = pivot_rows(&b);
        assert_eq!(rows.len(), 2);
        assert!(rows.contains(&2));
    }
}

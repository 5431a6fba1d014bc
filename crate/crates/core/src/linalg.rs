//! Small dense helpers shared by the fitting modules.

use nalgebra::{DMatrix, DVector};

/// Least squares through a column-scaled, column-pivoted QR.
///
/// Columns past the numerical rank (pivot below `rank_tol` of the largest)
/// get zero coefficients. Returns the solution and the rank.
pub fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>, rank_tol: f64) -> (DVector<f64>, usize) {
    let dim = a.ncols();
    let scale: Vec<f64> = a
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 {
                1.0 / n
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = a.clone();
    for (j, mut c) in scaled.column_iter_mut().enumerate() {
        c *= scale[j];
    }
    let qr = scaled.col_piv_qr();
    let q = qr.q();
    let r = qr.r();
    let mut order = DMatrix::from_fn(1, dim, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let diag = r.diagonal().map(f64::abs);
    let r_max = diag.max();
    let rank = diag
        .iter()
        .position(|&d| !(d > rank_tol * r_max))
        .unwrap_or(diag.len());
    let qty = q.columns(0, rank).tr_mul(y);
    let z = r
        .view((0, 0), (rank, rank))
        .into_owned()
        .solve_upper_triangular(&qty)
        .unwrap_or_else(|| DVector::zeros(rank));
    let mut x = DVector::zeros(dim);
    for i in 0..rank {
        let col = order[i] as usize;
        x[col] = z[i] * scale[col];
    }
    (x, rank)
}

//! Small dense least-squares kernels shared by residualization, series
//! regression and multivariate local-linear fits.

use nalgebra::{DMatrix, DVector};

/// Relative threshold on `|R_jj| / ||x_j||` below which column `j` is treated
/// as a linear combination of the preceding columns.
pub const COLLINEARITY_TOL: f64 = 1e-10;

/// Column index that made the design rank deficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankDeficient {
    pub column: usize,
}

/// Ordinary least-squares fit of `y` on the columns of a design matrix.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `(X'X)^{-1}`, used for pointwise standard errors.
    pub xtx_inv: DMatrix<f64>,
    pub rss: f64,
}

impl LeastSquares {
    pub fn n_obs(&self) -> usize {
        self.residuals.len()
    }

    /// Residual variance `RSS / (n - p)`, zero when there are no spare
    /// degrees of freedom.
    pub fn sigma2(&self) -> f64 {
        let dof = self.n_obs().saturating_sub(self.coef.len());
        if dof == 0 {
            0.0
        } else {
            self.rss / dof as f64
        }
    }

    /// Variance factor `b' (X'X)^{-1} b` for a basis row `b`.
    pub fn quad_form(&self, basis: &[f64]) -> f64 {
        let b = DVector::from_column_slice(basis);
        (b.transpose() * &self.xtx_inv * &b)[(0, 0)].max(0.0)
    }
}

/// Fits `y` on `design` by Householder QR.
///
/// Columns are checked in order; the first column whose component orthogonal
/// to its predecessors is negligible is reported.
pub fn least_squares(design: &DMatrix<f64>, y: &[f64]) -> Result<LeastSquares, RankDeficient> {
    let (n, p) = design.shape();
    assert_eq!(n, y.len(), "design rows must match response length");
    if n < p {
        return Err(RankDeficient { column: n });
    }
    let qr = design.clone().qr();
    let r = qr.r();
    for j in 0..p {
        let col_norm = design.column(j).norm();
        if col_norm == 0.0 || r[(j, j)].abs() <= COLLINEARITY_TOL * col_norm {
            return Err(RankDeficient { column: j });
        }
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let rhs = qty.rows(0, p).into_owned();
    let coef = r
        .solve_upper_triangular(&rhs)
        .ok_or(RankDeficient { column: p - 1 })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(RankDeficient { column: p - 1 })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let fitted = design * &coef;
    let residuals: Vec<f64> = yv.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let rss = residuals.iter().map(|e| e * e).sum();
    Ok(LeastSquares {
        coef: coef.iter().copied().collect(),
        residuals,
        xtx_inv,
        rss,
    })
}

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Linear-interpolation quantile (type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Regressors whose condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// Minimiser of `||x * coef - y||_F`, shape `p x q`.
    pub coef: DMatrix<f64>,
    pub condition: f64,
}

/// Solves `min ||x b - y||_F` through an SVD of `x`.
///
/// Fails with [`Error::RankDeficient`] when `x` has fewer rows than columns
/// or its condition number exceeds [`MAX_CONDITION`].
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LeastSquares> {
    assert_eq!(x.nrows(), y.nrows(), "regressor and response row mismatch");
    let p = x.ncols();
    if p == 0 {
        return Ok(LeastSquares {
            coef: DMatrix::zeros(0, y.ncols()),
            condition: 1.0,
        });
    }
    if x.nrows() < p {
        return Err(Error::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::RankDeficient { condition });
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut uty = u.transpose() * y;
    for (r, s) in svd.singular_values.iter().enumerate() {
        uty.row_mut(r).unscale_mut(*s);
    }
    Ok(LeastSquares {
        coef: v_t.transpose() * uty,
        condition,
    })
}

/// Spectral norm (largest singular value); zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn median(values: &mut [f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile; sorts `values` in place. NaN for empty input.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

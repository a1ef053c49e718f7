use nalgebra::{DMatrix, DVector};

use super::{BasisSpec, FitStatus, LocationFit};
use crate::error::{Error, Result};

/// Smallest admissible singular value of the column-scaled design.
pub const RANK_TOLERANCE: f64 = 1e-8;

pub(crate) struct OlsSolution {
    pub status: FitStatus,
    pub coefficients: Vec<f64>,
    pub min_singular_value: Option<f64>,
}

/// Least squares for `design * beta ~ y` via Householder QR on the
/// column-scaled design. Rank is judged from the singular values of `R`.
pub(crate) fn solve_least_squares(mut design: DMatrix<f64>, y: DVector<f64>) -> OlsSolution {
    let p = design.ncols();
    if design.nrows() < p {
        return OlsSolution {
            status: FitStatus::Excluded {
                reason: "insufficient data".into(),
            },
            coefficients: vec![],
            min_singular_value: None,
        };
    }
    let mut scales = Vec::with_capacity(p);
    for mut col in design.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        scales.push(norm);
    }
    if scales.iter().any(|&s| s.is_nan() || s <= 0.0 || !s.is_finite()) {
        return OlsSolution {
            status: FitStatus::RankDeficient,
            coefficients: vec![],
            min_singular_value: Some(0.0),
        };
    }
    let qr = design.qr();
    let r = qr.r();
    let min_sv = r.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
    if min_sv.is_nan() || min_sv < RANK_TOLERANCE {
        return OlsSolution {
            status: FitStatus::RankDeficient,
            coefficients: vec![],
            min_singular_value: Some(if min_sv.is_finite() { min_sv } else { 0.0 }),
        };
    }
    let qty = qr.q().tr_mul(&y);
    let Some(scaled) = r.solve_upper_triangular(&qty) else {
        return OlsSolution {
            status: FitStatus::RankDeficient,
            coefficients: vec![],
            min_singular_value: Some(min_sv),
        };
    };
    let coefficients: Vec<f64> = scaled.iter().zip(&scales).map(|(b, s)| b / s).collect();
    if coefficients.iter().any(|c| !c.is_finite()) {
        return OlsSolution {
            status: FitStatus::RankDeficient,
            coefficients: vec![],
            min_singular_value: Some(min_sv),
        };
    }
    OlsSolution {
        status: FitStatus::Ok,
        coefficients,
        min_singular_value: Some(min_sv),
    }
}

/// Design matrix and response over the time steps where `y` and every
/// component of `x` are observed.
pub(crate) fn build_design(
    x_series: &[Option<f64>],
    y_series: &[Option<f64>],
    basis: &BasisSpec,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = basis.input_dim();
    let p = basis.len();
    let mut rows: Vec<f64> = Vec::with_capacity(y_series.len() * p);
    let mut ys = Vec::with_capacity(y_series.len());
    let mut x = vec![0.0; d];
    let mut phi = vec![0.0; p];
    'time: for (t, y) in y_series.iter().enumerate() {
        let Some(y) = *y else { continue };
        for (j, xj) in x.iter_mut().enumerate() {
            match x_series[t * d + j] {
                Some(v) => *xj = v,
                None => continue 'time,
            }
        }
        basis.eval_into(&x, &mut phi);
        rows.extend_from_slice(&phi);
        ys.push(y);
    }
    let n = ys.len();
    (DMatrix::from_row_slice(n, p, &rows), DVector::from_vec(ys))
}

/// Per-location OLS of `y_t` on `phi(x_t)`.
///
/// `x_series` holds `m * d` values with the treatment index innermost, where
/// `d` is the basis input dimension. Time steps with any missing value are
/// dropped. Fewer than `p` usable steps exclude the location; a column-scaled
/// design with smallest singular value below [`RANK_TOLERANCE`] marks it
/// rank deficient.
pub fn fit_location_ols(
    id: &str,
    x_series: &[Option<f64>],
    y_series: &[Option<f64>],
    basis: &BasisSpec,
) -> Result<LocationFit> {
    if x_series.len() != y_series.len() * basis.input_dim() {
        return Err(Error::Precondition(format!(
            "location '{id}': {} treatment values do not align with {} responses of dimension {}",
            x_series.len(),
            y_series.len(),
            basis.input_dim()
        )));
    }
    let (design, y) = build_design(x_series, y_series, basis);
    let used = y.len();
    let sol = solve_least_squares(design, y);
    Ok(LocationFit {
        id: id.to_string(),
        status: sol.status,
        coefficients: sol.coefficients,
        counts: vec![used],
        min_singular_value: sol.min_singular_value,
    })
}

//! Clamped B-spline bases on uniform knots, rows rescaled to unit norm.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// `n_t x b` basis of degree `degree` over grid positions `0..n_t`; every row
/// is rescaled so its squared entries sum to one.
pub fn bspline_basis(n_t: usize, b: usize, degree: usize) -> Result<DMatrix<f64>> {
    if b < degree + 1 {
        return Err(invalid(format!("{b} basis functions cannot carry degree {degree}")));
    }
    if n_t < b {
        return Err(invalid(format!("{n_t} grid points cannot support {b} basis functions")));
    }
    let hi = (n_t - 1) as f64;
    let interior = b - degree - 1;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..=interior).map(|i| hi * i as f64 / (interior + 1) as f64));
    knots.extend(std::iter::repeat_n(hi, degree + 1));

    let mut basis = DMatrix::zeros(n_t, b);
    for t in 0..n_t {
        let x = t as f64;
        let row = if n_t == 1 {
            vec![1.0; b]
        } else {
            cox_de_boor(&knots, degree, b, x)
        };
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, v) in row.iter().enumerate() {
            basis[(t, j)] = v / norm;
        }
    }
    Ok(basis)
}

fn cox_de_boor(knots: &[f64], degree: usize, b: usize, x: f64) -> Vec<f64> {
    let last = knots[knots.len() - 1];
    // Degree-zero indicators; the right end belongs to the last nonempty span.
    let mut n: Vec<f64> = (0..knots.len() - 1)
        .map(|i| {
            let (a, c) = (knots[i], knots[i + 1]);
            let inside = if x == last { a < c && c == last } else { a <= x && x < c };
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for p in 1..=degree {
        for i in 0..knots.len() - 1 - p {
            let left = if knots[i + p] > knots[i] {
                (x - knots[i]) / (knots[i + p] - knots[i]) * n[i]
            } else {
                0.0
            };
            let right = if knots[i + p + 1] > knots[i + 1] {
                (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1]) * n[i + 1]
            } else {
                0.0
            };
            n[i] = left + right;
        }
    }
    n.truncate(b);
    n
}

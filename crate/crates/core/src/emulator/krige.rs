//! Nearest-neighbor ordinary kriging with a Matérn correlation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{Design, DesignPoint};
use crate::error::{invalid, Error, Result};

fn default_kappa() -> f64 {
    2.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrigeConfig {
    /// Range, in design-box units (every coordinate scaled to `[0, 1]`).
    pub zeta: f64,
    pub n_neighbors: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

impl KrigeConfig {
    pub fn new(zeta: f64, n_neighbors: usize) -> Self {
        KrigeConfig {
            zeta,
            n_neighbors,
            kappa: 2.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(invalid(format!("Matérn range must be positive, got {}", self.zeta)));
        }
        if self.n_neighbors < 1 {
            return Err(invalid("kriging needs at least one neighbor"));
        }
        if ![0.5, 1.5, 2.5].contains(&self.kappa) {
            return Err(invalid(format!("unsupported Matérn smoothness {}", self.kappa)));
        }
        Ok(())
    }
}

/// Matérn correlation for the half-integer smoothnesses 0.5, 1.5 and 2.5;
/// any other `kappa` yields NaN.
pub fn matern(d: f64, zeta: f64, kappa: f64) -> f64 {
    let r = d / zeta;
    if kappa == 2.5 {
        let u = 5f64.sqrt() * r;
        (1.0 + u + u * u / 3.0) * (-u).exp()
    } else if kappa == 1.5 {
        let u = 3f64.sqrt() * r;
        (1.0 + u) * (-u).exp()
    } else if kappa == 0.5 {
        (-r).exp()
    } else {
        f64::NAN
    }
}

/// Linear predictor `m_hat = sum_i weights[i] * values[indices[i]]`; the same
/// weights serve every emulator coefficient at one target.
#[derive(Clone, Debug, PartialEq)]
pub struct KrigeWeights {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl KrigeWeights {
    pub fn apply(&self, values: impl Fn(usize) -> f64) -> f64 {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&k, w)| w * values(k))
            .sum()
    }
}

/// The `n` design points nearest to `target` among those sharing its source,
/// by Euclidean distance in scaled coordinates; ties go to the lower index.
pub fn nearest_neighbors(design: &Design, target: &DesignPoint, n: usize) -> Vec<(usize, f64)> {
    let t = design.scaled(&target.coords);
    let mut cand: Vec<(usize, f64)> = design
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.s0 == target.s0)
        .map(|(k, p)| {
            let d2: f64 = design
                .scaled(&p.coords)
                .iter()
                .zip(&t)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            (k, d2.sqrt())
        })
        .collect();
    cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    cand.truncate(n);
    cand
}

/// Ordinary-kriging weights: `E21 E11^-1 (m - 1 mu) + mu` with the GLS mean
/// `mu = 1' E11^-1 m / 1' E11^-1 1`, written as one weight vector.
pub fn kriging_weights(design: &Design, target: &DesignPoint, cfg: &KrigeConfig) -> Result<KrigeWeights> {
    if !design.contains(target) {
        return Err(Error::OutOfDesign);
    }
    let nb = nearest_neighbors(design, target, cfg.n_neighbors);
    if nb.is_empty() {
        return Err(Error::OutOfDesign);
    }
    let n = nb.len();
    let scaled: Vec<Vec<f64>> = nb
        .iter()
        .map(|&(k, _)| design.scaled(&design.points[k].coords))
        .collect();
    let e11 = DMatrix::from_fn(n, n, |i, j| {
        let d: f64 = scaled[i]
            .iter()
            .zip(&scaled[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        matern(d, cfg.zeta, cfg.kappa)
    });
    let e12 = DVector::from_iterator(n, nb.iter().map(|&(_, d)| matern(d, cfg.zeta, cfg.kappa)));

    let chol = match e11.clone().cholesky() {
        Some(c) => c,
        None => (e11 + DMatrix::identity(n, n) * 1e-10)
            .cholesky()
            .ok_or_else(|| Error::Numerical("kriging correlation matrix is singular".into()))?,
    };
    let ones = DVector::from_element(n, 1.0);
    let a = chol.solve(&e12);
    let b = chol.solve(&ones);
    let denom = ones.dot(&b);
    let lambda = (1.0 - ones.dot(&a)) / denom;
    let w = a + b * lambda;
    Ok(KrigeWeights {
        indices: nb.into_iter().map(|(k, _)| k).collect(),
        weights: w.iter().copied().collect(),
    })
}

/// Predicts one scalar from its values at every design point.
pub fn krige_scalar(values: &[f64], design: &Design, target: &DesignPoint, cfg: &KrigeConfig) -> Result<f64> {
    if values.len() != design.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} design points",
            values.len(),
            design.len()
        )));
    }
    Ok(kriging_weights(design, target, cfg)?.apply(|k| values[k]))
}

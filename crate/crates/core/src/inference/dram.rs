//! Delayed-rejection adaptive Metropolis with a Gaussian random-walk proposal.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DramStats {
    pub proposals: usize,
    pub stage1: usize,
    pub stage2: usize,
    /// Proposals with zero target density, at either stage.
    pub outside: usize,
}

impl DramStats {
    pub fn acceptance(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            (self.stage1 + self.stage2) as f64 / self.proposals as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Stage1,
    Stage2,
    Rejected,
}

/// Sampler state: proposal covariance, stage-2 shrink factor and the running
/// moments used to adapt the covariance.
#[derive(Clone, Debug)]
pub struct Dram {
    chol: DMatrix<f64>,
    cov: DMatrix<f64>,
    pub scale2: f64,
    pub adapt_interval: usize,
    adapting: bool,
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    sd: f64,
    eps: f64,
    pub stats: DramStats,
}

impl Dram {
    pub fn new(initial_cov: DMatrix<f64>, scale2: f64) -> Result<Self> {
        let d = initial_cov.nrows();
        if d == 0 || initial_cov.ncols() != d {
            return Err(invalid("proposal covariance must be square and nonempty"));
        }
        if !(scale2 > 0.0) {
            return Err(invalid("stage-2 scale must be positive"));
        }
        let chol = initial_cov
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("proposal covariance is not positive definite"))?
            .unpack();
        let eps = 1e-10 * initial_cov.diagonal().max();
        Ok(Dram {
            chol,
            cov: initial_cov,
            scale2,
            adapt_interval: 100,
            adapting: true,
            n: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
            sd: 2.38 * 2.38 / d as f64,
            eps,
            stats: DramStats::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Stops adaptation; the proposal is fixed from here on.
    pub fn freeze(&mut self) {
        self.adapting = false;
    }

    /// Adds a chain state to the adaptation history and, every
    /// `adapt_interval` states, resets the proposal to `2.38^2/d` times the
    /// empirical covariance.
    pub fn observe(&mut self, x: &[f64]) {
        if !self.adapting {
            return;
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
        if self.n >= 2 * self.dim().max(10) && self.n % self.adapt_interval == 0 {
            let emp = &self.m2 / (self.n - 1) as f64;
            let d = self.dim();
            let prop = (emp + DMatrix::identity(d, d) * self.eps) * self.sd;
            if let Some(c) = prop.clone().cholesky() {
                self.chol = c.unpack();
                self.cov = prop;
            }
        }
    }

    fn quad(&self, v: &DVector<f64>) -> f64 {
        // v' C^-1 v via the lower factor
        let w = self
            .chol
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a nonzero diagonal");
        w.norm_squared()
    }

    fn propose<R: Rng + ?Sized>(&self, x: &DVector<f64>, scale: f64, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        x + &self.chol * z * scale
    }

    /// One DRAM transition. `target` returns the log density (`-inf` outside
    /// the support) and a payload kept for the accepted point.
    pub fn step<S, R: Rng + ?Sized>(
        &mut self,
        x: &mut [f64],
        logp: &mut f64,
        mut target: impl FnMut(&[f64]) -> (f64, S),
        rng: &mut R,
    ) -> (Outcome, Option<S>) {
        self.stats.proposals += 1;
        let xv = DVector::from_column_slice(x);
        let y1 = self.propose(&xv, 1.0, rng);
        let (lp1, s1) = target(y1.as_slice());
        if lp1 == f64::NEG_INFINITY {
            self.stats.outside += 1;
        }
        let log_a1 = (lp1 - *logp).min(0.0);
        if rng.random::<f64>().ln() < log_a1 {
            x.copy_from_slice(y1.as_slice());
            *logp = lp1;
            self.stats.stage1 += 1;
            return (Outcome::Stage1, Some(s1));
        }

        let y2 = self.propose(&xv, self.scale2.sqrt(), rng);
        let (lp2, s2) = target(y2.as_slice());
        if lp2 == f64::NEG_INFINITY {
            self.stats.outside += 1;
            return (Outcome::Rejected, None);
        }
        // alpha_1(y2, y1) and alpha_1(x, y1)
        let a1_y2 = if lp1 == f64::NEG_INFINITY {
            0.0
        } else {
            (lp1 - lp2).min(0.0).exp()
        };
        let a1_x = log_a1.exp();
        if a1_y2 >= 1.0 {
            return (Outcome::Rejected, None);
        }
        let num = lp2 - 0.5 * self.quad(&(&y1 - &y2)) + (1.0 - a1_y2).ln();
        let den = *logp - 0.5 * self.quad(&(&y1 - &xv)) + (1.0 - a1_x).ln();
        if rng.random::<f64>().ln() < (num - den).min(0.0) {
            x.copy_from_slice(y2.as_slice());
            *logp = lp2;
            self.stats.stage2 += 1;
            return (Outcome::Stage2, Some(s2));
        }
        (Outcome::Rejected, None)
    }
}

/// Univariate Gaussian random-walk Metropolis step on `x`.
pub fn rw_metropolis<S, R: Rng + ?Sized>(
    x: f64,
    logp: f64,
    step: f64,
    mut target: impl FnMut(f64) -> (f64, S),
    rng: &mut R,
) -> Option<(f64, f64, S)> {
    let y = x + step * rng.sample::<f64, _>(StandardNormal);
    let (lp, s) = target(y);
    if lp == f64::NEG_INFINITY {
        return None;
    }
    (rng.random::<f64>().ln() < (lp - logp).min(0.0)).then_some((y, lp, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_target_always_accepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dram::new(DMatrix::identity(2, 2), 0.25).unwrap();
        let mut x = vec![0.0, 0.0];
        let mut lp = 0.0;
        for _ in 0..100 {
            let (o, _) = d.step(&mut x, &mut lp, |_| (0.0, ()), &mut rng);
            assert_eq!(o, Outcome::Stage1);
        }
        assert_eq!(d.stats.acceptance(), 1.0);
    }

    #[test]
    fn zero_step_is_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = |x: f64| (-(x * x), ());
        let lp0 = target(0.7).0;
        let (y, lp, _) = rw_metropolis(0.7, lp0, 0.0, target, &mut rng).unwrap();
        assert_eq!((y, lp), (0.7, lp0));
    }

    #[test]
    fn outside_support_never_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Dram::new(DMatrix::identity(1, 1) * 4.0, 0.25).unwrap();
        let mut x = vec![0.5];
        let mut lp = 0.0;
        for _ in 0..2000 {
            d.step(
                &mut x,
                &mut lp,
                |y| {
                    (
                        if (0.0..1.0).contains(&y[0]) {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        },
                        (),
                    )
                },
                &mut rng,
            );
            assert!((0.0..1.0).contains(&x[0]));
        }
        assert!(d.stats.outside > 0);
    }

    #[test]
    fn recovers_correlated_gaussian() {
        let truth = DMatrix::from_row_slice(2, 2, &[2.0, 1.2, 1.2, 1.0]);
        let prec = truth.clone().try_inverse().unwrap();
        let logp = |y: &[f64]| {
            let v = DVector::from_column_slice(y);
            (-0.5 * (v.transpose() * &prec * &v)[0], ())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Dram::new(DMatrix::identity(2, 2) * 0.1, 0.25).unwrap();
        let mut x = vec![0.0, 0.0];
        let mut lp = logp(&x).0;
        let mut kept = Vec::new();
        for i in 0..100_000 {
            d.step(&mut x, &mut lp, logp, &mut rng);
            if i < 10_000 {
                d.observe(&x);
            } else {
                d.freeze();
                kept.push(x.clone());
            }
        }
        let n = kept.len() as f64;
        let m: Vec<f64> = (0..2).map(|j| kept.iter().map(|v| v[j]).sum::<f64>() / n).collect();
        for i in 0..2 {
            for j in 0..2 {
                let c = kept.iter().map(|v| (v[i] - m[i]) * (v[j] - m[j])).sum::<f64>() / (n - 1.0);
                assert!((c - truth[(i, j)]).abs() < 0.05 * truth[(i, j)].abs(), "{i}{j}: {c}");
            }
        }
    }

    #[test]
    fn delayed_rejection_preserves_target() {
        // Stage 1 proposals far too wide force most moves through stage 2.
        let logp = |y: &[f64]| (-0.5 * y[0] * y[0], ());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Dram::new(DMatrix::identity(1, 1) * 400.0, 0.0025).unwrap();
        d.freeze();
        let mut x = vec![0.0];
        let mut lp = 0.0;
        let mut s = Vec::with_capacity(200_000);
        for _ in 0..200_000 {
            d.step(&mut x, &mut lp, logp, &mut rng);
            s.push(x[0]);
        }
        assert!(d.stats.stage2 > d.stats.stage1);
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn rejects_bad_covariance() {
        assert!(Dram::new(DMatrix::zeros(2, 2), 0.25).is_err());
        assert!(Dram::new(DMatrix::identity(2, 2), 0.0).is_err());
    }
}

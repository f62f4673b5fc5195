//! Negative-binomial count model on emulated latent susceptibles, its priors,
//! and the MCMC machinery that fits it.

pub mod diagnostics;
pub mod dram;
pub mod mcmc;
pub mod spline;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::emulator::{kriging_weights, CovEmulator, DesignPoint, MeanEmulator};
use crate::error::{invalid, Error, Result};
use crate::ssa::ObservationSet;

pub use diagnostics::{discrepancy, gelman_rubin, ks_critical_1pct, ks_statistic, quantile, site_discrepancy};
pub use dram::{Dram, DramStats, Outcome};
pub use mcmc::{param_names, rhat, run_chains, run_mcmc, Acceptance, ChainState, FitResult, McmcConfig, ParamSummary};
pub use spline::bspline_basis;

/// Floor on the negative-binomial mean.
pub const MIN_MEAN: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// New-infection counts, `n_s x n_obs`, at absolute times.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedData {
    pub counts: DMatrix<u64>,
    pub times: Vec<f64>,
}

impl ObservedData {
    pub fn new(counts: DMatrix<u64>, times: Vec<f64>) -> Result<Self> {
        if counts.ncols() != times.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} count columns for {} times",
                counts.ncols(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("observation times must increase"));
        }
        Ok(ObservedData { counts, times })
    }

    /// Real-valued counts, e.g. as read back from a long CSV; every entry
    /// must be a nonnegative integer.
    pub fn from_real(counts: &DMatrix<f64>, times: Vec<f64>) -> Result<Self> {
        if let Some(v) = counts
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0))
        {
            return Err(invalid(format!("count {v} is not a nonnegative integer")));
        }
        Self::new(counts.map(|v| v as u64), times)
    }

    pub fn n_sites(&self) -> usize {
        self.counts.nrows()
    }
}

impl From<&ObservationSet> for ObservedData {
    fn from(o: &ObservationSet) -> Self {
        ObservedData {
            counts: o.counts.clone(),
            times: o.times.clone(),
        }
    }
}

/// Index of every observation time on the emulator grid. Each must have a
/// preceding grid point, since the count at `t` is driven by `X(t-1) - X(t)`.
pub fn time_indices(obs_times: &[f64], grid: &[f64]) -> Result<Vec<usize>> {
    obs_times
        .iter()
        .map(|&t| {
            let j = grid
                .iter()
                .position(|&g| (g - t).abs() <= 1e-9 * t.abs().max(1.0))
                .ok_or_else(|| invalid(format!("observation time {t} is not on the emulator grid")))?;
            if j == 0 {
                return Err(invalid(format!("observation time {t} has no preceding grid point")));
            }
            Ok(j)
        })
        .collect()
}

/// `log NB(y; mean m, size m/(nu-1))` with `lnfact = ln y!`.
pub fn nb_logpmf(y: u64, lnfact: f64, m: f64, nu: f64) -> f64 {
    let m = m.max(MIN_MEAN);
    let r = m / (nu - 1.0);
    let y = y as f64;
    ln_gamma(y + r) - ln_gamma(r) - lnfact - r * nu.ln() + y * ((nu - 1.0) / nu).ln()
}

/// `X_t = mu_t + Phi(t) a B[t,:]'` for every grid time. `phi` is empty for the
/// mean-only model, where `a` is ignored.
pub fn latent_susceptibles(
    mu: &DMatrix<f64>,
    phi: &[DMatrix<f64>],
    basis: &DMatrix<f64>,
    a: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut x = mu.clone();
    if phi.is_empty() {
        return Ok(x);
    }
    if phi.len() != mu.ncols() || basis.nrows() != mu.ncols() {
        return Err(Error::ShapeMismatch("latent time grids differ".into()));
    }
    if a.nrows() != phi[0].ncols() || a.ncols() != basis.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "coefficients are {}x{}, expected {}x{}",
            a.nrows(),
            a.ncols(),
            phi[0].ncols(),
            basis.ncols()
        )));
    }
    // column t of a B' is the deviation driving time t
    let dev = a * basis.transpose();
    for (t, f) in phi.iter().enumerate() {
        let mut col = x.column_mut(t);
        col += f * dev.column(t);
    }
    Ok(x)
}

/// Sum of `nb_logpmf` over all cells.
pub fn nb_loglik(data: &ObservedData, idx: &[usize], x: &DMatrix<f64>, p: f64, nu: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) || !(nu > 1.0) {
        return Err(invalid("need p in (0, 1] and nu > 1"));
    }
    if idx.len() != data.times.len() || x.nrows() != data.n_sites() {
        return Err(Error::ShapeMismatch("latent and data disagree".into()));
    }
    let mut ll = 0.0;
    for (k, &j) in idx.iter().enumerate() {
        for s in 0..data.n_sites() {
            let y = data.counts[(s, k)];
            ll += nb_logpmf(y, ln_gamma(y as f64 + 1.0), p * (x[(s, j - 1)] - x[(s, j)]), nu);
        }
    }
    Ok(ll)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Variance of the zero-mean normal prior on each design coordinate.
    pub coord_var: f64,
    pub nu_mean: f64,
    pub nu_var: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            coord_var: 1e6,
            nu_mean: 3.0,
            nu_var: 25.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coord_var > 0.0 && self.nu_var > 0.0 && self.nu_mean.is_finite()) {
            return Err(invalid("prior variances must be positive"));
        }
        Ok(())
    }

    pub fn log_coord(&self, c: f64) -> f64 {
        -0.5 * (LN_2PI + self.coord_var.ln()) - c * c / (2.0 * self.coord_var)
    }

    fn nu_normal(&self) -> Normal {
        Normal::new(self.nu_mean, self.nu_var.sqrt()).expect("validated prior")
    }

    /// Normal density truncated to `[1, inf)`, normalized.
    pub fn log_nu(&self, nu: f64) -> f64 {
        if !(nu >= 1.0) {
            return f64::NEG_INFINITY;
        }
        let sd = self.nu_var.sqrt();
        let z = (nu - self.nu_mean) / sd;
        -0.5 * (LN_2PI + z * z) - sd.ln() - self.nu_normal().sf(1.0).ln()
    }

    pub fn nu_cdf(&self, nu: f64) -> f64 {
        if nu <= 1.0 {
            return 0.0;
        }
        let n = self.nu_normal();
        (n.cdf(nu) - n.cdf(1.0)) / n.sf(1.0)
    }
}

pub fn log_std_normal(a: f64) -> f64 {
    -0.5 * (LN_2PI + a * a)
}

/// Log prior of a full state; `s0_candidates` carries the uniform source prior.
pub fn log_prior(prior: &PriorConfig, state: &ChainState, s0_candidates: &[usize]) -> f64 {
    if !s0_candidates.contains(&state.s0) {
        return f64::NEG_INFINITY;
    }
    let coords: f64 = state.coords.iter().map(|&c| prior.log_coord(c)).sum();
    let a: f64 = state.a.iter().map(|&v| log_std_normal(v)).sum();
    coords + prior.log_nu(state.nu) + a - (s0_candidates.len() as f64).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Reporting rate, fixed.
    pub p: f64,
    pub n_basis: usize,
    pub degree: usize,
    /// Drop the covariance term entirely (`a = 0`).
    pub mean_only: bool,
    pub prior: PriorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            p: 1.0,
            n_basis: 10,
            degree: 3,
            mean_only: false,
            prior: PriorConfig::default(),
        }
    }
}

/// Data, emulators and fixed settings, with lookup tables for incremental
/// likelihood updates.
#[derive(Clone, Debug)]
pub struct Model<'a> {
    pub mean: &'a MeanEmulator,
    pub cov: &'a CovEmulator,
    pub data: ObservedData,
    pub config: ModelConfig,
    pub basis: DMatrix<f64>,
    /// Names of the design coordinates, `theta0, theta1, ...` unless set.
    pub coord_names: Vec<String>,
    idx: Vec<usize>,
    lnfact: DMatrix<f64>,
    /// For each basis column, the grid times where it is nonzero.
    support: Vec<Vec<usize>>,
    /// For each basis column, the observation columns those times touch.
    touched: Vec<Vec<usize>>,
}

/// Emulated moments and latent path at one state, with per-cell log-likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub struct Fields {
    pub mu: DMatrix<f64>,
    pub phi: Vec<DMatrix<f64>>,
    pub x: DMatrix<f64>,
    pub cells: DMatrix<f64>,
}

impl Fields {
    pub fn loglik(&self) -> f64 {
        self.cells.sum()
    }
}

impl<'a> Model<'a> {
    pub fn new(mean: &'a MeanEmulator, cov: &'a CovEmulator, data: ObservedData, config: ModelConfig) -> Result<Self> {
        if !(config.p > 0.0 && config.p <= 1.0) {
            return Err(invalid("reporting rate must lie in (0, 1]"));
        }
        config.prior.validate()?;
        if mean.design != cov.design || mean.times != cov.times {
            return Err(invalid("mean and covariance emulators come from different builds"));
        }
        if data.n_sites() != mean.n_sites() {
            return Err(Error::ShapeMismatch(format!(
                "{} data sites, emulator has {}",
                data.n_sites(),
                mean.n_sites()
            )));
        }
        let idx = time_indices(&data.times, &mean.times)?;
        let basis = bspline_basis(mean.n_times(), config.n_basis, config.degree)?;
        let lnfact = data.counts.map(|y| ln_gamma(y as f64 + 1.0));
        let support: Vec<Vec<usize>> = (0..basis.ncols())
            .map(|j| (0..basis.nrows()).filter(|&t| basis[(t, j)] != 0.0).collect())
            .collect();
        let touched = support
            .iter()
            .map(|ts| {
                (0..idx.len())
                    .filter(|&k| ts.contains(&idx[k]) || ts.contains(&(idx[k] - 1)))
                    .collect()
            })
            .collect();
        let coord_names = (0..mean.design.dim()).map(|i| format!("theta{i}")).collect();
        Ok(Model {
            mean,
            cov,
            data,
            config,
            basis,
            coord_names,
            idx,
            lnfact,
            support,
            touched,
        })
    }

    pub fn with_coord_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(invalid(format!("{} names for {} coordinates", names.len(), self.dim())));
        }
        self.coord_names = names;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.design.dim()
    }

    pub fn n_sites(&self) -> usize {
        self.data.n_sites()
    }

    /// Spatial rank of the deviation coefficients; zero for the mean-only model.
    pub fn rank(&self) -> usize {
        if self.config.mean_only {
            0
        } else {
            self.cov.rank()
        }
    }

    pub fn n_basis(&self) -> usize {
        self.basis.ncols()
    }

    pub fn s0_candidates(&self) -> &[usize] {
        &self.mean.design.s0_candidates
    }

    pub fn time_indices(&self) -> &[usize] {
        &self.idx
    }

    pub fn in_design(&self, coords: &[f64], s0: usize) -> bool {
        self.mean.design.contains(&DesignPoint {
            coords: coords.to_vec(),
            s0,
        })
    }

    pub fn log_prior(&self, state: &ChainState) -> f64 {
        log_prior(&self.config.prior, state, self.s0_candidates())
    }

    fn cell(&self, s: usize, k: usize, x: &DMatrix<f64>, nu: f64) -> f64 {
        let j = self.idx[k];
        nb_logpmf(
            self.data.counts[(s, k)],
            self.lnfact[(s, k)],
            self.config.p * (x[(s, j - 1)] - x[(s, j)]),
            nu,
        )
    }

    pub fn cells(&self, x: &DMatrix<f64>, nu: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_sites(), self.idx.len(), |s, k| self.cell(s, k, x, nu))
    }

    /// Emulates at `(coords, s0)` and builds the latent path for `a`.
    pub fn fields(&self, coords: &[f64], s0: usize, a: &DMatrix<f64>, nu: f64) -> Result<Fields> {
        let target = DesignPoint {
            coords: coords.to_vec(),
            s0,
        };
        let w = kriging_weights(&self.mean.design, &target, &self.mean.krige)?;
        let mu = self.mean.predict_with(&w);
        let phi = if self.config.mean_only {
            Vec::new()
        } else if self.cov.krige == self.mean.krige {
            self.cov.factors_with(&w)
        } else {
            self.cov.predict_factors(&target)?
        };
        let x = latent_susceptibles(&mu, &phi, &self.basis, a)?;
        let cells = self.cells(&x, nu);
        Ok(Fields { mu, phi, x, cells })
    }

    /// Log-likelihood change, and the new latent columns and cells, when
    /// `a[l,j]` moves by `step`. Returns `(diff, x, cells)` for committing.
    pub fn alpha_delta(
        &self,
        f: &Fields,
        l: usize,
        j: usize,
        step: f64,
        nu: f64,
    ) -> (f64, DMatrix<f64>, Vec<(usize, usize, f64)>) {
        let mut x = f.x.clone();
        for &t in &self.support[j] {
            let c = self.basis[(t, j)] * step;
            let mut col = x.column_mut(t);
            col.axpy(c, &f.phi[t].column(l), 1.0);
        }
        let mut diff = 0.0;
        let mut cells = Vec::with_capacity(self.touched[j].len() * self.n_sites());
        for &k in &self.touched[j] {
            for s in 0..self.n_sites() {
                let v = self.cell(s, k, &x, nu);
                diff += v - f.cells[(s, k)];
                cells.push((s, k, v));
            }
        }
        (diff, x, cells)
    }

    /// Reporting means `p (X(t-1) - X(t))`, floored, at the observation times.
    pub fn lambda(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_sites(), self.idx.len(), |s, k| {
            let j = self.idx[k];
            (self.config.p * (x[(s, j - 1)] - x[(s, j)])).max(MIN_MEAN)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn direct_nb(y: u64, m: f64, nu: f64) -> f64 {
        // product form of Gamma(y+r)/(Gamma(r) y!) q^r (1-q)^y
        let r = m / (nu - 1.0);
        let q = 1.0 / nu;
        let mut lp = r * q.ln() + y as f64 * (1.0 - q).ln();
        for i in 0..y {
            lp += ((r + i as f64) / (i as f64 + 1.0)).ln();
        }
        lp
    }

    #[test]
    fn pmf_matches_direct_product() {
        let lp = nb_logpmf(750, ln_gamma(751.0), 750.0, 3.2);
        assert!((lp - direct_nb(750, 750.0, 3.2)).abs() < 1e-9, "{lp}");
    }

    #[test]
    fn pmf_normalizes_with_stated_moments() {
        let (m, nu) = (40.0, 3.2);
        let mut total = 0.0;
        let mut mean = 0.0;
        let mut sq = 0.0;
        for y in 0..5000u64 {
            let pr = nb_logpmf(y, ln_gamma(y as f64 + 1.0), m, nu).exp();
            total += pr;
            mean += pr * y as f64;
            sq += pr * (y * y) as f64;
        }
        assert!((total - 1.0).abs() < 1e-10);
        assert!((mean - m).abs() < 1e-8);
        assert!((sq - mean * mean - nu * m).abs() < 1e-6);
    }

    #[test]
    fn near_one_overdispersion_is_poisson() {
        let m: f64 = 12.5;
        for y in [0u64, 3, 12, 30] {
            let pois = -m + y as f64 * m.ln() - ln_gamma(y as f64 + 1.0);
            let nb = nb_logpmf(y, ln_gamma(y as f64 + 1.0), m, 1.0 + 1e-6);
            assert!((nb - pois).abs() < 1e-3, "{y}: {nb} vs {pois}");
        }
    }

    #[test]
    fn zero_counts_at_floor_mean() {
        let data = ObservedData::new(DMatrix::zeros(3, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = DMatrix::from_element(3, 5, 100.0);
        let ll = nb_loglik(&data, &[1, 2, 3, 4], &x, 1.0, 3.2).unwrap();
        assert!(ll <= 0.0 && ll > -1e-6, "{ll}");
    }

    #[test]
    fn loglik_rejects_bad_rates() {
        let data = ObservedData::new(DMatrix::zeros(1, 1), vec![1.0]).unwrap();
        let x = DMatrix::from_element(1, 2, 1.0);
        assert!(nb_loglik(&data, &[1], &x, 0.0, 3.0).is_err());
        assert!(nb_loglik(&data, &[1], &x, 1.0, 1.0).is_err());
    }

    #[test]
    fn time_mapping() {
        let grid: Vec<f64> = (60..=140).map(f64::from).collect();
        let obs: Vec<f64> = (61..=140).map(f64::from).collect();
        let idx = time_indices(&obs, &grid).unwrap();
        assert_eq!(idx[0], 1);
        assert_eq!(idx[79], 80);
        assert!(time_indices(&[60.0], &grid).is_err());
        assert!(time_indices(&[61.5], &grid).is_err());
    }

    #[test]
    fn nu_prior_values() {
        let p = PriorConfig::default();
        assert_eq!(p.log_nu(0.5), f64::NEG_INFINITY);
        assert!((p.log_nu(3.0) - p.log_nu(8.0) - 0.5).abs() < 1e-12);
        // density integrates to one over the truncated support
        let h = 1e-3;
        let total: f64 = (0..100_000)
            .map(|i| p.log_nu(1.0 + (i as f64 + 0.5) * h).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert!((p.nu_cdf(3.0) - 0.2371).abs() < 1e-3);
    }

    #[test]
    fn prior_at_zero_coefficients() {
        let state = ChainState {
            coords: vec![0.0, 0.0],
            s0: 1,
            nu: 3.0,
            a: DMatrix::zeros(4, 5),
        };
        let p = PriorConfig::default();
        let total = log_prior(&p, &state, &[1, 2]);
        let rest = 2.0 * p.log_coord(0.0) + p.log_nu(3.0) - 2f64.ln();
        assert!((total - rest - (-(20.0 / 2.0) * LN_2PI)).abs() < 1e-10);
        assert_eq!(
            log_prior(&p, &ChainState { s0: 7, ..state }, &[1, 2]),
            f64::NEG_INFINITY
        );
    }

    fn toy_phi(n_s: usize, n_t: usize, l: usize) -> Vec<DMatrix<f64>> {
        (0..n_t)
            .map(|t| DMatrix::from_fn(n_s, l, |s, j| 1.0 + 0.3 * s as f64 - 0.2 * j as f64 + 0.1 * t as f64))
            .collect()
    }

    #[test]
    fn zero_coefficients_give_the_mean() {
        let mu = DMatrix::from_fn(3, 6, |s, t| 1000.0 - 10.0 * (s + t) as f64);
        let basis = bspline_basis(6, 4, 3).unwrap();
        let x = latent_susceptibles(&mu, &toy_phi(3, 6, 2), &basis, &DMatrix::zeros(2, 4)).unwrap();
        assert_eq!(x, mu);
    }

    #[test]
    fn constant_spline_gives_constant_deviation() {
        let mu = DMatrix::zeros(3, 6);
        let phi = toy_phi(3, 6, 2);
        let basis = bspline_basis(6, 1, 0).unwrap();
        let a = DMatrix::from_column_slice(2, 1, &[0.7, -1.1]);
        let x = latent_susceptibles(&mu, &phi, &basis, &a).unwrap();
        for (t, p) in phi.iter().enumerate() {
            let want = p * DMatrix::from_column_slice(2, 1, &[0.7, -1.1]);
            assert!((x.column(t) - want.column(0)).norm() < 1e-12);
        }
    }

    #[test]
    fn latent_variance_matches_factor_product() {
        let (n_s, n_t, l, b) = (3, 6, 2, 4);
        let mu = DMatrix::zeros(n_s, n_t);
        let phi = toy_phi(n_s, n_t, l);
        let basis = bspline_basis(n_t, b, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 100_000;
        let mut sq = DMatrix::zeros(n_s, n_t);
        for _ in 0..draws {
            let a = DMatrix::from_fn(l, b, |_, _| StandardNormal.sample(&mut rng));
            let x = latent_susceptibles(&mu, &phi, &basis, &a).unwrap();
            sq += x.component_mul(&x);
        }
        for t in 0..n_t {
            let v = &phi[t] * phi[t].transpose();
            for s in 0..n_s {
                let got = sq[(s, t)] / draws as f64;
                assert!((got / v[(s, s)] - 1.0).abs() < 0.03, "({s},{t}) {got} vs {}", v[(s, s)]);
            }
        }
    }

    #[test]
    fn rejects_fractional_counts() {
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 2.5]);
        assert!(ObservedData::from_real(&c, vec![1.0, 2.0]).is_err());
        assert!(ObservedData::new(DMatrix::zeros(1, 2), vec![2.0, 1.0]).is_err());
    }
}

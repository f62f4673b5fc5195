//! Exact simulation of the spatial SIR jump process (direct Gillespie method)
//! and negative-binomial observation sampling.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closure::MomentState;
use crate::error::{invalid, Result};
use crate::model::{EpidemicState, Lattice, Theta};

/// Sampled path of one run; matrices are `n_s x n_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x: DMatrix<u64>,
    pub y: DMatrix<u64>,
}

impl Trajectory {
    pub fn n_sites(&self) -> usize {
        self.x.nrows()
    }

    /// `X(s,t-1) - X(s,t)` for every recorded time after the first.
    pub fn new_infections(&self) -> DMatrix<u64> {
        let nt = self.times.len().saturating_sub(1);
        DMatrix::from_fn(self.n_sites(), nt, |s, t| self.x[(s, t)] - self.x[(s, t + 1)])
    }
}

/// Noisy new-infection reports at `times` (the trajectory grid minus its first point).
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    pub counts: DMatrix<u64>,
    pub p: f64,
    pub nu: f64,
}

/// Provenance written next to simulation outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetadata {
    pub theta: Theta,
    pub seed: u64,
    pub times: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

fn check_grid(times: &[f64], start: f64, t_end: f64) -> Result<()> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("record times must be ascending"));
    }
    if let (Some(&first), Some(&last)) = (times.first(), times.last()) {
        if first < start {
            return Err(invalid("record times start before the initial state"));
        }
        if last > t_end {
            return Err(invalid("record times extend past t_end"));
        }
    }
    Ok(())
}

/// One direct-method run from `init`, recording the state at each of
/// `record_times` (right-continuous: events at exactly a record time are
/// included).
pub fn gillespie_run(
    theta: &Theta,
    lattice: &Lattice,
    init: &EpidemicState,
    t_end: f64,
    record_times: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    theta.validate(lattice)?;
    init.validate(lattice)?;
    check_grid(record_times, init.t, t_end)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(run(theta, lattice, init, t_end, record_times, &mut rng))
}

fn run(
    theta: &Theta,
    lattice: &Lattice,
    init: &EpidemicState,
    t_end: f64,
    record_times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let n = lattice.n_sites();
    let nt = record_times.len();
    let weights = theta.infection_weights(lattice);
    let mut x = init.x.clone();
    let mut y = init.y.clone();
    let mut t = init.t;

    let infection = |i: usize, x: &[u64], y: &[u64]| -> f64 {
        let pressure: f64 = weights[i].iter().map(|&(k, w)| w * y[k] as f64).sum();
        x[i] as f64 * pressure
    };
    let mut rates: Vec<f64> = (0..n).map(|i| infection(i, &x, &y)).collect();
    rates.extend(y.iter().map(|&v| theta.eta * v as f64));

    let mut out_x = DMatrix::<u64>::zeros(n, nt);
    let mut out_y = DMatrix::<u64>::zeros(n, nt);
    let mut next = 0;
    let mut record = |upto: f64, next: &mut usize, x: &[u64], y: &[u64]| {
        while *next < nt && record_times[*next] < upto {
            out_x.column_mut(*next).copy_from_slice(x);
            out_y.column_mut(*next).copy_from_slice(y);
            *next += 1;
        }
    };

    loop {
        let total: f64 = rates.iter().sum();
        if total <= 0.0 {
            break;
        }
        let dt: f64 = rng.sample::<f64, _>(Exp1) / total;
        if t + dt > t_end {
            break;
        }
        t += dt;
        record(t, &mut next, &x, &y);

        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut event = rates.iter().rposition(|&r| r > 0.0).unwrap_or(0);
        for (e, &r) in rates.iter().enumerate() {
            acc += r;
            if target < acc {
                event = e;
                break;
            }
        }

        let site = event % n;
        if event < n {
            x[site] -= 1;
            y[site] += 1;
        } else {
            y[site] -= 1;
        }
        rates[site] = infection(site, &x, &y);
        for &k in lattice.neighbors(site) {
            rates[k] = infection(k, &x, &y);
        }
        rates[n + site] = theta.eta * y[site] as f64;
    }
    record(f64::INFINITY, &mut next, &x, &y);

    Trajectory {
        times: record_times.to_vec(),
        x: out_x,
        y: out_y,
    }
}

/// Empirical moments of an ensemble of runs, per recorded time.
#[derive(Clone, Debug)]
pub struct EnsembleMoments {
    pub times: Vec<f64>,
    pub n_reps: usize,
    pub states: Vec<MomentState>,
    /// Monte-Carlo standard errors of the means, `n_s x n_t`.
    pub se_mu_x: DMatrix<f64>,
    pub se_mu_y: DMatrix<f64>,
}

/// Running first and second moments of the stacked `(X, Y)` vector at every
/// recorded time. Values are shifted by a fixed reference before squaring so
/// the covariance does not suffer cancellation at large populations.
#[derive(Clone, Debug)]
pub struct EnsembleAccumulator {
    shift: Vec<f64>,
    count: usize,
    sum: Vec<Vec<f64>>,
    outer: Vec<DMatrix<f64>>,
}

impl EnsembleAccumulator {
    /// `shift` is the stacked reference `(X_1..X_n, Y_1..Y_n)`.
    pub fn new(shift: Vec<f64>, n_times: usize) -> Self {
        let d = shift.len();
        EnsembleAccumulator {
            shift,
            count: 0,
            sum: vec![vec![0.0; d]; n_times],
            outer: vec![DMatrix::zeros(d, d); n_times],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, traj: &Trajectory) {
        let n = traj.n_sites();
        let mut z = vec![0.0; 2 * n];
        for t in 0..self.sum.len() {
            for s in 0..n {
                z[s] = traj.x[(s, t)] as f64 - self.shift[s];
                z[n + s] = traj.y[(s, t)] as f64 - self.shift[n + s];
            }
            for (a, &za) in self.sum[t].iter_mut().zip(&z) {
                *a += za;
            }
            let outer = &mut self.outer[t];
            for j in 0..2 * n {
                if z[j] == 0.0 {
                    continue;
                }
                for i in 0..2 * n {
                    outer[(i, j)] += z[i] * z[j];
                }
            }
        }
        self.count += 1;
    }

    pub fn merge(mut self, other: EnsembleAccumulator) -> Self {
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(other.sum) {
            for (u, v) in a.iter_mut().zip(b) {
                *u += v;
            }
        }
        for (a, b) in self.outer.iter_mut().zip(other.outer) {
            *a += b;
        }
        self
    }

    /// Sample means and unbiased covariances; needs at least two runs.
    pub fn finish(self, times: Vec<f64>) -> Result<EnsembleMoments> {
        if self.count < 2 {
            return Err(invalid("ensemble moments need at least two replicates"));
        }
        let r = self.count as f64;
        let n = self.shift.len() / 2;
        let nt = self.sum.len();
        let mut states = Vec::with_capacity(nt);
        let mut se_x = DMatrix::zeros(n, nt);
        let mut se_y = DMatrix::zeros(n, nt);
        for t in 0..nt {
            let m: Vec<f64> = self.sum[t].iter().map(|v| v / r).collect();
            let cov = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
                (self.outer[t][(i, j)] - r * m[i] * m[j]) / (r - 1.0)
            });
            for s in 0..n {
                se_x[(s, t)] = (cov[(s, s)].max(0.0) / r).sqrt();
                se_y[(s, t)] = (cov[(n + s, n + s)].max(0.0) / r).sqrt();
            }
            states.push(MomentState {
                mu_x: (0..n).map(|s| m[s] + self.shift[s]).collect(),
                mu_y: (0..n).map(|s| m[n + s] + self.shift[n + s]).collect(),
                s_xx: cov.view((0, 0), (n, n)).into_owned(),
                s_xy: cov.view((0, n), (n, n)).into_owned(),
                s_yy: cov.view((n, n), (n, n)).into_owned(),
            });
        }
        Ok(EnsembleMoments {
            times,
            n_reps: self.count,
            states,
            se_mu_x: se_x,
            se_mu_y: se_y,
        })
    }
}

/// Runs `n_reps` independent replicates in parallel (replicate `r` is seeded
/// with `seed ^ r`) and reduces them to empirical moments.
pub fn ensemble_moments(
    theta: &Theta,
    lattice: &Lattice,
    init: &EpidemicState,
    record_times: &[f64],
    n_reps: usize,
    seed: u64,
) -> Result<EnsembleMoments> {
    theta.validate(lattice)?;
    init.validate(lattice)?;
    if n_reps < 2 {
        return Err(invalid("n_reps must be at least 2"));
    }
    let t_end = record_times.last().copied().unwrap_or(init.t);
    check_grid(record_times, init.t, t_end)?;
    let mut shift: Vec<f64> = init.x.iter().map(|&v| v as f64).collect();
    shift.extend(init.y.iter().map(|&v| v as f64));
    let nt = record_times.len();

    let acc = (0..n_reps as u64)
        .into_par_iter()
        .fold(
            || EnsembleAccumulator::new(shift.clone(), nt),
            |mut acc, r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ r);
                acc.push(&run(theta, lattice, init, t_end, record_times, &mut rng));
                acc
            },
        )
        .reduce(
            || EnsembleAccumulator::new(shift.clone(), nt),
            EnsembleAccumulator::merge,
        );
    acc.finish(record_times.to_vec())
}

/// One draw from the negative binomial with mean `m` and variance `nu * m`,
/// as a gamma-Poisson mixture. `m <= 0` gives 0.
pub fn sample_nb<R: Rng + ?Sized>(rng: &mut R, m: f64, nu: f64) -> u64 {
    if m <= 0.0 {
        return 0;
    }
    let shape = m / (nu - 1.0);
    let rate = match Gamma::new(shape, nu - 1.0) {
        Ok(g) => g.sample(rng),
        Err(_) => return 0,
    };
    match Poisson::new(rate) {
        Ok(p) => p.sample(rng) as u64,
        Err(_) => 0,
    }
}

/// Reports `y(s,t) ~ NB(p (X(s,t-1) - X(s,t)), nu)` at every time after the first.
pub fn sample_observations(traj: &Trajectory, p: f64, nu: f64, seed: u64) -> Result<ObservationSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("reporting rate must lie in (0, 1], got {p}")));
    }
    if !(nu > 1.0) || !nu.is_finite() {
        return Err(invalid(format!("overdispersion must exceed 1, got {nu}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = traj.new_infections();
    // Column-major iteration keeps the draw order (site fastest) stable.
    let counts = DMatrix::from_iterator(
        delta.nrows(),
        delta.ncols(),
        delta
            .iter()
            .map(|&d| sample_nb(&mut rng, p * d as f64, nu))
            .collect::<Vec<_>>(),
    );
    Ok(ObservationSet {
        times: traj.times[1..].to_vec(),
        counts,
        p,
        nu,
    })
}

/// Writes `site,time,value` rows, site-major within each time.
pub fn write_long_csv<W: Write, T: std::fmt::Display + nalgebra::Scalar>(
    out: W,
    times: &[f64],
    values: &DMatrix<T>,
) -> Result<()> {
    if values.ncols() != times.len() {
        return Err(crate::error::Error::ShapeMismatch(format!(
            "{} columns for {} times",
            values.ncols(),
            times.len()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["site", "time", "value"]).map_err(csv_err)?;
    for (t, time) in times.iter().enumerate() {
        for s in 0..values.nrows() {
            w.write_record([s.to_string(), time.to_string(), values[(s, t)].to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `site,time,value` file back into `(times, n_s x n_t values)`.
/// Every `(site, time)` pair must appear exactly once.
pub fn read_long_csv(path: impl AsRef<std::path::Path>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<(usize, f64, f64)>() {
        rows.push(rec.map_err(csv_err)?);
    }
    let mut times: Vec<f64> = rows.iter().map(|r| r.1).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let n_s = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut values = DMatrix::from_element(n_s, times.len(), f64::NAN);
    for (s, time, v) in rows {
        let t = times.binary_search_by(|a| a.total_cmp(&time)).expect("time present");
        if !values[(s, t)].is_nan() {
            return Err(crate::error::Error::Parse(format!(
                "duplicate row for site {s} at time {time}"
            )));
        }
        values[(s, t)] = v;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(crate::error::Error::Parse("missing (site, time) rows".into()));
    }
    Ok((times, values))
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Parse(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta(n: usize, beta: f64, phi: f64, eta: f64, s0: usize, y0: u64) -> Theta {
        Theta {
            beta: vec![beta; n],
            phi,
            eta,
            s0,
            t0: 0.0,
            y0,
        }
    }

    fn days(n: usize) -> Vec<f64> {
        (0..=n).map(|d| d as f64).collect()
    }

    #[test]
    fn zero_rates_give_constant_path() {
        let lattice = Lattice::grid(2, 2, 50).unwrap();
        let th = theta(4, 0.0, 0.0, 0.0, 1, 7);
        let init = EpidemicState::outbreak(&lattice, &th).unwrap();
        let tr = gillespie_run(&th, &lattice, &init, 10.0, &days(10), 3).unwrap();
        for t in 0..=10 {
            assert_eq!(tr.x.column(t).as_slice(), init.x.as_slice());
            assert_eq!(tr.y.column(t).as_slice(), init.y.as_slice());
        }
    }

    #[test]
    fn pure_death_dies_out() {
        let lattice = Lattice::grid(1, 1, 10).unwrap();
        let th = theta(1, 0.0, 0.0, 1.0, 0, 5);
        let init = EpidemicState::new(vec![0], vec![5], 0.0);
        let tr = gillespie_run(&th, &lattice, &init, 100.0, &days(100), 9).unwrap();
        assert!(tr.x.iter().all(|&v| v == 0));
        assert!(tr.y.row(0).iter().zip(tr.y.row(0).iter().skip(1)).all(|(a, b)| b <= a));
        assert_eq!(tr.y[(0, 100)], 0);
    }

    #[test]
    fn runs_conserve_and_are_monotone() {
        let lattice = Lattice::grid(3, 3, 500).unwrap();
        let th = theta(9, 0.3, 0.05, 0.1, 4, 10);
        let init = EpidemicState::outbreak(&lattice, &th).unwrap();
        let tr = gillespie_run(&th, &lattice, &init, 60.0, &days(60), 1).unwrap();
        for s in 0..9 {
            for t in 0..=60 {
                assert!(tr.x[(s, t)] + tr.y[(s, t)] <= 500);
                if t > 0 {
                    assert!(tr.x[(s, t)] <= tr.x[(s, t - 1)]);
                }
            }
        }
        assert!(tr.x.column(60).sum() < init.x.iter().sum::<u64>());
    }

    #[test]
    fn identical_seed_reproduces_run() {
        let lattice = Lattice::grid(2, 3, 300).unwrap();
        let th = theta(6, 0.4, 0.1, 0.1, 0, 3);
        let init = EpidemicState::outbreak(&lattice, &th).unwrap();
        let a = gillespie_run(&th, &lattice, &init, 40.0, &days(40), 77).unwrap();
        let b = gillespie_run(&th, &lattice, &init, 40.0, &days(40), 77).unwrap();
        let c = gillespie_run(&th, &lattice, &init, 40.0, &days(40), 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_grids() {
        let lattice = Lattice::grid(1, 1, 10).unwrap();
        let th = theta(1, 0.1, 0.0, 0.1, 0, 1);
        let init = EpidemicState::outbreak(&lattice, &th).unwrap();
        assert!(gillespie_run(&th, &lattice, &init, 5.0, &[2.0, 1.0], 0).is_err());
        assert!(gillespie_run(&th, &lattice, &init, 5.0, &[1.0, 6.0], 0).is_err());
    }

    #[test]
    fn duplicated_run_has_zero_covariance() {
        let lattice = Lattice::grid(2, 2, 200).unwrap();
        let th = theta(4, 0.5, 0.1, 0.1, 0, 5);
        let init = EpidemicState::outbreak(&lattice, &th).unwrap();
        let tr = gillespie_run(&th, &lattice, &init, 20.0, &days(20), 5).unwrap();
        let mut shift: Vec<f64> = init.x.iter().map(|&v| v as f64).collect();
        shift.extend(init.y.iter().map(|&v| v as f64));
        let mut acc = EnsembleAccumulator::new(shift, 21);
        acc.push(&tr);
        acc.push(&tr);
        let m = acc.finish(days(20)).unwrap();
        for (t, st) in m.states.iter().enumerate() {
            assert_eq!(st.mu_x[2], tr.x[(2, t)] as f64);
            assert_eq!(st.full_covariance().amax(), 0.0);
        }
    }

    #[test]
    fn frozen_ensemble_has_constant_moments() {
        let lattice = Lattice::grid(2, 2, 100).unwrap();
        let th = theta(4, 0.0, 0.0, 0.0, 3, 4);
        let init = EpidemicState::outbreak(&lattice, &th).unwrap();
        let m = ensemble_moments(&th, &lattice, &init, &days(5), 8, 1).unwrap();
        for st in &m.states {
            assert_eq!(st.mu_x, vec![100.0, 100.0, 100.0, 96.0]);
            assert_eq!(st.mu_y, vec![0.0, 0.0, 0.0, 4.0]);
            assert_eq!(st.full_covariance().amax(), 0.0);
        }
        assert!(ensemble_moments(&th, &lattice, &init, &days(5), 1, 1).is_err());
    }

    #[test]
    fn merge_matches_sequential_accumulation() {
        let lattice = Lattice::grid(2, 2, 300).unwrap();
        let th = theta(4, 0.4, 0.1, 0.1, 0, 5);
        let init = EpidemicState::outbreak(&lattice, &th).unwrap();
        let runs: Vec<_> = (0..6)
            .map(|s| gillespie_run(&th, &lattice, &init, 15.0, &days(15), s).unwrap())
            .collect();
        let shift = vec![300.0; 8];
        let mut all = EnsembleAccumulator::new(shift.clone(), 16);
        let mut a = EnsembleAccumulator::new(shift.clone(), 16);
        let mut b = EnsembleAccumulator::new(shift, 16);
        for (i, r) in runs.iter().enumerate() {
            all.push(r);
            if i % 2 == 0 {
                a.push(r)
            } else {
                b.push(r)
            }
        }
        let x = all.finish(days(15)).unwrap();
        let y = a.merge(b).finish(days(15)).unwrap();
        for (p, q) in x.states.iter().zip(&y.states) {
            assert!((p.to_vector() - q.to_vector()).amax() < 1e-9);
        }
    }

    #[test]
    fn nb_zero_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_nb(&mut rng, 0.0, 3.2), 0);
        let tr = Trajectory {
            times: vec![0.0, 1.0],
            x: DMatrix::from_row_slice(2, 2, &[10, 10, 10, 4]),
            y: DMatrix::zeros(2, 2),
        };
        let obs = sample_observations(&tr, 1.0, 3.2, 1).unwrap();
        assert_eq!(obs.counts[(0, 0)], 0);
        assert_eq!(obs.times, vec![1.0]);
    }

    #[test]
    fn nb_rejects_bad_parameters() {
        let tr = Trajectory {
            times: vec![0.0, 1.0],
            x: DMatrix::zeros(1, 2),
            y: DMatrix::zeros(1, 2),
        };
        assert!(sample_observations(&tr, 1.0, 1.0, 0).is_err());
        assert!(sample_observations(&tr, 0.0, 3.0, 0).is_err());
        assert!(sample_observations(&tr, 1.2, 3.0, 0).is_err());
    }

    #[test]
    fn nb_near_poisson_limit_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| sample_nb(&mut rng, 50.0, 1.0 + 1e-6) as f64)
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((mean - 50.0).abs() < 0.5);
        assert!((var / mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn nb_moments_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_nb(&mut rng, 750.0, 3.2) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean / 750.0 - 1.0).abs() < 0.02);
        assert!((var / 2400.0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn long_csv_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.5, 6.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        write_long_csv(std::fs::File::create(&path).unwrap(), &[0.0, 1.0, 2.5], &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("site,time,value\n0,0,1\n1,0,4\n"));
        let (times, back) = read_long_csv(&path).unwrap();
        assert_eq!(times, vec![0.0, 1.0, 2.5]);
        assert_eq!(back, m);
    }
}

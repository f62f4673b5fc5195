//! Gaussian moment closure of the spatial SIR jump process: state layout,
//! forward equations, integration over time and the fadeout check.

mod rhs;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{Lattice, Theta};
use crate::ode::{self, Tolerances};

pub use rhs::{forward_rhs, nonspatial_rhs};

/// Means and covariance blocks at one instant.
///
/// `s_xy[(i, k)]` is `Cov(X_i, Y_k)` and is not symmetric in general.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub s_xx: DMatrix<f64>,
    pub s_xy: DMatrix<f64>,
    pub s_yy: DMatrix<f64>,
}

/// Length of the packed state vector for `n` sites.
pub fn packed_len(n: usize) -> usize {
    2 * n + n * n + n * (n + 1)
}

impl MomentState {
    pub fn zeros(n: usize) -> Self {
        MomentState {
            mu_x: vec![0.0; n],
            mu_y: vec![0.0; n],
            s_xx: DMatrix::zeros(n, n),
            s_xy: DMatrix::zeros(n, n),
            s_yy: DMatrix::zeros(n, n),
        }
    }

    /// Deterministic start: `N - y0` susceptible and `y0` infectious at the
    /// source, everyone susceptible elsewhere, all covariances zero.
    pub fn deterministic_start(lattice: &Lattice, theta: &Theta) -> Result<Self> {
        theta.validate(lattice)?;
        let n = lattice.n_sites();
        let mut s = MomentState::zeros(n);
        for i in 0..n {
            s.mu_x[i] = lattice.population(i) as f64;
        }
        s.mu_x[theta.s0] -= theta.y0 as f64;
        s.mu_y[theta.s0] = theta.y0 as f64;
        Ok(s)
    }

    pub fn n_sites(&self) -> usize {
        self.mu_x.len()
    }

    /// `[[s_xx, s_xy], [s_xy', s_yy]]`, ordered `(X_1..X_n, Y_1..Y_n)`.
    pub fn full_covariance(&self) -> DMatrix<f64> {
        let n = self.n_sites();
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.s_xx);
        m.view_mut((0, n), (n, n)).copy_from(&self.s_xy);
        m.view_mut((n, 0), (n, n)).copy_from(&self.s_xy.transpose());
        m.view_mut((n, n), (n, n)).copy_from(&self.s_yy);
        m
    }

    pub fn min_covariance_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.full_covariance()).eigenvalues.min()
    }

    /// Packs into `[mu_x | mu_y | upper(s_xx) | s_xy row-major | upper(s_yy)]`.
    pub fn pack(&self) -> Vec<f64> {
        let n = self.n_sites();
        let mut v = Vec::with_capacity(packed_len(n));
        v.extend_from_slice(&self.mu_x);
        v.extend_from_slice(&self.mu_y);
        push_upper(&mut v, &self.s_xx);
        for i in 0..n {
            for k in 0..n {
                v.push(self.s_xy[(i, k)]);
            }
        }
        push_upper(&mut v, &self.s_yy);
        v
    }

    pub fn unpack(v: &[f64], n: usize) -> Result<Self> {
        if v.len() != packed_len(n) {
            return Err(invalid(format!(
                "packed state has length {}, expected {}",
                v.len(),
                packed_len(n)
            )));
        }
        let tri = n * (n + 1) / 2;
        let mut s = MomentState::zeros(n);
        s.mu_x.copy_from_slice(&v[..n]);
        s.mu_y.copy_from_slice(&v[n..2 * n]);
        read_upper(&v[2 * n..2 * n + tri], &mut s.s_xx);
        let xy = &v[2 * n + tri..2 * n + tri + n * n];
        for i in 0..n {
            for k in 0..n {
                s.s_xy[(i, k)] = xy[i * n + k];
            }
        }
        read_upper(&v[2 * n + tri + n * n..], &mut s.s_yy);
        Ok(s)
    }

    /// Every moment in a single vector: means, then the three full blocks.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.mu_x.iter().chain(&self.mu_y).copied().collect();
        v.extend(self.s_xx.iter());
        v.extend(self.s_xy.iter());
        v.extend(self.s_yy.iter());
        DVector::from_vec(v)
    }
}

fn push_upper(v: &mut Vec<f64>, m: &DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i..n {
            v.push(m[(i, j)]);
        }
    }
}

fn read_upper(src: &[f64], m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = src[idx];
            m[(j, i)] = src[idx];
            idx += 1;
        }
    }
}

/// Forward-equation output sampled on a time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<MomentState>,
}

impl MomentTrajectory {
    pub fn n_sites(&self) -> usize {
        self.states.first().map_or(0, MomentState::n_sites)
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// `n_s x n_t` mean susceptibles.
    pub fn mu_x(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_sites(), self.n_times(), |s, t| self.states[t].mu_x[s])
    }

    pub fn mu_y(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_sites(), self.n_times(), |s, t| self.states[t].mu_y[s])
    }

    pub fn sigma_xx(&self, t: usize) -> &DMatrix<f64> {
        &self.states[t].s_xx
    }

    /// Smallest eigenvalue of the full joint covariance over the whole path.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        self.states
            .iter()
            .map(MomentState::min_covariance_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Integrates the forward equations from `init` at `theta.t0` and samples at `output_times`.
pub fn integrate_forward(
    theta: &Theta,
    lattice: &Lattice,
    init: &MomentState,
    output_times: &[f64],
    tol: &Tolerances,
) -> Result<MomentTrajectory> {
    theta.validate(lattice)?;
    let n = lattice.n_sites();
    if init.n_sites() != n {
        return Err(invalid("initial state dimension differs from lattice"));
    }
    let weights = theta.infection_weights(lattice);
    let eta = theta.eta;
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        // Layout is fixed by `pack`, so unpacking cannot fail here.
        let state = MomentState::unpack(y, n).expect("packed layout");
        let d = rhs::forward_rhs_weighted(&state, &weights, eta).pack();
        dy.copy_from_slice(&d);
    };
    let (ys, _) = ode::integrate(rhs, theta.t0, &init.pack(), output_times, tol)?;
    let states = ys
        .iter()
        .map(|y| MomentState::unpack(y, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentTrajectory {
        times: output_times.to_vec(),
        states,
    })
}

/// Convenience: deterministic start at the parameter point's source.
pub fn integrate_outbreak(
    theta: &Theta,
    lattice: &Lattice,
    output_times: &[f64],
    tol: &Tolerances,
) -> Result<MomentTrajectory> {
    let init = MomentState::deterministic_start(lattice, theta)?;
    integrate_forward(theta, lattice, &init, output_times, tol)
}

/// Integrates the five-equation single-population closure; states are
/// `(mu_X, mu_Y, sigma_XX, sigma_XY, sigma_YY)`.
pub fn integrate_nonspatial(
    init: [f64; 5],
    beta: f64,
    eta: f64,
    population: f64,
    t0: f64,
    output_times: &[f64],
    tol: &Tolerances,
) -> Result<Vec<[f64; 5]>> {
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        dy.copy_from_slice(&nonspatial_rhs(y[0], y[1], y[2], y[3], y[4], beta, eta, population));
    };
    let (ys, _) = ode::integrate(rhs, t0, &init, output_times, tol)?;
    Ok(ys.into_iter().map(|y| [y[0], y[1], y[2], y[3], y[4]]).collect())
}

/// Outcome of the monotone-susceptibles check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadeoutReport {
    pub pass: bool,
    /// `(site, time index, time)` of the first increase beyond the slack.
    pub first_violation: Option<(usize, usize, f64)>,
}

/// Passes iff mean susceptibles never increase by more than `slack` between
/// consecutive output times at any site. Violations are scanned time-major.
pub fn fadeout_check(traj: &MomentTrajectory, slack: f64) -> FadeoutReport {
    for t in 1..traj.n_times() {
        let (prev, cur) = (&traj.states[t - 1].mu_x, &traj.states[t].mu_x);
        if let Some(s) = (0..prev.len()).find(|&s| cur[s] > prev[s] + slack) {
            return FadeoutReport {
                pass: false,
                first_violation: Some((s, t, traj.times[t])),
            };
        }
    }
    FadeoutReport {
        pass: true,
        first_violation: None,
    }
}

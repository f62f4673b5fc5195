//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use sirmoment_core::emulator::{latin_hypercube, Design, DesignSpec};
use sirmoment_core::inference::ObservedData;
use sirmoment_core::{Lattice, MomentState, Theta};

pub const BETA: f64 = 0.043;
pub const PHI: f64 = 0.025;
pub const ETA: f64 = 0.019;

pub fn grid(side: usize, population: u64) -> Lattice {
    Lattice::grid(side, side, population).expect("valid grid")
}

pub fn theta(lattice: &Lattice, y0: u64) -> Theta {
    let n = lattice.n_sites();
    Theta {
        beta: vec![BETA; n],
        phi: PHI,
        eta: ETA,
        s0: n / 2,
        t0: 0.0,
        y0,
    }
}

/// A mid-epidemic moment state with a dense, well-conditioned covariance.
pub fn moment_state(lattice: &Lattice) -> MomentState {
    let n = lattice.n_sites();
    let mut s = MomentState::zeros(n);
    for i in 0..n {
        let pop = lattice.population(i) as f64;
        s.mu_x[i] = 0.8 * pop;
        s.mu_y[i] = 0.05 * pop;
    }
    let cov = |i: usize, j: usize| {
        if i == j {
            500.0
        } else {
            20.0 / (1.0 + i.abs_diff(j) as f64)
        }
    };
    s.s_xx = DMatrix::from_fn(n, n, cov);
    s.s_yy = DMatrix::from_fn(n, n, cov);
    s.s_xy = DMatrix::from_fn(n, n, |i, j| -0.5 * cov(i, j));
    s
}

pub fn design(k: usize) -> Design {
    let spec = DesignSpec {
        ranges: vec![[0.0215, 0.0645], [0.0125, 0.0375]],
        s0_candidates: vec![7, 11, 12, 13, 17],
        k,
    };
    latin_hypercube(&spec, 1).expect("valid design")
}

/// Latent susceptibles falling linearly and counts equal to the decrements.
pub fn observations(n_s: usize, n_t: usize) -> (ObservedData, DMatrix<f64>, Vec<usize>) {
    let x = DMatrix::from_fn(n_s, n_t + 1, |s, t| 100_000.0 - (50 + s) as f64 * t as f64);
    let counts = DMatrix::from_fn(n_s, n_t, |s, t| (50 + s + t % 7) as u64);
    let times = (1..=n_t).map(|t| t as f64).collect();
    let data = ObservedData::new(counts, times).expect("consistent shapes");
    (data, x, (1..=n_t).collect())
}

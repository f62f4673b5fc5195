//! Right-hand sides of the Gaussian moment-closure forward equations.
//!
//! Write the stacked state as `Z = (X_1..X_n, Y_1..Y_n)`. Infection at site `i`
//! has rate `a_i = X_i * L_i` with `L_i = sum_k w_ik Y_k` (`w_ii = beta_i/N_i`,
//! `w_ik = phi/N_i` for neighbors) and jump `-e_{X_i} + e_{Y_i}`; recovery at
//! `i` has rate `eta Y_i` and jump `-e_{Y_i}`. Under joint normality of `Z`,
//!
//! ```text
//! E[a_i]              = sum_k w_ik (mu_Xi mu_Yk + S[X_i, Y_k])
//! E[(Z_a - mu_a) a_i] = sum_k w_ik (mu_Xi S[a, Y_k] + mu_Yk S[a, X_i])
//! ```
//!
//! and `dS = sum_r (c_r v_r' + v_r c_r' + v_r v_r' E[a_r])` over events `r`
//! with jump `v_r` and `c_r = E[(Z - mu) a_r]`. Written out per entry this is
//! the familiar eight-family listing (means, diagonal and off-diagonal
//! XX/YY/XY covariances); for a single site it reduces to the five-equation
//! non-spatial system.

use nalgebra::DMatrix;

use super::MomentState;
use crate::model::{Lattice, Theta};

/// Time derivative of every moment.
pub fn forward_rhs(state: &MomentState, theta: &Theta, lattice: &Lattice) -> MomentState {
    let weights = theta.infection_weights(lattice);
    forward_rhs_weighted(state, &weights, theta.eta)
}

pub(crate) fn forward_rhs_weighted(state: &MomentState, weights: &[Vec<(usize, f64)>], eta: f64) -> MomentState {
    let n = state.n_sites();
    let full = state.full_covariance();
    let xi = |i: usize| i;
    let yi = |i: usize| n + i;

    // Expected infection rates and mean infection pressure.
    let mut rate = vec![0.0; n];
    let mut pressure = vec![0.0; n];
    for i in 0..n {
        for &(k, w) in &weights[i] {
            rate[i] += w * (state.mu_x[i] * state.mu_y[k] + full[(xi(i), yi(k))]);
            pressure[i] += w * state.mu_y[k];
        }
    }

    // D[a, b] collects c_r(a) v_r(b) over all events; dS = D + D' + jump variances.
    let mut d = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for a in 0..2 * n {
            let mut c = pressure[i] * full[(a, xi(i))];
            let mut spatial = 0.0;
            for &(k, w) in &weights[i] {
                spatial += w * full[(a, yi(k))];
            }
            c += state.mu_x[i] * spatial;
            d[(a, xi(i))] -= c;
            d[(a, yi(i))] += c - eta * full[(a, yi(i))];
        }
    }
    let mut ds = &d + d.transpose();
    for i in 0..n {
        ds[(xi(i), xi(i))] += rate[i];
        ds[(yi(i), yi(i))] += rate[i] + eta * state.mu_y[i];
        ds[(xi(i), yi(i))] -= rate[i];
        ds[(yi(i), xi(i))] -= rate[i];
    }

    MomentState {
        mu_x: rate.iter().map(|r| -r).collect(),
        mu_y: (0..n).map(|i| rate[i] - eta * state.mu_y[i]).collect(),
        s_xx: ds.view((0, 0), (n, n)).into_owned(),
        s_xy: ds.view((0, n), (n, n)).into_owned(),
        s_yy: ds.view((n, n), (n, n)).into_owned(),
    }
}

/// Derivatives of the single-population closure
/// `(mu_X, mu_Y, sigma_XX, sigma_XY, sigma_YY)`.
#[allow(clippy::too_many_arguments)]
pub fn nonspatial_rhs(
    mu_x: f64,
    mu_y: f64,
    s_xx: f64,
    s_xy: f64,
    s_yy: f64,
    beta: f64,
    eta: f64,
    population: f64,
) -> [f64; 5] {
    let b = beta / population;
    let incidence = b * (mu_x * mu_y + s_xy);
    [
        -incidence,
        incidence - eta * mu_y,
        -2.0 * b * (mu_x * s_xy + mu_y * s_xx) + incidence,
        b * (mu_x * s_xy - mu_x * s_yy + mu_y * s_xx - mu_y * s_xy - mu_x * mu_y - s_xy) - eta * s_xy,
        2.0 * b * (mu_x * s_yy + mu_y * s_xy) + incidence - 2.0 * eta * s_yy + eta * mu_y,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_site(mu_x: f64, mu_y: f64, s: [f64; 3]) -> MomentState {
        MomentState {
            mu_x: vec![mu_x],
            mu_y: vec![mu_y],
            s_xx: DMatrix::from_element(1, 1, s[0]),
            s_xy: DMatrix::from_element(1, 1, s[1]),
            s_yy: DMatrix::from_element(1, 1, s[2]),
        }
    }

    fn theta1(beta: f64) -> Theta {
        Theta {
            beta: vec![beta],
            phi: 0.0,
            eta: 0.019,
            s0: 0,
            t0: 0.0,
            y0: 100,
        }
    }

    #[test]
    fn single_site_hand_values() {
        let lattice = Lattice::grid(1, 1, 100_000).unwrap();
        let d = forward_rhs(&single_site(99_900.0, 100.0, [0.0; 3]), &theta1(0.043), &lattice);
        assert!((d.mu_x[0] + 4.2957).abs() < 1e-12);
        assert!((d.mu_y[0] - 2.3957).abs() < 1e-12);
        assert!((d.s_xx[(0, 0)] - 4.2957).abs() < 1e-12);
        assert!((d.s_xy[(0, 0)] + 4.2957).abs() < 1e-12);
        assert!((d.s_yy[(0, 0)] - (4.2957 + 1.9)).abs() < 1e-12);
    }

    #[test]
    fn nonspatial_hand_values() {
        assert_eq!(nonspatial_rhs(0.0, 0.0, 0.0, 0.0, 0.0, 0.043, 0.019, 1e5), [0.0; 5]);

        let d = nonspatial_rhs(99_900.0, 100.0, 0.0, 0.0, 0.0, 0.043, 0.019, 1e5);
        let want = [-4.2957, 2.3957, 4.2957, -4.2957, 4.2957 + 1.9];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        let d = nonspatial_rhs(99_900.0, 100.0, 0.0, -100.0, 0.0, 0.043, 0.019, 1e5);
        // -(0.043 / 1e5) * (99_900 * 100 - 100)
        assert!((d[0] + 4.295_657).abs() < 1e-12);
    }

    #[test]
    fn single_site_matches_nonspatial_system() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let lattice = Lattice::grid(1, 1, 50_000).unwrap();
        for _ in 0..100 {
            let mx = rng.random_range(0.0..50_000.0);
            let my = rng.random_range(0.0..5_000.0);
            let s = [
                rng.random_range(0.0..1e4),
                rng.random_range(-1e4..1e4),
                rng.random_range(0.0..1e4),
            ];
            let beta = rng.random_range(0.01..1.0);
            let mut theta = theta1(beta);
            theta.eta = rng.random_range(0.0..0.5);
            let d = forward_rhs(&single_site(mx, my, s), &theta, &lattice);
            let got = [d.mu_x[0], d.mu_y[0], d.s_xx[(0, 0)], d.s_xy[(0, 0)], d.s_yy[(0, 0)]];
            let want = nonspatial_rhs(mx, my, s[0], s[1], s[2], beta, theta.eta, 50_000.0);
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn infected_mean_balances_susceptible_loss() {
        let lattice = Lattice::grid(2, 3, 800).unwrap();
        let theta = Theta {
            beta: vec![0.4; 6],
            phi: 0.15,
            eta: 0.07,
            s0: 0,
            t0: 0.0,
            y0: 5,
        };
        let mut state = MomentState::zeros(6);
        for i in 0..6 {
            state.mu_x[i] = 700.0 - 10.0 * i as f64;
            state.mu_y[i] = 20.0 + 3.0 * i as f64;
            state.s_xy[(i, (i + 1) % 6)] = -4.0;
        }
        let d = forward_rhs(&state, &theta, &lattice);
        for i in 0..6 {
            let lhs = d.mu_y[i];
            let rhs = -d.mu_x[i] - theta.eta * state.mu_y[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn disease_free_state_is_fixed_point() {
        let lattice = Lattice::grid(3, 3, 1000).unwrap();
        let theta = Theta {
            beta: vec![0.3; 9],
            phi: 0.2,
            eta: 0.1,
            s0: 4,
            t0: 0.0,
            y0: 1,
        };
        let state = MomentState {
            mu_x: vec![1000.0; 9],
            mu_y: vec![0.0; 9],
            s_xx: DMatrix::zeros(9, 9),
            s_xy: DMatrix::zeros(9, 9),
            s_yy: DMatrix::zeros(9, 9),
        };
        let d = forward_rhs(&state, &theta, &lattice);
        assert!(d.to_vector().iter().all(|&v| v == 0.0));
    }
}

//! Spatial lattice, model parameters and the instantaneous event rates of the
//! spatial SIR jump process.
//!
//! Each site `i` carries susceptible and infectious counts `X(i)`, `Y(i)` out
//! of a fixed population `N(i)`. Infection at `i` fires with rate
//!
//! ```text
//! beta(i) X(i) Y(i) / N(i) + (phi / N(i)) * sum_{k in nbr(i)} X(i) Y(k)
//! ```
//!
//! and recovery at `i` fires with rate `eta * Y(i)`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Sites, symmetric adjacency and per-site populations.
///
/// Grid lattices are indexed row-major: site `(r, c)` has index `r * cols + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatticeFile", into = "LatticeFile")]
pub struct Lattice {
    neighbors: Vec<Vec<usize>>,
    populations: Vec<u64>,
}

/// On-disk lattice description: `{"n_s": .., "populations": [..], "edges": [[i, k], ..]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeFile {
    pub n_s: usize,
    pub populations: Vec<u64>,
    pub edges: Vec<[usize; 2]>,
}

impl TryFrom<LatticeFile> for Lattice {
    type Error = Error;

    fn try_from(f: LatticeFile) -> Result<Self> {
        if f.populations.len() != f.n_s {
            return Err(invalid(format!(
                "lattice has n_s = {} but {} populations",
                f.n_s,
                f.populations.len()
            )));
        }
        Lattice::from_edges(f.populations, &f.edges)
    }
}

impl From<Lattice> for LatticeFile {
    fn from(l: Lattice) -> Self {
        LatticeFile {
            n_s: l.n_sites(),
            edges: l.edges(),
            populations: l.populations,
        }
    }
}

impl Lattice {
    /// Builds a lattice from undirected edges. Duplicate edges are merged.
    pub fn from_edges(populations: Vec<u64>, edges: &[[usize; 2]]) -> Result<Self> {
        let n = populations.len();
        if n == 0 {
            return Err(invalid("lattice must contain at least one site"));
        }
        if let Some(i) = populations.iter().position(|&p| p == 0) {
            return Err(invalid(format!("site {i} has zero population")));
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &[a, b] in edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) references a missing site")));
            }
            if a == b {
                return Err(invalid(format!("self-loop at site {a}")));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Ok(Lattice {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            populations,
        })
    }

    /// Rectangular grid with rook adjacency and a uniform population.
    pub fn grid(rows: usize, cols: usize, population_per_site: u64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("grid dimensions must be at least 1"));
        }
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push([i, i + 1]);
                }
                if r + 1 < rows {
                    edges.push([i, i + cols]);
                }
            }
        }
        Lattice::from_edges(vec![population_per_site; rows * cols], &edges)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn n_sites(&self) -> usize {
        self.populations.len()
    }

    pub fn neighbors(&self, site: usize) -> &[usize] {
        &self.neighbors[site]
    }

    pub fn population(&self, site: usize) -> u64 {
        self.populations[site]
    }

    pub fn populations(&self) -> &[u64] {
        &self.populations
    }

    /// Each undirected edge once, as `[low, high]`.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&k| k > i).map(move |&k| [i, k]))
            .collect()
    }
}

/// Reads a covariate file with header `site,x`. Every site must appear exactly once.
pub fn load_covariate_csv(path: impl AsRef<Path>, n_sites: usize) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut values = vec![None; n_sites];
    for row in reader.deserialize::<(usize, f64)>() {
        let (site, x) = row.map_err(|e| Error::Parse(e.to_string()))?;
        if site >= n_sites {
            return Err(invalid(format!("covariate for missing site {site}")));
        }
        if values[site].replace(x).is_some() {
            return Err(invalid(format!("duplicate covariate for site {site}")));
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| invalid(format!("no covariate for site {i}"))))
        .collect()
}

/// Log-linear infection-rate field `beta(s) = exp(beta0 + beta1 * x(s))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaField {
    pub beta0: f64,
    pub beta1: f64,
    pub x: Vec<f64>,
}

impl BetaField {
    pub fn beta(&self) -> Result<Vec<f64>> {
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite covariate at site {i}")));
        }
        let beta: Vec<f64> = self.x.iter().map(|&x| (self.beta0 + self.beta1 * x).exp()).collect();
        if beta.iter().any(|b| !b.is_finite() || *b <= 0.0) {
            return Err(invalid("beta field overflows or underflows"));
        }
        Ok(beta)
    }
}

/// One parameter point of the jump process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Local infection rate per site.
    pub beta: Vec<f64>,
    /// Spatial infection rate shared by every edge.
    pub phi: f64,
    /// Recovery rate.
    pub eta: f64,
    /// Outbreak source site.
    pub s0: usize,
    /// Outbreak start time.
    pub t0: f64,
    /// Infectious count placed at the source at `t0`.
    pub y0: u64,
}

impl Theta {
    pub fn validate(&self, lattice: &Lattice) -> Result<()> {
        let n = lattice.n_sites();
        if self.beta.len() != n {
            return Err(invalid(format!("beta has {} entries for {n} sites", self.beta.len())));
        }
        if self.beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(invalid("beta must be finite and nonnegative"));
        }
        if !(self.phi.is_finite() && self.phi >= 0.0) {
            return Err(invalid("phi must be finite and nonnegative"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(invalid("eta must be finite and nonnegative"));
        }
        if self.s0 >= n {
            return Err(invalid(format!("source site {} out of range", self.s0)));
        }
        if self.y0 < 1 || self.y0 > lattice.population(self.s0) {
            return Err(invalid("y0 must lie in [1, N(s0)]"));
        }
        Ok(())
    }

    /// Infection rate weights: `w[i][i] = beta(i)/N(i)`, `w[i][k] = phi/N(i)` for neighbors.
    pub(crate) fn infection_weights(&self, lattice: &Lattice) -> Vec<Vec<(usize, f64)>> {
        (0..lattice.n_sites())
            .map(|i| {
                let n = lattice.population(i) as f64;
                std::iter::once((i, self.beta[i] / n))
                    .chain(lattice.neighbors(i).iter().map(|&k| (k, self.phi / n)))
                    .collect()
            })
            .collect()
    }
}

/// How a continuous design coordinate vector maps onto `Theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaModel {
    /// Coordinates `(beta, phi)`; beta shared by all sites.
    Constant,
    /// Coordinates `(beta0, beta1, phi)` with `beta(s) = exp(beta0 + beta1 x(s))`.
    Covariate { x: Vec<f64> },
}

/// The fixed (non-estimated) part of the model together with the coordinate map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameterization {
    pub beta_model: BetaModel,
    pub eta: f64,
    pub t0: f64,
    pub y0: u64,
}

impl Parameterization {
    pub fn dim(&self) -> usize {
        match self.beta_model {
            BetaModel::Constant => 2,
            BetaModel::Covariate { .. } => 3,
        }
    }

    pub fn coord_names(&self) -> Vec<&'static str> {
        match self.beta_model {
            BetaModel::Constant => vec!["beta", "phi"],
            BetaModel::Covariate { .. } => vec!["beta0", "beta1", "phi"],
        }
    }

    pub fn theta(&self, coords: &[f64], s0: usize, n_sites: usize) -> Result<Theta> {
        if coords.len() != self.dim() {
            return Err(invalid(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                coords.len()
            )));
        }
        let beta = match &self.beta_model {
            BetaModel::Constant => vec![coords[0]; n_sites],
            BetaModel::Covariate { x } => {
                if x.len() != n_sites {
                    return Err(invalid("covariate length differs from site count"));
                }
                BetaField {
                    beta0: coords[0],
                    beta1: coords[1],
                    x: x.clone(),
                }
                .beta()?
            }
        };
        Ok(Theta {
            beta,
            phi: coords[self.dim() - 1],
            eta: self.eta,
            s0,
            t0: self.t0,
            y0: self.y0,
        })
    }
}

/// Integer susceptible and infectious counts at time `t`; recovered is implied.
#[derive(Clone, Debug, PartialEq)]
pub struct EpidemicState {
    pub x: Vec<u64>,
    pub y: Vec<u64>,
    pub t: f64,
}

impl EpidemicState {
    pub fn new(x: Vec<u64>, y: Vec<u64>, t: f64) -> Self {
        EpidemicState { x, y, t }
    }

    /// Fully susceptible lattice except for `theta.y0` infectious at the source.
    pub fn outbreak(lattice: &Lattice, theta: &Theta) -> Result<Self> {
        theta.validate(lattice)?;
        let mut x = lattice.populations().to_vec();
        let mut y = vec![0; lattice.n_sites()];
        x[theta.s0] -= theta.y0;
        y[theta.s0] = theta.y0;
        Ok(EpidemicState::new(x, y, theta.t0))
    }

    pub fn validate(&self, lattice: &Lattice) -> Result<()> {
        let n = lattice.n_sites();
        if self.x.len() != n || self.y.len() != n {
            return Err(invalid("state dimension differs from lattice"));
        }
        for i in 0..n {
            if self.x[i] + self.y[i] > lattice.population(i) {
                return Err(invalid(format!("X + Y exceeds N at site {i}")));
            }
        }
        Ok(())
    }
}

/// Infection rate at a single site.
pub fn infection_rate(state: &EpidemicState, theta: &Theta, lattice: &Lattice, i: usize) -> f64 {
    let n = lattice.population(i) as f64;
    let x = state.x[i] as f64;
    let spatial: u64 = lattice.neighbors(i).iter().map(|&k| state.y[k]).sum();
    theta.beta[i] * x * state.y[i] as f64 / n + theta.phi / n * x * spatial as f64
}

/// All `2 n_s` event rates: infections at sites `0..n_s` followed by recoveries.
pub fn event_rates(state: &EpidemicState, theta: &Theta, lattice: &Lattice) -> Vec<f64> {
    let n = lattice.n_sites();
    let mut rates = Vec::with_capacity(2 * n);
    rates.extend((0..n).map(|i| infection_rate(state, theta, lattice, i)));
    rates.extend(state.y.iter().map(|&y| theta.eta * y as f64));
    rates
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta(n: usize, beta: f64, phi: f64, eta: f64) -> Theta {
        Theta {
            beta: vec![beta; n],
            phi,
            eta,
            s0: 0,
            t0: 0.0,
            y0: 1,
        }
    }

    #[test]
    fn single_site_grid_has_no_neighbors() {
        let l = Lattice::grid(1, 1, 100).unwrap();
        assert_eq!(l.n_sites(), 1);
        assert!(l.neighbors(0).is_empty());
    }

    #[test]
    fn five_by_five_center_neighbors() {
        let l = Lattice::grid(5, 5, 100_000).unwrap();
        assert_eq!(l.n_sites(), 25);
        assert_eq!(l.neighbors(12), &[7, 11, 13, 17]);
        let degrees: Vec<usize> = (0..25).map(|i| l.neighbors(i).len()).collect();
        assert_eq!(degrees.iter().filter(|&&d| d == 2).count(), 4);
        assert_eq!(degrees.iter().filter(|&&d| d == 3).count(), 12);
        assert_eq!(degrees.iter().filter(|&&d| d == 4).count(), 9);
    }

    #[test]
    fn two_by_two_all_degree_two() {
        let l = Lattice::grid(2, 2, 10).unwrap();
        assert!((0..4).all(|i| l.neighbors(i).len() == 2));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(Lattice::grid(0, 3, 10), Err(Error::InvalidArgument(_))));
        assert!(matches!(Lattice::grid(3, 0, 10), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(Lattice::from_edges(vec![1, 1], &[[0, 0]]).is_err());
        assert!(Lattice::from_edges(vec![1, 1], &[[0, 2]]).is_err());
        assert!(Lattice::from_edges(vec![0, 1], &[[0, 1]]).is_err());
    }

    #[test]
    fn lattice_json_round_trip() {
        let l = Lattice::grid(3, 4, 50).unwrap();
        let text = serde_json::to_string(&l).unwrap();
        assert!(text.contains("\"edges\""));
        let back: Lattice = serde_json::from_str(&text).unwrap();
        assert_eq!(l, back);
    }

    #[test]
    fn lattice_json_rejects_population_mismatch() {
        let text = r#"{"n_s": 3, "populations": [1, 2], "edges": []}"#;
        assert!(serde_json::from_str::<Lattice>(text).is_err());
    }

    #[test]
    fn beta_field_values() {
        let f = BetaField {
            beta0: 0.0,
            beta1: 0.0,
            x: vec![-3.0, 0.5, 7.0],
        };
        assert_eq!(f.beta().unwrap(), vec![1.0; 3]);

        let f = BetaField {
            beta0: -2.83,
            beta1: 0.0,
            x: vec![1.0, -1.0],
        };
        for b in f.beta().unwrap() {
            assert!((b - 0.0590).abs() < 5e-5);
            assert_eq!(b, (-2.83f64).exp());
        }

        let f = BetaField {
            beta0: -2.83,
            beta1: 0.1,
            x: vec![1.0],
        };
        assert!((f.beta().unwrap()[0] - (-2.73f64).exp()).abs() < 1e-15);

        let f = BetaField {
            beta0: 0.0,
            beta1: 1.0,
            x: vec![f64::NAN],
        };
        assert!(matches!(f.beta(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn absorbing_state_has_zero_rates() {
        let l = Lattice::grid(3, 3, 100).unwrap();
        let s = EpidemicState::new(vec![90; 9], vec![0; 9], 0.0);
        let rates = event_rates(&s, &theta(9, 0.3, 0.2, 0.1), &l);
        assert_eq!(rates.len(), 18);
        assert!(rates.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn single_site_rates() {
        let l = Lattice::grid(1, 1, 100_000).unwrap();
        let s = EpidemicState::new(vec![99_900], vec![100], 0.0);
        let r = event_rates(&s, &theta(1, 0.043, 0.025, 0.019), &l);
        assert!((r[0] - 4.2957).abs() < 1e-12);
        assert!((r[1] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn neighbor_term() {
        let l = Lattice::from_edges(vec![100, 100], &[[0, 1]]).unwrap();
        let s = EpidemicState::new(vec![100, 100], vec![0, 10], 0.0);
        let eta = 0.019;
        let r = event_rates(&s, &theta(2, 0.0, 0.5, eta), &l);
        assert!((r[0] - 5.0).abs() < 1e-12);
        assert_eq!(r[1], 0.0);
        assert_eq!(r[2], 0.0);
        assert!((r[3] - 10.0 * eta).abs() < 1e-15);
    }

    #[test]
    fn parameterization_maps_coordinates() {
        let p = Parameterization {
            beta_model: BetaModel::Constant,
            eta: 0.019,
            t0: 0.0,
            y0: 100,
        };
        let th = p.theta(&[0.043, 0.025], 12, 25).unwrap();
        assert_eq!(th.beta, vec![0.043; 25]);
        assert_eq!(th.phi, 0.025);
        assert!(p.theta(&[0.1], 0, 25).is_err());

        let p = Parameterization {
            beta_model: BetaModel::Covariate { x: vec![1.0, -1.0] },
            eta: 0.04,
            t0: 0.0,
            y0: 10,
        };
        let th = p.theta(&[-2.83, 0.1, 0.045], 1, 2).unwrap();
        assert!((th.beta[0] - (-2.73f64).exp()).abs() < 1e-15);
        assert_eq!(th.phi, 0.045);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn state_strategy() -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
            proptest::collection::vec((0u64..=60, 0u64..=40), 9).prop_map(|v| v.into_iter().unzip())
        }

        proptest! {
            #[test]
            fn rates_nonnegative_and_local((x, y) in state_strategy(),
                                           beta in 0.0f64..2.0, phi in 0.0f64..2.0, eta in 0.01f64..1.0,
                                           site in 0usize..9) {
                let l = Lattice::grid(3, 3, 100).unwrap();
                let th = theta(9, beta, phi, eta);
                let s = EpidemicState::new(x.clone(), y.clone(), 0.0);
                prop_assert!(event_rates(&s, &th, &l).iter().all(|&r| r >= 0.0));

                let mut y0 = y.clone();
                y0[site] = 0;
                for &k in l.neighbors(site) { y0[k] = 0; }
                let s0 = EpidemicState::new(x.clone(), y0, 0.0);
                prop_assert_eq!(infection_rate(&s0, &th, &l, site), 0.0);
            }

            #[test]
            fn infection_rate_affine_in_phi((x, y) in state_strategy(), phi in 0.0f64..3.0, site in 0usize..9) {
                let l = Lattice::grid(3, 3, 100).unwrap();
                let s = EpidemicState::new(x.clone(), y.clone(), 0.0);
                let at = |p: f64| infection_rate(&s, &theta(9, 0.2, p, 0.1), &l, site);
                let slope: f64 = l.neighbors(site).iter()
                    .map(|&k| x[site] as f64 * y[k] as f64 / 100.0).sum();
                prop_assert!((at(phi) - at(0.0) - slope * phi).abs() < 1e-9 * (1.0 + at(phi)));
            }
        }
    }
}

//! The full MCMC sweep: a DRAM block on the design coordinates and the first
//! row of spline coefficients, one-at-a-time updates for the remaining
//! coefficients, a random-walk step on the overdispersion and an optional
//! source-site move.

use std::cell::Cell;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{discrepancy, gelman_rubin, quantile};
use super::dram::{rw_metropolis, Dram, Outcome};
use super::{log_std_normal, Fields, Model};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub coords: Vec<f64>,
    pub s0: usize,
    pub nu: f64,
    /// `L_s x b` spline coefficients; zero rows for the mean-only model.
    pub a: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    pub s0_update: bool,
    /// With `false` the chain targets the prior alone.
    pub likelihood: bool,
    /// Stage-2 covariance as a multiple of the stage-1 covariance.
    pub scale2: f64,
    pub adapt_interval: usize,
    /// Defaults to the centre of the design box.
    pub init_coords: Option<Vec<f64>>,
    /// Required unless the design has a single source candidate.
    pub init_s0: Option<usize>,
    pub init_nu: f64,
    /// Initial block step per coordinate, as a fraction of its design range.
    pub coord_step: f64,
    pub block_alpha_step: f64,
    pub alpha_step: f64,
    pub nu_step: f64,
    /// Tune the univariate step sizes towards 44% acceptance during burn-in.
    pub tune_steps: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iters: 20_000,
            burn_in: 5_000,
            thin: 10,
            seed: 0,
            chains: 1,
            s0_update: false,
            likelihood: true,
            scale2: 0.25,
            adapt_interval: 100,
            init_coords: None,
            init_s0: None,
            init_nu: 3.0,
            coord_step: 0.01,
            block_alpha_step: 0.05,
            alpha_step: 0.5,
            nu_step: 0.2,
            tune_steps: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        if self.burn_in > self.iters {
            return Err(invalid(format!(
                "burn-in {} exceeds {} iterations",
                self.burn_in, self.iters
            )));
        }
        if self.chains == 0 {
            return Err(invalid("need at least one chain"));
        }
        if self.adapt_interval == 0 {
            return Err(invalid("adapt interval must be positive"));
        }
        let steps = [
            self.scale2,
            self.coord_step,
            self.block_alpha_step,
            self.alpha_step,
            self.nu_step,
        ];
        if steps.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid("proposal scales must be positive"));
        }
        if !(self.init_nu > 1.0) {
            return Err(invalid("initial nu must exceed 1"));
        }
        Ok(())
    }
}

/// Acceptance fractions; `None` where no such proposal was made.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub block: Option<f64>,
    pub block_stage2: Option<f64>,
    pub alpha: Option<f64>,
    pub nu: Option<f64>,
    pub s0: Option<f64>,
}

fn rate(acc: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| acc as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub iterations: Vec<usize>,
    /// One row per kept iteration, columns as in `names`.
    pub samples: Vec<Vec<f64>>,
    pub acceptance: Acceptance,
    /// Block proposals that left the design box.
    pub out_of_design: usize,
    /// Posterior mean of the reporting means, `n_s x n_obs`.
    pub lambda_mean: Option<DMatrix<f64>>,
    /// Posterior mean of the latent susceptibles at the observation times.
    pub latent_mean: Option<DMatrix<f64>>,
    pub discrepancy: Option<Vec<Option<f64>>>,
    pub final_state: ChainState,
    pub proposal_cov: DMatrix<f64>,
}

impl FitResult {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.samples.iter().map(|r| r[j]).collect())
    }

    /// Posterior means and central 95% intervals.
    pub fn summary(&self) -> Vec<ParamSummary> {
        self.names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let v: Vec<f64> = self.samples.iter().map(|r| r[j]).collect();
                ParamSummary {
                    name: name.clone(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    lower: quantile(&v, 0.025),
                    upper: quantile(&v, 0.975),
                }
            })
            .collect()
    }
}

/// Column names in sample order: coordinates, `nu`, `s0` when it moves, then
/// `a_l_j` row-major.
pub fn param_names(model: &Model, cfg: &McmcConfig) -> Vec<String> {
    let mut names = model.coord_names.clone();
    names.push("nu".into());
    if cfg.s0_update {
        names.push("s0".into());
    }
    for l in 0..model.rank() {
        for j in 0..model.n_basis() {
            names.push(format!("a_{l}_{j}"));
        }
    }
    names
}

fn row(state: &ChainState, cfg: &McmcConfig) -> Vec<f64> {
    let mut r = state.coords.clone();
    r.push(state.nu);
    if cfg.s0_update {
        r.push(state.s0 as f64);
    }
    for l in 0..state.a.nrows() {
        r.extend(state.a.row(l).iter());
    }
    r
}

/// Per-element step sizes tuned in batches during burn-in.
struct Tuner {
    steps: Vec<f64>,
    acc: Vec<usize>,
    batch: usize,
}

impl Tuner {
    const BATCH: usize = 50;

    fn new(n: usize, step: f64) -> Self {
        Tuner {
            steps: vec![step; n],
            acc: vec![0; n],
            batch: 0,
        }
    }

    fn end_iteration(&mut self, it: usize) {
        if it % Self::BATCH != 0 {
            return;
        }
        self.batch += 1;
        let d = (1.0 / (self.batch as f64).sqrt()).min(0.1);
        for (s, a) in self.steps.iter_mut().zip(self.acc.iter_mut()) {
            *s *= if *a as f64 / Self::BATCH as f64 > 0.44 {
                d.exp()
            } else {
                (-d).exp()
            };
            *a = 0;
        }
    }
}

fn loglik(f: &Option<Fields>) -> f64 {
    f.as_ref().map_or(0.0, Fields::loglik)
}

/// One chain on RNG stream `stream` of `cfg.seed`.
pub fn run_mcmc(model: &Model, cfg: &McmcConfig, stream: u64) -> Result<FitResult> {
    cfg.validate()?;
    let design = &model.mean.design;
    let (d, l_s, b) = (model.dim(), model.rank(), model.n_basis());
    let coords = match &cfg.init_coords {
        Some(c) => c.clone(),
        None => design.ranges.iter().map(|r| 0.5 * (r[0] + r[1])).collect(),
    };
    let s0 = match (cfg.init_s0, design.s0_candidates.as_slice()) {
        (Some(s), _) => s,
        (None, [only]) => *only,
        (None, _) => {
            return Err(invalid(
                "init_s0 is required when the design has several source candidates",
            ))
        }
    };
    if !model.in_design(&coords, s0) {
        return Err(invalid(format!(
            "initial state {coords:?} at source {s0} lies outside the design"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);

    let mut state = ChainState {
        coords,
        s0,
        nu: cfg.init_nu,
        a: DMatrix::zeros(l_s, b),
    };
    let mut fields = if cfg.likelihood {
        Some(model.fields(&state.coords, s0, &state.a, state.nu)?)
    } else {
        None
    };
    let mut logpost = loglik(&fields) + model.log_prior(&state);
    if !logpost.is_finite() {
        return Err(Error::Numerical("initial state has zero posterior density".into()));
    }

    let nb = if l_s > 0 { b } else { 0 };
    let mut init_cov = DMatrix::zeros(d + nb, d + nb);
    for (i, r) in design.ranges.iter().enumerate() {
        init_cov[(i, i)] = (cfg.coord_step * (r[1] - r[0])).powi(2);
    }
    for i in d..d + nb {
        init_cov[(i, i)] = cfg.block_alpha_step.powi(2);
    }
    let mut dram = Dram::new(init_cov, cfg.scale2)?;
    dram.adapt_interval = cfg.adapt_interval;
    let outside = Cell::new(0usize);

    let n_alpha = l_s.saturating_sub(1) * b;
    let mut alpha_tuner = Tuner::new(n_alpha, cfg.alpha_step);
    let mut nu_tuner = Tuner::new(1, cfg.nu_step);
    let (mut alpha_acc, mut alpha_n, mut nu_acc, mut nu_n, mut s0_acc, mut s0_n) = (0, 0, 0, 0, 0, 0);

    let names = param_names(model, cfg);
    let mut iterations = Vec::new();
    let mut samples = Vec::new();
    let n_obs = model.data.times.len();
    let mut lambda_sum = DMatrix::zeros(model.n_sites(), n_obs);
    let mut latent_sum = DMatrix::zeros(model.n_sites(), n_obs);
    let mut record = |it: usize, state: &ChainState, fields: &Option<Fields>| {
        iterations.push(it);
        samples.push(row(state, cfg));
        if let Some(f) = fields {
            lambda_sum += model.lambda(&f.x);
            for (k, &j) in model.time_indices().iter().enumerate() {
                let mut c = latent_sum.column_mut(k);
                c += f.x.column(j);
            }
        }
    };
    if cfg.burn_in == 0 {
        record(0, &state, &fields);
    }

    for it in 1..=cfg.iters {
        // block: coordinates and the first coefficient row
        let mut v = state.coords.clone();
        if nb > 0 {
            v.extend(state.a.row(0).iter());
        }
        let target = |y: &[f64]| -> (f64, Option<Fields>) {
            let (c, arow) = y.split_at(d);
            if !model.in_design(c, state.s0) {
                outside.set(outside.get() + 1);
                return (f64::NEG_INFINITY, None);
            }
            let mut cand = ChainState {
                coords: c.to_vec(),
                s0: state.s0,
                nu: state.nu,
                a: state.a.clone(),
            };
            for (j, &x) in arow.iter().enumerate() {
                cand.a[(0, j)] = x;
            }
            let lp = model.log_prior(&cand);
            if !cfg.likelihood {
                return (lp, None);
            }
            match model.fields(c, cand.s0, &cand.a, cand.nu) {
                Ok(f) => (lp + f.loglik(), Some(f)),
                Err(_) => (f64::NEG_INFINITY, None),
            }
        };
        let (outcome, payload) = dram.step(&mut v, &mut logpost, target, &mut rng);
        if outcome != Outcome::Rejected {
            state.coords.copy_from_slice(&v[..d]);
            for j in 0..nb {
                state.a[(0, j)] = v[d + j];
            }
            if cfg.likelihood {
                fields = payload.flatten();
            }
        }
        if it <= cfg.burn_in {
            dram.observe(&v);
        } else {
            dram.freeze();
        }

        // remaining coefficients, one at a time
        for l in 1..l_s {
            for j in 0..b {
                let e = (l - 1) * b + j;
                let old = state.a[(l, j)];
                let new = old + alpha_tuner.steps[e] * rng.sample::<f64, _>(StandardNormal);
                let mut delta = log_std_normal(new) - log_std_normal(old);
                let update = fields.as_ref().map(|f| model.alpha_delta(f, l, j, new - old, state.nu));
                if let Some((diff, _, _)) = &update {
                    delta += diff;
                }
                alpha_n += 1;
                if rng.random::<f64>().ln() < delta.min(0.0) {
                    state.a[(l, j)] = new;
                    logpost += delta;
                    if let (Some(f), Some((_, x, cells))) = (fields.as_mut(), update) {
                        f.x = x;
                        for (s, k, v) in cells {
                            f.cells[(s, k)] = v;
                        }
                    }
                    alpha_acc += 1;
                    alpha_tuner.acc[e] += 1;
                }
            }
        }

        // overdispersion
        let nu_part = |nu: f64| -> (f64, Option<DMatrix<f64>>) {
            if !(nu > 1.0) {
                return (f64::NEG_INFINITY, None);
            }
            let prior = model.config.prior.log_nu(nu);
            match &fields {
                Some(f) => {
                    let cells = model.cells(&f.x, nu);
                    (prior + cells.sum(), Some(cells))
                }
                None => (prior, None),
            }
        };
        let current = model.config.prior.log_nu(state.nu) + loglik(&fields);
        nu_n += 1;
        if let Some((nu, lp, cells)) = rw_metropolis(state.nu, current, nu_tuner.steps[0], nu_part, &mut rng) {
            logpost += lp - current;
            state.nu = nu;
            if let (Some(f), Some(c)) = (fields.as_mut(), cells) {
                f.cells = c;
            }
            nu_acc += 1;
            nu_tuner.acc[0] += 1;
        }

        // source site
        let cands = model.s0_candidates();
        if cfg.s0_update && cands.len() > 1 {
            let others: Vec<usize> = cands.iter().copied().filter(|&s| s != state.s0).collect();
            let s_new = others[rng.random_range(0..others.len())];
            s0_n += 1;
            let proposal = if cfg.likelihood {
                model
                    .fields(&state.coords, s_new, &state.a, state.nu)
                    .ok()
                    .map(|f| (f.loglik(), Some(f)))
            } else {
                Some((0.0, None))
            };
            if let Some((ll_new, f_new)) = proposal {
                // uniform prior and symmetric proposal: only the likelihood moves
                let delta = ll_new - loglik(&fields);
                if rng.random::<f64>().ln() < delta.min(0.0) {
                    state.s0 = s_new;
                    logpost += delta;
                    fields = f_new;
                    s0_acc += 1;
                }
            }
        }

        if it <= cfg.burn_in && cfg.tune_steps {
            alpha_tuner.end_iteration(it);
            nu_tuner.end_iteration(it);
        }
        if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
            record(it, &state, &fields);
        }
    }

    let kept = iterations.len();
    let (lambda_mean, latent_mean, disc) = if cfg.likelihood && kept > 0 {
        let lm = lambda_sum / kept as f64;
        let y = model.data.counts.map(|v| v as f64);
        let disc = discrepancy(&y, &lm)?;
        (Some(lm), Some(latent_sum / kept as f64), Some(disc))
    } else {
        (None, None, None)
    };
    let st = dram.stats;
    Ok(FitResult {
        names,
        iterations,
        samples,
        acceptance: Acceptance {
            block: rate(st.stage1 + st.stage2, st.proposals),
            block_stage2: rate(st.stage2, st.proposals),
            alpha: rate(alpha_acc, alpha_n),
            nu: rate(nu_acc, nu_n),
            s0: rate(s0_acc, s0_n),
        },
        out_of_design: outside.get(),
        lambda_mean,
        latent_mean,
        discrepancy: disc,
        final_state: state,
        proposal_cov: dram.covariance().clone(),
    })
}

/// `cfg.chains` independent chains, chain `c` on RNG stream `c`.
pub fn run_chains(model: &Model, cfg: &McmcConfig) -> Result<Vec<FitResult>> {
    (0..cfg.chains as u64)
        .into_par_iter()
        .map(|c| run_mcmc(model, cfg, c))
        .collect()
}

/// Gelman–Rubin statistic per parameter across chains.
pub fn rhat(fits: &[FitResult]) -> Result<Vec<(String, f64)>> {
    let Some(first) = fits.first() else {
        return Err(Error::UndefinedStatistic("no chains".into()));
    };
    first
        .names
        .iter()
        .map(|n| {
            let cols: Vec<Vec<f64>> = fits.iter().map(|f| f.column(n).unwrap_or_default()).collect();
            Ok((n.clone(), gelman_rubin(&cols)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulator::{build_emulators, latin_hypercube, BuildConfig, ClosureRunner, DesignSpec, KrigeConfig};
    use crate::emulator::{CovEmulator, MeanEmulator};
    use crate::inference::diagnostics::{ks_critical_1pct, ks_statistic};
    use crate::inference::{ModelConfig, ObservedData};
    use crate::model::{BetaModel, Lattice, Parameterization};
    use crate::ode::Tolerances;
    use crate::ssa::{gillespie_run, sample_observations};
    use crate::{EpidemicState, Theta};
    use statrs::distribution::{ContinuousCDF, Normal};
    use std::sync::OnceLock;

    struct Toy {
        mean: MeanEmulator,
        cov: CovEmulator,
        data: ObservedData,
    }

    // 2x2 lattice, a small design around beta=0.3, phi=0.05
    fn toy() -> &'static Toy {
        static T: OnceLock<Toy> = OnceLock::new();
        T.get_or_init(|| {
            let lattice = Lattice::grid(2, 2, 2000).unwrap();
            let param = Parameterization {
                beta_model: BetaModel::Constant,
                eta: 0.1,
                t0: 0.0,
                y0: 20,
            };
            let times: Vec<f64> = (4..=30).map(f64::from).collect();
            let runner = ClosureRunner {
                lattice: lattice.clone(),
                param,
                times: times.clone(),
                tol: Tolerances::default(),
            };
            let design = latin_hypercube(
                &DesignSpec {
                    ranges: vec![[0.2, 0.4], [0.02, 0.08]],
                    s0_candidates: vec![0, 3],
                    k: 60,
                },
                1,
            )
            .unwrap();
            let cfg = BuildConfig {
                js: 4,
                jt: 8,
                ls: 4,
                lt: 8,
                mean_krige: KrigeConfig::new(0.5, 12),
                cov_krige: KrigeConfig::new(0.5, 12),
                fadeout_slack: 1e-2,
            };
            let (mean, cov, _) = build_emulators(&design, &runner, &cfg).unwrap();
            let theta = Theta {
                beta: vec![0.3; 4],
                phi: 0.05,
                eta: 0.1,
                s0: 0,
                t0: 0.0,
                y0: 20,
            };
            let init = EpidemicState::outbreak(&lattice, &theta).unwrap();
            let traj = gillespie_run(&theta, &lattice, &init, 30.0, &times, 5).unwrap();
            let obs = sample_observations(&traj, 1.0, 3.2, 6).unwrap();
            Toy {
                mean,
                cov,
                data: ObservedData::from(&obs),
            }
        })
    }

    fn model(cfg: ModelConfig) -> Model<'static> {
        let t = toy();
        Model::new(&t.mean, &t.cov, t.data.clone(), cfg).unwrap()
    }

    fn quick(iters: usize) -> McmcConfig {
        McmcConfig {
            iters,
            burn_in: iters / 2,
            thin: 1,
            seed: 3,
            init_s0: Some(0),
            ..McmcConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keep_initial_state() {
        let m = model(ModelConfig {
            n_basis: 5,
            ..ModelConfig::default()
        });
        let fit = run_mcmc(
            &m,
            &McmcConfig {
                iters: 0,
                burn_in: 0,
                ..quick(0)
            },
            0,
        )
        .unwrap();
        assert_eq!(fit.iterations, vec![0]);
        assert!((fit.samples[0][0] - 0.3).abs() < 1e-12 && (fit.samples[0][1] - 0.05).abs() < 1e-12);
        assert_eq!(fit.samples[0][2], 3.0);
        assert_eq!(fit.names.len(), 3 + 4 * 5);
        assert!(fit.acceptance.block.is_none());
    }

    #[test]
    fn deterministic_given_seed() {
        let m = model(ModelConfig {
            n_basis: 5,
            ..ModelConfig::default()
        });
        let a = run_mcmc(&m, &quick(60), 0).unwrap();
        let b = run_mcmc(&m, &quick(60), 0).unwrap();
        assert_eq!(a, b);
        let c = run_mcmc(&m, &quick(60), 1).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn cached_likelihood_matches_recomputation() {
        let m = model(ModelConfig {
            n_basis: 5,
            ..ModelConfig::default()
        });
        let fit = run_mcmc(&m, &quick(40), 0).unwrap();
        let s = &fit.final_state;
        let fresh = m.fields(&s.coords, s.s0, &s.a, s.nu).unwrap();
        let ll = crate::inference::nb_loglik(&m.data, m.time_indices(), &fresh.x, 1.0, s.nu).unwrap();
        assert!((fresh.loglik() - ll).abs() < 1e-8 * ll.abs());
        let acc = fit.acceptance.alpha.unwrap();
        assert!((0.0..=1.0).contains(&acc) && acc > 0.0);
        assert!(fit.discrepancy.unwrap().iter().all(|d| d.is_some()));
    }

    #[test]
    fn mean_only_has_no_coefficients() {
        let m = model(ModelConfig {
            mean_only: true,
            ..ModelConfig::default()
        });
        let fit = run_mcmc(&m, &quick(30), 0).unwrap();
        assert_eq!(fit.names, vec!["theta0", "theta1", "nu"]);
        assert!(fit.acceptance.alpha.is_none());
        let s = &fit.final_state;
        let f = m.fields(&s.coords, s.s0, &s.a, s.nu).unwrap();
        assert_eq!(f.x, f.mu);
    }

    #[test]
    fn rejects_initial_state_outside_design() {
        let m = model(ModelConfig::default());
        let cfg = McmcConfig {
            init_coords: Some(vec![0.5, 0.05]),
            ..quick(10)
        };
        assert!(matches!(run_mcmc(&m, &cfg, 0), Err(Error::InvalidArgument(_))));
        let cfg = McmcConfig {
            init_s0: Some(1),
            ..quick(10)
        };
        assert!(run_mcmc(&m, &cfg, 0).is_err());
        assert!(run_mcmc(
            &m,
            &McmcConfig {
                burn_in: 20,
                ..quick(10)
            },
            0
        )
        .is_err());
        assert!(run_mcmc(
            &m,
            &McmcConfig {
                init_s0: None,
                ..quick(10)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn source_moves_between_candidates() {
        let m = model(ModelConfig {
            mean_only: true,
            ..ModelConfig::default()
        });
        let cfg = McmcConfig {
            s0_update: true,
            likelihood: false,
            ..quick(400)
        };
        let fit = run_mcmc(&m, &cfg, 0).unwrap();
        let s0 = fit.column("s0").unwrap();
        let frac = s0.iter().filter(|&&v| v == 3.0).count() as f64 / s0.len() as f64;
        assert!((frac - 0.5).abs() < 0.15, "{frac}");
        assert_eq!(fit.acceptance.s0, Some(1.0));
    }

    #[test]
    fn prior_recovery_without_likelihood() {
        let m = model(ModelConfig {
            n_basis: 4,
            ..ModelConfig::default()
        });
        let cfg = McmcConfig {
            iters: 60_000,
            burn_in: 2_000,
            thin: 25,
            likelihood: false,
            seed: 21,
            ..quick(0)
        };
        let fit = run_mcmc(&m, &cfg, 0).unwrap();
        let n = fit.samples.len();
        let crit = ks_critical_1pct(n);
        for (name, r) in ["theta0", "theta1"].iter().zip(&m.mean.design.ranges) {
            let v = fit.column(name).unwrap();
            let d = ks_statistic(&v, |x| ((x - r[0]) / (r[1] - r[0])).clamp(0.0, 1.0));
            assert!(d < crit, "{name}: {d} vs {crit}");
        }
        let nu = fit.column("nu").unwrap();
        let d = ks_statistic(&nu, |x| m.config.prior.nu_cdf(x));
        assert!(d < crit, "nu: {d}");
        let z = Normal::new(0.0, 1.0).unwrap();
        for name in ["a_0_1", "a_2_0"] {
            let v = fit.column(name).unwrap();
            let d = ks_statistic(&v, |x| z.cdf(x));
            assert!(d < crit, "{name}: {d}");
        }
        assert!(fit.out_of_design > 0);
    }

    #[test]
    fn chains_run_on_distinct_streams() {
        let m = model(ModelConfig {
            mean_only: true,
            ..ModelConfig::default()
        });
        let fits = run_chains(
            &m,
            &McmcConfig {
                chains: 3,
                ..quick(200)
            },
        )
        .unwrap();
        assert_eq!(fits.len(), 3);
        assert_ne!(fits[0].samples, fits[1].samples);
        let r = rhat(&fits).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|(_, v)| v.is_finite()));
    }
}

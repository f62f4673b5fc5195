//! Low-rank emulators of the closure mean `mu_X(theta)` and covariance
//! `Sigma_XX(t, theta)`, built by two streaming passes over a design and
//! interpolated by nearest-neighbor ordinary kriging.
//!
//! Mean: `mu_X ~ gamma m(theta) delta'`. Covariance: `Sigma_XX(t) ~ Phi(t) Phi(t)'`
//! with `Phi(t) = Gamma C(t)`, where `C(t)` is the (lower) Cholesky factor of
//! `Gamma' Sigma_XX(t) Gamma` expanded in a temporal basis `Delta`.

pub mod artifact;
pub mod design;
pub mod krige;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closure::{fadeout_check, integrate_outbreak, MomentTrajectory};
use crate::error::{invalid, Error, Result};
use crate::model::{Lattice, Parameterization};
use crate::ode::Tolerances;
use crate::tensor::{variance_explained, DenseTensor, GramAccumulator, NormStats};

pub use design::{latin_hypercube, Design, DesignPoint, DesignSpec};
pub use krige::{krige_scalar, kriging_weights, matern, KrigeConfig, KrigeWeights};

/// Produces forward-equation output at a design point on a fixed time grid.
pub trait ForwardRunner: Sync {
    fn run(&self, point: &DesignPoint) -> Result<MomentTrajectory>;
}

impl<F> ForwardRunner for F
where
    F: Fn(&DesignPoint) -> Result<MomentTrajectory> + Sync,
{
    fn run(&self, point: &DesignPoint) -> Result<MomentTrajectory> {
        self(point)
    }
}

/// Integrates the closure from the deterministic outbreak start.
#[derive(Clone, Debug)]
pub struct ClosureRunner {
    pub lattice: Lattice,
    pub param: Parameterization,
    pub times: Vec<f64>,
    pub tol: Tolerances,
}

impl ForwardRunner for ClosureRunner {
    fn run(&self, point: &DesignPoint) -> Result<MomentTrajectory> {
        let theta = self.param.theta(&point.coords, point.s0, self.lattice.n_sites())?;
        integrate_outbreak(&theta, &self.lattice, &self.times, &self.tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    pub js: usize,
    pub jt: usize,
    pub ls: usize,
    pub lt: usize,
    pub mean_krige: KrigeConfig,
    pub cov_krige: KrigeConfig,
    /// Allowed increase of mean susceptibles between grid points.
    #[serde(default = "default_slack")]
    pub fadeout_slack: f64,
}

fn default_slack() -> f64 {
    1e-2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedPoint {
    pub index: usize,
    pub point: DesignPoint,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterEvent {
    /// Index into the kept design.
    pub point: usize,
    pub time_index: usize,
    pub jitter: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub excluded: Vec<ExcludedPoint>,
    /// `None` when the statistic is undefined (constant output).
    pub mean_variance_explained: Option<f64>,
    pub cov_variance_explained: Option<f64>,
    pub jitter_events: Vec<JitterEvent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanEmulator {
    pub times: Vec<f64>,
    /// `n_s x J_s`.
    pub gamma: DMatrix<f64>,
    /// `n_t x J_t`.
    pub delta: DMatrix<f64>,
    /// `J_s x J_t x K`.
    pub weights: DenseTensor,
    pub design: Design,
    pub krige: KrigeConfig,
}

impl MeanEmulator {
    pub fn n_sites(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.delta.nrows()
    }

    fn slice(&self, k: usize) -> DMatrix<f64> {
        let (js, jt) = (self.gamma.ncols(), self.delta.ncols());
        let n = js * jt;
        DMatrix::from_column_slice(js, jt, &self.weights.data()[k * n..(k + 1) * n])
    }

    /// `gamma m_k delta'` for stored design point `k`.
    pub fn reconstruct(&self, k: usize) -> DMatrix<f64> {
        &self.gamma * self.slice(k) * self.delta.transpose()
    }

    pub fn predict_with(&self, w: &KrigeWeights) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.gamma.ncols(), self.delta.ncols());
        for (&k, &wk) in w.indices.iter().zip(&w.weights) {
            m += self.slice(k) * wk;
        }
        &self.gamma * m * self.delta.transpose()
    }

    pub fn predict(&self, target: &DesignPoint) -> Result<DMatrix<f64>> {
        Ok(self.predict_with(&kriging_weights(&self.design, target, &self.krige)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovEmulator {
    pub times: Vec<f64>,
    /// `n_s x L_s`.
    pub gamma: DMatrix<f64>,
    /// `n_t x L_t`.
    pub delta: DMatrix<f64>,
    /// `L_s x L_s x L_t x K`; each `L_s x L_s` slice is lower triangular.
    pub weights: DenseTensor,
    pub design: Design,
    pub krige: KrigeConfig,
}

impl CovEmulator {
    pub fn n_sites(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.delta.nrows()
    }

    pub fn rank(&self) -> usize {
        self.gamma.ncols()
    }

    fn factors_from(&self, slab: &[f64]) -> Vec<DMatrix<f64>> {
        let ls = self.gamma.ncols();
        let lt = self.delta.ncols();
        (0..self.n_times())
            .map(|t| {
                let mut c = DMatrix::zeros(ls, ls);
                for l in 0..lt {
                    let d = self.delta[(t, l)];
                    if d != 0.0 {
                        c += DMatrix::from_column_slice(ls, ls, &slab[l * ls * ls..(l + 1) * ls * ls]) * d;
                    }
                }
                &self.gamma * c
            })
            .collect()
    }

    fn slab(&self, k: usize) -> &[f64] {
        let n = self.gamma.ncols().pow(2) * self.delta.ncols();
        &self.weights.data()[k * n..(k + 1) * n]
    }

    /// `Phi(t)` for stored design point `k`.
    pub fn reconstruct_factors(&self, k: usize) -> Vec<DMatrix<f64>> {
        self.factors_from(self.slab(k))
    }

    /// Kriging the whole slab equals kriging its lower triangle alone, because
    /// the upper entries are identically zero at every design point.
    pub fn factors_with(&self, w: &KrigeWeights) -> Vec<DMatrix<f64>> {
        let mut slab = vec![0.0; self.slab(0).len()];
        for (&k, &wk) in w.indices.iter().zip(&w.weights) {
            for (s, v) in slab.iter_mut().zip(self.slab(k)) {
                *s += wk * v;
            }
        }
        self.factors_from(&slab)
    }

    pub fn predict_factors(&self, target: &DesignPoint) -> Result<Vec<DMatrix<f64>>> {
        Ok(self.factors_with(&kriging_weights(&self.design, target, &self.krige)?))
    }
}

pub fn emulate_mean(em: &MeanEmulator, target: &DesignPoint) -> Result<DMatrix<f64>> {
    em.predict(target)
}

pub fn emulate_cov_factor(em: &CovEmulator, target: &DesignPoint) -> Result<Vec<DMatrix<f64>>> {
    em.predict_factors(target)
}

/// Lower Cholesky factor, adding `1e-10 * trace / L` to the diagonal and
/// growing it by a decade up to three times when the plain factorization fails.
fn cholesky_jittered(z: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    if z.iter().all(|&v| v == 0.0) {
        return Some((z.clone(), 0.0));
    }
    if let Some(c) = z.clone().cholesky() {
        return Some((c.unpack(), 0.0));
    }
    let n = z.nrows();
    let base = 1e-10 * z.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    (0..4).find_map(|d| {
        let jitter = base * 10f64.powi(d);
        (z + DMatrix::identity(n, n) * jitter)
            .cholesky()
            .map(|c| (c.unpack(), jitter))
    })
}

const CHUNK: usize = 8;

#[derive(Clone)]
struct FirstPass {
    bs: GramAccumulator,
    bt: GramAccumulator,
    as_: GramAccumulator,
    mean_stats: NormStats,
    cov_stats: NormStats,
    excluded: Vec<(usize, String)>,
}

impl FirstPass {
    fn new(n_s: usize, n_t: usize) -> Self {
        FirstPass {
            bs: GramAccumulator::new(n_s),
            bt: GramAccumulator::new(n_t),
            as_: GramAccumulator::new(n_s),
            mean_stats: NormStats::default(),
            cov_stats: NormStats::default(),
            excluded: Vec::new(),
        }
    }

    fn merge(mut self, o: FirstPass) -> Self {
        self.bs = self.bs.merge(o.bs);
        self.bt = self.bt.merge(o.bt);
        self.as_ = self.as_.merge(o.as_);
        self.mean_stats = self.mean_stats.merge(o.mean_stats);
        self.cov_stats = self.cov_stats.merge(o.cov_stats);
        self.excluded.extend(o.excluded);
        self
    }
}

fn check_shape(traj: &MomentTrajectory, n_s: usize, n_t: usize) -> Result<()> {
    if traj.n_sites() != n_s || traj.n_times() != n_t {
        return Err(Error::ShapeMismatch(format!(
            "runner returned {}x{} output, expected {n_s}x{n_t}",
            traj.n_sites(),
            traj.n_times()
        )));
    }
    Ok(())
}

/// Runs a point, turning integration failures and fadeout into exclusions.
fn run_checked(
    runner: &dyn ForwardRunner,
    point: &DesignPoint,
    slack: f64,
) -> Result<std::result::Result<MomentTrajectory, String>> {
    match runner.run(point) {
        Ok(traj) => {
            let report = fadeout_check(&traj, slack);
            match report.first_violation {
                None => Ok(Ok(traj)),
                Some((s, _, t)) => Ok(Err(format!("mean susceptibles increase at site {s}, time {t}"))),
            }
        }
        Err(e @ (Error::IntegrationFailure { .. } | Error::Numerical(_))) => Ok(Err(e.to_string())),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy)]
struct Want {
    mean: bool,
    cov: bool,
}

struct Built {
    mean: Option<MeanEmulator>,
    cov: Option<CovEmulator>,
    report: BuildReport,
}

fn build(design: &Design, runner: &dyn ForwardRunner, cfg: &BuildConfig, want: Want) -> Result<Built> {
    if design.len() < 2 {
        return Err(invalid("a design needs at least two points"));
    }
    if want.mean {
        cfg.mean_krige.validate()?;
    }
    if want.cov {
        cfg.cov_krige.validate()?;
    }
    if let Some(p) = design.points.iter().find(|p| !design.contains(p)) {
        return Err(invalid(format!("design point {:?} lies outside the design box", p)));
    }

    // Grid shape comes from the first point that runs.
    let probe = runner.run(&design.points[0]);
    let (n_s, n_t) = match &probe {
        Ok(t) => (t.n_sites(), t.n_times()),
        Err(_) => {
            let t = design
                .points
                .iter()
                .find_map(|p| runner.run(p).ok())
                .ok_or_else(|| Error::Numerical("no design point could be integrated".into()))?;
            (t.n_sites(), t.n_times())
        }
    };
    if want.mean && (cfg.js == 0 || cfg.js > n_s || cfg.jt == 0 || cfg.jt > n_t) {
        return Err(invalid(format!(
            "mean ranks ({}, {}) must lie in [1, ({n_s}, {n_t})]",
            cfg.js, cfg.jt
        )));
    }
    if want.cov && (cfg.ls == 0 || cfg.ls > n_s || cfg.lt == 0 || cfg.lt > n_t) {
        return Err(invalid(format!(
            "covariance ranks ({}, {}) must lie in [1, ({n_s}, {n_t})]",
            cfg.ls, cfg.lt
        )));
    }

    // Pass 1: spatial and temporal Grams plus norm statistics.
    let idx: Vec<usize> = (0..design.len()).collect();
    let partials = idx
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<FirstPass> {
            let mut acc = FirstPass::new(n_s, n_t);
            for &k in chunk {
                let traj = match run_checked(runner, &design.points[k], cfg.fadeout_slack)? {
                    Ok(t) => t,
                    Err(reason) => {
                        acc.excluded.push((k, reason));
                        continue;
                    }
                };
                check_shape(&traj, n_s, n_t)?;
                if want.mean {
                    let mu = traj.mu_x();
                    acc.bs.accumulate(&mu)?;
                    acc.bt.accumulate(&mu.transpose())?;
                    acc.mean_stats.push_all(mu.iter());
                }
                if want.cov {
                    for st in &traj.states {
                        acc.as_.accumulate(&st.s_xx)?;
                        acc.cov_stats.push_all(st.s_xx.iter());
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let first = partials.into_iter().fold(FirstPass::new(n_s, n_t), FirstPass::merge);

    let excluded_idx: Vec<usize> = first.excluded.iter().map(|e| e.0).collect();
    let kept: Vec<usize> = idx.iter().copied().filter(|k| !excluded_idx.contains(k)).collect();
    if kept.len() < 2 {
        return Err(Error::Numerical(format!(
            "only {} of {} design points survived fadeout and integration checks",
            kept.len(),
            design.len()
        )));
    }
    let kept_design = design.subset(&kept);
    let mut report = BuildReport {
        excluded: first
            .excluded
            .iter()
            .map(|(k, r)| ExcludedPoint {
                index: *k,
                point: design.points[*k].clone(),
                reason: r.clone(),
            })
            .collect(),
        ..Default::default()
    };
    let times = match probe {
        Ok(t) => t.times,
        Err(_) => runner.run(&kept_design.points[0])?.times,
    };

    let gamma = want.mean.then(|| first.bs.top_eigenvectors(cfg.js)).transpose()?;
    let delta = want.mean.then(|| first.bt.top_eigenvectors(cfg.jt)).transpose()?;
    let cgamma = want.cov.then(|| first.as_.top_eigenvectors(cfg.ls)).transpose()?;
    let ls = cfg.ls;

    // Pass 2: mean weights, and per-time Cholesky factors of the projected covariance.
    struct Second {
        m: Option<DMatrix<f64>>,
        mean_resid: f64,
        c: Vec<DMatrix<f64>>,
        z: Vec<DMatrix<f64>>,
        jitter: Vec<(usize, f64)>,
    }
    let second = kept
        .par_iter()
        .map(|&k| -> Result<Second> {
            let traj = runner.run(&design.points[k])?;
            check_shape(&traj, n_s, n_t)?;
            let mut out = Second {
                m: None,
                mean_resid: 0.0,
                c: Vec::new(),
                z: Vec::new(),
                jitter: Vec::new(),
            };
            if let (Some(g), Some(d)) = (&gamma, &delta) {
                let mu = traj.mu_x();
                let m = g.transpose() * &mu * d;
                out.mean_resid = (&mu - g * &m * d.transpose()).norm_squared();
                out.m = Some(m);
            }
            if let Some(g) = &cgamma {
                for (t, st) in traj.states.iter().enumerate() {
                    let z = g.transpose() * &st.s_xx * g;
                    let z = (&z + z.transpose()) * 0.5;
                    let (c, jitter) = cholesky_jittered(&z).ok_or_else(|| {
                        Error::Numerical(format!(
                            "Cholesky failed for design point {k} at time index {t} after jitter"
                        ))
                    })?;
                    if jitter > 0.0 {
                        out.jitter.push((t, jitter));
                    }
                    out.c.push(c);
                    out.z.push(z);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let kn = kept.len();

    let mean = if let (Some(gamma), Some(delta)) = (gamma, delta) {
        let (js, jt) = (cfg.js, cfg.jt);
        let mut data = Vec::with_capacity(js * jt * kn);
        let mut resid = 0.0;
        for s in &second {
            data.extend(s.m.as_ref().expect("mean weights").iter());
            resid += s.mean_resid;
        }
        report.mean_variance_explained = variance_explained(&first.mean_stats, resid).ok();
        Some(MeanEmulator {
            times: times.clone(),
            gamma,
            delta,
            weights: DenseTensor::new(vec![js, jt, kn], data)?,
            design: kept_design.clone(),
            krige: cfg.mean_krige.clone(),
        })
    } else {
        None
    };

    let cov = if let Some(cgamma) = cgamma {
        let lt = cfg.lt;
        let mut at = GramAccumulator::new(n_t);
        for s in &second {
            let st = DMatrix::from_fn(n_t, ls * ls, |t, e| s.c[t][e]);
            at.accumulate(&st)?;
        }
        let delta = at.top_eigenvectors(lt)?;
        let mut data = Vec::with_capacity(ls * ls * lt * kn);
        let mut cross = 0.0;
        for (kk, s) in second.iter().enumerate() {
            let mut slab = vec![DMatrix::<f64>::zeros(ls, ls); lt];
            for (t, c) in s.c.iter().enumerate() {
                for (l, m) in slab.iter_mut().enumerate() {
                    *m += c * delta[(t, l)];
                }
            }
            for m in &slab {
                data.extend(m.iter());
            }
            for (t, z) in s.z.iter().enumerate() {
                let mut ch = DMatrix::<f64>::zeros(ls, ls);
                for (l, m) in slab.iter().enumerate() {
                    ch += m * delta[(t, l)];
                }
                let shat = &ch * ch.transpose();
                cross += 2.0 * z.dot(&shat) - shat.norm_squared();
            }
            report.jitter_events.extend(s.jitter.iter().map(|&(t, j)| JitterEvent {
                point: kk,
                time_index: t,
                jitter: j,
            }));
        }
        let resid = first.cov_stats.sum_sq - cross;
        report.cov_variance_explained = variance_explained(&first.cov_stats, resid).ok();
        Some(CovEmulator {
            times,
            gamma: cgamma,
            delta,
            weights: DenseTensor::new(vec![ls, ls, lt, kn], data)?,
            design: kept_design,
            krige: cfg.cov_krige.clone(),
        })
    } else {
        None
    };

    Ok(Built { mean, cov, report })
}

/// Both emulators from one shared first pass.
pub fn build_emulators(
    design: &Design,
    runner: &dyn ForwardRunner,
    cfg: &BuildConfig,
) -> Result<(MeanEmulator, CovEmulator, BuildReport)> {
    let b = build(design, runner, cfg, Want { mean: true, cov: true })?;
    Ok((b.mean.expect("mean built"), b.cov.expect("cov built"), b.report))
}

pub fn build_mean_emulator(
    design: &Design,
    runner: &dyn ForwardRunner,
    js: usize,
    jt: usize,
    krige: KrigeConfig,
) -> Result<(MeanEmulator, BuildReport)> {
    let cfg = BuildConfig {
        js,
        jt,
        ls: 1,
        lt: 1,
        mean_krige: krige.clone(),
        cov_krige: krige,
        fadeout_slack: default_slack(),
    };
    let b = build(design, runner, &cfg, Want { mean: true, cov: false })?;
    Ok((b.mean.expect("mean built"), b.report))
}

pub fn build_cov_emulator(
    design: &Design,
    runner: &dyn ForwardRunner,
    ls: usize,
    lt: usize,
    krige: KrigeConfig,
) -> Result<(CovEmulator, BuildReport)> {
    let cfg = BuildConfig {
        js: 1,
        jt: 1,
        ls,
        lt,
        mean_krige: krige.clone(),
        cov_krige: krige,
        fadeout_slack: default_slack(),
    };
    let b = build(design, runner, &cfg, Want { mean: false, cov: true })?;
    Ok((b.cov.expect("cov built"), b.report))
}

/// Held-out prediction errors of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvFold {
    pub fold: usize,
    pub held_out: usize,
    /// `sqrt(sum ||mu_hat - mu||^2 / sum ||mu||^2)` over the held-out points.
    pub mean_rel_error: f64,
    pub mean_max_rel_error: f64,
    /// Same pooled ratio for `Sigma_XX` over every time.
    pub cov_rel_error: f64,
    pub cov_max_rel_error: f64,
}

/// `folds`-fold cross-validation: each fold rebuilds both emulators without
/// its points and predicts them. Fold membership is a seeded shuffle.
pub fn cross_validate(
    design: &Design,
    runner: &dyn ForwardRunner,
    cfg: &BuildConfig,
    folds: usize,
    seed: u64,
) -> Result<Vec<CvFold>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if folds < 2 || folds > design.len() {
        return Err(invalid(format!(
            "cannot split {} points into {folds} folds",
            design.len()
        )));
    }
    let mut order: Vec<usize> = (0..design.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let test: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
        let train: Vec<usize> = order.iter().copied().filter(|k| !test.contains(k)).collect();
        let (mean, cov, _) = build_emulators(&design.subset(&train), runner, cfg)?;
        let results = test
            .par_iter()
            .map(|&k| -> Result<Option<(f64, f64, f64, f64)>> {
                let p = &design.points[k];
                let traj = match run_checked(runner, p, cfg.fadeout_slack)? {
                    Ok(t) => t,
                    Err(_) => return Ok(None),
                };
                let mu = traj.mu_x();
                let mu_hat = mean.predict(p)?;
                let phi = cov.predict_factors(p)?;
                let (mut ce, mut cn) = (0.0, 0.0);
                for (st, f) in traj.states.iter().zip(&phi) {
                    ce += (f * f.transpose() - &st.s_xx).norm_squared();
                    cn += st.s_xx.norm_squared();
                }
                Ok(Some(((&mu_hat - &mu).norm_squared(), mu.norm_squared(), ce, cn)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut me, mut mn, mut ce, mut cn) = (0.0, 0.0, 0.0, 0.0);
        let (mut mmax, mut cmax) = (0.0f64, 0.0f64);
        let mut held = 0;
        for (a, b, c, d) in results.into_iter().flatten() {
            me += a;
            mn += b;
            ce += c;
            cn += d;
            mmax = mmax.max((a / b).sqrt());
            if d > 0.0 {
                cmax = cmax.max((c / d).sqrt());
            }
            held += 1;
        }
        out.push(CvFold {
            fold: f,
            held_out: held,
            mean_rel_error: (me / mn).sqrt(),
            mean_max_rel_error: mmax,
            cov_rel_error: if cn > 0.0 { (ce / cn).sqrt() } else { 0.0 },
            cov_max_rel_error: cmax,
        });
    }
    Ok(out)
}

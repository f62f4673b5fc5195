use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sirmoment_core::closure::{fadeout_check, integrate_outbreak, FadeoutReport};
use sirmoment_core::emulator::artifact::{load_artifact, save_artifact, EmulatorArtifact};
use sirmoment_core::emulator::{
    build_emulators, cross_validate, latin_hypercube, ClosureRunner, CvFold, Design, DesignPoint,
};
use sirmoment_core::inference::{
    discrepancy, quantile, rhat, run_chains, site_discrepancy, Acceptance, FitResult, Model, ObservedData,
};
use sirmoment_core::ssa::{gillespie_run, read_long_csv, sample_observations, SimulationMetadata};
use sirmoment_core::EpidemicState;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output;

/// Creates the output directory and echoes the resolved config into it.
fn prepare(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    output::json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

pub fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let lattice = cfg.lattice()?;
    let param = cfg.parameterization(&lattice)?;
    let theta = cfg.theta(&param, &lattice)?;
    let times = cfg.times()?;
    let sim = cfg.simulation.clone().unwrap_or(crate::config::SimulationSection {
        seed: 0,
        observation: None,
    });
    let dir = prepare(cfg)?;

    let init = EpidemicState::outbreak(&lattice, &theta)?;
    let t_end = times.last().copied().unwrap_or(theta.t0);
    let traj = gillespie_run(&theta, &lattice, &init, t_end, &times, sim.seed)?;
    output::site_time(&dir.join("susceptible.csv"), &traj.times, &traj.x)?;
    output::site_time(&dir.join("infectious.csv"), &traj.times, &traj.y)?;

    let mut meta = SimulationMetadata {
        theta,
        seed: sim.seed,
        times,
        observation_seed: None,
        p: None,
        nu: None,
    };
    if let Some(o) = &sim.observation {
        let seed = o.seed.unwrap_or(sim.seed.wrapping_add(1));
        let obs = sample_observations(&traj, o.p, o.nu, seed)?;
        output::site_time(&dir.join("observations.csv"), &obs.times, &obs.counts)?;
        meta.observation_seed = Some(seed);
        meta.p = Some(o.p);
        meta.nu = Some(o.nu);
        say!(
            "observations: {} sites x {} times, {} cases",
            obs.counts.nrows(),
            obs.counts.ncols(),
            obs.counts.sum()
        );
    }
    output::json(&dir.join("metadata.json"), &meta)?;
    say!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct MomentsReport {
    fadeout: FadeoutReport,
    fadeout_slack: f64,
    min_covariance_eigenvalue: f64,
}

pub fn moments(cfg: &RunConfig) -> CliResult<()> {
    let lattice = cfg.lattice()?;
    let param = cfg.parameterization(&lattice)?;
    let theta = cfg.theta(&param, &lattice)?;
    let times = cfg.times()?;
    let dir = prepare(cfg)?;

    let traj = integrate_outbreak(&theta, &lattice, &times, &cfg.tolerances)?;
    output::site_time(&dir.join("mu_x.csv"), &times, &traj.mu_x())?;
    output::site_time(&dir.join("mu_y.csv"), &times, &traj.mu_y())?;
    let block = |f: fn(&sirmoment_core::MomentState) -> &DMatrix<f64>| -> Vec<DMatrix<f64>> {
        traj.states.iter().map(|s| f(s).clone()).collect()
    };
    output::site_pair_time(&dir.join("sigma_xx.csv"), &times, &block(|s| &s.s_xx), true)?;
    output::site_pair_time(&dir.join("sigma_xy.csv"), &times, &block(|s| &s.s_xy), false)?;
    output::site_pair_time(&dir.join("sigma_yy.csv"), &times, &block(|s| &s.s_yy), true)?;

    let slack = cfg.emulator.as_ref().map_or(1e-2, |e| e.fadeout_slack);
    let report = MomentsReport {
        fadeout: fadeout_check(&traj, slack),
        fadeout_slack: slack,
        min_covariance_eigenvalue: traj.min_covariance_eigenvalue(),
    };
    output::json(&dir.join("fadeout.json"), &report)?;
    match report.fadeout.first_violation {
        None => say!("fadeout check: pass"),
        Some((s, _, t)) => say!("fadeout check: fail (mean susceptibles increase at site {s}, time {t})"),
    }
    Ok(())
}

fn coord_names(art_or_dim: Option<&sirmoment_core::Parameterization>, dim: usize) -> Vec<String> {
    match art_or_dim {
        Some(p) if p.dim() == dim => p.coord_names().into_iter().map(String::from).collect(),
        _ => (0..dim).map(|i| format!("theta{i}")).collect(),
    }
}

fn write_design(path: &Path, design: &Design, names: &[String]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(output::create(path)?);
    let mut header = vec!["index".to_string(), "s0".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (k, p) in design.points.iter().enumerate() {
        let mut rec = vec![k.to_string(), p.s0.to_string()];
        rec.extend(p.coords.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn design(cfg: &RunConfig) -> CliResult<()> {
    let section = cfg.design()?;
    let design = latin_hypercube(&section.spec(), section.seed)?;
    let param = match (&cfg.lattice, &cfg.model) {
        (Some(_), Some(_)) => Some(cfg.parameterization(&cfg.lattice()?)?),
        _ => None,
    };
    if let Some(p) = &param {
        if p.dim() != design.dim() {
            return Err(CliError::Config(format!(
                "design has {} ranges, model has {} coordinates",
                design.dim(),
                p.dim()
            )));
        }
    }
    let dir = prepare(cfg)?;
    write_design(
        &dir.join("design.csv"),
        &design,
        &coord_names(param.as_ref(), design.dim()),
    )?;
    say!(
        "design: {} points over {} source candidates",
        design.len(),
        design.s0_candidates.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct BuildSummary<'a> {
    design_points: usize,
    kept_points: usize,
    mean_variance_explained: Option<f64>,
    cov_variance_explained: Option<f64>,
    excluded: &'a [sirmoment_core::emulator::ExcludedPoint],
    jitter_events: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_validation: Option<&'a [CvFold]>,
}

pub fn build_emulator(cfg: &mut RunConfig) -> CliResult<()> {
    let lattice = cfg.lattice()?;
    let param = cfg.parameterization(&lattice)?;
    let times = cfg.times()?;
    let section = cfg.design()?.clone();
    if section.ranges.len() != param.dim() {
        return Err(CliError::Config(format!(
            "design has {} ranges, model has {} coordinates",
            section.ranges.len(),
            param.dim()
        )));
    }
    cfg.emulator
        .as_mut()
        .ok_or_else(|| CliError::Config("config has no `emulator` section".into()))?
        .resolve(param.dim());
    let em = cfg.emulator()?.clone();
    let build = em.build_config(param.dim());
    let dir = prepare(cfg)?;

    let design = latin_hypercube(&section.spec(), section.seed)?;
    let names = coord_names(Some(&param), design.dim());
    write_design(&dir.join("design.csv"), &design, &names)?;
    let runner = ClosureRunner {
        lattice,
        param: param.clone(),
        times,
        tol: cfg.tolerances,
    };
    let (mean, cov, report) = build_emulators(&design, &runner, &build)?;
    let kept = mean.design.len();
    let folds = match em.cv_folds {
        Some(f) => Some(cross_validate(&design, &runner, &build, f, em.cv_seed)?),
        None => None,
    };
    let artifact = EmulatorArtifact {
        mean,
        cov,
        report,
        parameterization: Some(param),
    };
    save_artifact(&artifact, dir.join("emulator.mcem"))?;

    let r = &artifact.report;
    output::json(
        &dir.join("build_report.json"),
        &BuildSummary {
            design_points: design.len(),
            kept_points: kept,
            mean_variance_explained: r.mean_variance_explained,
            cov_variance_explained: r.cov_variance_explained,
            excluded: &r.excluded,
            jitter_events: r.jitter_events.len(),
            cross_validation: folds.as_deref(),
        },
    )?;
    let pct = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{:.4}%", 100.0 * v));
    say!("kept {kept} of {} design points", design.len());
    say!(
        "variance explained: mean {}, covariance {}",
        pct(r.mean_variance_explained),
        pct(r.cov_variance_explained)
    );
    if let Some(folds) = &folds {
        let mut w = csv::Writer::from_writer(output::create(&dir.join("cv.csv"))?);
        for f in folds {
            w.serialize(f)?;
            say!(
                "fold {}: mean rel error {:.3}%, covariance rel error {:.3}%",
                f.fold,
                100.0 * f.mean_rel_error,
                100.0 * f.cov_rel_error
            );
        }
        w.flush()?;
    }
    Ok(())
}

fn artifact_path(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.paths
        .artifact
        .as_deref()
        .ok_or_else(|| CliError::Config("no emulator artifact given (`paths.artifact` or --artifact)".into()))
}

pub fn predict(cfg: &RunConfig) -> CliResult<()> {
    let art = load_artifact(artifact_path(cfg)?)?;
    let t = cfg
        .theta
        .as_ref()
        .ok_or_else(|| CliError::Config("no parameter point (`theta` or --coords/--s0)".into()))?;
    let point = DesignPoint {
        coords: t.coords.clone(),
        s0: t.s0,
    };
    let mu = art.mean.predict(&point)?;
    let phi = art.cov.predict_factors(&point)?;
    let dir = prepare(cfg)?;
    output::site_time(&dir.join("mu_x.csv"), &art.mean.times, &mu)?;
    let sigma: Vec<DMatrix<f64>> = phi.iter().map(|f| f * f.transpose()).collect();
    output::site_pair_time(&dir.join("sigma_xx.csv"), &art.cov.times, &sigma, true)?;
    say!("predicted {} sites x {} times", mu.nrows(), mu.ncols());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ParamRow {
    name: String,
    mean: f64,
    lower: f64,
    upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rhat: Option<f64>,
    /// `estimate (lower, upper)`.
    formatted: String,
}

#[derive(Serialize)]
struct SiteDiscrepancy {
    site: usize,
    discrepancy: Option<f64>,
}

#[derive(Serialize)]
struct FitSummary {
    chains: usize,
    kept_per_chain: usize,
    parameters: Vec<ParamRow>,
    acceptance: Vec<Acceptance>,
    out_of_design: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    discrepancy: Option<Vec<SiteDiscrepancy>>,
}

fn pooled_lambda(fits: &[FitResult]) -> Option<DMatrix<f64>> {
    let mats: Vec<&DMatrix<f64>> = fits.iter().map(|f| f.lambda_mean.as_ref()).collect::<Option<_>>()?;
    let sum = mats.iter().skip(1).fold(mats[0].clone(), |a, m| a + *m);
    Some(sum / mats.len() as f64)
}

pub fn fit(cfg: &RunConfig) -> CliResult<()> {
    let art = load_artifact(artifact_path(cfg)?)?;
    let obs_path = cfg
        .paths
        .observations
        .as_deref()
        .ok_or_else(|| CliError::Config("no observations given (`paths.observations` or --data)".into()))?;
    let (times, values) = read_long_csv(obs_path)?;
    let data = ObservedData::from_real(&values, times)?;
    let names = coord_names(art.parameterization.as_ref(), art.mean.design.dim());
    let model = Model::new(&art.mean, &art.cov, data, cfg.fit.model.clone())?.with_coord_names(names)?;
    let mcmc = &cfg.fit.mcmc;
    let dir = prepare(cfg)?;

    let fits = run_chains(&model, mcmc)?;
    let rhats: BTreeMap<String, f64> = if fits.len() >= 2 {
        rhat(&fits)?.into_iter().collect()
    } else {
        BTreeMap::new()
    };

    let chain_dir = dir.join("chains");
    std::fs::create_dir_all(&chain_dir)?;
    let first = &fits[0];
    let mut parameters = Vec::with_capacity(first.names.len());
    for name in &first.names {
        let mut w = csv::Writer::from_writer(output::create(&chain_dir.join(format!("{name}.csv")))?);
        w.write_record(["chain", "iteration", "value"])?;
        let mut pooled = Vec::new();
        for (c, f) in fits.iter().enumerate() {
            let col = f.column(name).expect("shared parameter names");
            for (it, v) in f.iterations.iter().zip(&col) {
                w.write_record([c.to_string(), it.to_string(), v.to_string()])?;
            }
            pooled.extend(col);
        }
        w.flush()?;
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let (lower, upper) = (quantile(&pooled, 0.025), quantile(&pooled, 0.975));
        parameters.push(ParamRow {
            name: name.clone(),
            mean,
            lower,
            upper,
            rhat: rhats.get(name).copied(),
            formatted: format!("{mean:.6} ({lower:.6}, {upper:.6})"),
        });
    }

    let lambda = pooled_lambda(&fits);
    let mut site_disc = None;
    if let Some(lambda) = &lambda {
        let y = model.data.counts.map(|v| v as f64);
        site_disc = Some(
            discrepancy(&y, lambda)?
                .into_iter()
                .enumerate()
                .map(|(site, discrepancy)| SiteDiscrepancy { site, discrepancy })
                .collect::<Vec<_>>(),
        );
        let mut w = csv::Writer::from_writer(output::create(&dir.join("lambda.csv"))?);
        w.write_record(["site", "time", "observed", "fitted"])?;
        for (t, time) in model.data.times.iter().enumerate() {
            for s in 0..y.nrows() {
                w.write_record([
                    s.to_string(),
                    time.to_string(),
                    y[(s, t)].to_string(),
                    lambda[(s, t)].to_string(),
                ])?;
            }
        }
        w.flush()?;
    }

    for p in parameters.iter().filter(|p| !p.name.starts_with("a_")) {
        let r = p.rhat.map_or(String::new(), |r| format!("  Rhat {r:.3}"));
        say!("{:<8} {}{r}", p.name, p.formatted);
    }
    let summary = FitSummary {
        chains: fits.len(),
        kept_per_chain: first.samples.len(),
        parameters,
        acceptance: fits.iter().map(|f| f.acceptance.clone()).collect(),
        out_of_design: fits.iter().map(|f| f.out_of_design).collect(),
        discrepancy: site_disc,
    };
    output::json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

#[derive(Deserialize)]
struct LambdaRow {
    site: usize,
    #[allow(dead_code)]
    time: f64,
    observed: f64,
    fitted: f64,
}

#[derive(Deserialize)]
struct ChainRow {
    chain: usize,
    iteration: usize,
    value: f64,
}

#[derive(Deserialize)]
struct SummaryNames {
    parameters: Vec<NameOnly>,
}

#[derive(Deserialize)]
struct NameOnly {
    name: String,
}

/// Parameter order from `summary.json` when present, else file-name order.
fn parameter_order(fit_dir: &Path) -> CliResult<Vec<String>> {
    let summary = fit_dir.join("summary.json");
    if summary.exists() {
        let s: SummaryNames = serde_json::from_str(&std::fs::read_to_string(summary)?)?;
        return Ok(s.parameters.into_iter().map(|p| p.name).collect());
    }
    let mut names: Vec<String> = std::fs::read_dir(fit_dir.join("chains"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".csv").map(String::from))
        .collect();
    names.sort();
    Ok(names)
}

pub fn diagnose(cfg: &RunConfig) -> CliResult<()> {
    let fit_dir = cfg
        .paths
        .fit_dir
        .clone()
        .ok_or_else(|| CliError::Config("no fit directory given (`paths.fit_dir` or --fit-dir)".into()))?;
    let lambda_path = fit_dir.join("lambda.csv");
    if !lambda_path.exists() {
        return Err(CliError::Io(format!("{} not found", lambda_path.display())));
    }
    let dir = prepare(cfg)?;

    let mut per_site: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in csv::Reader::from_path(&lambda_path)?.deserialize::<LambdaRow>() {
        let row = row?;
        let e = per_site.entry(row.site).or_default();
        e.0.push(row.observed);
        e.1.push(row.fitted);
    }
    let mut w = csv::Writer::from_writer(output::create(&dir.join("discrepancy.csv"))?);
    w.write_record(["site", "discrepancy"])?;
    for (site, (y, l)) in &per_site {
        let d = site_discrepancy(y, l).ok();
        w.write_record([site.to_string(), d.map_or(String::new(), |d| d.to_string())])?;
        say!(
            "site {site:>3}: {}",
            d.map_or("undefined (no cases)".to_string(), |d| format!("{d:.4}"))
        );
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(output::create(&dir.join("trace.csv"))?);
    w.write_record(["parameter", "chain", "iteration", "value"])?;
    for name in parameter_order(&fit_dir)? {
        let path = fit_dir.join("chains").join(format!("{name}.csv"));
        for row in csv::Reader::from_path(&path)?.deserialize::<ChainRow>() {
            let row = row?;
            w.write_record([
                name.clone(),
                row.chain.to_string(),
                row.iteration.to_string(),
                row.value.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

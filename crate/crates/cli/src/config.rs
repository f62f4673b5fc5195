//! The JSON run configuration. Every section is optional at parse time; each
//! command checks for the sections it needs before doing any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sirmoment_core::emulator::{BuildConfig, DesignSpec, KrigeConfig};
use sirmoment_core::inference::{McmcConfig, ModelConfig};
use sirmoment_core::model::load_covariate_csv;
use sirmoment_core::{BetaModel, Lattice, Parameterization, Theta, Tolerances};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<ThetaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<TimeGrid>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emulator: Option<EmulatorSection>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub paths: Paths,
}

/// `{"grid": {"rows": 5, "cols": 5, "population": 100000}}` or `{"file": "graph.json"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LatticeSource {
    Grid { rows: usize, cols: usize, population: u64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub eta: f64,
    #[serde(default)]
    pub t0: f64,
    pub y0: u64,
    /// Per-site covariate; switches to coordinates `(beta0, beta1, phi)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<Vec<f64>>,
    /// `site,x` CSV, alternative to `covariate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub coords: Vec<f64>,
    pub s0: usize,
}

/// `start, start + step, ..., end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    #[serde(default = "one")]
    pub step: f64,
}

fn one() -> f64 {
    1.0
}

impl TimeGrid {
    pub fn values(&self) -> CliResult<Vec<f64>> {
        let span = self.end - self.start;
        if !(self.step > 0.0 && span >= 0.0 && span.is_finite()) {
            return Err(CliError::Config("times need step > 0 and end >= start".into()));
        }
        let n = (span / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    #[serde(default = "one")]
    pub p: f64,
    pub nu: f64,
    /// Defaults to the simulation seed plus one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub ranges: Vec<[f64; 2]>,
    pub s0_candidates: Vec<usize>,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DesignSection {
    pub fn spec(&self) -> DesignSpec {
        DesignSpec {
            ranges: self.ranges.clone(),
            s0_candidates: self.s0_candidates.clone(),
            k: self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorSection {
    pub js: usize,
    pub jt: usize,
    pub ls: usize,
    pub lt: usize,
    /// Defaults to range `0.25 * sqrt(d)` (a quarter of the scaled box diagonal) and 10 neighbors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_krige: Option<KrigeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_krige: Option<KrigeConfig>,
    #[serde(default = "default_slack")]
    pub fadeout_slack: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_folds: Option<usize>,
    #[serde(default)]
    pub cv_seed: u64,
}

fn default_slack() -> f64 {
    1e-2
}

pub fn default_krige(dim: usize) -> KrigeConfig {
    KrigeConfig::new(0.25 * (dim as f64).sqrt(), 10)
}

impl EmulatorSection {
    pub fn build_config(&self, dim: usize) -> BuildConfig {
        BuildConfig {
            js: self.js,
            jt: self.jt,
            ls: self.ls,
            lt: self.lt,
            mean_krige: self.mean_krige.clone().unwrap_or_else(|| default_krige(dim)),
            cov_krige: self.cov_krige.clone().unwrap_or_else(|| default_krige(dim)),
            fadeout_slack: self.fadeout_slack,
        }
    }

    /// Fills in the kriging defaults so the echoed config is fully resolved.
    pub fn resolve(&mut self, dim: usize) {
        self.mean_krige.get_or_insert_with(|| default_krige(dim));
        self.cov_krige.get_or_insert_with(|| default_krige(dim));
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_dir: Option<PathBuf>,
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("config has no `{section}` section"))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn lattice(&self) -> CliResult<Lattice> {
        match self.lattice.as_ref().ok_or_else(|| missing("lattice"))? {
            LatticeSource::Grid { rows, cols, population } => Ok(Lattice::grid(*rows, *cols, *population)?),
            LatticeSource::File(path) => Ok(Lattice::load_json(path)?),
        }
    }

    pub fn parameterization(&self, lattice: &Lattice) -> CliResult<Parameterization> {
        let m = self.model.as_ref().ok_or_else(|| missing("model"))?;
        let beta_model = match (&m.covariate, &m.covariate_file) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give either `covariate` or `covariate_file`, not both".into(),
                ))
            }
            (Some(x), None) => {
                if x.len() != lattice.n_sites() {
                    return Err(CliError::Config(format!(
                        "covariate has {} values for {} sites",
                        x.len(),
                        lattice.n_sites()
                    )));
                }
                BetaModel::Covariate { x: x.clone() }
            }
            (None, Some(path)) => BetaModel::Covariate {
                x: load_covariate_csv(path, lattice.n_sites())?,
            },
            (None, None) => BetaModel::Constant,
        };
        Ok(Parameterization {
            beta_model,
            eta: m.eta,
            t0: m.t0,
            y0: m.y0,
        })
    }

    pub fn theta(&self, param: &Parameterization, lattice: &Lattice) -> CliResult<Theta> {
        let t = self.theta.as_ref().ok_or_else(|| missing("theta"))?;
        let theta = param.theta(&t.coords, t.s0, lattice.n_sites())?;
        theta.validate(lattice)?;
        Ok(theta)
    }

    pub fn times(&self) -> CliResult<Vec<f64>> {
        self.times.as_ref().ok_or_else(|| missing("times"))?.values()
    }

    pub fn design(&self) -> CliResult<&DesignSection> {
        self.design.as_ref().ok_or_else(|| missing("design"))
    }

    pub fn emulator(&self) -> CliResult<&EmulatorSection> {
        self.emulator.as_ref().ok_or_else(|| missing("emulator"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"lattice": {"grid": {"rows": 1, "cols": 1, "population": 5}}}"#)
                .is_ok()
        );
        assert!(serde_json::from_str::<RunConfig>(r#"{"latice": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"fit": {"mcmc": {"iter": 5}}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(
            r#"{"lattice": {"grid": {"rows": 1, "cols": 1, "population": 5, "x": 1}}}"#
        )
        .is_err());
    }

    #[test]
    fn time_grid_is_inclusive() {
        let g = TimeGrid {
            start: 60.0,
            end: 140.0,
            step: 1.0,
        };
        let v = g.values().unwrap();
        assert_eq!((v.len(), v[0], v[80]), (81, 60.0, 140.0));
        assert_eq!(
            TimeGrid {
                start: 0.0,
                end: 1.0,
                step: 0.1
            }
            .values()
            .unwrap()
            .len(),
            11
        );
        assert!(TimeGrid {
            start: 1.0,
            end: 0.0,
            step: 1.0
        }
        .values()
        .is_err());
    }

    #[test]
    fn empty_config_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn covariate_switches_coordinates() {
        let mut c = RunConfig {
            model: Some(ModelSection {
                eta: 0.1,
                t0: 0.0,
                y0: 1,
                covariate: None,
                covariate_file: None,
            }),
            ..Default::default()
        };
        let l = Lattice::grid(1, 2, 10).unwrap();
        assert_eq!(c.parameterization(&l).unwrap().dim(), 2);
        c.model.as_mut().unwrap().covariate = Some(vec![0.0, 1.0]);
        assert_eq!(c.parameterization(&l).unwrap().dim(), 3);
        c.model.as_mut().unwrap().covariate = Some(vec![0.0]);
        assert!(c.parameterization(&l).is_err());
    }
}

//! Binary emulator artifact.
//!
//! Layout, little-endian throughout: the magic `MCEM`, a `u32` format
//! version, a `u64` byte length and the JSON header, then seven arrays in
//! the order `gamma, delta, m, Gamma, Delta, M, design`. Each array is a
//! `u32` order, that many `u64` dims, then `f64` data first-index-fastest.
//! The design array is `K x (dim + 1)` with the source site in the last column.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BuildReport, CovEmulator, Design, DesignPoint, KrigeConfig, MeanEmulator};
use crate::error::{Error, Result};
use crate::model::Parameterization;
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"MCEM";
pub const VERSION: u32 = 1;

/// Both emulators with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmulatorArtifact {
    pub mean: MeanEmulator,
    pub cov: CovEmulator,
    pub report: BuildReport,
    pub parameterization: Option<Parameterization>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub n_s: usize,
    pub n_t: usize,
    pub k: usize,
    pub js: usize,
    pub jt: usize,
    pub ls: usize,
    pub lt: usize,
    pub mean_krige: KrigeConfig,
    pub cov_krige: KrigeConfig,
    pub ranges: Vec<[f64; 2]>,
    pub s0_candidates: Vec<usize>,
    pub times: Vec<f64>,
    pub report: BuildReport,
    pub parameterization: Option<Parameterization>,
}

fn put_array(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.extend((dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend((d as u64).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    put_array(out, &[m.nrows(), m.ncols()], m.as_slice());
}

impl EmulatorArtifact {
    pub fn header(&self) -> ArtifactHeader {
        let (m, c) = (&self.mean, &self.cov);
        ArtifactHeader {
            n_s: m.n_sites(),
            n_t: m.n_times(),
            k: m.design.len(),
            js: m.gamma.ncols(),
            jt: m.delta.ncols(),
            ls: c.gamma.ncols(),
            lt: c.delta.ncols(),
            mean_krige: m.krige.clone(),
            cov_krige: c.krige.clone(),
            ranges: m.design.ranges.clone(),
            s0_candidates: m.design.s0_candidates.clone(),
            times: m.times.clone(),
            report: self.report.clone(),
            parameterization: self.parameterization.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.mean.design != self.cov.design || self.mean.times != self.cov.times {
            return Err(Error::InvalidArgument(
                "mean and covariance emulators must share design and time grid".into(),
            ));
        }
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(&header);
        put_matrix(&mut out, &self.mean.gamma);
        put_matrix(&mut out, &self.mean.delta);
        put_array(&mut out, self.mean.weights.dims(), self.mean.weights.data());
        put_matrix(&mut out, &self.cov.gamma);
        put_matrix(&mut out, &self.cov.delta);
        put_array(&mut out, self.cov.weights.dims(), self.cov.weights.data());
        let d = &self.mean.design;
        let design = DMatrix::from_fn(d.len(), d.dim() + 1, |k, j| {
            if j < d.dim() {
                d.points[k].coords[j]
            } else {
                d.points[k].s0 as f64
            }
        });
        put_matrix(&mut out, &design);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::UnsupportedFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "format version {version}, expected {VERSION}"
            )));
        }
        let hlen = r.u64()? as usize;
        let h: ArtifactHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::UnsupportedFormat(format!("header: {e}")))?;

        let gamma = r.matrix(&[h.n_s, h.js])?;
        let delta = r.matrix(&[h.n_t, h.jt])?;
        let m = r.tensor(&[h.js, h.jt, h.k])?;
        let cgamma = r.matrix(&[h.n_s, h.ls])?;
        let cdelta = r.matrix(&[h.n_t, h.lt])?;
        let cm = r.tensor(&[h.ls, h.ls, h.lt, h.k])?;
        let dim = h.ranges.len();
        let dm = r.matrix(&[h.k, dim + 1])?;
        if r.pos != bytes.len() {
            return Err(Error::UnsupportedFormat("trailing bytes after design".into()));
        }
        let design = Design {
            ranges: h.ranges.clone(),
            s0_candidates: h.s0_candidates.clone(),
            points: (0..h.k)
                .map(|k| DesignPoint {
                    coords: (0..dim).map(|j| dm[(k, j)]).collect(),
                    s0: dm[(k, dim)] as usize,
                })
                .collect(),
        };
        Ok(EmulatorArtifact {
            mean: MeanEmulator {
                times: h.times.clone(),
                gamma,
                delta,
                weights: m,
                design: design.clone(),
                krige: h.mean_krige,
            },
            cov: CovEmulator {
                times: h.times,
                gamma: cgamma,
                delta: cdelta,
                weights: cm,
                design,
                krige: h.cov_krige,
            },
            report: h.report,
            parameterization: h.parameterization,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::UnsupportedFormat("truncated artifact".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self, want: &[usize]) -> Result<Vec<f64>> {
        let order = self.u32()? as usize;
        let mut dims = Vec::with_capacity(order.min(8));
        for _ in 0..order {
            dims.push(self.u64()? as usize);
        }
        if dims != want {
            return Err(Error::UnsupportedFormat(format!(
                "array dims {dims:?}, header implies {want:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::UnsupportedFormat("array too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, want: &[usize]) -> Result<DMatrix<f64>> {
        let data = self.array(want)?;
        Ok(DMatrix::from_vec(want[0], want[1], data))
    }

    fn tensor(&mut self, want: &[usize]) -> Result<DenseTensor> {
        let data = self.array(want)?;
        DenseTensor::new(want.to_vec(), data)
    }
}

/// Writes to a temporary sibling and renames, so readers never see a partial file.
pub fn save_artifact(artifact: &EmulatorArtifact, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = artifact.to_bytes()?;
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<EmulatorArtifact> {
    EmulatorArtifact::from_bytes(&std::fs::read(path)?)
}

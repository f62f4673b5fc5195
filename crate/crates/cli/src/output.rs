//! File writers shared by the commands. Tables are long-format CSV.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use sirmoment_core::ssa::write_long_csv;

use crate::error::CliResult;

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        crate::error::CliError::Io(format!("cannot create {}: {e}", path.display()))
    })?))
}

pub fn json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// `site,time,value` rows of an `n_s x n_t` matrix.
pub fn site_time<T: std::fmt::Display + nalgebra::Scalar>(
    path: &Path,
    times: &[f64],
    values: &DMatrix<T>,
) -> CliResult<()> {
    write_long_csv(create(path)?, times, values)?;
    Ok(())
}

/// `site_i,site_j,time,value` rows of one matrix per time; only the upper
/// triangle when `symmetric`.
pub fn site_pair_time(path: &Path, times: &[f64], mats: &[DMatrix<f64>], symmetric: bool) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["site_i", "site_j", "time", "value"])?;
    for (t, m) in times.iter().zip(mats) {
        for i in 0..m.nrows() {
            for j in if symmetric { i } else { 0 }..m.ncols() {
                w.write_record([i.to_string(), j.to_string(), t.to_string(), m[(i, j)].to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

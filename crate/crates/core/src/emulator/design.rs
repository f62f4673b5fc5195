//! Space-filling designs over the continuous parameter box, replicated over
//! candidate source sites.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    /// Closed interval per continuous coordinate.
    pub ranges: Vec<[f64; 2]>,
    pub s0_candidates: Vec<usize>,
    pub k: usize,
}

impl DesignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid("a design needs at least two points"));
        }
        if self.ranges.is_empty() {
            return Err(invalid("design has no continuous coordinates"));
        }
        if let Some(r) = self
            .ranges
            .iter()
            .find(|r| !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]))
        {
            return Err(invalid(format!("degenerate design interval {r:?}")));
        }
        if self.s0_candidates.is_empty() {
            return Err(invalid("design needs at least one source candidate"));
        }
        Ok(())
    }
}

/// Continuous coordinates plus the categorical source site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub coords: Vec<f64>,
    pub s0: usize,
}

/// The evaluated design: the box, the candidate sources and the points kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub ranges: Vec<[f64; 2]>,
    pub s0_candidates: Vec<usize>,
    pub points: Vec<DesignPoint>,
}

impl Design {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    /// Maps coordinates onto the unit cube of the design box.
    pub fn scaled(&self, coords: &[f64]) -> Vec<f64> {
        coords
            .iter()
            .zip(&self.ranges)
            .map(|(c, r)| (c - r[0]) / (r[1] - r[0]))
            .collect()
    }

    pub fn contains(&self, point: &DesignPoint) -> bool {
        point.coords.len() == self.dim()
            && point
                .coords
                .iter()
                .zip(&self.ranges)
                .all(|(c, r)| *c >= r[0] && *c <= r[1])
            && self.s0_candidates.contains(&point.s0)
    }

    pub fn subset(&self, keep: &[usize]) -> Design {
        Design {
            ranges: self.ranges.clone(),
            s0_candidates: self.s0_candidates.clone(),
            points: keep.iter().map(|&k| self.points[k].clone()).collect(),
        }
    }
}

/// Latin hypercube over the box, one independent hypercube per source
/// candidate. Block sizes differ by at most one when `k` is not a multiple of
/// the candidate count; the first candidates receive the extra points.
pub fn latin_hypercube(spec: &DesignSpec, seed: u64) -> Result<Design> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_c = spec.s0_candidates.len();
    let mut points = Vec::with_capacity(spec.k);
    for (c, &s0) in spec.s0_candidates.iter().enumerate() {
        let size = spec.k / n_c + usize::from(c < spec.k % n_c);
        if size == 0 {
            continue;
        }
        let mut block = vec![Vec::with_capacity(spec.ranges.len()); size];
        for r in &spec.ranges {
            let mut strata: Vec<usize> = (0..size).collect();
            strata.shuffle(&mut rng);
            for (p, s) in block.iter_mut().zip(strata) {
                let u = (s as f64 + rng.random::<f64>()) / size as f64;
                p.push(r[0] + u * (r[1] - r[0]));
            }
        }
        points.extend(block.into_iter().map(|coords| DesignPoint { coords, s0 }));
    }
    Ok(Design {
        ranges: spec.ranges.clone(),
        s0_candidates: spec.s0_candidates.clone(),
        points,
    })
}

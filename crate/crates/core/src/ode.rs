//! Adaptive Dormand–Prince 5(4) integrator with continuous (dense) output.

use crate::error::{invalid, Error, Result};

/// Absolute/relative error tolerances and step controls.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub atol: f64,
    pub rtol: f64,
    /// Initial step; `0` selects one automatically.
    pub h0: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            atol: 1e-6,
            rtol: 1e-6,
            h0: 0.0,
            max_steps: 1_000_000,
        }
    }
}

impl Tolerances {
    pub fn new(atol: f64, rtol: f64) -> Self {
        Tolerances {
            atol,
            rtol,
            ..Default::default()
        }
    }
}

/// Counters reported after an integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// 5th minus embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense output coefficients (Hairer, Norsett & Wanner, DOPRI5 contd5).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrates `dy/dt = f(t, y)` from `t0` and returns `y` at every requested
/// output time (ascending, all `>= t0`).
pub fn integrate<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    output_times: &[f64],
    tol: &Tolerances,
) -> Result<(Vec<Vec<f64>>, Stats)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if output_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("output times must be ascending"));
    }
    if output_times.first().is_some_and(|&t| t < t0) {
        return Err(invalid("output times precede the initial time"));
    }
    let n = y0.len();
    let mut stats = Stats::default();
    let mut out = Vec::with_capacity(output_times.len());
    let mut next_out = 0;
    while next_out < output_times.len() && output_times[next_out] == t0 {
        out.push(y0.to_vec());
        next_out += 1;
    }
    let Some(&t_end) = output_times.last() else {
        return Ok((out, stats));
    };
    if next_out == output_times.len() {
        return Ok((out, stats));
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];

    f(t, &y, &mut k[0]);
    stats.evaluations += 1;

    let span = t_end - t0;
    let mut h = if tol.h0 > 0.0 {
        tol.h0
    } else {
        initial_step(&y, &k[0], tol).min(span)
    };
    let mut last_rejected = false;

    while next_out < output_times.len() {
        if stats.accepted + stats.rejected >= tol.max_steps {
            return Err(Error::IntegrationFailure {
                time: t,
                reason: "maximum step count exceeded".into(),
            });
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::IntegrationFailure {
                time: t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }
        if t + h > t_end {
            h = t_end - t;
        }

        let (k1, rest) = k.split_at_mut(1);
        let k1 = &k1[0];
        let [k2, k3, k4, k5, k6, k7] = rest else { unreachable!() };
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, &tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, &tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, &tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, &tmp, k5);
        for i in 0..n {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, &tmp, k6);
        for i in 0..n {
            y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t + h, &y_new, k7);
        stats.evaluations += 6;

        let mut err_norm = 0.0;
        for i in 0..n {
            err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
            err_norm += (err[i] / sc).powi(2);
        }
        let err_norm = (err_norm / n.max(1) as f64).sqrt();
        if !err_norm.is_finite() {
            stats.rejected += 1;
            h *= 0.1;
            last_rejected = true;
            continue;
        }

        if err_norm <= 1.0 {
            stats.accepted += 1;
            let t_new = if t + h >= t_end { t_end } else { t + h };
            while next_out < output_times.len() && output_times[next_out] <= t_new {
                let theta = if h > 0.0 { (output_times[next_out] - t) / h } else { 1.0 };
                out.push(dense(&y, &y_new, &k, h, theta));
                next_out += 1;
            }
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            t = t_new;
            let mut factor = 0.9 * err_norm.powf(-0.2);
            if last_rejected {
                factor = factor.min(1.0);
            }
            h *= factor.clamp(0.2, 10.0);
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h *= (0.9 * err_norm.powf(-0.2)).max(0.2);
            last_rejected = true;
        }
    }
    Ok((out, stats))
}

fn initial_step(y: &[f64], dy: &[f64], tol: &Tolerances) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (&yi, &fi) in y.iter().zip(dy) {
        let sc = tol.atol + tol.rtol * yi.abs();
        d0 += (yi / sc).powi(2);
        d1 += (fi / sc).powi(2);
    }
    let n = y.len().max(1) as f64;
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
}

/// Continuous extension on `[t, t + h]` at fraction `theta`.
fn dense(y: &[f64], y_new: &[f64], k: &[Vec<f64>], h: f64, theta: f64) -> Vec<f64> {
    if theta >= 1.0 {
        return y_new.to_vec();
    }
    let th1 = 1.0 - theta;
    (0..y.len())
        .map(|i| {
            let dy = y_new[i] - y[i];
            let bspl = h * k[0][i] - dy;
            let r5 = h * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
            let r4 = dy - h * k[6][i] - bspl;
            y[i] + theta * (dy + th1 * (bspl + theta * (r4 + th1 * r5)))
        })
        .collect()
}

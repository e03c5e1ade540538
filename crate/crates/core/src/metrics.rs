//! Encoder-side metrics: the time-saving ratio and the Bjøntegaard delta
//! bit rate between two rate/PSNR curves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wall-clock components of one encode comparison, in seconds: the full
/// baseline, the baseline with partition decisions removed, and the NN
/// inference replacing them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub t_hpm: f64,
    pub t_hpm_prime: f64,
    pub t_nn: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("baseline encode time is zero")]
    DivisionByZero,
    #[error("curves do not overlap in PSNR (lo {lo}, hi {hi})")]
    InsufficientOverlap { lo: f64, hi: f64 },
    #[error("bad RD curve: {0}")]
    BadCurve(String),
}

/// Fraction of baseline encoding time eliminated when the partition search
/// is replaced by prediction running in parallel with the rest of the
/// encoder: (t_hpm - min(t_nn, t_hpm_prime)) / t_hpm.
pub fn time_saving(t: &TimingRecord) -> Result<f64, MetricsError> {
    if t.t_hpm == 0.0 {
        return Err(MetricsError::DivisionByZero);
    }
    Ok((t.t_hpm - t.t_nn.min(t.t_hpm_prime)) / t.t_hpm)
}

/// One rate-distortion point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bitrate_kbps: f64,
    pub psnr_db: f64,
}

/// Bjøntegaard delta bit rate of curve `b` against anchor `a`, in percent.
/// Positive means `b` spends more bits at equal quality.
///
/// Both curves are fitted with a least-squares cubic of log10(rate) over
/// PSNR and the difference is integrated over the overlapping PSNR range.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint]) -> Result<f64, MetricsError> {
    validate_curve(a)?;
    validate_curve(b)?;
    // curves are sorted, so the PSNR range is first..last
    let lo = a[0].psnr_db.max(b[0].psnr_db);
    let hi = a[a.len() - 1].psnr_db.min(b[b.len() - 1].psnr_db);
    if hi <= lo {
        return Err(MetricsError::InsufficientOverlap { lo, hi });
    }
    // center the fit variable on the overlap midpoint for conditioning
    let center = 0.5 * (lo + hi);
    let fit_a = fit_cubic(a, center)?;
    let fit_b = fit_cubic(b, center)?;
    let half = 0.5 * (hi - lo);
    let avg_diff = (integrate_cubic(&fit_b, half) - integrate_cubic(&fit_a, half)) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

fn validate_curve(c: &[RdPoint]) -> Result<(), MetricsError> {
    if c.len() < 4 {
        return Err(MetricsError::BadCurve(format!(
            "need at least 4 points, got {}",
            c.len()
        )));
    }
    for w in c.windows(2) {
        if w[1].bitrate_kbps <= w[0].bitrate_kbps || w[1].psnr_db <= w[0].psnr_db {
            return Err(MetricsError::BadCurve(
                "points must be strictly increasing in rate and PSNR".into(),
            ));
        }
    }
    if c.iter().any(|p| p.bitrate_kbps <= 0.0) {
        return Err(MetricsError::BadCurve("non-positive bitrate".into()));
    }
    Ok(())
}

/// Least-squares cubic coefficients of log10(rate) over (psnr - center).
fn fit_cubic(points: &[RdPoint], center: f64) -> Result<[f64; 4], MetricsError> {
    // normal equations: sum x^(i+j) * c_j = sum x^i * y
    let mut pow_sums = [0.0f64; 7];
    let mut rhs = [0.0f64; 4];
    for p in points {
        let x = p.psnr_db - center;
        let y = p.bitrate_kbps.log10();
        let mut xp = 1.0;
        for (i, s) in pow_sums.iter_mut().enumerate() {
            *s += xp;
            if i < 4 {
                rhs[i] += xp * y;
            }
            xp *= x;
        }
    }
    let mut m = [[0.0f64; 5]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for j in 0..4 {
            row[j] = pow_sums[i + j];
        }
        row[4] = rhs[i];
    }
    solve4(&mut m).ok_or_else(|| MetricsError::BadCurve("singular fit".into()))
}

/// Gaussian elimination with partial pivoting on a 4x5 augmented system.
fn solve4(m: &mut [[f64; 5]; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..4 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..5 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let mut out = [0.0f64; 4];
    for i in 0..4 {
        out[i] = m[i][4] / m[i][i];
    }
    Some(out)
}

/// Integral of the cubic over the symmetric interval [-half, half].
fn integrate_cubic(c: &[f64; 4], half: f64) -> f64 {
    2.0 * half * c[0] + 2.0 / 3.0 * half.powi(3) * c[2]
}

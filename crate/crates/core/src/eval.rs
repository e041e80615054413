//! Localization error statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::FingerprintDataset;
use crate::error::{invalid, shape_err, Result};
use crate::nn::SpecializedNetwork;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Radii (meters) at which `P(X < r)` is reported.
pub const DEFAULT_PROBES: [f64; 4] = [1.0, 5.0, 10.0, 20.0];
/// Spacing of the fixed grid added to CDF exports.
pub const CDF_GRID_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_m: f64,
    pub p75_m: f64,
    pub p95_m: f64,
    /// `(error, P(X ≤ error))` at every distinct error, ascending.
    pub cdf: Vec<(f64, f64)>,
    /// `(radius, P(X < radius))`.
    pub threshold_probes: Vec<(f64, f64)>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn probe(&self, radius: f64) -> Option<f64> {
        self.threshold_probes
            .iter()
            .find(|(r, _)| *r == radius)
            .map(|(_, p)| *p)
    }

    /// `P(X ≤ x)` from the stored distinct-value CDF.
    pub fn cdf_at(&self, x: f64) -> f64 {
        let k = self.cdf.partition_point(|(e, _)| *e <= x);
        if k == 0 {
            0.0
        } else {
            self.cdf[k - 1].1
        }
    }

    /// CSV with header `error_m,cum_prob`: every distinct error plus a
    /// `CDF_GRID_STEP` grid up to the largest error.
    pub fn write_cdf_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "error_m,cum_prob")?;
        let max = self.cdf.last().map_or(0.0, |(e, _)| *e);
        let steps = (max / CDF_GRID_STEP).ceil() as usize;
        let mut points: Vec<f64> = (0..=steps).map(|i| i as f64 * CDF_GRID_STEP).collect();
        points.extend(self.cdf.iter().map(|(e, _)| *e));
        points.sort_by(f64::total_cmp);
        points.dedup();
        for x in points {
            writeln!(w, "{x},{}", self.cdf_at(x))?;
        }
        Ok(())
    }
}

/// Value at 1-based rank `ceil(p/100 · M)` of ascending `sorted`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(invalid("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(invalid(format!("percentile must lie in [0, 100], got {p}")));
    }
    let m = sorted.len();
    let rank = ((p / 100.0) * m as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, m) - 1])
}

pub fn report_from_errors(errors: &[f64], probes: &[f64]) -> Result<EvalReport> {
    if errors.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(invalid("errors must be finite and nonnegative"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let mae = sorted.iter().sum::<f64>() / m as f64;
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let p = (i + 1) as f64 / m as f64;
        match cdf.last_mut() {
            Some(last) if last.0 == e => last.1 = p,
            _ => cdf.push((e, p)),
        }
    }
    if let Some(last) = cdf.last_mut() {
        last.1 = 1.0;
    }
    let threshold_probes = probes
        .iter()
        .map(|&r| (r, sorted.partition_point(|&e| e < r) as f64 / m as f64))
        .collect();
    Ok(EvalReport {
        mae_m: mae,
        p75_m: nearest_rank(&sorted, 75.0)?,
        p95_m: nearest_rank(&sorted, 95.0)?,
        cdf,
        threshold_probes,
        n_samples: m,
    })
}

/// Per-sample Euclidean distances between `y` and `y_hat`.
pub fn location_errors<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<Vec<f64>> {
    if y.shape() != y_hat.shape() || y.cols() != 2 {
        return Err(shape_err(
            "location_errors",
            format!("{:?} vs {:?}", y.shape(), y_hat.shape()),
        ));
    }
    Ok(y.sub(y_hat).row_norms().data().iter().map(|v| v.as_f64()).collect())
}

pub fn evaluate<T: Scalar>(model: &SpecializedNetwork<T>, test: &FingerprintDataset<T>) -> Result<EvalReport> {
    evaluate_with(model, test, &DEFAULT_PROBES)
}

pub fn evaluate_with<T: Scalar>(
    model: &SpecializedNetwork<T>,
    test: &FingerprintDataset<T>,
    probes: &[f64],
) -> Result<EvalReport> {
    if test.n_anchors() != model.n_anchors() {
        return Err(shape_err(
            "evaluate",
            format!(
                "model expects {} anchors, data has {}",
                model.n_anchors(),
                test.n_anchors()
            ),
        ));
    }
    let y_hat = model.predict(&test.x)?;
    report_from_errors(&location_errors(&test.y, &y_hat)?, probes)
}

/// Percent improvement of `enhanced` over `baseline`; positive is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mae_pct: f64,
    pub p75_pct: Option<f64>,
    pub p95_pct: Option<f64>,
}

pub fn percent_improvement(baseline: f64, enhanced: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(invalid("improvement over a zero baseline is undefined"));
    }
    Ok((baseline - enhanced) / baseline * 100.0)
}

pub fn compare(baseline: &EvalReport, enhanced: &EvalReport) -> Result<Comparison> {
    Ok(Comparison {
        mae_pct: percent_improvement(baseline.mae_m, enhanced.mae_m)?,
        p75_pct: percent_improvement(baseline.p75_m, enhanced.p75_m).ok(),
        p95_pct: percent_improvement(baseline.p95_m, enhanced.p95_m).ok(),
    })
}

//! Prediction error measures: MSE, residuals, detection-point error and
//! box-whisker summaries.

use std::fmt::Write as _;

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::text::fmt_sig;

/// Detection threshold for on-resistance drift, in ohms.
pub const DETECTION_THRESHOLD: f64 = 0.05;

/// Residuals `actual − predicted`.
pub fn error_diff(actual: &[f64], predicted: &[f64]) -> Result<Vec<f64>> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape {
            op: "error_diff",
            left: (actual.len(), 1),
            right: (predicted.len(), 1),
        });
    }
    Ok(actual.iter().zip(predicted).map(|(y, z)| y - z).collect())
}

pub fn mse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    let diff = error_diff(actual, predicted)?;
    if diff.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// Natural logarithm of an MSE; `mse == 0` maps to negative infinity.
pub fn log_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::NEG_INFINITY
    } else {
        mse.ln()
    }
}

/// One device's sensed trace and a prediction covering part of it.
#[derive(Clone, Debug, PartialEq)]
pub struct DevicePrediction {
    pub device_id: String,
    /// Sensed values, indexed from 0.
    pub actual: Vec<f64>,
    /// `predicted[i]` forecasts `actual[offset + i]`.
    pub predicted: Vec<f64>,
    pub offset: usize,
}

impl DevicePrediction {
    pub fn predicted_at(&self, index: usize) -> Option<f64> {
        index.checked_sub(self.offset).and_then(|i| self.predicted.get(i)).copied()
    }

    /// First index where the sensed value reaches `threshold`.
    pub fn crossing(&self, threshold: f64) -> Result<usize> {
        self.actual
            .iter()
            .position(|&v| v >= threshold)
            .ok_or_else(|| Error::MetricUndefined {
                device: self.device_id.clone(),
                threshold,
            })
    }

    /// Relative error (percent) of the prediction at the threshold crossing.
    pub fn detection_error_pct(&self, threshold: f64) -> Result<f64> {
        let t = self.crossing(threshold)?;
        let pred = self.predicted_at(t).ok_or_else(|| Error::MissingPrediction {
            device: self.device_id.clone(),
            index: t,
        })?;
        Ok(100.0 * (pred - threshold).abs() / threshold)
    }
}

/// Average relative error (percent) at each device's own threshold crossing.
pub fn error_at_5pct(devices: &[DevicePrediction], threshold: f64) -> Result<f64> {
    if devices.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mut total = 0.0;
    for d in devices {
        total += d.detection_error_pct(threshold)?;
    }
    Ok(total / devices.len() as f64)
}

/// Box-whisker summary (quartiles by linear interpolation, 1.5·IQR whiskers).
#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

/// Quantile of sorted data, interpolating linearly between closest ranks.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(residuals: &[f64]) -> Result<BoxStats> {
    if residuals.len() < 4 {
        return Err(Error::TooFewSamples {
            need: 4,
            got: residuals.len(),
        });
    }
    if residuals.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("box_stats needs finite residuals".into()));
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = |x: &f64| *x >= fence_lo && *x <= fence_hi;
    let whisker_lo = sorted.iter().copied().find(inside).unwrap_or(q1);
    let whisker_hi = sorted.iter().rev().copied().find(inside).unwrap_or(q3);
    let outliers = sorted.iter().copied().filter(|x| !inside(x)).collect();
    Ok(BoxStats {
        median,
        q1,
        q3,
        whisker_lo,
        whisker_hi,
        outliers,
    })
}

/// Everything reported for one predicted series.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    /// MSE in ohms².
    pub mse: f64,
    pub log_mse: f64,
    /// MSE on the normalized scale, when a normalizer is known.
    pub normalized_mse: Option<f64>,
    pub error_diff: Vec<f64>,
    pub max_abs_error: f64,
    /// Largest normalized residual as a percentage of the `[-1, 1]` span.
    pub max_abs_error_normalized_pct: Option<f64>,
    pub box_stats: Option<BoxStats>,
    pub error_at_5pct: Option<f64>,
}

impl ErrorReport {
    /// Report for `actual` vs `predicted` (ohms). `detection` supplies the
    /// full device prediction for the threshold-crossing error when available.
    pub fn new(
        actual: &[f64],
        predicted: &[f64],
        normalizer: Option<&Normalizer>,
        detection: Option<&DevicePrediction>,
    ) -> Result<Self> {
        let diff = error_diff(actual, predicted)?;
        let mse = mse(actual, predicted)?;
        let normalized_mse = normalizer.map(|nz| {
            let scale = 2.0 / (nz.r_max - nz.r_min);
            mse * scale * scale
        });
        let max_abs_error = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let max_abs_error_normalized_pct =
            normalizer.map(|nz| 100.0 * max_abs_error / (nz.r_max - nz.r_min));
        let box_stats = if diff.len() >= 4 { Some(box_stats(&diff)?) } else { None };
        let error_at_5pct = match detection {
            Some(d) => Some(d.detection_error_pct(DETECTION_THRESHOLD)?),
            None => None,
        };
        Ok(ErrorReport {
            mse,
            log_mse: log_mse(mse),
            normalized_mse,
            error_diff: diff,
            max_abs_error,
            max_abs_error_normalized_pct,
            box_stats,
            error_at_5pct,
        })
    }

    /// Flat `key=value` block.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{prefix}{k}={v}");
        };
        put("log_base", "e".into());
        put("samples", self.error_diff.len().to_string());
        put("mse_ohm2", fmt_sig(self.mse, 6));
        put("log_mse", fmt_sig(self.log_mse, 6));
        if let Some(v) = self.normalized_mse {
            put("mse_normalized", fmt_sig(v, 6));
            put("log_mse_normalized", fmt_sig(log_mse(v), 6));
        }
        put("max_abs_error_ohm", fmt_sig(self.max_abs_error, 6));
        // Ohm residual expressed as a percentage (0.009 ohm -> 0.9).
        put("max_abs_error_pct", fmt_sig(100.0 * self.max_abs_error, 6));
        if let Some(v) = self.max_abs_error_normalized_pct {
            put("max_abs_error_normalized_pct", fmt_sig(v, 6));
        }
        if let Some(b) = &self.box_stats {
            put("box_median", fmt_sig(b.median, 6));
            put("box_q1", fmt_sig(b.q1, 6));
            put("box_q3", fmt_sig(b.q3, 6));
            put("box_whisker_lo", fmt_sig(b.whisker_lo, 6));
            put("box_whisker_hi", fmt_sig(b.whisker_hi, 6));
            put("box_outliers", b.outliers.len().to_string());
        }
        match self.error_at_5pct {
            Some(v) => put("error_at_5pct", fmt_sig(v, 6)),
            None => put("error_at_5pct", "none".into()),
        }
        out
    }
}

/// Residual table for plotting: `index,actual,predicted,error_diff`.
pub fn residuals_csv(first_index: usize, actual: &[f64], predicted: &[f64]) -> Result<String> {
    let diff = error_diff(actual, predicted)?;
    let mut out = String::from("index,actual_ohm,predicted_ohm,error_diff_ohm\n");
    for (i, ((a, p), d)) in actual.iter().zip(predicted).zip(&diff).enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            first_index + i,
            fmt_sig(*a, 12),
            fmt_sig(*p, 12),
            fmt_sig(*d, 12)
        );
    }
    Ok(out)
}

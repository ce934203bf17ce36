//! Procrustes-aligned errors, F-scores and latency statistics.
//!
//! Point sets are slices of `[x, y, z]` in metres; reported distances and
//! thresholds are in millimetres.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

const MM_PER_M: f64 = 1000.0;

/// Converts an `N x 3` tensor into points.
pub fn points(t: &Tensor) -> Result<Vec<Point>> {
    match t.shape() {
        [_, 3] => Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()),
        s => Err(Error::dim("points", format!("expected N x 3, got {s:?}"))),
    }
}

/// Similarity transform `x -> scale * rotation * x + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// Set when the cross-covariance has rank below two, so the rotation
    /// is not uniquely determined.
    pub degenerate: bool,
}

impl Alignment {
    pub fn identity() -> Self {
        Alignment {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
            degenerate: false,
        }
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        let v = self.rotation * Vector3::from(*p) * self.scale + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn apply(&self, pts: &[Point]) -> Vec<Point> {
        pts.iter().map(|p| self.apply_point(p)).collect()
    }
}

fn centroid(pts: &[Point]) -> Vector3<f64> {
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / pts.len() as f64
}

/// Least-squares similarity transform taking `pred` onto `gt`.
pub fn umeyama_align(pred: &[Point], gt: &[Point]) -> Result<Alignment> {
    if pred.len() != gt.len() {
        return Err(Error::Alignment(format!(
            "point counts differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::Alignment(format!("need at least 3 points, got {}", pred.len())));
    }
    let n = pred.len() as f64;
    let (mu_p, mu_g) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    let mut mag = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let pc = Vector3::from(*p) - mu_p;
        let gc = Vector3::from(*g) - mu_g;
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
        var_g += gc.norm_squared();
        mag += Vector3::from(*p).norm_squared() + Vector3::from(*g).norm_squared();
    }
    cov /= n;
    var_p /= n;
    var_g /= n;
    let tiny = 1e-24 * (1.0 + mag / n);
    if !(var_p > tiny) || !(var_g > tiny) {
        return Err(Error::Alignment("all points coincide".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = svd.singular_values;
    let smallest = d.imin();
    let mut s = Vector3::repeat(1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        s[smallest] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = d.dot(&s) / var_p;
    if !(scale > 0.0) {
        return Err(Error::Alignment(format!("non-positive scale {scale}")));
    }
    let mut sorted = [d[0], d[1], d[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    let degenerate = sorted[1] <= 1e-12 * sorted[0];
    let translation = mu_g - rotation * mu_p * scale;
    Ok(Alignment {
        rotation,
        scale,
        translation,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Mean per-point Euclidean distance.
    #[default]
    MeanEuclidean,
    /// Root of the mean squared distance.
    Rmse,
}

impl std::str::FromStr for ErrorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_euclidean" => Ok(ErrorMode::MeanEuclidean),
            "rmse" => Ok(ErrorMode::Rmse),
            other => Err(Error::Config(format!(
                "metric mode must be mean_euclidean or rmse, got `{other}`"
            ))),
        }
    }
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Error between corresponding points with no alignment, in millimetres.
pub fn point_error(pred: &[Point], gt: &[Point], mode: ErrorMode) -> f64 {
    let n = pred.len() as f64;
    let d = pred.iter().zip(gt).map(|(p, g)| dist(p, g));
    MM_PER_M
        * match mode {
            ErrorMode::MeanEuclidean => d.sum::<f64>() / n,
            ErrorMode::Rmse => (d.map(|x| x * x).sum::<f64>() / n).sqrt(),
        }
}

/// Procrustes-aligned error in millimetres.
pub fn pa_error(pred: &[Point], gt: &[Point], mode: ErrorMode) -> Result<f64> {
    let a = umeyama_align(pred, gt)?;
    Ok(point_error(&a.apply(pred), gt, mode))
}

/// Fraction of `from` whose nearest neighbour in `to` is within `tau_m`.
fn coverage(from: &[Point], to: &[Point], tau_m: f64) -> f64 {
    let hits = from
        .iter()
        .filter(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min) <= tau_m)
        .count();
    hits as f64 / from.len() as f64
}

/// Harmonic mean of precision and recall at threshold `tau_mm`.
pub fn fscore(pred: &[Point], gt: &[Point], tau_mm: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Metric("F-score needs non-empty point sets".into()));
    }
    if !(tau_mm > 0.0) {
        return Err(Error::Metric(format!("F-score threshold must be positive, got {tau_mm}")));
    }
    let tau = tau_mm / MM_PER_M;
    let precision = coverage(pred, gt, tau);
    let recall = coverage(gt, pred, tau);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Wall-clock statistics of repeated single-image forward passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// `1000 / median_ms`.
    pub fps: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Contract("latency statistics need at least one sample".into()));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(LatencyStats {
            iters: n,
            mean_ms: s.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: s[rank - 1],
            fps: 1000.0 / median,
        })
    }
}

/// Times `iters` calls of `run` after `warmup` untimed calls.
pub fn bench_fps(mut run: impl FnMut() -> Result<()>, iters: usize, warmup: usize) -> Result<LatencyStats> {
    if iters == 0 {
        return Err(Error::Contract("benchmark needs at least one timed iteration".into()));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    LatencyStats::from_samples(&samples)
}

/// Evaluation and benchmark results. Absent blocks are omitted from both
/// serialised forms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pa_mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pa_mpvpe_mm: Option<f64>,
    /// Threshold label such as `5mm` mapped to the F-score.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub f_at: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_total: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_heads: Option<usize>,
}

pub fn tau_label(tau_mm: f64) -> String {
    format!("{tau_mm}mm")
}

impl MetricsReport {
    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        let mut push = |k: String, v: String| lines.push(format!("{k}={v}"));
        if let Some(n) = self.samples {
            push("samples".into(), n.to_string());
        }
        if let Some(v) = self.pa_mpjpe_mm {
            push("pa_mpjpe_mm".into(), format!("{v:.6}"));
        }
        if let Some(v) = self.pa_mpvpe_mm {
            push("pa_mpvpe_mm".into(), format!("{v:.6}"));
        }
        let mut f: Vec<_> = self.f_at.iter().collect();
        f.sort_by(|a, b| {
            let key = |s: &str| s.trim_end_matches("mm").parse::<f64>().unwrap_or(f64::MAX);
            key(a.0).total_cmp(&key(b.0))
        });
        for (label, v) in f {
            push(format!("f_at_{label}"), format!("{v:.6}"));
        }
        if let Some(l) = &self.latency {
            push("latency_iters".into(), l.iters.to_string());
            push("latency_mean_ms".into(), format!("{:.4}", l.mean_ms));
            push("latency_median_ms".into(), format!("{:.4}", l.median_ms));
            push("latency_p95_ms".into(), format!("{:.4}", l.p95_ms));
            push("fps".into(), format!("{:.3}", l.fps));
        }
        if let Some(n) = self.params_total {
            push("params_total".into(), n.to_string());
        }
        if let Some(n) = self.params_heads {
            push("params_heads".into(), n.to_string());
        }
        lines.join("\n") + "\n"
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

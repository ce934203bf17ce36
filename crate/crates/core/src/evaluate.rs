//! Dataset evaluation with optional worker threads.
//!
//! Per-sample results are stored by sample index and reduced in index
//! order, so the report does not depend on the worker count.

use crate::config::MetricsConfig;
use crate::data::HandSample;
use crate::error::{Error, Result};
use crate::metrics::{fscore, pa_error, points, tau_label, umeyama_align, MetricsReport};
use crate::model::{HandNet, Prediction};
use crate::params::NetworkParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub pa_mpjpe_mm: f64,
    pub pa_mpvpe_mm: f64,
    /// One score per configured threshold.
    pub fscores: Vec<f64>,
}

pub fn sample_metrics(
    pred_joints: &Tensor,
    pred_vertices: &Tensor,
    gt: &HandSample,
    cfg: &MetricsConfig,
) -> Result<SampleMetrics> {
    let (pj, gj) = (points(pred_joints)?, points(&gt.joints3d)?);
    let (pv, gv) = (points(pred_vertices)?, points(&gt.vertices)?);
    let pa_mpjpe_mm = pa_error(&pj, &gj, cfg.mode)?;
    let pa_mpvpe_mm = pa_error(&pv, &gv, cfg.mode)?;
    let mesh = if cfg.align_fscore {
        umeyama_align(&pv, &gv)?.apply(&pv)
    } else {
        pv
    };
    let fscores = cfg
        .thresholds_mm
        .iter()
        .map(|&t| fscore(&mesh, &gv, t))
        .collect::<Result<_>>()?;
    Ok(SampleMetrics {
        pa_mpjpe_mm,
        pa_mpvpe_mm,
        fscores,
    })
}

/// Runs `f` on every index in `0..n` using `workers` threads and returns
/// the results in index order.
pub fn par_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let shards: Vec<Result<Vec<(usize, T)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..n).step_by(workers).map(|i| f(i).map(|v| (i, v))).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("worker thread panicked".into()))))
            .collect()
    });
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for shard in shards {
        for (i, v) in shard? {
            slots[i] = Some(v);
        }
    }
    Ok(slots.into_iter().map(|v| v.expect("every index is covered")).collect())
}

/// Averages per-sample metrics in sample order.
pub fn reduce(per_sample: &[SampleMetrics], cfg: &MetricsConfig) -> Result<MetricsReport> {
    if per_sample.is_empty() {
        return Err(Error::Metric("no samples to evaluate".into()));
    }
    let n = per_sample.len() as f64;
    let mut report = MetricsReport {
        samples: Some(per_sample.len()),
        pa_mpjpe_mm: Some(per_sample.iter().map(|m| m.pa_mpjpe_mm).sum::<f64>() / n),
        pa_mpvpe_mm: Some(per_sample.iter().map(|m| m.pa_mpvpe_mm).sum::<f64>() / n),
        ..Default::default()
    };
    for (k, &tau) in cfg.thresholds_mm.iter().enumerate() {
        let mean = per_sample.iter().map(|m| m.fscores[k]).sum::<f64>() / n;
        report.f_at.insert(tau_label(tau), mean);
    }
    Ok(report)
}

/// Scores precomputed predictions against their samples.
pub fn evaluate_predictions(
    preds: &[Prediction],
    samples: &[HandSample],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    if preds.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let per = par_map(samples.len(), cfg.workers, |i| {
        sample_metrics(&preds[i].joints3d, &preds[i].vertices, &samples[i], cfg)
    })?;
    reduce(&per, cfg)
}

/// Runs the network on every sample and scores the outputs.
pub fn evaluate(
    net: &HandNet,
    params: &NetworkParams,
    samples: &[HandSample],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let per = par_map(samples.len(), cfg.workers, |i| {
        let p = net.predict(params, &samples[i].image)?;
        sample_metrics(&p.joints3d, &p.vertices, &samples[i], cfg)
    })?;
    reduce(&per, cfg)
}

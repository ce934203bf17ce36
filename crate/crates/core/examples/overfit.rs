//! Overfits the desk configuration on eight synthetic hands and reports
//! the loss drop and per-joint error. Pass an epoch count to shorten it.

use handmesh::config::RunConfig;
use handmesh::data::{synthetic_samples, SynthConfig};
use handmesh::train::train;

fn main() -> handmesh::Result<()> {
    let mut cfg = RunConfig::desk();
    if let Some(epochs) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        cfg.train.epochs = epochs;
        cfg.train.lr_boundary = epochs / 2;
    }
    let net = cfg.network()?;
    let sc = SynthConfig::new(cfg.model.backbone.input_size, net.regressor.clone());
    let samples = synthetic_samples(8, 11, &sc)?;
    let outcome = train(&cfg, &net, &samples, cfg.model.init_params(cfg.seed), |e| {
        if e.epoch % 50 == 0 {
            println!("{e}");
        }
    })?;
    let first = outcome.log.first().map_or(f64::NAN, |e| e.total);
    let last = outcome.log.last().map_or(f64::NAN, |e| e.total);
    println!("loss {first:.4} -> {last:.6} (ratio {:.4})", last / first);

    let pred = net.predict(&outcome.params, &samples[0].image)?;
    let gt = samples[0].joints3d.data();
    let worst = pred
        .joints3d
        .data()
        .chunks(3)
        .zip(gt.chunks(3))
        .map(|(p, g)| (0..3).map(|k| (p[k] - g[k]).powi(2)).sum::<f64>().sqrt() * 1000.0)
        .fold(0.0, f64::max);
    println!("worst joint error on sample 0: {worst:.2} mm");
    Ok(())
}

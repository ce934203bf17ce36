//! Scores untrained weights on a synthetic set with one and four workers
//! and prints both reports, which are identical.

use handmesh::config::RunConfig;
use handmesh::data::{synthetic_samples, SynthConfig};
use handmesh::evaluate::evaluate;

fn main() -> handmesh::Result<()> {
    let mut cfg = RunConfig::desk();
    let net = cfg.network()?;
    let params = cfg.model.init_params(3);
    let sc = SynthConfig::new(cfg.model.backbone.input_size, net.regressor.clone());
    let samples = synthetic_samples(12, 5, &sc)?;
    for workers in [1, 4] {
        cfg.metrics.workers = workers;
        let report = evaluate(&net, &params, &samples, &cfg.metrics)?;
        println!("[{workers} worker(s)]\n{}", report.to_text());
    }
    Ok(())
}

//! Compares reverse-mode gradients of the full training loss on the
//! miniature network with central finite differences.

use handmesh::config::RunConfig;
use handmesh::data::{synthetic_samples, SynthConfig};
use handmesh::gradcheck::{check_gradients, GradCheckConfig};
use handmesh::model::ModelConfig;
use handmesh::params::Bound;
use handmesh::train::sample_loss;
use handmesh::Tensor;

fn main() -> handmesh::Result<()> {
    let cfg = RunConfig {
        model: ModelConfig::miniature(),
        ..Default::default()
    };
    let net = cfg.network()?;
    let sample = synthetic_samples(1, 0, &SynthConfig::new(8, net.regressor.clone()))?.remove(0);
    let params = cfg.model.init_params(0);
    let paths: Vec<String> = params.iter().map(|(p, _)| p.clone()).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    for (step, floor) in [(1e-5, 1e-5), (1e-4, 1e-6)] {
        let report = check_gradients(
            &inputs,
            |tape, vars| {
                let bound: Bound = paths.iter().cloned().zip(vars.iter().copied()).collect();
                Ok(sample_loss(tape, &net, &bound, &cfg, &sample)?.total)
            },
            GradCheckConfig { step, floor },
        )?;
        let (i, e, a, n) = report.worst.expect("parameters exist");
        println!(
            "h={step:e}: {} entries, max relative error {:.2e} at {}[{e}] (analytic {a:e}, numeric {n:e})",
            report.checked, report.max_rel_err, paths[i]
        );
    }
    Ok(())
}

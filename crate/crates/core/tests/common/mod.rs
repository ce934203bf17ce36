#![allow(dead_code)]

use handmesh::config::RunConfig;
use handmesh::data::{synthetic_samples, HandSample, SynthConfig};
use handmesh::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use handmesh::model::{HandNet, ModelConfig};
use handmesh::params::{Bound, NetworkParams};
use handmesh::train::sample_loss;
use handmesh::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Scalar = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable operation reduced to a scalar.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Scalar,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Sampling coordinates in `(-0.9, 0.9)` that stay clear of the pixel
/// centres where bilinear weights have kinks.
pub fn grid_coords(rng: &mut ChaCha8Rng, tokens: usize, w: usize, h: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * tokens);
    for _ in 0..tokens {
        for size in [w, h] {
            let step = 2.0 / (size - 1) as f64;
            let cell = rng.gen_range(0..size - 1);
            let frac = rng.gen_range(0.1..0.9);
            data.push((-1.0 + (cell as f64 + frac) * step).clamp(-0.9, 0.9));
        }
    }
    Tensor::new([tokens, 2], data).unwrap()
}

/// `sum(y * W)` with fixed non-uniform weights, so every output element
/// receives a distinct upstream gradient.
pub fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(shape, (0..n).map(|i| (i as f64 * 0.7371 + 0.3).sin()).collect())?;
    let m = tape.mul(y, w)?;
    Ok(tape.sum(m))
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(move |t, v| {
            let y = f(t, v)?;
            project(t, y)
        }),
    }
}

/// Every differentiable tape operation on small random inputs.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    vec![
        case("matmul", vec![uniform(r, &[3, 4]), uniform(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        case("transpose", vec![uniform(r, &[3, 4])], |t, v| t.transpose(v[0])),
        case("add", vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])], |t, v| t.add(v[0], v[1])),
        case("add_broadcast", vec![uniform(r, &[2, 3]), uniform(r, &[1])], |t, v| t.add(v[0], v[1])),
        case("sub", vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])], |t, v| t.mul(v[0], v[1])),
        case("add_scalar", vec![uniform(r, &[5])], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        case("scale", vec![uniform(r, &[5])], |t, v| Ok(t.scale(v[0], -1.7))),
        case("sigmoid", vec![uniform(r, &[2, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        case("relu", vec![away_from_zero(r, &[2, 4], 0.01)], |t, v| Ok(t.relu(v[0]))),
        case("abs", vec![away_from_zero(r, &[2, 4], 0.01)], |t, v| Ok(t.abs(v[0]))),
        case("square", vec![uniform(r, &[2, 4])], |t, v| Ok(t.square(v[0]))),
        case(
            "linear",
            vec![uniform(r, &[3, 4]), uniform(r, &[4, 2]), uniform(r, &[2])],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        case(
            "conv2d",
            vec![uniform(r, &[2, 5, 5]), uniform(r, &[3, 2, 3, 3]), uniform(r, &[3])],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        case(
            "conv_transpose2d",
            vec![uniform(r, &[2, 3, 3]), uniform(r, &[2, 3, 2, 2]), uniform(r, &[3])],
            |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2),
        ),
        case(
            "conv1d",
            vec![uniform(r, &[5, 3]), uniform(r, &[3, 3]), uniform(r, &[3])],
            |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1),
        ),
        case("softmax_rows", vec![uniform(r, &[3, 4])], |t, v| t.softmax(v[0], 1)),
        case("softmax_cols", vec![uniform(r, &[3, 4])], |t, v| t.softmax(v[0], 0)),
        case(
            "layer_norm",
            vec![uniform(r, &[3, 4]), uniform(r, &[4]), uniform(r, &[4])],
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        ),
        case("grid_sample", vec![uniform(r, &[2, 4, 5]), grid_coords(r, 3, 5, 4)], |t, v| {
            t.grid_sample(v[0], v[1])
        }),
        case("reshape", vec![uniform(r, &[2, 6])], |t, v| t.reshape(v[0], [3, 4])),
        case("concat_rows", vec![uniform(r, &[2, 3]), uniform(r, &[1, 3])], |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        case("concat_cols", vec![uniform(r, &[2, 3]), uniform(r, &[2, 1])], |t, v| {
            t.concat_cols(&[v[0], v[1]])
        }),
        case("gather_rows", vec![uniform(r, &[4, 2])], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
        case("slice_cols", vec![uniform(r, &[3, 5])], |t, v| t.slice_cols(v[0], 1, 4)),
        case("sum", vec![uniform(r, &[2, 3])], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![uniform(r, &[2, 3])], |t, v| Ok(t.mean(v[0]))),
        case("row_norm", vec![away_from_zero(r, &[3, 3], 0.1)], |t, v| t.row_norm(v[0])),
    ]
}

pub fn run_case(c: &OpCase) -> GradCheckReport {
    check_gradients(&c.inputs, &c.f, GradCheckConfig::default()).unwrap()
}

/// Miniature network, one synthetic sample and seeded parameters.
pub fn miniature_setup(seed: u64) -> (RunConfig, HandNet, HandSample, NetworkParams) {
    let cfg = RunConfig {
        model: ModelConfig::miniature(),
        regressor_seed: seed,
        ..Default::default()
    };
    let net = cfg.network().unwrap();
    let sample = synthetic_samples(1, seed, &SynthConfig::new(8, net.regressor.clone()))
        .unwrap()
        .remove(0);
    let params = cfg.model.init_params(seed);
    (cfg, net, sample, params)
}

/// Denominator floor for the full-loss check. With losses near 10 the
/// central difference at `h = 1e-5` carries about `1e-10` of rounding
/// noise, so smaller gradients are compared in absolute terms at `1e-9`.
pub const PIPELINE_FLOOR: f64 = 1e-5;

/// Finite-difference check of the full weighted training loss with
/// respect to every network parameter.
pub fn pipeline_check(seed: u64, cfg: GradCheckConfig) -> GradCheckReport {
    let (run, net, sample, params) = miniature_setup(seed);
    let paths: Vec<String> = params.iter().map(|(p, _)| p.clone()).collect();
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    check_gradients(
        &inputs,
        |tape, vars| {
            let bound: Bound = paths.iter().cloned().zip(vars.iter().copied()).collect();
            Ok(sample_loss(tape, &net, &bound, &run, &sample)?.total)
        },
        cfg,
    )
    .unwrap()
}

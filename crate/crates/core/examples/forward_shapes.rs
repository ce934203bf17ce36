//! Runs the default network on a random 224x224 crop and prints the shape
//! of every stage.

use handmesh::config::RunConfig;
use handmesh::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> handmesh::Result<()> {
    let cfg = RunConfig::default();
    let net = cfg.network()?;
    let params = cfg.model.init_params(cfg.seed);
    let s = cfg.model.backbone.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Tensor::new([3, s, s], (0..3 * s * s).map(|_| rng.gen()).collect())?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let img = tape.leaf(&image);
    let out = net.forward(&mut tape, &bound, img)?;
    println!("backbone features  {:?}", tape.shape(out.features));
    println!("2D keypoints       {:?}", tape.shape(out.kp2d));
    for st in &out.stages {
        println!(
            "block {} input      joints {:?}, skeleton {:?}",
            st.stage,
            tape.shape(st.joints),
            tape.shape(st.skeleton)
        );
    }
    println!("mesh tokens        {:?}", tape.shape(out.mesh_tokens));
    println!("vertices           {:?}", tape.shape(out.vertices));
    println!("3D joints          {:?}", tape.shape(out.joints3d));
    println!("parameters         {}", params.count());
    Ok(())
}

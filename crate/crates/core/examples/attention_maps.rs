//! Prints per-head attention weights of the first joint block for a small
//! random token set.

use handmesh::interaction::mhsa_detailed;
use handmesh::model::ModelConfig;
use handmesh::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> handmesh::Result<()> {
    let model = ModelConfig::default();
    let params = model.init_params(0);
    let (t, c) = (model.block_tokens(0), model.block_channels(0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new([t, c], (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.leaf(&x);
    let attn = mhsa_detailed(&mut tape, &bound, "block0.joint", model.heads, xv)?;
    println!("{} heads over {t} tokens, output {:?}", attn.weights.len(), tape.shape(attn.output));
    for (h, w) in attn.weights.iter().enumerate().take(2) {
        let row = &tape.value(*w)[..t];
        let (argmax, max) = row.iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        println!("head {h}: token 0 attends most to token {argmax} ({max:.3}), row sum {:.6}", row.iter().sum::<f64>());
    }
    Ok(())
}

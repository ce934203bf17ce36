//! Feature-interaction blocks refining joint and skeleton tokens.
//!
//! Each branch runs coordinate attention, pre-norm multi-head
//! self-attention and a linear layer. The skeleton branch output is then
//! fused into the joint branch, and both end with a projection. Between
//! blocks every token is split into `token_upsample` narrower sub-tokens.

use crate::error::{Error, Result};
use crate::heads::TokenFeatures;
use crate::model::ModelConfig;
use crate::params::Bound;
use crate::tensor::{Tape, Var};

pub const COORD_KERNEL: usize = 3;

/// Token-wise gating: `x * sigmoid(conv1d(x)) + x`, shape preserved.
pub fn coord_attention_forward(tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{prefix}.coord.weight"))?;
    let b = params.get(&format!("{prefix}.coord.bias"))?;
    let conv = tape.conv1d(x, w, Some(b), COORD_KERNEL / 2)?;
    let gate = tape.sigmoid(conv);
    let gated = tape.mul(x, gate)?;
    tape.add(gated, x)
}

/// Output of [`mhsa_detailed`]: the block output plus each head's
/// `T x T` attention matrix.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Pre-norm multi-head self-attention with a residual connection.
pub fn mhsa_forward(tape: &mut Tape, params: &Bound, prefix: &str, heads: usize, x: Var) -> Result<Var> {
    mhsa_detailed(tape, params, prefix, heads, x).map(|a| a.output)
}

pub fn mhsa_detailed(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    heads: usize,
    x: Var,
) -> Result<Attention> {
    let c = match tape.shape(x) {
        [_, c] => *c,
        s => return Err(Error::dim("mhsa", format!("expected T x C, got {s:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels cannot be split into {heads} heads")));
    }
    let d_k = c / heads;
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let normed = tape.layer_norm(x, p("norm.gain")?, p("norm.shift")?)?;
    let q = tape.matmul(normed, p("attn.wq")?)?;
    let k = tape.matmul(normed, p("attn.wk")?)?;
    let v = tape.matmul(normed, p("attn.wv")?)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d_k, (h + 1) * d_k);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        outputs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = tape.concat_cols(&outputs)?;
    let projected = tape.linear(merged, p("attn.wo")?, Some(p("attn.bo")?))?;
    let output = tape.add(projected, x)?;
    Ok(Attention { output, weights })
}

fn linear_named(tape: &mut Tape, params: &Bound, path: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{path}.weight"))?;
    let b = params.get(&format!("{path}.bias"))?;
    tape.linear(x, w, Some(b))
}

fn branch_forward(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    attend: bool,
    x: Var,
) -> Result<Var> {
    let x = if attend {
        let gated = coord_attention_forward(tape, params, prefix, x)?;
        mhsa_forward(tape, params, prefix, cfg.heads, gated)?
    } else {
        x
    };
    linear_named(tape, params, &format!("{prefix}.linear"), x)
}

/// One interaction block; token shapes are preserved.
pub fn interaction_block_forward(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    block: usize,
    tokens: &TokenFeatures,
) -> Result<TokenFeatures> {
    let expected = [cfg.block_tokens(block), cfg.block_channels(block)];
    for v in [tokens.joints, tokens.skeleton] {
        if tape.shape(v) != expected {
            return Err(Error::dim(
                "interaction_block",
                format!("block {block} expects {expected:?}, got {:?}", tape.shape(v)),
            ));
        }
    }
    let jp = format!("block{block}.joint");
    let sp = format!("block{block}.skeleton");
    let joints = branch_forward(tape, params, cfg, &jp, true, tokens.joints)?;
    let skeleton = branch_forward(tape, params, cfg, &sp, cfg.skeleton_attention, tokens.skeleton)?;
    let joints = match params.try_get(&format!("block{block}.fuse.weight")) {
        Some(fuse) if cfg.fusion => {
            let guide = tape.matmul(skeleton, fuse)?;
            tape.add(joints, guide)?
        }
        _ => joints,
    };
    Ok(TokenFeatures {
        joints: linear_named(tape, params, &format!("{jp}.proj"), joints)?,
        skeleton: linear_named(tape, params, &format!("{sp}.proj"), skeleton)?,
        stage: block,
    })
}

/// Projects each token to `k * C_next` channels and splits it into `k`
/// consecutive tokens of width `C_next`.
pub fn token_upsample(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    tokens: &TokenFeatures,
) -> Result<TokenFeatures> {
    let stage = tokens.stage;
    if stage + 1 >= cfg.blocks() {
        return Err(Error::Contract(format!(
            "token_upsample called after the last stage ({stage})"
        )));
    }
    let next = [cfg.block_tokens(stage + 1), cfg.block_channels(stage + 1)];
    let mut split = |branch: &str, x: Var| -> Result<Var> {
        let y = linear_named(tape, params, &format!("up{stage}.{branch}"), x)?;
        tape.reshape(y, next)
    };
    let joints = split("joint", tokens.joints)?;
    let skeleton = split("skeleton", tokens.skeleton)?;
    Ok(TokenFeatures {
        joints,
        skeleton,
        stage: stage + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{NetworkParams, ParamSpec};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attn_params(c: usize, seed: u64) -> NetworkParams {
        let mut specs = vec![
            ParamSpec::uniform("b.coord.weight", [c, 3], 3),
            ParamSpec::constant("b.coord.bias", [c], 0.0),
            ParamSpec::uniform("b.norm.gain", [c], 1),
            ParamSpec::uniform("b.norm.shift", [c], 1),
            ParamSpec::uniform("b.attn.bo", [c], c),
        ];
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push(ParamSpec::uniform(format!("b.attn.{w}"), [c, c], c));
        }
        NetworkParams::init(&specs, seed)
    }

    #[test]
    fn zero_conv_gate_scales_by_one_and_a_half() {
        let mut params = attn_params(4, 0);
        params.get_mut("b.coord.weight").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[5, 4]);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(&x);
        let y = coord_attention_forward(&mut tape, &p, "b", xv).unwrap();
        for (a, b) in tape.value(y).iter().zip(x.data()) {
            assert_eq!(*a, 1.5 * b);
        }
    }

    #[test]
    fn coord_attention_matches_gate_then_residual() {
        let params = attn_params(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(&x);
        let y = coord_attention_forward(&mut tape, &p, "b", xv).unwrap();
        let w = params.get("b.coord.weight").unwrap();
        for t in 0..4 {
            for c in 0..3 {
                let mut s = 0.0;
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if (0..4).contains(&src) {
                        s += w.at(&[c, j]) * x.at(&[src as usize, c]);
                    }
                }
                let gate = 1.0 / (1.0 + (-s).exp());
                let want = x.at(&[t, c]) * gate + x.at(&[t, c]);
                assert!((tape.value(y)[t * 3 + c] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_token_attention_is_projected_value_plus_input() {
        let c = 4;
        let params = attn_params(c, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[1, c]);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(&x);
        let y = mhsa_forward(&mut tape, &p, "b", 2, xv).unwrap();
        // expected: LN -> V -> Wo + bo + x
        let (g, sh) = (params.get("b.norm.gain").unwrap(), params.get("b.norm.shift").unwrap());
        let mean = x.data().iter().sum::<f64>() / c as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let n: Vec<f64> = (0..c)
            .map(|j| (x.data()[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + sh.data()[j])
            .collect();
        let wv = params.get("b.attn.wv").unwrap();
        let wo = params.get("b.attn.wo").unwrap();
        let bo = params.get("b.attn.bo").unwrap();
        let v: Vec<f64> = (0..c).map(|o| (0..c).map(|i| n[i] * wv.at(&[i, o])).sum()).collect();
        for o in 0..c {
            let want = bo.data()[o] + (0..c).map(|i| v[i] * wo.at(&[i, o])).sum::<f64>() + x.data()[o];
            assert!((tape.value(y)[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_scalar_unroll() {
        // C = 1, one head, d_k = 1, hand-set weights
        // With C = 1 layer norm maps every token to its shift, so gain 0 and
        // shift 0.8 make both normalised tokens 0.8.
        let mut params = NetworkParams::new();
        for (name, shape, v) in [
            ("b.norm.gain", vec![1], 0.0),
            ("b.norm.shift", vec![1], 0.8),
            ("b.attn.bo", vec![1], 0.25),
            ("b.attn.wq", vec![1, 1], 0.5),
            ("b.attn.wk", vec![1, 1], -1.5),
            ("b.attn.wv", vec![1, 1], 2.0),
            ("b.attn.wo", vec![1, 1], 3.0),
        ] {
            params.insert(name, Tensor::new(shape, vec![v]).unwrap());
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = tape.constant([2, 1], vec![1.0, -2.0]).unwrap();
        let y = mhsa_forward(&mut tape, &p, "b", 1, x).unwrap();
        // q = 0.4, k = -1.2, v = 1.6 for both tokens
        // scores equal so attention is uniform: out = 1.6 * 3 + 0.25 + x
        let want = [1.6 * 3.0 + 0.25 + 1.0, 1.6 * 3.0 + 0.25 - 2.0];
        for (a, b) in tape.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let params = attn_params(6, 0);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = tape.leaf(&Tensor::ones([3, 6]));
        assert!(matches!(mhsa_forward(&mut tape, &p, "b", 4, x), Err(Error::Config(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let params = attn_params(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[6, 8]);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(&x);
        let att = mhsa_detailed(&mut tape, &p, "b", 4, xv).unwrap();
        assert_eq!(att.weights.len(), 4);
        for w in att.weights {
            for row in tape.value(w).chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v > 0.0));
            }
        }
    }

    fn block_case(cfg: &ModelConfig, params: &NetworkParams, seed: u64) -> (Tape, TokenFeatures, TokenFeatures) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.block_tokens(0), cfg.block_channels(0)];
        let j = random(&mut rng, &shape);
        let s = random(&mut rng, &shape);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let tok = TokenFeatures {
            joints: tape.leaf(&j),
            skeleton: tape.leaf(&s),
            stage: 0,
        };
        let out = interaction_block_forward(&mut tape, &p, cfg, 0, &tok).unwrap();
        (tape, tok, out)
    }

    #[test]
    fn block_preserves_shapes_and_zero_fusion_decouples() {
        let cfg = ModelConfig::default();
        let mut params = cfg.init_params(1);
        let (tape, _, out) = block_case(&cfg, &params, 2);
        assert_eq!(tape.shape(out.joints), &[21, 256]);
        assert_eq!(tape.shape(out.skeleton), &[21, 256]);

        params.get_mut("block0.fuse.weight").unwrap().data_mut().fill(0.0);
        let (t1, _, a) = block_case(&cfg, &params, 2);
        // same joints, different skeleton input
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = random(&mut rng, &[21, 256]);
        let s = random(&mut ChaCha8Rng::seed_from_u64(99), &[21, 256]);
        let mut t2 = Tape::new();
        let p = params.bind(&mut t2);
        let tok = TokenFeatures {
            joints: t2.leaf(&j),
            skeleton: t2.leaf(&s),
            stage: 0,
        };
        let b = interaction_block_forward(&mut t2, &p, &cfg, 0, &tok).unwrap();
        assert_eq!(t1.value(a.joints), t2.value(b.joints));
        assert_ne!(t1.value(a.skeleton), t2.value(b.skeleton));
    }

    #[test]
    fn block_matches_composition_of_ops() {
        let cfg = ModelConfig::miniature();
        let params = cfg.init_params(11);
        let (mut tape, tok, out) = block_case(&cfg, &params, 12);
        let p = params.bind(&mut tape);
        let branch = |tape: &mut Tape, pre: &str, x: Var| {
            let g = coord_attention_forward(tape, &p, pre, x).unwrap();
            let m = mhsa_forward(tape, &p, pre, cfg.heads, g).unwrap();
            let w = p.get(&format!("{pre}.linear.weight")).unwrap();
            let b = p.get(&format!("{pre}.linear.bias")).unwrap();
            tape.linear(m, w, Some(b)).unwrap()
        };
        let j = branch(&mut tape, "block0.joint", tok.joints);
        let s = branch(&mut tape, "block0.skeleton", tok.skeleton);
        let fuse = p.get("block0.fuse.weight").unwrap();
        let f = tape.matmul(s, fuse).unwrap();
        let j = tape.add(j, f).unwrap();
        let pj = tape
            .linear(j, p.get("block0.joint.proj.weight").unwrap(), Some(p.get("block0.joint.proj.bias").unwrap()))
            .unwrap();
        let ps = tape
            .linear(s, p.get("block0.skeleton.proj.weight").unwrap(), Some(p.get("block0.skeleton.proj.bias").unwrap()))
            .unwrap();
        assert_eq!(tape.value(pj), tape.value(out.joints));
        assert_eq!(tape.value(ps), tape.value(out.skeleton));
    }

    #[test]
    fn upsample_schedule_and_final_stage_error() {
        let cfg = ModelConfig::default();
        let params = cfg.init_params(3);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let mut tok = TokenFeatures {
            joints: tape.leaf(&Tensor::ones([21, 256])),
            skeleton: tape.leaf(&Tensor::ones([21, 256])),
            stage: 0,
        };
        tok = token_upsample(&mut tape, &p, &cfg, &tok).unwrap();
        assert_eq!(tape.shape(tok.joints), &[84, 128]);
        tok = token_upsample(&mut tape, &p, &cfg, &tok).unwrap();
        assert_eq!(tape.shape(tok.skeleton), &[336, 64]);
        assert!(matches!(token_upsample(&mut tape, &p, &cfg, &tok), Err(Error::Contract(_))));
    }

    #[test]
    fn upsample_splits_projected_channels_in_order() {
        let cfg = ModelConfig::miniature(); // 4 x 6 -> 8 x 4
        let mut params = cfg.init_params(0);
        // identity-like projection: output channel o copies input channel o % 6
        let w = params.get_mut("up0.joint.weight").unwrap();
        let mut data = vec![0.0; 6 * 8];
        for o in 0..8 {
            data[(o % 6) * 8 + o] = 1.0;
        }
        w.data_mut().copy_from_slice(&data);
        params.get_mut("up0.joint.bias").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[4, 6]);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let tok = TokenFeatures {
            joints: tape.leaf(&x),
            skeleton: tape.leaf(&x),
            stage: 0,
        };
        let up = token_upsample(&mut tape, &p, &cfg, &tok).unwrap();
        let y = tape.tensor(up.joints);
        for t in 0..4 {
            for sub in 0..2 {
                for c in 0..4 {
                    assert_eq!(y.at(&[2 * t + sub, c]), x.at(&[t, (sub * 4 + c) % 6]));
                }
            }
        }
    }
}

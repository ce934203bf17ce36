//! 2-D keypoint generator and the expansion block.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::Bound;
use crate::tensor::{Tape, Var};

/// Joint and skeleton token features at one interaction stage. Both share
/// the same `T x C` shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenFeatures {
    pub joints: Var,
    pub skeleton: Var,
    /// Zero-based interaction stage.
    pub stage: usize,
}

/// Flattens the backbone grid and regresses `J x 2` keypoints in
/// normalised crop coordinates. No output activation.
pub fn keypoints2d_forward(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, features: Var) -> Result<Var> {
    let (c, g) = (cfg.backbone.out_channels(), cfg.backbone.grid());
    if tape.shape(features) != [c, g, g] {
        return Err(Error::dim(
            "keypoints2d",
            format!("expected features [{c}, {g}, {g}], got {:?}", tape.shape(features)),
        ));
    }
    let flat = tape.reshape(features, [1, c * g * g])?;
    let out = tape.linear(flat, params.get("kp2d.weight")?, Some(params.get("kp2d.bias")?))?;
    tape.reshape(out, [cfg.joints, 2])
}

/// Maps `[0, 1]` crop coordinates onto the sampler's `[-1, 1]` range.
pub fn normalize_coords(tape: &mut Tape, kp2d: Var) -> Var {
    let doubled = tape.scale(kp2d, 2.0);
    tape.add_scalar(doubled, -1.0)
}

/// Inverse of [`normalize_coords`] for a single value.
pub fn denormalize_coord(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// Intermediate values of the expansion block.
#[derive(Clone, Copy, Debug)]
pub struct Expansion {
    /// Transposed-convolution output, `C x H' x W'`.
    pub upsampled: Var,
    /// Feature rows sampled at the keypoints, `J x C`.
    pub sampled: Var,
    pub tokens: TokenFeatures,
}

/// Upsamples the backbone grid, samples it at the keypoints and builds the
/// first-stage joint and skeleton tokens.
///
/// Each skeleton token concatenates the sample at a joint with the sample
/// at its kinematic parent before the linear map.
pub fn expansion_forward(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    features: Var,
    kp2d: Var,
) -> Result<TokenFeatures> {
    expansion_detailed(tape, params, cfg, features, kp2d).map(|e| e.tokens)
}

pub fn expansion_detailed(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    features: Var,
    kp2d: Var,
) -> Result<Expansion> {
    let upsampled = tape.conv_transpose2d(
        features,
        params.get("expansion.upsample.weight")?,
        Some(params.get("expansion.upsample.bias")?),
        cfg.upsample_kernel,
    )?;
    let grid = normalize_coords(tape, kp2d);
    let sampled = tape.grid_sample(upsampled, grid)?;
    let joints = tape.linear(
        sampled,
        params.get("expansion.joint.weight")?,
        Some(params.get("expansion.joint.bias")?),
    )?;
    let parents = tape.gather_rows(sampled, &cfg.parents)?;
    let pairs = tape.concat_cols(&[sampled, parents])?;
    let skeleton = tape.linear(
        pairs,
        params.get("expansion.skeleton.weight")?,
        Some(params.get("expansion.skeleton.bias")?),
    )?;
    Ok(Expansion {
        upsampled,
        sampled,
        tokens: TokenFeatures {
            joints,
            skeleton,
            stage: 0,
        },
    })
}

//! Network configuration, parameter layout and the end-to-end forward pass.

use crate::backbone::{backbone_forward, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{expansion_forward, keypoints2d_forward, TokenFeatures};
use crate::interaction::{interaction_block_forward, token_upsample};
use crate::mesh::{joints3d_forward, mesh_token_forward, JointRegressor};
use crate::params::{Bound, NetworkParams, ParamSpec};
use crate::tensor::{Tape, Tensor, Var};

/// Kinematic parent of each joint in the 21-joint hand order
/// (wrist, then thumb/index/middle/ring/pinky from base to tip).
/// The wrist is its own parent.
pub const HAND_PARENTS: [usize; 21] = [
    0, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19,
];

/// Maps the regressor's output order (16 regressed joints in MANO order
/// followed by the thumb, index, middle, ring and pinky tips) onto the
/// 21-joint hand order.
pub const MANO_TO_HAND_ORDER: [usize; 21] = [
    0, 13, 14, 15, 16, 1, 2, 3, 17, 4, 5, 6, 18, 10, 11, 12, 19, 7, 8, 9, 20,
];

/// Placeholder fingertip vertex indices. Replace them with the indices that
/// belong to the regressor asset in use.
pub const PLACEHOLDER_TIP_INDICES: [usize; 5] = [150, 300, 450, 600, 750];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Joint tokens in the first interaction stage (and 2-D / 3-D keypoints).
    pub joints: usize,
    pub vertices: usize,
    pub heads: usize,
    /// Key width per interaction block; the block width is `heads * d_k`.
    pub d_k: Vec<usize>,
    /// Sub-tokens produced per token between blocks.
    pub token_upsample: usize,
    /// Kernel and stride of the expansion block's transposed convolution.
    pub upsample_kernel: usize,
    /// Skeleton-to-joint fusion inside every block.
    pub fusion: bool,
    /// Run coordinate attention and self-attention on the skeleton branch too.
    pub skeleton_attention: bool,
    pub parents: Vec<usize>,
    pub joint_order: Vec<usize>,
    pub tip_indices: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            joints: 21,
            vertices: 778,
            heads: 8,
            d_k: vec![32, 16, 8],
            token_upsample: 4,
            upsample_kernel: 2,
            fusion: true,
            skeleton_attention: true,
            parents: HAND_PARENTS.to_vec(),
            joint_order: MANO_TO_HAND_ORDER.to_vec(),
            tip_indices: PLACEHOLDER_TIP_INDICES.to_vec(),
        }
    }
}

impl ModelConfig {
    /// Tiny but structurally complete configuration: 8x8 input, four joint
    /// tokens, two heads. Used for finite-difference checks.
    pub fn miniature() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                stage_channels: vec![3, 4],
                input_size: 8,
                ..Default::default()
            },
            joints: 4,
            vertices: 10,
            heads: 2,
            d_k: vec![3, 2, 2],
            token_upsample: 2,
            upsample_kernel: 2,
            fusion: true,
            skeleton_attention: true,
            parents: vec![0, 0, 1, 0],
            joint_order: vec![0, 3, 1, 2],
            tip_indices: vec![7],
        }
    }

    pub fn blocks(&self) -> usize {
        self.d_k.len()
    }

    pub fn block_channels(&self, block: usize) -> usize {
        self.heads * self.d_k[block]
    }

    pub fn block_tokens(&self, block: usize) -> usize {
        self.joints * self.token_upsample.pow(block as u32)
    }

    /// Rows of the joint regressor (joints not taken from fingertip vertices).
    pub fn regressed_joints(&self) -> usize {
        self.joints - self.tip_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let err = |m: String| Err(Error::Config(m));
        if self.joints == 0 || self.vertices == 0 {
            return err("model.joints and model.vertices must be positive".into());
        }
        if self.heads == 0 || self.d_k.is_empty() || self.d_k.contains(&0) {
            return err("model.heads and model.d_k must be positive".into());
        }
        if self.token_upsample == 0 || self.upsample_kernel == 0 {
            return err("model.token_upsample and model.upsample_kernel must be positive".into());
        }
        if self.parents.len() != self.joints {
            return err(format!(
                "model.parents has {} entries for {} joints",
                self.parents.len(),
                self.joints
            ));
        }
        if let Some(&p) = self.parents.iter().find(|&&p| p >= self.joints) {
            return err(format!("model.parents entry {p} is not a joint"));
        }
        if self.tip_indices.len() >= self.joints {
            return err("more fingertip indices than joints".into());
        }
        let mut seen = vec![false; self.joints];
        if self.joint_order.len() != self.joints {
            return err("model.joint_order must be a permutation of all joints".into());
        }
        for &j in &self.joint_order {
            if j >= self.joints || std::mem::replace(&mut seen[j], true) {
                return err("model.joint_order must be a permutation of all joints".into());
            }
        }
        crate::mesh::validate_tips(&self.tip_indices, self.vertices)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Parameter layout of the whole network in initialisation order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone.param_specs();
        specs.extend(self.head_param_specs());
        specs
    }

    fn head_param_specs(&self) -> Vec<ParamSpec> {
        let cb = self.backbone.out_channels();
        let g = self.backbone.grid();
        let c1 = self.block_channels(0);
        let k = self.upsample_kernel;
        let flat = cb * g * g;
        let mut s = vec![
            ParamSpec::uniform("kp2d.weight", [flat, 2 * self.joints], flat),
            ParamSpec::constant("kp2d.bias", [2 * self.joints], 0.5),
            ParamSpec::uniform("expansion.upsample.weight", [cb, c1, k, k], cb),
            ParamSpec::uniform("expansion.upsample.bias", [c1], cb),
            ParamSpec::uniform("expansion.joint.weight", [c1, c1], c1),
            ParamSpec::uniform("expansion.joint.bias", [c1], c1),
            ParamSpec::uniform("expansion.skeleton.weight", [2 * c1, c1], 2 * c1),
            ParamSpec::uniform("expansion.skeleton.bias", [c1], 2 * c1),
        ];
        for b in 0..self.blocks() {
            let c = self.block_channels(b);
            for branch in ["joint", "skeleton"] {
                let pre = format!("block{b}.{branch}");
                if branch == "joint" || self.skeleton_attention {
                    s.push(ParamSpec::uniform(format!("{pre}.coord.weight"), [c, 3], 3));
                    s.push(ParamSpec::constant(format!("{pre}.coord.bias"), [c], 0.0));
                    s.push(ParamSpec::constant(format!("{pre}.norm.gain"), [c], 1.0));
                    s.push(ParamSpec::constant(format!("{pre}.norm.shift"), [c], 0.0));
                    for w in ["wq", "wk", "wv", "wo"] {
                        s.push(ParamSpec::uniform(format!("{pre}.attn.{w}"), [c, c], c));
                    }
                    s.push(ParamSpec::uniform(format!("{pre}.attn.bo"), [c], c));
                }
                for lin in ["linear", "proj"] {
                    s.push(ParamSpec::uniform(format!("{pre}.{lin}.weight"), [c, c], c));
                    s.push(ParamSpec::uniform(format!("{pre}.{lin}.bias"), [c], c));
                }
            }
            if self.fusion {
                s.push(ParamSpec::uniform(format!("block{b}.fuse.weight"), [c, c], c));
            }
            if b + 1 < self.blocks() {
                let out = self.token_upsample * self.block_channels(b + 1);
                for branch in ["joint", "skeleton"] {
                    s.push(ParamSpec::uniform(format!("up{b}.{branch}.weight"), [c, out], c));
                    s.push(ParamSpec::uniform(format!("up{b}.{branch}.bias"), [out], c));
                }
            }
        }
        let last = self.blocks() - 1;
        let (t, c) = (self.block_tokens(last), self.block_channels(last));
        s.extend([
            ParamSpec::uniform("mesh.lift", [self.vertices, t], t),
            ParamSpec::uniform("mesh.channel.weight", [2 * c, c], 2 * c),
            ParamSpec::uniform("mesh.channel.bias", [c], 2 * c),
            ParamSpec::uniform("mesh.vertex.weight", [c, 3], c),
            ParamSpec::uniform("mesh.vertex.bias", [3], c),
        ]);
        s
    }

    pub fn init_params(&self, seed: u64) -> NetworkParams {
        NetworkParams::init(&self.param_specs(), seed)
    }

    /// Checks that `params` has exactly the layout this configuration
    /// expects, reporting the first offending path.
    pub fn check_params(&self, params: &NetworkParams) -> Result<()> {
        let specs = self.param_specs();
        for spec in &specs {
            let t = params
                .get(&spec.path)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{}`", spec.path)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    spec.path,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if params.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.path.as_str()).collect();
            let extra = params
                .iter()
                .map(|(p, _)| p.as_str())
                .find(|p| !known.contains(p))
                .unwrap_or("?");
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Every tape value produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    /// Normalised `[0, 1]` crop coordinates, `J x 2`.
    pub kp2d: Var,
    /// Token features entering each interaction block, then the refined pair.
    pub stages: Vec<TokenFeatures>,
    pub refined: TokenFeatures,
    pub mesh_tokens: Var,
    /// Root-relative vertex positions in metres, `V x 3`.
    pub vertices: Var,
    /// `J x 3`.
    pub joints3d: Var,
}

/// Plain-value copy of the three network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kp2d: Tensor,
    pub joints3d: Tensor,
    pub vertices: Tensor,
}

#[derive(Clone, Debug)]
pub struct HandNet {
    pub config: ModelConfig,
    pub regressor: JointRegressor,
}

impl HandNet {
    pub fn new(config: ModelConfig, regressor: JointRegressor) -> Result<Self> {
        config.validate()?;
        if regressor.matrix.shape() != [config.regressed_joints(), config.vertices] {
            return Err(Error::Config(format!(
                "regressor is {:?}, model needs [{}, {}]",
                regressor.matrix.shape(),
                config.regressed_joints(),
                config.vertices
            )));
        }
        if regressor.tip_indices != config.tip_indices || regressor.joint_order != config.joint_order {
            return Err(Error::Config(
                "regressor tip indices / joint order disagree with the model config".into(),
            ));
        }
        Ok(HandNet { config, regressor })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let features = backbone_forward(tape, params, &cfg.backbone, image)?;
        let kp2d = keypoints2d_forward(tape, params, cfg, features)?;
        let mut tokens = expansion_forward(tape, params, cfg, features, kp2d)?;
        let mut stages = Vec::with_capacity(cfg.blocks());
        for b in 0..cfg.blocks() {
            stages.push(tokens);
            tokens = interaction_block_forward(tape, params, cfg, b, &tokens)?;
            if b + 1 < cfg.blocks() {
                tokens = token_upsample(tape, params, cfg, &tokens)?;
            }
        }
        let mesh = mesh_token_forward(tape, params, cfg, &tokens)?;
        let joints3d = joints3d_forward(tape, mesh.coords, &self.regressor)?;
        Ok(ForwardOutput {
            features,
            kp2d,
            stages,
            refined: tokens,
            mesh_tokens: mesh.tokens,
            vertices: mesh.coords,
            joints3d,
        })
    }

    /// Single-image inference returning owned outputs.
    pub fn predict(&self, params: &NetworkParams, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let img = tape.leaf(image);
        let out = self.forward(&mut tape, &bound, img)?;
        Ok(Prediction {
            kp2d: tape.tensor(out.kp2d),
            joints3d: tape.tensor(out.joints3d),
            vertices: tape.tensor(out.vertices),
        })
    }
}

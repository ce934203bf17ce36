//! Small convolutional feature extractor.
//!
//! A stack of stride-2 3x3 convolutions with ReLU. With the default five
//! stages a 224x224 crop becomes a 640-channel 7x7 grid.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSpec};
use crate::tensor::{Tape, Var};

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub activation: Activation,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 128, 640],
            activation: Activation::Relu,
            input_size: 224,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated: at least one stage")
    }

    /// Side length of the output grid.
    pub fn grid(&self) -> usize {
        self.input_size >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "backbone.stage_channels must list positive channel counts".into(),
            ));
        }
        let stride = 1usize << self.stages();
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "backbone.input_size {} is not divisible by 2^{}",
                self.input_size,
                self.stages()
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &co) in self.stage_channels.iter().enumerate() {
            let fan_in = cin * KERNEL * KERNEL;
            out.push(ParamSpec::uniform(
                format!("backbone.stage{i}.weight"),
                [co, cin, KERNEL, KERNEL],
                fan_in,
            ));
            out.push(ParamSpec::uniform(format!("backbone.stage{i}.bias"), [co], fan_in));
            cin = co;
        }
        out
    }
}

/// Runs the stack on a `3 x S x S` image.
pub fn backbone_forward(tape: &mut Tape, params: &Bound, cfg: &BackboneConfig, image: Var) -> Result<Var> {
    let s = cfg.input_size;
    if tape.shape(image) != [3, s, s] {
        return Err(Error::dim(
            "backbone",
            format!("expected image of shape [3, {s}, {s}], got {:?}", tape.shape(image)),
        ));
    }
    let mut x = image;
    for i in 0..cfg.stages() {
        let w = params.get(&format!("backbone.stage{i}.weight"))?;
        let b = params.get(&format!("backbone.stage{i}.bias"))?;
        x = tape.conv2d(x, w, Some(b), 2, 1)?;
        x = match cfg.activation {
            Activation::Relu => tape.relu(x),
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NetworkParams;
    use crate::tensor::Tensor;

    fn bind_backbone(cfg: &BackboneConfig, seed: u64, tape: &mut Tape) -> Bound {
        let params = NetworkParams::init(&cfg.param_specs(), seed);
        params.bind(tape)
    }

    #[test]
    fn default_reaches_seven_by_seven() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), 7);
        let mut tape = Tape::new();
        let p = bind_backbone(&cfg, 1, &mut tape);
        let img = tape.leaf(&Tensor::full([3, 224, 224], 0.3));
        let f = backbone_forward(&mut tape, &p, &cfg, img).unwrap();
        assert_eq!(tape.shape(f), &[640, 7, 7]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let cfg = BackboneConfig {
            stage_channels: vec![4, 8],
            input_size: 16,
            ..Default::default()
        };
        let mut params = NetworkParams::init(&cfg.param_specs(), 3);
        for (name, t) in params.iter_mut() {
            if name.ends_with("bias") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let img = tape.leaf(&Tensor::zeros([3, 16, 16]));
        let f = backbone_forward(&mut tape, &p, &cfg, img).unwrap();
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = BackboneConfig {
            stage_channels: vec![2],
            input_size: 8,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let p = bind_backbone(&cfg, 0, &mut tape);
        let img = tape.leaf(&Tensor::zeros([3, 8, 9]));
        assert!(matches!(
            backbone_forward(&mut tape, &p, &cfg, img),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let cfg = BackboneConfig {
            stage_channels: vec![2, 2, 2],
            input_size: 12,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

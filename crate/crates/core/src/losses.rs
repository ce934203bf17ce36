//! Supervised set losses and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub k_2d: f64,
    pub k_3d: f64,
    pub k_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            k_2d: 1.0,
            k_3d: 10.0,
            k_v: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.k_2d, self.k_3d, self.k_v].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Norm applied to each point's difference vector before averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PerPointNorm {
    /// Sum of absolute component differences.
    #[default]
    L1,
    /// Euclidean distance.
    L2,
}

impl std::str::FromStr for PerPointNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(PerPointNorm::L1),
            "l2" => Ok(PerPointNorm::L2),
            other => Err(Error::Config(format!("per_point_norm must be l1 or l2, got `{other}`"))),
        }
    }
}

/// Mean over the `N` rows of the per-point norm of `pred - gt`.
pub fn set_loss(tape: &mut Tape, pred: Var, gt: Var, norm: PerPointNorm) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) || tape.shape(pred).len() != 2 {
        return Err(Error::dim(
            "set_loss",
            format!("{:?} vs {:?}", tape.shape(pred), tape.shape(gt)),
        ));
    }
    let n = tape.shape(pred)[0] as f64;
    let diff = tape.sub(pred, gt)?;
    let total = match norm {
        PerPointNorm::L1 => {
            let a = tape.abs(diff);
            tape.sum(a)
        }
        PerPointNorm::L2 => {
            let r = tape.row_norm(diff)?;
            tape.sum(r)
        }
    };
    Ok(tape.scale(total, 1.0 / n))
}

pub fn l1_set_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    set_loss(tape, pred, gt, PerPointNorm::L1)
}

pub fn total_loss(tape: &mut Tape, l2d: Var, l3d: Var, lv: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l2d, w.k_2d);
    let b = tape.scale(l3d, w.k_3d);
    let c = tape.scale(lv, w.k_v);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn loss_of(pred: &[f64], gt: &[f64], d: usize, norm: PerPointNorm) -> f64 {
        let mut tape = Tape::new();
        let n = pred.len() / d;
        let p = tape.constant([n, d], pred.to_vec()).unwrap();
        let g = tape.constant([n, d], gt.to_vec()).unwrap();
        let l = set_loss(&mut tape, p, g, norm).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn single_point_is_l1_not_euclidean() {
        assert_eq!(loss_of(&[3.0, -4.0], &[0.0, 0.0], 2, PerPointNorm::L1), 7.0);
        assert_eq!(loss_of(&[3.0, -4.0], &[0.0, 0.0], 2, PerPointNorm::L2), 5.0);
        assert_eq!(loss_of(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 3, PerPointNorm::L1), 0.0);
    }

    fn total_of(l: [f64; 3], w: LossWeights) -> f64 {
        let mut tape = Tape::new();
        let [a, b, c] = l.map(|v| tape.leaf(&Tensor::scalar(v)));
        let t = total_loss(&mut tape, a, b, c, &w).unwrap();
        tape.value(t)[0]
    }

    #[test]
    fn total_uses_weights() {
        assert_eq!(total_of([1.0, 1.0, 1.0], LossWeights::default()), 21.0);
        assert_eq!(total_of([0.0, 0.0, 0.0], LossWeights::default()), 0.0);
        let ablation = LossWeights {
            k_2d: 0.0,
            k_3d: 0.0,
            k_v: 1.0,
        };
        assert_eq!(total_of([0.3, 0.7, 0.125], ablation), 0.125);
        assert!(LossWeights { k_2d: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let p = tape.constant([21, 3], vec![0.0; 63]).unwrap();
        let g = tape.constant([21, 2], vec![0.0; 42]).unwrap();
        assert!(matches!(l1_set_loss(&mut tape, p, g), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn matches_loop_oracle_and_scales(
            pred in prop::collection::vec(-2.0f64..2.0, 63),
            gt in prop::collection::vec(-2.0f64..2.0, 63),
            c in -5.0f64..5.0,
        ) {
            let mut oracle = 0.0;
            for r in 0..21 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (pred[r * 3 + k] - gt[r * 3 + k]).abs();
                }
                oracle += s;
            }
            oracle /= 21.0;
            let got = loss_of(&pred, &gt, 3, PerPointNorm::L1);
            prop_assert!((got - oracle).abs() <= 1e-12);
            prop_assert!(got >= 0.0);
            let sp: Vec<f64> = pred.iter().map(|v| v * c).collect();
            let sg: Vec<f64> = gt.iter().map(|v| v * c).collect();
            let scaled = loss_of(&sp, &sg, 3, PerPointNorm::L1);
            prop_assert!((scaled - c.abs() * got).abs() <= 1e-9 * (1.0 + got));
        }
    }
}

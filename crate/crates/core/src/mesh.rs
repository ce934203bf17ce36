//! Mesh token generator and 3-D joint regression.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::TokenFeatures;
use crate::model::ModelConfig;
use crate::params::Bound;
use crate::tensor::{Tape, Tensor, Var};

const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Linear map from mesh vertices to skeletal joints, plus the vertices
/// copied directly as fingertips.
#[derive(Clone, Debug, PartialEq)]
pub struct JointRegressor {
    /// `rows x V`, non-negative and row-stochastic.
    pub matrix: Tensor,
    pub tip_indices: Vec<usize>,
    /// Output joint `i` is row `joint_order[i]` of `[regressed; tips]`.
    pub joint_order: Vec<usize>,
}

pub fn validate_tips(tips: &[usize], vertices: usize) -> Result<()> {
    for (i, &t) in tips.iter().enumerate() {
        if t >= vertices {
            return Err(Error::Asset(format!(
                "fingertip index {t} is out of range for {vertices} vertices"
            )));
        }
        if tips[..i].contains(&t) {
            return Err(Error::Asset(format!("fingertip index {t} is repeated")));
        }
    }
    Ok(())
}

impl JointRegressor {
    pub fn new(matrix: Tensor, tip_indices: Vec<usize>, joint_order: Vec<usize>) -> Result<Self> {
        let reg = JointRegressor {
            matrix,
            tip_indices,
            joint_order,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn vertices(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.rows() + self.tip_indices.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.ndim() != 2 {
            return Err(Error::Asset(format!(
                "regressor must be a matrix, got shape {:?}",
                self.matrix.shape()
            )));
        }
        for r in 0..self.rows() {
            let row = self.matrix.row(r);
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Asset(format!("regressor row {r} has invalid weight {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Asset(format!("regressor row {r} sums to {sum}, expected 1")));
            }
        }
        validate_tips(&self.tip_indices, self.vertices())?;
        let n = self.joints();
        let mut seen = vec![false; n];
        if self.joint_order.len() != n
            || self
                .joint_order
                .iter()
                .any(|&j| j >= n || std::mem::replace(&mut seen[j], true))
        {
            return Err(Error::Asset(format!(
                "joint order must be a permutation of 0..{n}"
            )));
        }
        Ok(())
    }

    /// Random sparse row-stochastic regressor: each row mixes a handful of
    /// vertices with positive weights.
    pub fn synthetic(
        seed: u64,
        rows: usize,
        vertices: usize,
        tip_indices: Vec<usize>,
        joint_order: Vec<usize>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = vertices.min(8);
        let mut data = vec![0.0; rows * vertices];
        for r in 0..rows {
            let row = &mut data[r * vertices..(r + 1) * vertices];
            for _ in 0..support {
                row[rng.gen_range(0..vertices)] += rng.gen_range(0.1..1.0);
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        Self::new(Tensor::new([rows, vertices], data)?, tip_indices, joint_order)
    }

    /// Reads a whitespace-separated matrix: `rows cols` then row-major values.
    pub fn load(path: &Path, tip_indices: Vec<usize>, joint_order: Vec<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Asset(format!("{}: {m}", path.display()));
        let mut tokens = text.split_whitespace();
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| bad(format!("missing {what}")))?
                .parse()
                .map_err(|e| bad(format!("bad {what}: {e}")))
        };
        let rows = dim("row count")?;
        let cols = dim("column count")?;
        let values = tokens
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("bad value `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(bad(format!(
                "header says {rows} x {cols} but {} values follow",
                values.len()
            )));
        }
        Self::new(Tensor::new([rows, cols], values)?, tip_indices, joint_order)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{} {}\n", self.rows(), self.vertices());
        for r in 0..self.rows() {
            let line: Vec<String> = self.matrix.row(r).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Applies the regressor to plain `V x 3` coordinates.
    pub fn apply(&self, coords: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = tape.leaf(coords);
        let j = joints3d_forward(&mut tape, c, self)?;
        Ok(tape.tensor(j))
    }
}

/// Output of the mesh token generator.
#[derive(Clone, Copy, Debug)]
pub struct MeshVars {
    /// `V x C_last`.
    pub tokens: Var,
    /// `V x 3`.
    pub coords: Var,
}

/// Lifts the final-stage token pair to per-vertex tokens and coordinates.
pub fn mesh_token_forward(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    tokens: &TokenFeatures,
) -> Result<MeshVars> {
    let last = cfg.blocks() - 1;
    if tokens.stage != last {
        return Err(Error::Contract(format!(
            "mesh generator needs stage {last} tokens, got stage {}",
            tokens.stage
        )));
    }
    let x = tape.concat_cols(&[tokens.joints, tokens.skeleton])?;
    let lifted = tape.matmul(params.get("mesh.lift")?, x)?;
    let mesh_tokens = tape.linear(
        lifted,
        params.get("mesh.channel.weight")?,
        Some(params.get("mesh.channel.bias")?),
    )?;
    let coords = tape.linear(
        mesh_tokens,
        params.get("mesh.vertex.weight")?,
        Some(params.get("mesh.vertex.bias")?),
    )?;
    Ok(MeshVars {
        tokens: mesh_tokens,
        coords,
    })
}

/// Regressed joints and fingertip vertices, reordered into the output
/// joint layout.
pub fn joints3d_forward(tape: &mut Tape, coords: Var, reg: &JointRegressor) -> Result<Var> {
    if tape.shape(coords) != [reg.vertices(), 3] {
        return Err(Error::dim(
            "joints3d",
            format!("expected [{}, 3] vertices, got {:?}", reg.vertices(), tape.shape(coords)),
        ));
    }
    let m = tape.constant(reg.matrix.shape(), reg.matrix.data().to_vec())?;
    let regressed = tape.matmul(m, coords)?;
    let tips = tape.gather_rows(coords, &reg.tip_indices)?;
    let all = tape.concat_rows(&[regressed, tips])?;
    tape.gather_rows(all, &reg.joint_order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MANO_TO_HAND_ORDER, PLACEHOLDER_TIP_INDICES};

    fn full_regressor(seed: u64) -> JointRegressor {
        JointRegressor::synthetic(seed, 16, 778, PLACEHOLDER_TIP_INDICES.to_vec(), MANO_TO_HAND_ORDER.to_vec())
            .unwrap()
    }

    fn random_mesh(seed: u64, v: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([v, 3], (0..v * 3).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap()
    }

    #[test]
    fn synthetic_regressor_is_row_stochastic() {
        let reg = full_regressor(1);
        for r in 0..16 {
            assert!((reg.matrix.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(reg.joints(), 21);
    }

    #[test]
    fn constant_mesh_gives_constant_joints() {
        let reg = full_regressor(2);
        let p = [0.01, -0.2, 0.35];
        let mesh = Tensor::new([778, 3], p.repeat(778)).unwrap();
        let j = reg.apply(&mesh).unwrap();
        assert_eq!(j.shape(), &[21, 3]);
        for r in 0..21 {
            for (c, pc) in p.iter().enumerate() {
                assert!((j.at(&[r, c]) - pc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joints_match_row_dot_products_and_tip_slices() {
        let reg = full_regressor(3);
        let mesh = random_mesh(4, 778);
        let j = reg.apply(&mesh).unwrap();
        for (out, &src) in MANO_TO_HAND_ORDER.iter().enumerate() {
            for c in 0..3 {
                let want = if src < 16 {
                    (0..778).map(|v| reg.matrix.at(&[src, v]) * mesh.at(&[v, c])).sum::<f64>()
                } else {
                    mesh.at(&[PLACEHOLDER_TIP_INDICES[src - 16], c])
                };
                assert!((j.at(&[out, c]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invalid_regressors_are_asset_errors() {
        let order: Vec<usize> = (0..3).collect();
        let uneven = Tensor::new([2, 3], vec![0.5, 0.5, 0.0, 0.2, 0.2, 0.2]).unwrap();
        assert!(matches!(JointRegressor::new(uneven, vec![0], order.clone()), Err(Error::Asset(_))));
        let negative = Tensor::new([2, 3], vec![1.5, -0.5, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(JointRegressor::new(negative, vec![0], order.clone()), Err(Error::Asset(_))));
        let ok = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(JointRegressor::new(ok.clone(), vec![3], order.clone()), Err(Error::Asset(_))));
        assert!(matches!(JointRegressor::new(ok.clone(), vec![0], vec![0, 0, 1]), Err(Error::Asset(_))));
        assert!(JointRegressor::new(ok, vec![1], order).is_ok());
        assert!(validate_tips(&[4, 4], 10).is_err());
    }

    #[test]
    fn regressor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.txt");
        let reg = JointRegressor::synthetic(5, 3, 12, vec![2, 7], vec![4, 0, 1, 2, 3]).unwrap();
        reg.save(&path).unwrap();
        let back = JointRegressor::load(&path, vec![2, 7], vec![4, 0, 1, 2, 3]).unwrap();
        assert_eq!(back, reg);
        std::fs::write(&path, "2 2\n1 0\n").unwrap();
        assert!(matches!(JointRegressor::load(&path, vec![], vec![0, 1]), Err(Error::Asset(_))));
    }

    fn mesh_case(zero: bool) -> (Tape, ModelConfig, crate::params::NetworkParams, Tensor, Tensor, MeshVars) {
        let cfg = ModelConfig::miniature();
        let mut params = cfg.init_params(8);
        if zero {
            for (p, t) in params.iter_mut() {
                if p.starts_with("mesh.") {
                    t.data_mut().fill(0.0);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t, c) = (cfg.block_tokens(2), cfg.block_channels(2));
        let mut rnd = || Tensor::new([t, c], (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (j, s) = (rnd(), rnd());
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let tok = TokenFeatures {
            joints: tape.leaf(&j),
            skeleton: tape.leaf(&s),
            stage: 2,
        };
        let out = mesh_token_forward(&mut tape, &p, &cfg, &tok).unwrap();
        (tape, cfg, params, j, s, out)
    }

    #[test]
    fn zero_mesh_weights_put_vertices_at_origin() {
        let (tape, _, _, _, _, out) = mesh_case(true);
        assert_eq!(tape.shape(out.coords), &[10, 3]);
        assert!(tape.value(out.coords).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mesh_generator_matches_explicit_products() {
        let (tape, cfg, params, j, s, out) = mesh_case(false);
        let (t, c, v) = (cfg.block_tokens(2), cfg.block_channels(2), cfg.vertices);
        let x = |r: usize, k: usize| if k < c { j.at(&[r, k]) } else { s.at(&[r, k - c]) };
        let lift = params.get("mesh.lift").unwrap();
        let wc = params.get("mesh.channel.weight").unwrap();
        let bc = params.get("mesh.channel.bias").unwrap();
        let wv = params.get("mesh.vertex.weight").unwrap();
        let bv = params.get("mesh.vertex.bias").unwrap();
        for vi in 0..v {
            let lifted: Vec<f64> = (0..2 * c)
                .map(|k| (0..t).map(|r| lift.at(&[vi, r]) * x(r, k)).sum())
                .collect();
            let tok: Vec<f64> = (0..c)
                .map(|o| bc.data()[o] + (0..2 * c).map(|k| lifted[k] * wc.at(&[k, o])).sum::<f64>())
                .collect();
            for o in 0..3 {
                let want = bv.data()[o] + (0..c).map(|k| tok[k] * wv.at(&[k, o])).sum::<f64>();
                assert!((tape.value(out.coords)[vi * 3 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mesh_generator_rejects_early_stage() {
        let cfg = ModelConfig::miniature();
        let params = cfg.init_params(0);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let tok = TokenFeatures {
            joints: tape.leaf(&Tensor::ones([4, 6])),
            skeleton: tape.leaf(&Tensor::ones([4, 6])),
            stage: 0,
        };
        assert!(matches!(mesh_token_forward(&mut tape, &p, &cfg, &tok), Err(Error::Contract(_))));
    }
}

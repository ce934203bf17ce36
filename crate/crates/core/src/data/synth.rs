//! Seeded synthetic hands for pipeline testing.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{project_points, write_manifest, CameraIntrinsics, HandSample};
use crate::error::{Error, Result};
use crate::mesh::JointRegressor;
use crate::metrics::points;
use crate::tensor::Tensor;

/// Parameters of the synthetic linear hand model and camera.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Number of shape basis vectors.
    pub basis: usize,
    /// Per-coordinate standard deviation of each basis vector, metres.
    pub basis_scale: f64,
    /// Camera-space depth of the wrist, metres.
    pub depth: f64,
    /// Focal length in pixels for a 224-pixel crop; scaled with `image_size`.
    pub focal_224: f64,
    pub regressor: JointRegressor,
}

impl SynthConfig {
    pub fn new(image_size: usize, regressor: JointRegressor) -> Self {
        SynthConfig {
            image_size,
            basis: 10,
            basis_scale: 0.004,
            depth: 0.6,
            focal_224: 500.0,
            regressor,
        }
    }

    pub fn camera(&self) -> CameraIntrinsics {
        let s = self.image_size as f64;
        let f = self.focal_224 * s / 224.0;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: s / 2.0,
            cy: s / 2.0,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic noise image for one sample id.
pub fn noise_image(id: &str, seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(id) ^ seed);
    let data = (0..3 * size * size).map(|_| rng.gen::<u8>() as f64 / 255.0).collect();
    Tensor::new([3, size, size], data).expect("positive size")
}

/// Palm slab plus five finger segments, wrist near the origin, `y` pointing
/// towards the fingertips.
fn mean_hand(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    const FINGERS: [([f64; 2], [f64; 2]); 5] = [
        ([-0.035, 0.02], [-0.07, 0.06]),
        ([-0.02, 0.07], [-0.025, 0.14]),
        ([0.0, 0.075], [0.0, 0.15]),
        ([0.018, 0.07], [0.022, 0.14]),
        ([0.035, 0.065], [0.045, 0.12]),
    ];
    let palm = (v * 2 / 5).max(1);
    let mut out = Vec::with_capacity(3 * v);
    for i in 0..v {
        let p = if i < palm {
            [rng.gen_range(-0.04..0.04), rng.gen_range(0.0..0.075), rng.gen_range(-0.012..0.012)]
        } else {
            let (base, tip) = FINGERS[(i - palm) % 5];
            let t: f64 = rng.gen_range(0.0..1.0);
            [
                base[0] + t * (tip[0] - base[0]) + rng.gen_range(-0.007..0.007),
                base[1] + t * (tip[1] - base[1]),
                rng.gen_range(-0.007..0.007),
            ]
        };
        out.extend_from_slice(&p);
    }
    out
}

/// Random displacement field that is a quadratic function of position, so
/// neighbouring vertices move together.
fn smooth_field(rng: &mut ChaCha8Rng, mean: &[f64], scale: f64) -> Vec<f64> {
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let lin: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| normal()));
    let quad: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| normal()));
    let offset: [f64; 3] = std::array::from_fn(|_| normal());
    // positions are normalised by a hand length of 0.1 m
    mean.chunks(3)
        .flat_map(|p| {
            let q = [p[0] / 0.1, p[1] / 0.1, p[2] / 0.1];
            std::array::from_fn::<f64, 3, _>(|r| {
                let l: f64 = (0..3).map(|c| lin[r][c] * q[c]).sum();
                let s: f64 = (0..3).map(|c| quad[r][c] * q[c] * q[c]).sum();
                scale * (offset[r] + l + s)
            })
        })
        .collect()
}

/// Generates `n` samples in memory. Equal `(n, seed, cfg)` give identical
/// samples.
pub fn synthetic_samples(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<HandSample>> {
    if n == 0 || cfg.image_size == 0 {
        return Err(Error::Config("synthetic set needs n >= 1 and a positive image size".into()));
    }
    let reg = &cfg.regressor;
    let v = reg.vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = mean_hand(&mut rng, v);
    let basis: Vec<Vec<f64>> = (0..cfg.basis).map(|_| smooth_field(&mut rng, &mean, cfg.basis_scale)).collect();
    let camera = cfg.camera();
    let size = cfg.image_size as f64;

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let beta: Vec<f64> = (0..cfg.basis).map(|_| rng.sample(StandardNormal)).collect();
        let mut verts = mean.clone();
        for (b, dir) in beta.iter().zip(&basis) {
            verts.iter_mut().zip(dir).for_each(|(x, d)| *x += b * d);
        }
        let raw = Tensor::new([v, 3], verts)?;
        let wrist = reg.apply(&raw)?.row(0).to_vec();
        let centred: Vec<f64> = raw.data().iter().enumerate().map(|(k, x)| x - wrist[k % 3]).collect();
        let vertices = Tensor::new([v, 3], centred)?;
        let joints3d = reg.apply(&vertices)?;
        let camera_space: Vec<[f64; 3]> =
            points(&joints3d)?.into_iter().map(|[x, y, z]| [x, y, z + cfg.depth]).collect();
        let kp: Vec<f64> = project_points(&camera_space, &camera)?
            .into_iter()
            .flat_map(|[u, w]| [u / size, w / size])
            .collect();
        let id = format!("synth-{i:06}");
        let sample = HandSample {
            image: noise_image(&id, seed, cfg.image_size),
            kp2d: Tensor::new([joints3d.shape()[0], 2], kp)?,
            joints3d,
            vertices,
            id,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes a synthetic dataset to `out_dir/manifest.txt`.
pub fn make_synthetic(n: usize, seed: u64, out_dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    let samples = synthetic_samples(n, seed, cfg)?;
    write_manifest(out_dir, "manifest.txt", &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_all;
    use crate::model::{MANO_TO_HAND_ORDER, PLACEHOLDER_TIP_INDICES};

    fn cfg() -> SynthConfig {
        let reg = JointRegressor::synthetic(1, 16, 778, PLACEHOLDER_TIP_INDICES.to_vec(), MANO_TO_HAND_ORDER.to_vec())
            .unwrap();
        SynthConfig::new(32, reg)
    }

    #[test]
    fn deterministic_and_self_consistent() {
        let c = cfg();
        let a = synthetic_samples(3, 7, &c).unwrap();
        assert_eq!(a, synthetic_samples(3, 7, &c).unwrap());
        assert_ne!(a, synthetic_samples(3, 8, &c).unwrap());
        for s in &a {
            assert_eq!(s.kp2d.shape(), &[21, 2]);
            assert_eq!(s.vertices.shape(), &[778, 3]);
            assert_eq!(c.regressor.apply(&s.vertices).unwrap(), s.joints3d);
            assert!(s.joints3d.row(0).iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn written_dataset_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        let path = make_synthetic(2, 3, dir.path(), &c).unwrap();
        assert_eq!(load_all(&path).unwrap(), synthetic_samples(2, 3, &c).unwrap());
    }
}

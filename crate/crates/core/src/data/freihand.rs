//! Conversion of FreiHand-style annotation arrays into a manifest.

use std::path::{Path, PathBuf};

use super::{load_image, project_points, CameraIntrinsics, HandSample, ManifestWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs of [`ingest_freihand`]: parallel JSON arrays of per-sample joint
/// coordinates (`N x 21 x 3`), vertices (`N x 778 x 3`) and intrinsic
/// matrices (`N x 3 x 3`), plus a directory of `%08d.jpg` images.
///
/// Images beyond the annotation count reuse annotation `i mod N`, which
/// matches datasets that ship several renderings per annotated pose.
#[derive(Clone, Debug)]
pub struct FreiHandPaths {
    pub xyz: PathBuf,
    pub verts: PathBuf,
    pub k: PathBuf,
    pub image_dir: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}

fn root_centre(pts: &[[f64; 3]], root: [f64; 3]) -> Vec<f64> {
    pts.iter()
        .flat_map(|p| [p[0] - root[0], p[1] - root[1], p[2] - root[2]])
        .collect()
}

/// Writes `out_dir/manifest.txt` and returns the number of samples.
pub fn ingest_freihand(paths: &FreiHandPaths, out_dir: &Path, image_size: usize) -> Result<usize> {
    let xyz: Vec<Vec<[f64; 3]>> = read_json(&paths.xyz)?;
    let verts: Vec<Vec<[f64; 3]>> = read_json(&paths.verts)?;
    let ks: Vec<[[f64; 3]; 3]> = read_json(&paths.k)?;
    if xyz.len() != verts.len() || xyz.len() != ks.len() {
        return Err(Error::Ingest(format!(
            "annotation arrays differ in length: xyz {}, verts {}, K {}",
            xyz.len(),
            verts.len(),
            ks.len()
        )));
    }
    if xyz.is_empty() {
        return Err(Error::Ingest("annotation arrays are empty".into()));
    }
    let image_path = |i: usize| paths.image_dir.join(format!("{i:08}.jpg"));
    if !image_path(0).exists() {
        return Err(Error::Ingest(format!("no image {}", image_path(0).display())));
    }
    let mut writer = ManifestWriter::create(out_dir, "manifest.txt")?;
    let mut i = 0;
    while image_path(i).exists() {
        let a = i % xyz.len();
        let joints = &xyz[a];
        if joints.is_empty() || verts[a].is_empty() {
            return Err(Error::Ingest(format!("annotation {a} is empty")));
        }
        let k = CameraIntrinsics::from_matrix(&ks[a])?;
        let (image, (w, h)) = load_image(&image_path(i), image_size, true).map_err(|e| match e {
            Error::Input(m) => Error::Ingest(m),
            other => other,
        })?;
        let uv = project_points(joints, &k)?;
        let kp: Vec<f64> = uv.iter().flat_map(|p| [p[0] / w as f64, p[1] / h as f64]).collect();
        let root = joints[0];
        let sample = HandSample {
            id: format!("{i:08}"),
            image,
            kp2d: Tensor::new([joints.len(), 2], kp)?,
            joints3d: Tensor::new([joints.len(), 3], root_centre(joints, root))?,
            vertices: Tensor::new([verts[a].len(), 3], root_centre(&verts[a], root))?,
        };
        writer.push(&sample)?;
        i += 1;
    }
    Ok(writer.finish()?.1)
}

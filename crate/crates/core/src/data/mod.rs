//! Hand samples, the on-disk manifest format, dataset generation and
//! mesh export.
//!
//! A manifest is a UTF-8 text file whose first line is
//! `# handmesh-manifest v1`, followed by one `id<TAB>blob` line per sample.
//! Blob paths are relative to the manifest's directory. See
//! `docs/manifest.md` for the byte layout of a blob.

mod camera;
mod freihand;
mod obj;
mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Read, Write};
use std::path::{Path, PathBuf};

pub use camera::{project_points, CameraIntrinsics};
pub use freihand::{ingest_freihand, FreiHandPaths};
pub use obj::{export_obj, load_faces, read_obj_vertices};
pub use synth::{make_synthetic, noise_image, synthetic_samples, SynthConfig};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "# handmesh-manifest v1";
pub const BLOB_MAGIC: &[u8; 4] = b"HMSB";
pub const BLOB_VERSION: u8 = 1;
const BLOB_HEADER_LEN: usize = 20;

/// Loose crop tolerance on normalised 2-D keypoints.
pub const KP2D_RANGE: (f64, f64) = (-0.25, 1.25);

/// One training or evaluation record. 3-D targets are root-relative metres;
/// keypoints are normalised crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct HandSample {
    pub id: String,
    /// `3 x S x S` in `[0, 1]`.
    pub image: Tensor,
    /// `J x 2`.
    pub kp2d: Tensor,
    /// `J x 3`.
    pub joints3d: Tensor,
    /// `V x 3`.
    pub vertices: Tensor,
}

impl HandSample {
    fn invalid(&self, field: &'static str, detail: impl Into<String>) -> Error {
        Error::Validation {
            id: self.id.clone(),
            field,
            detail: detail.into(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.image.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['\t', '\n', '\r', '/', '\\']) {
            return Err(self.invalid("id", "must be non-empty without tabs, newlines or slashes"));
        }
        match self.image.shape() {
            [3, h, w] if h == w => {}
            s => return Err(self.invalid("image", format!("must be 3 x S x S, got {s:?}"))),
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(self.invalid("image", format!("value {v} outside [0, 1]")));
        }
        let j = self.kp2d.shape()[0];
        let checks: [(&'static str, &Tensor, usize); 3] =
            [("kp2d", &self.kp2d, 2), ("joints3d", &self.joints3d, 3), ("vertices", &self.vertices, 3)];
        for (field, t, cols) in checks {
            if t.ndim() != 2 || t.shape()[1] != cols {
                return Err(self.invalid(field, format!("must be N x {cols}, got {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(self.invalid(field, "contains non-finite values"));
            }
        }
        if self.joints3d.shape()[0] != j {
            return Err(self.invalid(
                "joints3d",
                format!("has {} joints but kp2d has {j}", self.joints3d.shape()[0]),
            ));
        }
        let (lo, hi) = KP2D_RANGE;
        if let Some(v) = self.kp2d.data().iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(self.invalid("kp2d", format!("coordinate {v} outside [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Serialises the sample body (everything except the id).
    pub fn to_blob(&self) -> Vec<u8> {
        let s = self.image_size();
        let (j, v) = (self.kp2d.shape()[0], self.vertices.shape()[0]);
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 3 * s * s + 8 * (5 * j + 3 * v));
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&[BLOB_VERSION, 0, 0, 0]);
        for n in [s, j, v] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.extend(self.image.data().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
        for t in [&self.kp2d, &self.joints3d, &self.vertices] {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(id: &str, bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Load {
            id: id.to_string(),
            detail,
        };
        if bytes.len() < BLOB_HEADER_LEN || &bytes[..4] != BLOB_MAGIC {
            return Err(bad("not a sample blob".into()));
        }
        if bytes[4] != BLOB_VERSION {
            return Err(bad(format!("unsupported blob version {}", bytes[4])));
        }
        let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (s, j, v) = (dim(8), dim(12), dim(16));
        let expected = BLOB_HEADER_LEN + 3 * s * s + 8 * (5 * j + 3 * v);
        if s == 0 || j == 0 || v == 0 || bytes.len() != expected {
            return Err(bad(format!(
                "blob has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut at = BLOB_HEADER_LEN;
        let image: Vec<f64> = bytes[at..at + 3 * s * s].iter().map(|&b| b as f64 / 255.0).collect();
        at += 3 * s * s;
        let mut floats = |n: usize| {
            let out: Vec<f64> = bytes[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            at += 8 * n;
            out
        };
        let kp2d = floats(2 * j);
        let joints3d = floats(3 * j);
        let vertices = floats(3 * v);
        Ok(HandSample {
            id: id.to_string(),
            image: Tensor::new([3, s, s], image)?,
            kp2d: Tensor::new([j, 2], kp2d)?,
            joints3d: Tensor::new([j, 3], joints3d)?,
            vertices: Tensor::new([v, 3], vertices)?,
        })
    }
}

/// Decodes an image into a `3 x size x size` tensor in `[0, 1]`, returning
/// it with the original width and height. Images of another size are
/// rejected unless `resize` is set.
pub fn load_image(path: &Path, size: usize, resize: bool) -> Result<(Tensor, (u32, u32))> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let img = if (w as usize, h as usize) == (size, size) {
        img
    } else if resize {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        return Err(Error::Input(format!(
            "{} is {w}x{h}, expected {size}x{size} (pass --resize to rescale)",
            path.display()
        )));
    };
    let mut data = vec![0.0; 3 * size * size];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * size + y as usize) * size + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok((Tensor::new([3, size, size], data)?, (w, h)))
}

/// Incremental manifest writer. Blobs go to `dir/blobs/<id>.bin`.
pub struct ManifestWriter {
    dir: PathBuf,
    path: PathBuf,
    out: BufWriter<File>,
    count: usize,
}

impl ManifestWriter {
    pub fn create(dir: &Path, name: &str) -> Result<Self> {
        let blob_dir = dir.join("blobs");
        std::fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{MANIFEST_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(ManifestWriter {
            dir: dir.to_path_buf(),
            path,
            out,
            count: 0,
        })
    }

    pub fn push(&mut self, sample: &HandSample) -> Result<()> {
        sample.validate()?;
        let rel = format!("blobs/{}.bin", sample.id);
        let blob = self.dir.join(&rel);
        std::fs::write(&blob, sample.to_blob()).map_err(|e| Error::io(&blob, e))?;
        writeln!(self.out, "{}\t{rel}", sample.id).map_err(|e| Error::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    /// Flushes the manifest and returns its path and sample count.
    pub fn finish(mut self) -> Result<(PathBuf, usize)> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok((self.path, self.count))
    }
}

/// Writes `samples` plus the manifest file `dir/name`, returning the
/// manifest path.
pub fn write_manifest<'a>(
    dir: &Path,
    name: &str,
    samples: impl IntoIterator<Item = &'a HandSample>,
) -> Result<PathBuf> {
    let mut w = ManifestWriter::create(dir, name)?;
    for s in samples {
        w.push(s)?;
    }
    Ok(w.finish()?.0)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub blob: PathBuf,
}

/// Streaming reader yielding validated samples in manifest order.
pub struct ManifestReader {
    path: PathBuf,
    base: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl ManifestReader {
    fn next_entry(&mut self) -> Option<Result<ManifestEntry>> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((id, blob)) = line.split_once('\t') else {
                return Some(Err(Error::Load {
                    id: format!("line {}", self.line_no),
                    detail: format!("{}: expected `id<TAB>blob`", self.path.display()),
                }));
            };
            return Some(Ok(ManifestEntry {
                id: id.to_string(),
                blob: self.base.join(blob),
            }));
        }
    }

    /// Remaining entries without loading their blobs.
    pub fn entries(mut self) -> Result<Vec<ManifestEntry>> {
        std::iter::from_fn(|| self.next_entry()).collect()
    }
}

pub fn load_entry(entry: &ManifestEntry) -> Result<HandSample> {
    let mut bytes = Vec::new();
    File::open(&entry.blob)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Load {
            id: entry.id.clone(),
            detail: format!("{}: {e}", entry.blob.display()),
        })?;
    let sample = HandSample::from_blob(&entry.id, &bytes)?;
    sample.validate()?;
    Ok(sample)
}

impl Iterator for ManifestReader {
    type Item = Result<HandSample>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_entry()?.and_then(|e| load_entry(&e)))
    }
}

pub fn load_manifest(path: &Path) -> Result<ManifestReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == MANIFEST_HEADER => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => {
            return Err(Error::Load {
                id: path.display().to_string(),
                detail: format!("missing `{MANIFEST_HEADER}` header"),
            })
        }
    }
    Ok(ManifestReader {
        path: path.to_path_buf(),
        base: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        lines,
        line_no: 1,
    })
}

/// Loads every sample of a manifest.
pub fn load_all(path: &Path) -> Result<Vec<HandSample>> {
    load_manifest(path)?.collect()
}

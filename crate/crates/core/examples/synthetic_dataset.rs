//! Writes a synthetic manifest, reads it back and exports the first hand
//! as an OBJ point cloud. Takes an optional output directory.

use std::path::PathBuf;

use handmesh::config::RunConfig;
use handmesh::data::{export_obj, load_manifest, make_synthetic, SynthConfig};
use handmesh::metrics::points;

fn main() -> handmesh::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("handmesh-synth"));
    let cfg = RunConfig::desk();
    let sc = SynthConfig::new(cfg.model.backbone.input_size, cfg.regressor()?);
    let manifest = make_synthetic(4, 7, &out, &sc)?;
    println!("manifest: {}", manifest.display());
    for sample in load_manifest(&manifest)? {
        let s = sample?;
        let wrist = &s.joints3d.data()[..3];
        println!(
            "{}: image {:?}, kp2d[0] = {:?}, wrist = {wrist:?}",
            s.id,
            s.image.shape(),
            &s.kp2d.data()[..2]
        );
    }
    let first = load_manifest(&manifest)?.next().expect("four samples")?;
    let obj = out.join(format!("{}.obj", first.id));
    export_obj(&points(&first.vertices)?, None, &obj)?;
    println!("mesh: {}", obj.display());
    Ok(())
}

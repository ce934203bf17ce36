//! Builds a two-annotation FreiHand-style directory with four images and
//! converts it to a manifest. Point the paths at a real download to ingest
//! the dataset instead.

use handmesh::data::{ingest_freihand, load_all, FreiHandPaths};

fn main() -> handmesh::Result<()> {
    let dir = std::env::temp_dir().join("handmesh-freihand-demo");
    let images = dir.join("rgb");
    std::fs::create_dir_all(&images).expect("temp dir is writable");

    let joints = |dz: f64| -> Vec<[f64; 3]> {
        (0..21).map(|j| [0.01 * (j % 5) as f64, 0.008 * (j / 5) as f64, 0.5 + dz]).collect()
    };
    let verts = |dz: f64| -> Vec<[f64; 3]> {
        (0..778).map(|v| [0.0001 * (v % 97) as f64, 0.0002 * (v / 97) as f64, 0.5 + dz]).collect()
    };
    let k = [[480.0, 0.0, 112.0], [0.0, 480.0, 112.0], [0.0, 0.0, 1.0]];
    let write = |name: &str, v: serde_json::Value| {
        std::fs::write(dir.join(name), v.to_string()).expect("temp dir is writable");
    };
    write("xyz.json", serde_json::json!([joints(0.0), joints(0.05)]));
    write("verts.json", serde_json::json!([verts(0.0), verts(0.05)]));
    write("K.json", serde_json::json!([k, k]));
    for i in 0..4u8 {
        let img = image::RgbImage::from_fn(224, 224, |x, y| image::Rgb([x as u8, y as u8, 60 * i]));
        img.save(images.join(format!("{i:08}.jpg"))).expect("jpeg encodes");
    }

    let paths = FreiHandPaths {
        xyz: dir.join("xyz.json"),
        verts: dir.join("verts.json"),
        k: dir.join("K.json"),
        image_dir: images,
    };
    let out = dir.join("manifest");
    let n = ingest_freihand(&paths, &out, 64)?;
    println!("ingested {n} samples into {}", out.display());
    for s in load_all(&out.join("manifest.txt"))? {
        println!("{}: kp2d[1] = {:?}, joint 1 = {:?}", s.id, &s.kp2d.data()[2..4], &s.joints3d.data()[3..6]);
    }
    Ok(())
}

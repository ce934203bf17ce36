//! Aligns a rotated, scaled and shifted copy of a point set and shows that
//! the aligned errors ignore the similarity transform.

use handmesh::metrics::{fscore, pa_error, point_error, umeyama_align, ErrorMode, Point};
use nalgebra::{Rotation3, Vector3};

fn main() -> handmesh::Result<()> {
    let gt: Vec<Point> = (0..21)
        .map(|i| {
            let a = i as f64 * 0.4;
            [0.05 * a.cos(), 0.01 * i as f64, 0.03 * a.sin()]
        })
        .collect();
    let noisy: Vec<Point> = gt
        .iter()
        .enumerate()
        .map(|(i, p)| [p[0] + 0.002 * (i as f64).sin(), p[1], p[2] - 0.001])
        .collect();
    let r = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
    let pred: Vec<Point> = noisy
        .iter()
        .map(|p| {
            let v = r * Vector3::from(*p) * 1.7 + Vector3::new(0.2, -0.5, 0.9);
            [v.x, v.y, v.z]
        })
        .collect();

    let a = umeyama_align(&pred, &gt)?;
    println!("recovered scale {:.4} (expected {:.4})", a.scale, 1.0 / 1.7);
    println!("raw error        {:.3} mm", point_error(&pred, &gt, ErrorMode::MeanEuclidean));
    for mode in [ErrorMode::MeanEuclidean, ErrorMode::Rmse] {
        println!(
            "{mode:?}: aligned {:.4} mm, untransformed {:.4} mm",
            pa_error(&pred, &gt, mode)?,
            pa_error(&noisy, &gt, mode)?
        );
    }
    let aligned = a.apply(&pred);
    for tau in [1.0, 2.0, 5.0] {
        println!("F@{tau}mm = {:.3}", fscore(&aligned, &gt, tau)?);
    }
    Ok(())
}

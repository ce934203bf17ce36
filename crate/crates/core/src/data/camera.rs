//! Pinhole camera model.

use crate::error::{Error, Result};
use crate::metrics::Point;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Ingest(format!(
                "focal lengths must be positive, got fx = {fx}, fy = {fy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// From a row-major `3 x 3` intrinsic matrix.
    pub fn from_matrix(k: &[[f64; 3]; 3]) -> Result<Self> {
        Self::new(k[0][0], k[1][1], k[0][2], k[1][2])
    }
}

/// Pixel coordinates `(u, v)` of camera-space points.
pub fn project_points(xyz: &[Point], k: &CameraIntrinsics) -> Result<Vec<[f64; 2]>> {
    xyz.iter()
        .enumerate()
        .map(|(index, &[x, y, z])| {
            if !(z > 0.0) {
                return Err(Error::Projection { index, z });
            }
            Ok([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn optical_axis_hits_principal_point() {
        let k = CameraIntrinsics::new(480.0, 470.0, 112.5, 100.25).unwrap();
        assert_eq!(project_points(&[[0.0, 0.0, 1.0], [0.0, 0.0, 0.3]], &k).unwrap(), [[112.5, 100.25]; 2]);
    }

    #[test]
    fn hand_arithmetic_and_errors() {
        let k = CameraIntrinsics::new(500.0, 400.0, 100.0, 120.0).unwrap();
        let uv = project_points(&[[0.1, -0.05, 0.5]], &k).unwrap();
        // 500 * 0.2 + 100, 400 * -0.1 + 120
        assert_eq!(uv, [[200.0, 80.0]]);
        match project_points(&[[0.0, 0.0, 1.0], [0.0, 0.0, -0.2]], &k) {
            Err(Error::Projection { index, z }) => assert_eq!((index, z), (1, -0.2)),
            other => panic!("{other:?}"),
        }
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn doubling_depth_halves_offset(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..5.0) {
            let k = CameraIntrinsics::new(300.0, 310.0, 50.0, 60.0).unwrap();
            let a = project_points(&[[x, y, z]], &k).unwrap()[0];
            let b = project_points(&[[x, y, 2.0 * z]], &k).unwrap()[0];
            prop_assert!(((b[0] - 50.0) - (a[0] - 50.0) / 2.0).abs() < 1e-9);
            prop_assert!(((b[1] - 60.0) - (a[1] - 60.0) / 2.0).abs() < 1e-9);
            prop_assert_eq!(a[0], 300.0 * x / z + 50.0);
        }
    }
}

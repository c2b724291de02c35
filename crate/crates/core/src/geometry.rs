//! Pinhole camera model: back-projection, rigid view change and projection.
//!
//! Conventions: pixel centers sit at integer coordinates (`u` is the column,
//! `v` the row), depth is z-depth along the optical axis, and extrinsics map
//! world points into the camera frame (`x_cam = R * x_world + t`).

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!(
                "intrinsics need positive finite focal lengths, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("intrinsics image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Parses a row-major 3x3 K. The image size is not part of K and must be supplied.
    pub fn from_matrix(k: &Matrix3<f64>, width: usize, height: usize) -> Result<Self> {
        let off = [k[(0, 1)], k[(1, 0)], k[(2, 0)], k[(2, 1)]];
        if off.iter().any(|v| v.abs() > 1e-12) || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::Config(
                "intrinsics matrix must have the form [fx 0 cx; 0 fy cy; 0 0 1]".into(),
            ));
        }
        Self::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], width, height)
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u <= (self.width - 1) as f64 && p.v <= (self.height - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let e = Extrinsics {
            rotation,
            translation,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn identity() -> Self {
        Extrinsics {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("extrinsics contain non-finite values".into()));
        }
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if gram.iter().any(|v| v.abs() > ORTHONORMAL_TOL) {
            return Err(Error::Config("extrinsic rotation is not orthonormal".into()));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Config(format!("extrinsic rotation has determinant {det}, expected 1")));
        }
        Ok(())
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
        if bottom.iter().any(|v| v.abs() > 1e-9) {
            return Err(Error::Config("pose matrix bottom row must be [0 0 0 1]".into()));
        }
        Self::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Homogeneous inverse, `[R^T | -R^T t]`.
    pub fn inverse_matrix4(&self) -> Matrix4<f64> {
        let rt = self.rotation.transpose();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(rt * self.translation)));
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Extrinsics {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`.
    /// Camera axes: x right, y down, z forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Config("look_at: eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&(-up));
        if x.norm() < 1e-9 {
            return Err(Error::Config("look_at: up vector parallel to viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, x: Vector3<f64>) -> CameraPoint {
        CameraPoint::from(self.rotation * x + self.translation)
    }

    pub fn camera_to_world(&self, p: CameraPoint) -> Vector3<f64> {
        self.rotation.transpose() * (p.to_vector() - self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        PixelCoord { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        CameraPoint { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

impl From<Vector3<f64>> for CameraPoint {
    fn from(v: Vector3<f64>) -> Self {
        CameraPoint::new(v.x, v.y, v.z)
    }
}

/// `depth * K^-1 [u, v, 1]^T`; the returned z equals `depth` exactly.
pub fn back_project(u: PixelCoord, depth: f64, k: &Intrinsics) -> Result<CameraPoint> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(CameraPoint {
        x: depth * (u.u - k.cx) / k.fx,
        y: depth * (u.v - k.cy) / k.fy,
        z: depth,
    })
}

/// Homogeneous transform taking camera-`a` coordinates to camera-`b` coordinates: `E_b E_a^-1`.
pub fn relative_transform(e_a: &Extrinsics, e_b: &Extrinsics) -> Matrix4<f64> {
    e_b.to_matrix4() * e_a.inverse_matrix4()
}

pub fn apply_transform(m: &Matrix4<f64>, p: CameraPoint) -> CameraPoint {
    let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
    CameraPoint::new(h.x, h.y, h.z)
}

/// Moves a point expressed in camera `a` into camera `b`.
pub fn change_view(p: CameraPoint, e_a: &Extrinsics, e_b: &Extrinsics) -> CameraPoint {
    apply_transform(&relative_transform(e_a, e_b), p)
}

/// Perspective projection `(fx x / z + cx, fy y / z + cy)`.
pub fn project(p: CameraPoint, k: &Intrinsics) -> Result<PixelCoord> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok(PixelCoord {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    fn k_skewed() -> Intrinsics {
        Intrinsics::new(200.0, 100.0, 10.0, 20.0, 64, 64).unwrap()
    }

    #[test]
    fn back_project_examples() {
        let p = back_project(PixelCoord::new(64.0, 64.0), 2.0, &k100()).unwrap();
        assert_eq!(p, CameraPoint::new(0.0, 0.0, 2.0));
        let p = back_project(PixelCoord::new(164.0, 64.0), 1.0, &k100()).unwrap();
        assert_eq!(p, CameraPoint::new(1.0, 0.0, 1.0));
        let p = back_project(PixelCoord::new(30.0, 40.0), 0.5, &k_skewed()).unwrap();
        assert_abs_diff_eq!(p.x, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 0.1, epsilon = 1e-15);
        assert_eq!(p.z, 0.5);
    }

    #[test]
    fn back_project_rejects_bad_depth() {
        for d in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                back_project(PixelCoord::new(1.0, 1.0), d, &k100()),
                Err(Error::InvalidDepth(_))
            ));
        }
    }

    #[test]
    fn project_examples() {
        let u = project(CameraPoint::new(0.0, 0.0, 2.0), &k100()).unwrap();
        assert_eq!(u, PixelCoord::new(64.0, 64.0));
        let u = project(CameraPoint::new(0.05, 0.1, 0.5), &k_skewed()).unwrap();
        assert_abs_diff_eq!(u.u, 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.v, 40.0, epsilon = 1e-12);
        assert!(matches!(project(CameraPoint::new(0.0, 0.0, 0.0), &k100()), Err(Error::BehindCamera(_))));
        assert!(matches!(project(CameraPoint::new(0.0, 0.0, -1.0), &k100()), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn change_view_examples() {
        let p = CameraPoint::new(0.3, -0.2, 2.0);
        let e = Extrinsics::look_at(Vector3::new(1.0, 0.5, -2.0), Vector3::zeros(), Vector3::y()).unwrap();
        let q = change_view(p, &e, &e);
        assert_abs_diff_eq!(q.to_vector(), p.to_vector(), epsilon = 1e-12);

        let e_b = Extrinsics::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let q = change_view(CameraPoint::new(0.0, 0.0, 2.0), &Extrinsics::identity(), &e_b);
        assert_eq!(q, CameraPoint::new(1.0, 0.0, 2.0));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn extrinsics_validation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0; // reflection
        assert!(Extrinsics::new(r, Vector3::zeros()).is_err());
        assert!(Extrinsics::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vector3::new(2.0, -1.0, -3.0);
        let target = Vector3::new(0.1, 0.2, 0.3);
        let e = Extrinsics::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let p = e.world_to_camera(target);
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, (target - eye).norm(), epsilon = 1e-12);
        assert_abs_diff_eq!(e.center(), eye, epsilon = 1e-12);
    }

    fn arb_pose() -> impl Strategy<Value = Extrinsics> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.1f64..3.1,
            prop::array::uniform3(-3.0f64..3.0),
        )
            .prop_filter_map("degenerate axis", |(axis, angle, t)| {
                let axis = Vector3::from(axis);
                if axis.norm() < 1e-3 {
                    return None;
                }
                let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
                Extrinsics::new(*r.matrix(), Vector3::from(t)).ok()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn change_view_roundtrip(e_a in arb_pose(), e_b in arb_pose(), p in prop::array::uniform3(-5.0f64..5.0)) {
            let p = CameraPoint::new(p[0], p[1], p[2]);
            let back = change_view(change_view(p, &e_a, &e_b), &e_b, &e_a);
            prop_assert!((back.to_vector() - p.to_vector()).amax() < 1e-9);
        }

        #[test]
        fn change_view_composes(e_a in arb_pose(), e_b in arb_pose(), e_c in arb_pose(), p in prop::array::uniform3(-5.0f64..5.0)) {
            let p = CameraPoint::new(p[0], p[1], p[2]);
            let direct = change_view(p, &e_a, &e_c);
            let hop = change_view(change_view(p, &e_a, &e_b), &e_b, &e_c);
            prop_assert!((direct.to_vector() - hop.to_vector()).amax() < 1e-9);
        }

        #[test]
        fn project_inverts_back_project(u in 0.0f64..127.0, v in 0.0f64..127.0, d in 0.2f64..5.0) {
            let k = k100();
            let p = back_project(PixelCoord::new(u, v), d, &k).unwrap();
            prop_assert_eq!(p.z, d);
            let q = project(p, &k).unwrap();
            prop_assert!((q.u - u).abs() < 1e-9 && (q.v - v).abs() < 1e-9);
        }
    }
}

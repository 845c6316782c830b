//! Pinhole camera model and rigid camera-to-world poses.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};

use crate::error::{Error, Result};

/// Pinhole intrinsics. Pixel centers sit at integer coordinates, so a
/// camera-space point projects to pixel `(round(u), round(v))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Valid depth range in meters.
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("intrinsics", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("intrinsics", "image size must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(
                "intrinsics",
                format!("need 0 < near < far, got near={} far={}", self.near, self.far),
            ));
        }
        Ok(())
    }

    /// Intrinsics with the principal point at the image center and the given
    /// horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64, near: f64, far: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            near,
            far,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous image coordinates of a camera-space point; `None` when the
    /// point is not in front of the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Pixel hit by a camera-space point, if it falls inside the image.
    pub fn project_to_pixel(&self, p: &Point3<f64>) -> Option<(usize, usize)> {
        let (u, v) = self.project(p)?;
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    /// Camera-space point at pixel `(u, v)` with z-depth `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }

    /// Unnormalized camera-space ray direction through pixel `(u, v)` with z = 1.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

const ORTHO_TOL: f64 = 1e-6;

impl Pose {
    pub fn identity() -> Self {
        Pose {
            matrix: Matrix4::identity(),
        }
    }

    /// Builds a pose from 16 row-major values, checking rigidity.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::invalid(
                "pose",
                format!("expected 16 values, got {}", values.len()),
            ));
        }
        let pose = Pose {
            matrix: Matrix4::from_row_slice(values),
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        let pose = Pose { matrix: m };
        pose.validate()?;
        Ok(pose)
    }

    /// Camera at `eye` looking at `target`. Camera axes follow the usual
    /// computer-vision convention: +z forward, +y down in the image, +x right.
    /// `up` is the world up direction.
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::invalid("pose", "look direction parallel to up"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Pose::from_parts(rotation, eye.coords)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("pose", "bottom row must be (0,0,0,1)"));
        }
        let r = self.rotation();
        if ((r.determinant() - 1.0).abs()) >= ORTHO_TOL {
            return Err(Error::invalid("pose", "rotation determinant must be 1"));
        }
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err >= ORTHO_TOL {
            return Err(Error::invalid("pose", "rotation is not orthonormal"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation().transpose() * (p.coords - self.translation()))
    }

    /// Cached transform for projecting many world points.
    pub fn world_to_camera_transform(&self) -> WorldToCamera {
        let rt = self.rotation().transpose();
        WorldToCamera {
            rotation: rt,
            offset: -(rt * self.translation()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WorldToCamera {
    rotation: Matrix3<f64>,
    offset: Vector3<f64>,
}

impl WorldToCamera {
    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_intrinsics() {
        let mut k = CameraIntrinsics::from_fov(64, 48, 60.0, 0.1, 4.0);
        assert!(k.validate().is_ok());
        k.far = 0.1;
        assert!(k.validate().is_err());
        k.far = 4.0;
        k.fx = 0.0;
        assert!(k.validate().is_err());
    }

    #[test]
    fn rejects_non_rigid_pose() {
        let mut v = Pose::identity().row_major();
        v[0] = 2.0;
        assert!(Pose::from_row_major(&v).is_err());
        let mut v = Pose::identity().row_major();
        v[12] = 1.0;
        assert!(Pose::from_row_major(&v).is_err());
    }

    #[test]
    fn look_at_roundtrip() {
        let pose = Pose::look_at(Point3::new(1.0, -2.0, 1.5), Point3::new(0.0, 0.0, 0.5), Vector3::z()).unwrap();
        let target = pose.world_to_camera(&Point3::new(0.0, 0.0, 0.5));
        assert!(target.x.abs() < 1e-12 && target.y.abs() < 1e-12 && target.z > 0.0);
        let p = Point3::new(0.3, 0.2, 0.1);
        let back = pose.camera_to_world(&pose.world_to_camera(&p));
        assert!((back - p).norm() < 1e-12);
        let fast = pose.world_to_camera_transform().apply(&p);
        assert!((fast - pose.world_to_camera(&p)).norm() < 1e-12);
    }

    #[test]
    fn projection_inverts_back_projection() {
        let k = CameraIntrinsics::from_fov(64, 48, 60.0, 0.1, 4.0);
        let p = k.back_project(10.0, 20.0, 1.7);
        assert_eq!(k.project_to_pixel(&p), Some((10, 20)));
        assert_eq!(k.project_to_pixel(&Point3::new(0.0, 0.0, -1.0)), None);
    }
}

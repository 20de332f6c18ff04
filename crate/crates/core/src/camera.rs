use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};

/// Pinhole camera with a world-to-camera pose (COLMAP convention:
/// `p_cam = R * p_world + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Camera with identity pose.
    pub fn new(id: u32, width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            id,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn with_pose(mut self, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }

    /// Camera placed at `eye` looking at `target`, with image `y` pointing
    /// along world `-up` (OpenCV convention).
    pub fn look_at(mut self, eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // rows of R are the camera axes expressed in world coordinates
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rot = UnitQuaternion::from_matrix(&r);
        self.translation = -(rot * eye.coords);
        self.rotation = rot;
        self
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Projects a world point to pixel coordinates; `None` behind the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && (self.rotation.quaternion().norm() - 1.0).abs() <= 1e-9
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let cam = Camera::new(1, 64, 64, 50.0, 50.0, 32.0, 32.0).look_at(
            Point3::new(3.0, 1.0, -4.0),
            Point3::new(0.5, 0.0, 0.2),
            Vector3::y(),
        );
        let (u, v) = cam.project_point(&Vector3::new(0.5, 0.0, 0.2)).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9);
        assert!((cam.center() - Vector3::new(3.0, 1.0, -4.0)).norm() < 1e-12);
    }
}

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self { rotation: UnitQuaternion::from_rotation_matrix(&rot), translation }
    }

    /// Camera looking from `eye` towards `target`, with image rows pointing
    /// along `down` (x right, y down, z forward).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::from_rotation_matrix(&r, eye)
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn world_from_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn camera_from_world(&self) -> Matrix4<f64> {
        self.inverse().world_from_camera()
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Right-multiplies the rotation by `exp(omega)` and renormalizes.
    pub fn perturb_rotation(&mut self, omega: &Vector3<f64>) {
        let q = self.rotation * UnitQuaternion::from_scaled_axis(*omega);
        self.rotation = UnitQuaternion::new_normalize(q.into_inner());
    }

    pub fn renormalize(&mut self) {
        self.rotation = UnitQuaternion::new_normalize(self.rotation.into_inner());
    }

    /// `(qw, qx, qy, qz, tx, ty, tz)`.
    pub fn to_array7(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_array7(a: [f64; 7]) -> Self {
        let q = UnitQuaternion::new_normalize(Quaternion::new(a[0], a[1], a[2], a[3]));
        Self { rotation: q, translation: Vector3::new(a[4], a[5], a[6]) }
    }

    /// Rotation angle of `self⁻¹ ∘ other`, radians.
    pub fn angle_to(&self, other: &CameraPose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Cross-product matrix: `skew(a) * b == a × b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> CameraPose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = UnitQuaternion::from_scaled_axis(axis * 2.0);
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        CameraPose::new(rot, t)
    }

    #[test]
    fn identity_is_identity_matrix() {
        assert_eq!(CameraPose::identity().world_from_camera(), Matrix4::identity());
    }

    #[test]
    fn quarter_turn_about_z_matches_quaternion_formula() {
        let half = std::f64::consts::FRAC_PI_4;
        let (w, z) = (half.cos(), half.sin());
        let pose = CameraPose::from_array7([w, 0.0, 0.0, z, 1.0, 0.0, 0.0]);
        // R = I + 2w[q]x + 2[q]x^2 for q = (0, 0, z)
        let expected = Matrix4::new(
            1.0 - 2.0 * z * z, -2.0 * w * z, 0.0, 1.0,
            2.0 * w * z, 1.0 - 2.0 * z * z, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        let m = pose.world_from_camera();
        assert!((m - expected).abs().max() < 1e-15);
        assert!((m - Matrix4::new(0.0, -1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)).abs().max() < 1e-15);
    }

    #[test]
    fn round_trip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let m = pose.world_from_camera() * pose.camera_from_world();
            assert!((m - Matrix4::identity()).abs().max() < 1e-12);
            let c = pose.compose(&pose.inverse());
            assert!(c.translation.norm() < 1e-12);
            assert!(c.rotation.angle() < 1e-12);
            assert!((pose.rotation.norm() - 1.0).abs() < 1e-9);
            assert!((pose.rotation_matrix().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbation_is_right_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng);
        let omega = Vector3::new(0.1, -0.2, 0.05);
        let mut p = pose;
        p.perturb_rotation(&omega);
        let expected = pose.rotation_matrix() * Rotation3::from_scaled_axis(omega).into_inner();
        assert!((p.rotation_matrix() - expected).abs().max() < 1e-14);
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let pose = CameraPose::look_at(Vector3::new(1.0, -1.0, -3.0), Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.0, 1.0, 0.0));
        let target_cam = pose.inverse_transform_point(&Vector3::new(0.0, 0.0, 2.0));
        assert!(target_cam.x.abs() < 1e-12 && target_cam.y.abs() < 1e-12 && target_cam.z > 0.0);
    }
}

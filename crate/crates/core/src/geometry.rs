//! Projective geometry on the pixel grid.
//!
//! Pixel `(i, j)` is column `i`, row `j`, and pixel centres sit at integer
//! coordinates, so the camera-frame point seen at depth `d` is
//! `K⁻¹ · (i·d, j·d, d)ᵀ`.

use std::ops::{Add, Mul};

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::scene::{CameraPose, DepthMap, FlowField, FrameTag, Grid, Intrinsics, Pointmap};
use crate::{Error, Result};

/// Depth below which a point counts as behind the camera.
pub const MIN_FRONT_DEPTH: f64 = 1e-9;

/// World pointmap of a depth map; invalid depth yields invalid points.
pub fn unproject(depth: &DepthMap, k: &Intrinsics, pose: &CameraPose) -> Pointmap {
    let (w, h) = (depth.width(), depth.height());
    let points = Grid::from_fn(w, h, |i, j| {
        if *depth.valid().get(i, j) {
            unproject_pixel(i as f64, j as f64, *depth.values().get(i, j), k, pose)
        } else {
            Vector3::zeros()
        }
    });
    Pointmap::new(points, depth.valid().clone(), FrameTag::World).expect("unprojection of finite depth is finite")
}

#[inline]
pub fn unproject_pixel(i: f64, j: f64, d: f64, k: &Intrinsics, pose: &CameraPose) -> Vector3<f64> {
    pose.transform_point(&k.backproject(i, j, d))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub in_front: bool,
}

#[inline]
pub fn project_point(p: &Vector3<f64>, k: &Intrinsics, pose: &CameraPose) -> Projection {
    let c = pose.inverse_transform_point(p);
    if c.z > MIN_FRONT_DEPTH {
        Projection {
            pixel: Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy),
            depth: c.z,
            in_front: true,
        }
    } else {
        Projection { pixel: Vector2::new(f64::NAN, f64::NAN), depth: c.z, in_front: false }
    }
}

pub fn project(points: &[Vector3<f64>], k: &Intrinsics, pose: &CameraPose) -> Vec<Projection> {
    points.iter().map(|p| project_point(p, k, pose)).collect()
}

/// Flow induced by moving the camera from `pose_from` to `pose_to` over the
/// geometry `depth_from` of the source frame.
pub fn ego_flow(
    depth_from: &DepthMap,
    k_from: &Intrinsics,
    pose_from: &CameraPose,
    pose_to: &CameraPose,
    k_to: &Intrinsics,
    from: usize,
    to: usize,
) -> Result<FlowField> {
    let (w, h) = (depth_from.width(), depth_from.height());
    let mut valid = Grid::filled(w, h, false);
    let disp = Grid::from_fn(w, h, |i, j| {
        if !*depth_from.valid().get(i, j) {
            return Vector2::zeros();
        }
        let x = unproject_pixel(i as f64, j as f64, *depth_from.values().get(i, j), k_from, pose_from);
        let p = project_point(&x, k_to, pose_to);
        if !p.in_front {
            return Vector2::zeros();
        }
        *valid.get_mut(i, j) = true;
        p.pixel - Vector2::new(i as f64, j as f64)
    });
    FlowField::new(from, to, disp, valid)
}

/// Similarity `dst ≈ scale · rotation · src + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Weighted least-squares similarity (or rigid, when `with_scale` is false)
/// alignment of `src` onto `dst`.
pub fn umeyama_align(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!("umeyama: {} source vs {} target points", src.len(), dst.len())));
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(Error::ShapeMismatch("umeyama: weight count".into()));
        }
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("umeyama needs >= 3 points, got {}", src.len())));
    }
    let weight = |k: usize| weights.map_or(1.0, |w| w[k]);
    let total: f64 = (0..src.len()).map(weight).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("umeyama: zero total weight".into()));
    }

    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for k in 0..src.len() {
        mu_s += weight(k) * src[k];
        mu_d += weight(k) * dst[k];
    }
    mu_s /= total;
    mu_d /= total;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for k in 0..src.len() {
        let a = src[k] - mu_s;
        let b = dst[k] - mu_d;
        cov += weight(k) * b * a.transpose();
        var_s += weight(k) * a.norm_squared();
    }
    cov /= total;
    var_s /= total;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if !(sv[order[0]] > 0.0) || sv[order[1]] <= 1e-12 * sv[order[0]] || var_s <= 0.0 {
        return Err(Error::Degenerate("umeyama: rank-deficient covariance (collinear points?)".into()));
    }

    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        s[(order[2], order[2])] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (0..3).map(|k| sv[k] * s[(k, k)]).sum::<f64>() / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * rotation * mu_s;
    Ok(Similarity { scale, rotation, translation })
}

/// Bilinear interpolation at sub-pixel `(x, y)`. Returns `None` outside
/// `[0, W-1] x [0, H-1]` or when a neighbour with non-zero weight is invalid.
pub fn bilinear_sample<V>(grid: &Grid<V>, valid: Option<&Grid<bool>>, x: f64, y: f64) -> Option<V>
where
    V: Copy + Add<Output = V> + Mul<f64, Output = V>,
{
    let (w, h) = (grid.width(), grid.height());
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    let mut acc: Option<V> = None;
    for (i, j, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        if let Some(v) = valid {
            if !*v.get(i, j) {
                return None;
            }
        }
        let term = *grid.get(i, j) * wt;
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Rotation3, UnitQuaternion, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng, trans: f64) -> CameraPose {
        let axis = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let t = Vector3::new(rng.random_range(-trans..trans), rng.random_range(-trans..trans), rng.random_range(-trans..trans));
        CameraPose::new(UnitQuaternion::from_scaled_axis(axis), t)
    }

    fn random_depth(rng: &mut impl Rng, w: usize, h: usize) -> DepthMap {
        DepthMap::from_values(Grid::from_fn(w, h, |_, _| rng.random_range(1.0..5.0))).unwrap()
    }

    #[test]
    fn identity_unprojection() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let d = DepthMap::from_values(Grid::filled(5, 4, 1.0)).unwrap();
        let pm = unproject(&d, &k, &CameraPose::identity());
        assert_eq!(*pm.points().get(3, 2), Vector3::new(3.0, 2.0, 1.0));
        let shifted = CameraPose::new(UnitQuaternion::identity(), Vector3::new(1.0, 2.0, 3.0));
        let pm = unproject(&d, &k, &shifted);
        assert_eq!(*pm.points().get(3, 2), Vector3::new(4.0, 4.0, 4.0));
    }

    #[test]
    fn unprojection_matches_homogeneous_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Intrinsics::new(rng.random_range(50.0..150.0), rng.random_range(50.0..150.0), 7.3, 5.1);
        let pose = random_pose(&mut rng, 3.0);
        let d = random_depth(&mut rng, 9, 7);
        let pm = unproject(&d, &k, &pose);
        let kinv = k.matrix().try_inverse().unwrap();
        let m: Matrix4<f64> = pose.world_from_camera();
        for j in 0..7 {
            for i in 0..9 {
                let z = *d.values().get(i, j);
                let c = kinv * Vector3::new(i as f64 * z, j as f64 * z, z);
                let x = m * Vector4::new(c.x, c.y, c.z, 1.0);
                assert!((pm.points().get(i, j) - x.xyz()).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_depth_gives_invalid_point() {
        let mut v = Grid::filled(3, 3, 2.0);
        *v.get_mut(1, 1) = 0.0;
        let d = DepthMap::from_values(v).unwrap();
        let pm = unproject(&d, &Intrinsics::centered(10.0, 3, 3), &CameraPose::identity());
        assert!(!*pm.valid().get(1, 1));
        assert!(*pm.valid().get(0, 1));
    }

    #[test]
    fn on_axis_projection_and_camera_centre() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0);
        let p = project_point(&Vector3::new(0.0, 0.0, 2.0), &k, &CameraPose::identity());
        assert!(p.in_front);
        assert_eq!(p.pixel, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth, 2.0);
        assert!(!project_point(&Vector3::zeros(), &k, &CameraPose::identity()).in_front);
        assert!(!project_point(&Vector3::new(0.0, 0.0, -1.0), &k, &CameraPose::identity()).in_front);
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let k = Intrinsics::new(rng.random_range(40.0..200.0), rng.random_range(40.0..200.0), 15.5, 11.5);
            let pose = random_pose(&mut rng, 4.0);
            let d = random_depth(&mut rng, 32, 24);
            let pm = unproject(&d, &k, &pose);
            let proj = project(pm.points().data(), &k, &pose);
            for (idx, p) in proj.iter().enumerate() {
                let (i, j) = ((idx % 32) as f64, (idx / 32) as f64);
                assert!(p.in_front);
                worst = worst.max((p.pixel - Vector2::new(i, j)).norm());
            }
        }
        assert!(worst < 1e-8, "max reprojection error {worst}");
    }

    #[test]
    fn ego_flow_zero_without_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Intrinsics::centered(60.0, 16, 12);
        let pose = random_pose(&mut rng, 1.0);
        let d = random_depth(&mut rng, 16, 12);
        let f = ego_flow(&d, &k, &pose, &pose, &k, 0, 1).unwrap();
        assert!(f.displacement().data().iter().all(|v| v.norm() < 1e-12));
        assert!(f.valid().data().iter().all(|&v| v));
    }

    #[test]
    fn ego_flow_planar_parallax() {
        let (f, z0, delta) = (80.0, 4.0, 0.3);
        let k = Intrinsics::centered(f, 20, 16);
        let d = DepthMap::from_values(Grid::filled(20, 16, z0)).unwrap();
        let moved = CameraPose::new(UnitQuaternion::identity(), Vector3::new(delta, 0.0, 0.0));
        let flow = ego_flow(&d, &k, &CameraPose::identity(), &moved, &k, 0, 1).unwrap();
        for v in flow.displacement().data() {
            assert!((v.x + f * delta / z0).abs() < 1e-12);
            assert!(v.y.abs() < 1e-12);
        }
    }

    #[test]
    fn ego_flow_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k0 = Intrinsics::centered(70.0, 12, 10);
        let k1 = Intrinsics::centered(75.0, 12, 10);
        let p0 = random_pose(&mut rng, 0.3);
        let p1 = random_pose(&mut rng, 0.3);
        let d = random_depth(&mut rng, 12, 10);
        let flow = ego_flow(&d, &k0, &p0, &p1, &k1, 0, 1).unwrap();
        for j in 0..10 {
            for i in 0..12 {
                // explicit composition: camera t -> world -> camera t' -> pixel
                let z = *d.values().get(i, j);
                let cam0 = Vector3::new((i as f64 - k0.cx) * z / k0.fx, (j as f64 - k0.cy) * z / k0.fy, z);
                let world = p0.rotation_matrix() * cam0 + p0.translation;
                let cam1 = p1.rotation_matrix().transpose() * (world - p1.translation);
                if cam1.z <= 0.0 {
                    assert!(!*flow.valid().get(i, j));
                    continue;
                }
                let u = k1.fx * cam1.x / cam1.z + k1.cx - i as f64;
                let v = k1.fy * cam1.y / cam1.z + k1.cy - j as f64;
                let got = flow.displacement().get(i, j);
                assert!((got.x - u).abs() < 1e-8 && (got.y - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn umeyama_identity_and_pure_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src: Vec<_> = (0..10).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let s = umeyama_align(&src, &src, None, true).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!((s.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
        let dst: Vec<_> = src.iter().map(|p| 2.0 * p).collect();
        let s = umeyama_align(&src, &dst, None, true).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-12);
        assert!((s.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
        let s = umeyama_align(&src, &dst, None, false).unwrap();
        assert_eq!(s.scale, 1.0);
    }

    #[test]
    fn umeyama_recovers_random_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let truth = Similarity {
                scale: rng.random_range(0.2..5.0),
                rotation: Rotation3::from_scaled_axis(Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ))
                .into_inner(),
                translation: Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)),
            };
            let src: Vec<_> =
                (0..50).map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
            let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
            let got = umeyama_align(&src, &dst, None, true).unwrap();
            assert!((got.scale - truth.scale).abs() < 1e-10);
            assert!((got.rotation - truth.rotation).abs().max() < 1e-10);
            assert!((got.translation - truth.translation).abs().max() < 1e-10);
            assert!((got.rotation.determinant() - 1.0).abs() < 1e-12);

            // permutation invariance
            let mut perm: Vec<usize> = (0..50).collect();
            perm.reverse();
            let ps: Vec<_> = perm.iter().map(|&k| src[k]).collect();
            let pd: Vec<_> = perm.iter().map(|&k| dst[k]).collect();
            let again = umeyama_align(&ps, &pd, None, true).unwrap();
            assert!((again.rotation - got.rotation).abs().max() < 1e-10);
            assert!((again.scale - got.scale).abs() < 1e-10);
        }
    }

    #[test]
    fn umeyama_rejects_degenerate_sets() {
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(matches!(umeyama_align(&two, &two, None, true), Err(Error::Degenerate(_))));
        let line: Vec<_> = (0..5).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        assert!(matches!(umeyama_align(&line, &line, None, true), Err(Error::Degenerate(_))));
    }

    #[test]
    fn umeyama_handles_reflection_case() {
        // planar points: det(U)det(V) sign must still give a proper rotation
        let src: Vec<_> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 0.2)]
            .iter()
            .map(|&(x, y)| Vector3::new(x, y, 0.0))
            .collect();
        let r = Rotation3::from_scaled_axis(Vector3::new(0.3, 2.0, -1.0)).into_inner();
        let dst: Vec<_> = src.iter().map(|p| r * p).collect();
        let got = umeyama_align(&src, &dst, None, false).unwrap();
        assert!((got.rotation - r).abs().max() < 1e-10);
    }

    #[test]
    fn bilinear_cases() {
        let g = Grid::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&g, None, 1.0, 1.0), Some(3.0));
        assert_eq!(bilinear_sample(&g, None, 0.0, 1.0), Some(2.0));
        assert_eq!(bilinear_sample(&g, None, 0.5, 0.5), Some(1.5));
        assert_eq!(bilinear_sample(&g, None, -0.1, 0.5), None);
        assert_eq!(bilinear_sample(&g, None, 0.5, 1.2), None);
        let mut valid = Grid::filled(2, 2, true);
        *valid.get_mut(1, 1) = false;
        assert_eq!(bilinear_sample(&g, Some(&valid), 0.5, 0.5), None);
        assert_eq!(bilinear_sample(&g, Some(&valid), 0.0, 0.0), Some(0.0));
    }
}

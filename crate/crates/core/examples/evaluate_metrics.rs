//! Pose and depth metrics on a perturbed copy of a synthetic scene's ground
//! truth, before and after a similarity transform.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scene4d::eval::{depth_metrics, pose_metrics, DepthAlignment};
use scene4d::scene::{CameraPose, DepthMap, Grid};
use scene4d::synth::{generate, SynthConfig};

fn main() -> scene4d::Result<()> {
    let (_, scene) = generate(&SynthConfig::small())?;
    let gt = scene.ground_truth.as_ref().expect("synthetic scenes carry ground truth");
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let noisy: Vec<CameraPose> = gt
        .poses
        .iter()
        .map(|p| {
            let dr = UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01)));
            CameraPose::new(dr * p.rotation, p.translation + Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02)))
        })
        .collect();
    let r = UnitQuaternion::from_euler_angles(0.3, -1.1, 0.7);
    let moved: Vec<CameraPose> =
        noisy.iter().map(|p| CameraPose::new(r * p.rotation, 2.5 * (r * p.translation) + Vector3::new(4.0, -1.0, 2.0))).collect();
    for (name, poses) in [("perturbed", &noisy), ("perturbed + Sim(3)", &moved)] {
        let m = pose_metrics(poses, &gt.poses)?;
        println!("{name:20} ATE {:.5}  RPE trans {:.5}  RPE rot {:.4} deg", m.ate, m.rpe_trans, m.rpe_rot_deg);
    }

    let est: Vec<DepthMap> = gt
        .depth
        .iter()
        .map(|d| {
            let v: Vec<f64> = d.values().data().iter().map(|z| 0.5 * z * rng.random_range(0.97..1.03) + 0.2).collect();
            DepthMap::from_values(Grid::from_vec(d.width(), d.height(), v).expect("same shape")).expect("positive depth")
        })
        .collect();
    for mode in [DepthAlignment::Scale, DepthAlignment::ScaleShift] {
        let m = depth_metrics(&est, &gt.depth, mode)?;
        println!("{mode:?}: AbsRel {:.4}  RMSE {:.4}  delta<1.25 {:.4}", m.abs_rel, m.rmse, m.delta_125);
    }
    Ok(())
}

//! Robust fundamental matrices from tracks and the motion masks they induce,
//! scored against the rendered silhouettes.
//!
//! `cargo run --example epipolar_masks -- [flow_sigma]`

use scene4d::epipolar::{motion_mask_for_pair, motion_masks, MaskConfig};
use scene4d::eval::mask_iou;
use scene4d::synth::{generate, SynthConfig};

fn main() -> scene4d::Result<()> {
    let mut cfg = SynthConfig::small();
    if let Some(sigma) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.noise.flow_sigma = sigma;
    }
    let (scene, data) = generate(&cfg)?;
    let mask_cfg = MaskConfig::default();

    for ((from, to), flow) in data.flows.iter().filter(|((f, _), _)| *f == 0) {
        let pair = motion_mask_for_pair(flow, &data.tracks, &mask_cfg)?;
        match &pair.fit {
            Some(fit) => println!(
                "{from}->{to}: {} / {} inliers, robust scale {:.3} px, {} raw dynamic pixels",
                fit.num_inliers(),
                fit.inliers.len(),
                fit.robust_scale,
                pair.raw.data().iter().filter(|&&d| d).count()
            ),
            None => println!("{from}->{to}: too few correspondences, all static"),
        }
    }

    let masks = motion_masks(&data.graph, &data.flows, &data.tracks, &mask_cfg)?;
    for (t, m) in masks.iter().enumerate() {
        println!("frame {t}: IoU {:.4}", mask_iou(m, &scene.motion_mask(t))?);
    }
    Ok(())
}

use scene4d::epipolar::{motion_masks, MaskConfig};
use scene4d::eval::mask_iou;
use scene4d::synth::{generate, SphereMotion, SynthConfig};

const START: usize = 3;

fn delayed() -> SynthConfig {
    let mut cfg = SynthConfig::small();
    let SphereMotion::Linear { velocity, .. } = cfg.spheres[0].motion else { panic!("small preset moves linearly") };
    cfg.spheres[0].motion = SphereMotion::Linear { velocity, start_frame: START };
    cfg
}

#[test]
fn ground_truth_mask_follows_mobility_rule() {
    let (scene, _) = generate(&delayed()).unwrap();
    for t in 0..scene.num_frames() {
        let area = scene.motion_mask(t).count();
        if t < START {
            assert_eq!(area, 0, "frame {t}");
        } else {
            assert!(area > 50, "frame {t}: {area}");
        }
    }
}

#[test]
fn estimated_masks_track_the_moving_sphere() {
    let (scene, data) = generate(&delayed()).unwrap();
    let masks = motion_masks(&data.graph, &data.flows, &data.tracks, &MaskConfig::default()).unwrap();
    for (t, mask) in masks.iter().enumerate().skip(START) {
        let iou = mask_iou(mask, &scene.motion_mask(t)).unwrap();
        assert!(iou > 0.9, "frame {t}: IoU {iou}");
    }
}

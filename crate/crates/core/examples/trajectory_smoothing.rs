//! Smooth a flickering clip: lift tracks to 3D, low-pass them and carry the
//! correction to every pixel.
//!
//! `cargo run --example trajectory_smoothing -- [flicker] [window] [pad]`

use scene4d::testing::flicker_clip;
use scene4d::trajectory::{lift_all_tracks, smoothed_pointmaps, SmoothingConfig};

fn main() -> scene4d::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let flicker = args.first().copied().unwrap_or(0.03);
    let mut cfg = SmoothingConfig::default();
    if let Some(&w) = args.get(1) {
        cfg.window = w as usize;
    }
    if let Some(&p) = args.get(2) {
        cfg.pad = p as usize;
    }

    let (pointmaps, tracks) = flicker_clip(7, 24, 32, 24, 60, flicker);
    let smoothed = smoothed_pointmaps(&pointmaps, &tracks, &cfg, None)?;
    let before = lift_all_tracks(&tracks, &pointmaps).mean_second_difference();
    let after = lift_all_tracks(&tracks, &smoothed).mean_second_difference();
    println!("window {} pad {}: mean second difference {before:.4e} -> {after:.4e}", cfg.window, cfg.pad);

    let (cx, cy) = (16, 12);
    for t in 0..pointmaps.len() {
        let z0 = pointmaps[t].points().get(cx, cy).z;
        let z1 = smoothed[t].points().get(cx, cy).z;
        println!("frame {t:2}: centre depth {z0:.4} -> {z1:.4}");
    }
    Ok(())
}

//! Stage-1 alignment alone: initialize from pair predictions, optimize the
//! correspondence objectives and compare camera error before and after.
//!
//! `cargo run --release --example global_alignment -- [pointmap_sigma] [iters]`

use scene4d::epipolar::motion_masks;
use scene4d::eval::pose_metrics;
use scene4d::objectives::ObjectiveData;
use scene4d::optim::{init_state, run_stage1, PipelineConfig};
use scene4d::synth::{generate, SynthConfig};

fn main() -> scene4d::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = SynthConfig::small();
    cfg.noise.pointmap_sigma = args.first().and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let mut pipeline = PipelineConfig::default();
    if let Some(iters) = args.get(1).and_then(|s| s.parse().ok()) {
        pipeline.optimizer.stage1.iters = iters;
    }

    let (synth, scene) = generate(&cfg)?;
    let masks = motion_masks(&scene.graph, &scene.flows, &scene.tracks, &pipeline.masks)?;
    let mut state = init_state(&scene.pairs, &scene.graph, scene.width, scene.height)?;
    let before = pose_metrics(&state.poses(), synth.poses())?;

    let data = ObjectiveData { pairs: &scene.pairs, flows: &scene.flows, masks: &masks, targets: None };
    let trace = run_stage1(&mut state, &data, &pipeline.optimizer)?;
    let after = pose_metrics(&state.poses(), synth.poses())?;

    for row in trace.iter().step_by((trace.len() / 10).max(1)) {
        println!("iter {:4}  total {:.4e}  ga {:.4e}  cma {:.4e}  cts {:.4e}", row.iteration, row.total, row.ga, row.cma, row.cts);
    }
    println!("ATE {:.4e} -> {:.4e}", before.ate, after.ate);
    println!("RPE rot {:.4} -> {:.4} deg", before.rpe_rot_deg, after.rpe_rot_deg);
    println!("focal {:.2} (true {:.2})", state.focal(0), cfg.focal);
    Ok(())
}

//! Synthesize a scene, reconstruct it and print metrics against ground truth.
//!
//! `cargo run --release --example full_pipeline -- [small|medium] [pointmap_sigma]`

use scene4d::eval::evaluate;
use scene4d::optim::{reconstruct, PipelineConfig};
use scene4d::synth::{generate, SynthConfig};

fn main() -> scene4d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match args.first().map(String::as_str) {
        Some("medium") => SynthConfig::medium(),
        _ => SynthConfig::small(),
    };
    if let Some(sigma) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg.noise.pointmap_sigma = sigma;
    }
    let (_, scene) = generate(&cfg)?;
    let (rec, run) = reconstruct(&scene, &PipelineConfig::default())?;
    let first = run.trace.first().map_or(f64::NAN, |r| r.total);
    let last = run.trace.last().map_or(f64::NAN, |r| r.total);
    println!("loss: first {first:.6e}, last {last:.6e}");
    let gt = scene.ground_truth.as_ref().expect("synthetic scenes carry ground truth");
    println!("initial ate={:.6e}", scene4d::eval::ate(&run.initial.poses(), &gt.poses)?);
    print!("{}", evaluate(&rec, &scene)?.to_text());
    Ok(())
}

//! Reconstruct the small scene and write it as a PLY point cloud with moving
//! points painted red.
//!
//! `cargo run --release --example export_ply -- [out.ply] [ascii|binary]`

use scene4d::io::{export_ply, DynamicPoints, PlyFormat, PlyOptions};
use scene4d::optim::{reconstruct, PipelineConfig};
use scene4d::synth::{generate, SynthConfig};

fn main() -> scene4d::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = std::path::PathBuf::from(args.first().map_or("scene.ply", String::as_str));
    let format = match args.get(1).map(String::as_str) {
        Some("binary") => PlyFormat::BinaryLittleEndian,
        _ => PlyFormat::Ascii,
    };
    let (_, scene) = generate(&SynthConfig::small())?;
    let (rec, _) = reconstruct(&scene, &PipelineConfig::default())?;
    let opts = PlyOptions { format, dynamic: DynamicPoints::Flag };
    let n = export_ply(&path, &rec.world_pointmaps(), None, Some(&rec.masks), opts)?;
    println!("wrote {n} points to {}", path.display());
    Ok(())
}

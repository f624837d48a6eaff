//! Generate synthetic wisps with multi-segment target colors and save them.
use cghair::synth::{assign_patterned_colors, generate_wisp_hairstyle, WispParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let h = generate_wisp_hairstyle(&WispParams::default())?;
    let palette = [[0.35, 0.2, 0.1], [0.85, 0.65, 0.35], [0.6, 0.15, 0.1], [0.1, 0.08, 0.06]];
    let targets = assign_patterned_colors(&h, &palette, 4, 4, 11)?;

    let out = std::env::temp_dir().join("cghair_synth");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("synth.hair"), cghair::hairio::write_hair_file(&h)?)?;
    std::fs::write(out.join("targets.bin"), targets.to_bytes())?;

    let lengths: Vec<f64> = h.strands.iter().map(|s| s.length()).collect();
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    println!("{} strands x {} points, mean length {mean:.4}", h.len(), h.points_per_strand().unwrap_or(0));
    println!("strand 0 colors: first {:?}, last {:?}", targets.colors[0][0], targets.colors[0].last().unwrap());
    println!("written to {}", out.display());
    Ok(())
}

//! Map a cluster's strands onto its card and rasterize the strand texture.
use cghair::card::{build_card, CardConfig};
use cghair::cluster::cluster_strands;
use cghair::synth::{generate_wisp_hairstyle, WispParams};
use cghair::uvmap::{optimize_uv, rasterize_strand_texture, reconstruct_points};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = WispParams { n_wisps: 2, strands_per_wisp: 20, ..Default::default() };
    let h = generate_wisp_hairstyle(&params)?;
    let clusters = cluster_strands(&h, 2, 1)?;
    let card = build_card(&clusters[0], &h.strands, &CardConfig::default())?;

    let sets = optimize_uv(&clusters[0], &h.strands, &card, 500, 0.5)?;
    for s in sets.iter().take(3) {
        let pts = reconstruct_points(s, &card)?;
        let err = pts.iter().zip(h.strands[s.strand].points()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        println!("strand {:>3}: loss {:.3e} -> {:.3e}, max error {err:.3e}", s.strand, s.initial_loss, s.final_loss);
    }

    let tex = rasterize_strand_texture(&sets, 128, 128)?;
    let covered = tex.pixels.iter().filter(|p| **p > 0.5).count();
    let path = std::env::temp_dir().join("cghair_texture.pgm");
    tex.write_pgm(std::fs::File::create(&path)?)?;
    println!("{} strands, {covered} covered pixels, texture at {}", tex.strands, path.display());
    Ok(())
}

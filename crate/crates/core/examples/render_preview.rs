//! Render target-colored Gaussian strands from the front.
use cghair::gsplat::{render, strand_to_gaussians, Camera, RenderOptions};
use cghair::pipeline::target_sh;
use cghair::synth::{assign_synthetic_colors, generate_wisp_hairstyle, WispParams};
use cghair::Vec3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = WispParams { n_wisps: 10, strands_per_wisp: 30, ..Default::default() };
    let h = generate_wisp_hairstyle(&params)?;
    let palette = [[0.35, 0.2, 0.1], [0.85, 0.65, 0.35]];
    let targets = assign_synthetic_colors(&h, &palette, 3, 9)?;

    let mut gaussians = Vec::new();
    for (s, strand) in h.strands.iter().enumerate() {
        let sh: Vec<Vec<f64>> = targets.colors[s].iter().map(|c| target_sh(c, 3)).collect();
        let opacity = vec![1.0; sh.len()];
        gaussians.extend(strand_to_gaussians(strand, 5e-4, &opacity, &sh)?.gaussians);
    }

    let cam = Camera::look_at(Vec3::new(0.0, 0.05, 0.8), Vec3::new(0.0, 0.05, 0.0), Vec3::y(), 0.8, 320, 320)?;
    let img = render(&gaussians, &cam, &RenderOptions::default())?;
    let path = std::env::temp_dir().join("cghair_preview.ppm");
    img.write_ppm(std::fs::File::create(&path)?)?;
    println!("{} Gaussians rendered to {}", gaussians.len(), path.display());
    Ok(())
}

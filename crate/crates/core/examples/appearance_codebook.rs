//! Fit shared codebooks and the decoder to multi-tone target colors, then
//! export the compact model with hard entry indices.
use cghair::codebook::{
    color_error, export_compact, fit_appearance, sh_coeff_count, CompactAppearanceModel, FitHyper, ModelShape,
};
use cghair::synth::{assign_patterned_colors, generate_wisp_hairstyle, WispParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = WispParams { n_wisps: 6, strands_per_wisp: 40, points_per_strand: 40, ..Default::default() };
    let h = generate_wisp_hairstyle(&params)?;
    let palette = [[0.8, 0.2, 0.1], [0.1, 0.6, 0.2], [0.2, 0.3, 0.9], [0.9, 0.85, 0.3]];
    let targets = assign_patterned_colors(&h, &palette, 4, 4, 2)?;

    // one card per wisp, two card clusters
    let strand_card: Vec<usize> = (0..h.len()).map(|s| s / params.strands_per_wisp).collect();
    let card_cluster = vec![0, 0, 0, 1, 1, 1];
    let shape = ModelShape { n_t: 2, k: 10, d: 32, h: 8, g: 39, sh_degree: 1 };
    let model = CompactAppearanceModel::init(shape, strand_card, card_cluster, 4)?;

    let hyper = FitHyper { iters: 300, ..Default::default() };
    let (fitted, trace) = fit_appearance(&model, &targets, &hyper)?;
    let c = sh_coeff_count(shape.sh_degree);
    let soft = color_error(|s| fitted.strand_sh(s, fitted.tau), c, &targets);

    let hard = export_compact(&fitted);
    let hard_err = color_error(|s| hard.strand_sh(s, 1.0), c, &targets);
    println!("loss {:.5} after {} steps", trace.final_loss().unwrap_or(f64::NAN), trace.steps.len());
    println!("color error: soft {soft:.4}, hard {hard_err:.4}");
    println!("compact model: {} bytes", hard.to_bytes().len());
    Ok(())
}

//! Build hair cards for clustered strands and write them as an OBJ file.
use cghair::card::{build_card, CardConfig};
use cghair::cluster::cluster_strands;
use cghair::pipeline::cards_to_obj;
use cghair::synth::{generate_wisp_hairstyle, WispParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = WispParams { n_wisps: 4, strands_per_wisp: 30, ..Default::default() };
    let h = generate_wisp_hairstyle(&params)?;
    let clusters = cluster_strands(&h, 12, 5)?;
    let cfg = CardConfig::default();
    let cards = clusters.iter().map(|c| build_card(c, &h.strands, &cfg)).collect::<Result<Vec<_>, _>>()?;

    for c in cards.iter().take(4) {
        println!(
            "card {:>2}: width {:.5}, {} vertices, {} triangles",
            c.cluster_id,
            c.width,
            c.mesh.vertices.len(),
            c.mesh.triangles.len()
        );
    }
    let path = std::env::temp_dir().join("cghair_cards.obj");
    std::fs::write(&path, cards_to_obj(&cards))?;
    println!("{} cards written to {}", cards.len(), path.display());
    Ok(())
}

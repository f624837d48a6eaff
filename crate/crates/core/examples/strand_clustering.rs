//! Cluster synthetic strands and print cluster sizes.
use cghair::cluster::cluster_strands;
use cghair::synth::{generate_wisp_hairstyle, WispParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = WispParams { n_wisps: 8, strands_per_wisp: 40, ..Default::default() };
    let h = generate_wisp_hairstyle(&params)?;
    let clusters = cluster_strands(&h, 16, 3)?;

    let mut sizes: Vec<usize> = clusters.iter().map(|c| c.members.len()).collect();
    sizes.sort_unstable();
    println!("{} strands in {} clusters", h.len(), clusters.len());
    println!("cluster sizes: {sizes:?}");
    let c = &clusters[0];
    println!("cluster 0 guide length {:.4}", c.guide.length());
    Ok(())
}

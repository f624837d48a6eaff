//! Write a small hairstyle as `.hair` and as a strand blob, read both back
//! and resample to a fixed point count.
use cghair::hairio::{parse_any, write_blob, write_hair_file};
use cghair::synth::{generate_wisp_hairstyle, WispParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = WispParams { n_wisps: 3, strands_per_wisp: 5, points_per_strand: 40, ..Default::default() };
    let h = generate_wisp_hairstyle(&params)?;

    let hair = write_hair_file(&h)?;
    let blob = write_blob(&h)?;
    println!("{} strands: .hair {} bytes, blob {} bytes", h.len(), hair.len(), blob.len());

    let from_hair = parse_any(&hair)?;
    let from_blob = parse_any(&blob)?;
    assert_eq!(from_hair.total_points(), from_blob.total_points());

    let resampled = from_hair.normalized(100)?;
    let s = &resampled.strands[0];
    println!("strand 0: {} points, length {:.4}, root {:?}", s.len(), s.length(), s.root().as_slice());
    Ok(())
}

//! Run every pipeline stage on a small synthetic hairstyle and print the
//! report.
use cghair::pipeline::{run_pipeline, PipelineConfig, REPORT_TXT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::default();
    cfg.output_dir = std::env::temp_dir().join("cghair_pipeline");
    cfg.synth.n_wisps = 6;
    cfg.synth.strands_per_wisp = 50;
    cfg.cluster.n_c = 60;
    cfg.codebook.n_t = 16;
    cfg.fit.iters = 300;

    let manifest = run_pipeline(&cfg)?;
    for a in &manifest.artifacts {
        println!("{:<22} {:>10} bytes", a.name, a.bytes);
    }
    println!();
    print!("{}", std::fs::read_to_string(cfg.output_dir.join(REPORT_TXT))?);
    Ok(())
}

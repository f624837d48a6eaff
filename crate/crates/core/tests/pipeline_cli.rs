use std::path::Path;
use std::process::{Command, Output};

use cghair::pipeline::{PipelineConfig, RunManifest};

const SMALL: &str = r#"
seed = 5

[synth]
n_wisps = 4
strands_per_wisp = 20
points_per_strand = 40

[ingest]
points_per_strand = 40

[cluster]
n_c = 24

[uvmap]
iters = 200
texture_size = 64

[codebook]
n_t = 6
k = 4
d = 16
feature_grid = 16

[fit]
iters = 60

[render]
width = 48
height = 48
"#;

fn cghair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cghair")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, out: &Path) -> String {
    let path = dir.join("small.toml");
    let text = format!("output_dir = {:?}\n{SMALL}", out.to_str().unwrap());
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_then_run_emits_model_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out);
    ok(&cghair(&["--config", &cfg, "synth"]));
    assert!(out.join("synth.hair").exists() && out.join("targets.bin").exists());
    ok(&cghair(&["--config", &cfg, "--threads", "2", "run"]));
    for name in ["model.cghm", "report.txt", "report.json", "cards.obj", "strand_cards.bin", "render_00.ppm", "manifest.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }

    // the manifest echoes the config exactly
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config, PipelineConfig::load(Path::new(&cfg)).unwrap());
    let reparsed = PipelineConfig::from_toml(&manifest.config.to_toml()).unwrap();
    assert_eq!(reparsed, manifest.config);

    // a deleted downstream artifact is reproduced byte-identically
    for (stage, name) in [("export", "model.cghm"), ("uvmap", "uv.bin"), ("cards", "strand_cards.bin"), ("render", "render_01.ppm")] {
        let before = std::fs::read(out.join(name)).unwrap();
        std::fs::remove_file(out.join(name)).unwrap();
        ok(&cghair(&["--config", &cfg, stage]));
        assert_eq!(std::fs::read(out.join(name)).unwrap(), before, "{stage} rerun changed {name}");
    }

    // another seed gives another model; the same seed the same one
    let other = tmp.path().join("other");
    ok(&cghair(&["--config", &cfg, "--seed", "6", "--out", other.to_str().unwrap(), "run"]));
    assert_ne!(std::fs::read(other.join("model.cghm")).unwrap(), std::fs::read(out.join("model.cghm")).unwrap());
    let again = tmp.path().join("again");
    ok(&cghair(&["--config", &cfg, "--threads", "1", "--out", again.to_str().unwrap(), "run"]));
    assert_eq!(std::fs::read(again.join("model.cghm")).unwrap(), std::fs::read(out.join("model.cghm")).unwrap());
}

#[test]
fn missing_input_fails_in_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cghair(&["--out", tmp.path().to_str().unwrap(), "run", "--input", "/no/such/file.hair"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ingest stage failed"), "{err}");
}

#[test]
fn stage_without_inputs_names_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cghair(&["--out", tmp.path().to_str().unwrap(), "cards"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cards stage failed") && err.contains("strands.cgh"), "{err}");
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[codebook]\nk = 0\n").unwrap();
    let o = cghair(&["--config", path.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("codebook.k"));
}

#[test]
fn config_subcommand_prints_defaults() {
    let o = cghair(&["config"]);
    ok(&o);
    let cfg = PipelineConfig::from_toml(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg, PipelineConfig::default());
}

#[test]
fn ingest_accepts_external_hair_file_with_targets() {
    use cghair::hairio::write_hair_file;
    use cghair::synth::{assign_synthetic_colors, generate_wisp_hairstyle, WispParams};
    let tmp = tempfile::tempdir().unwrap();
    let h = generate_wisp_hairstyle(&WispParams { n_wisps: 2, strands_per_wisp: 5, points_per_strand: 30, ..Default::default() })
        .unwrap();
    let resampled = h.normalized(40).unwrap();
    let targets = assign_synthetic_colors(&resampled, &[[0.5, 0.2, 0.1]], 2, 1).unwrap();
    std::fs::write(tmp.path().join("in.hair"), write_hair_file(&h).unwrap()).unwrap();
    std::fs::write(tmp.path().join("t.bin"), targets.to_bytes()).unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out);
    let input = tmp.path().join("in.hair");
    let t = tmp.path().join("t.bin");
    ok(&cghair(&["--config", &cfg, "ingest", "--input", input.to_str().unwrap(), "--targets", t.to_str().unwrap()]));
    assert_eq!(std::fs::read(out.join("targets.bin")).unwrap(), targets.to_bytes());

    // targets for a different point count are refused
    let wrong = assign_synthetic_colors(&h, &[[0.5, 0.2, 0.1]], 2, 1).unwrap();
    std::fs::write(&t, wrong.to_bytes()).unwrap();
    let o = cghair(&["--config", &cfg, "ingest", "--input", input.to_str().unwrap(), "--targets", t.to_str().unwrap()]);
    assert!(!o.status.success());
}

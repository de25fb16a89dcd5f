use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use forknet::model::ForkNetConfig;
use forknet::trainer::RunConfig;
use forknet::voxel::read_volume;

fn forknet(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_forknet")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "forknet {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    forknet(&["gen-data", "--out", p(&data), "--count", "10", "--seed", "3", "--grid", "16x16x16", "--classes", "3"]);
    assert!(data.join("00009").join("depth.pgm").exists());

    let mut config = RunConfig::default();
    config.model = ForkNetConfig {
        grid: [16, 16, 16],
        classes: 3,
        encoder_widths: [2; 4],
        latent_channels: 2,
        generator_widths: [2; 3],
        discriminator_widths: [2; 3],
        ..ForkNetConfig::default()
    };
    config.train.epochs = 2;
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, config.to_toml()).unwrap();
    forknet(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg)]);
    let ckpt = run.join("checkpoint.fnck");
    let log = fs::read_to_string(run.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(RunConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap(), config);

    let iou = dir.path().join("iou");
    let out = forknet(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&iou)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("majority fill") && text.contains("copy visible"));
    for mode in ["full", "surface"] {
        for tag in ["model", "majority", "copy_visible"] {
            assert!(iou.join(format!("iou_{mode}_{tag}.txt")).exists());
        }
    }
    let only = dir.path().join("iou_full");
    forknet(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--mode", "full", "--out", p(&only)]);
    assert!(only.join("iou_full_model.txt").exists());
    assert!(!only.join("iou_surface_model.txt").exists());

    let done = dir.path().join("done");
    let mesh = dir.path().join("scene.obj");
    forknet(&[
        "complete", "--ckpt", p(&ckpt), "--depth", p(&data.join("00009").join("depth.pgm")),
        "--out", p(&done), "--mesh", p(&mesh),
    ]);
    for name in ["x_hat.fvox", "g.fvox", "s.fvox"] {
        assert_eq!(read_volume(done.join(name)).unwrap().grid.dims, [16, 16, 16]);
    }
    assert!(mesh.exists());

    let samples = dir.path().join("samples");
    forknet(&["sample", "--ckpt", p(&ckpt), "--out", p(&samples), "--count", "3"]);
    for k in 0..3 {
        let x = read_volume(samples.join(format!("sample_{k:03}_x.fvox"))).unwrap();
        let s = read_volume(samples.join(format!("sample_{k:03}_s.fvox"))).unwrap();
        assert_eq!(x.channels, 1);
        assert_eq!(s.channels, 4);
    }
    assert!(!samples.join("sample_003_x.fvox").exists());
}

#[test]
fn gradcheck_command_passes() {
    let out = forknet(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.trim_end().ends_with("all pass"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn errors_exit_nonzero() {
    let out = Command::new(env!("CARGO_BIN_EXE_forknet"))
        .args(["eval", "--data", "/nonexistent", "--ckpt", "/nonexistent/c.fnck"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let usage = Command::new(env!("CARGO_BIN_EXE_forknet")).arg("train").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

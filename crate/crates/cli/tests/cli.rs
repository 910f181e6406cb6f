//! End-to-end checks of the command-line driver: config parsing, a small
//! run with byte-stable CSV output, study and invariants subcommands.

use std::path::Path;
use std::process::Command;

fn ellam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ellam"))
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const RUN_TOML: &str = r#"
[mesh]
cartesian = [6, 6]

[model]
d_m = 0.01
d_l = 0.02
d_t = 0.005
mobility_ratio = 2.0
t_end = 0.25

[[well]]
kind = "injection"
center = [0.1, 0.1]
radius = 0.08
rate = 1.0

[[well]]
kind = "production"
center = [0.9, 0.9]
radius = 0.08
rate = 1.0

[time]
steps = 4

[output]
vtk = true
vtk_every = 4
"#;

#[test]
fn run_produces_deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    write(&config, RUN_TOML);

    let out1 = dir.path().join("out1");
    let status = ellam()
        .arg("run")
        .arg(&config)
        .env("ELLAM_OUTPUT_DIR", &out1)
        .status()
        .unwrap();
    assert!(status.success());
    let csv1 = std::fs::read(out1.join("diagnostics.csv")).unwrap();
    assert!(out1.join("concentration_0000.vtk").exists());
    assert!(out1.join("concentration_0004.vtk").exists());
    assert!(out1.join("pressure_0000.vtk").exists());
    assert!(out1.join("velocity_0000.vtk").exists());

    // Re-running the identical configuration reproduces the CSV byte for
    // byte.
    let out2 = dir.path().join("out2");
    let status = ellam()
        .arg("run")
        .arg(&config)
        .env("ELLAM_OUTPUT_DIR", &out2)
        .status()
        .unwrap();
    assert!(status.success());
    let csv2 = std::fs::read(out2.join("diagnostics.csv")).unwrap();
    assert_eq!(csv1, csv2);
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    write(&config, "[mesh]\ncartesian = [4, 4]\n[model]\nd_m = 0.0\nd_l = 1.0\nd_t = 1.0\nt_end = 1.0\n[time]\nsteps = 2\n");
    let output = ellam().arg("run").arg(&config).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("dispersion"), "stderr: {stderr}");
}

#[test]
fn study_and_invariants_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("study.toml");
    write(
        &spec,
        r#"
levels = [4, 8]
scenario = "elliptic-manufactured"
"#,
    );
    let out = dir.path().join("study-out");
    let output = ellam()
        .arg("study")
        .arg(&spec)
        .env("ELLAM_OUTPUT_DIR", &out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.starts_with("level,h,err_pi,err_grad"), "stdout: {stdout}");
    assert!(out.join("convergence.csv").exists());

    let inv_spec = dir.path().join("inv.toml");
    write(
        &inv_spec,
        r#"
levels = [6]
scenario = "coupled-wells"
steps = 4
t_end = 0.25
"#,
    );
    let output = ellam()
        .arg("invariants")
        .arg(&inv_spec)
        .env("ELLAM_OUTPUT_DIR", dir.path().join("inv-out"))
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(output.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("all invariants passed"), "stdout: {stdout}");
}

#[test]
fn mesh_info_and_gd_quality() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("mesh.poly");
    write(
        &mesh,
        "polymesh 2d\nv 0 0\nv 1 0\nv 1 1\nv 0 1\nv 0.5 0.5\nc 0 1 4\nc 1 2 4\nc 2 3 4\nc 3 0 4\n",
    );
    let output = ellam().arg("mesh-info").arg(&mesh).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("cells:          4"), "{stdout}");

    let output = ellam().arg("gd-quality").arg(&mesh).arg("p1").output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.starts_with("level,h,coercivity"), "{stdout}");
}

#[test]
fn trace_prints_events() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("mesh.poly");
    write(
        &mesh,
        "polymesh 2d\nv 0 0\nv 1 0\nv 2 0\nv 0 1\nv 1 1\nv 2 1\nc 0 1 4 3\nc 1 2 5 4\n",
    );
    let field = dir.path().join("field.d2");
    write(&field, "darcy2d\nf 1 0.5\nf 3 -0.5\n");
    let output = ellam()
        .arg("trace")
        .arg(&mesh)
        .arg(&field)
        .args(["0.3", "0.4", "0.6"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("end:"), "{stdout}");
    assert!(stdout.contains("jacobian:"), "{stdout}");
}

//! End-to-end exercise of the binary: run a minimal pipeline, plot the
//! curve, then serve the emitted bundle and query it.

use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

fn privsplit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_privsplit"))
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn run_plot_serve_infer_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("artifacts");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        format!(
            r#"{{
  "n_identities": 4,
  "samples_per_identity": 10,
  "dim": 4,
  "hidden_layers": [8, 6],
  "train_epochs": 3,
  "batch_size": 8,
  "siamese_pairs_per_epoch": 40,
  "siamese_epochs": 1,
  "split_grid": [2],
  "k_grid": [2, 3],
  "curve_k": 2,
  "sigma_grid": [0.05, 0.2],
  "n_noise_draws": 2,
  "attack_head_hidden": [8],
  "attack_epochs": 2,
  "seed": 11,
  "output_dir": {:?}
}}"#,
            out_dir
        ),
    )
    .unwrap();

    let run = privsplit()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("artifacts written to"), "{stdout}");
    assert!(stdout.contains("verdict"), "{stdout}");

    let plot = privsplit()
        .arg("plot")
        .arg(out_dir.join("curve.csv"))
        .output()
        .unwrap();
    assert!(
        plot.status.success(),
        "plot failed: {}",
        String::from_utf8_lossy(&plot.stderr)
    );
    assert!(out_dir.join("curve.svg").exists());

    // Serve on an ephemeral port and read the bound address from stdout.
    let mut serve = KillOnDrop(
        privsplit()
            .args(["serve", "--bundle"])
            .arg(out_dir.join("server.bundle"))
            .args(["--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let mut first_line = String::new();
    BufReader::new(serve.0.stdout.as_mut().unwrap())
        .read_line(&mut first_line)
        .unwrap();
    let addr = first_line
        .trim()
        .strip_prefix("listening on ")
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap_or_else(|| panic!("unexpected serve banner: {first_line:?}"))
        .to_string();

    // Leading minus must not be eaten by flag parsing.
    let row = "-0.1,0.2,-0.3,0.4";
    let infer = privsplit()
        .args(["infer", "--bundle"])
        .arg(out_dir.join("client.bundle"))
        .args(["--server", &addr, "--input", row, "--seed", "7"])
        .output()
        .unwrap();
    assert!(
        infer.status.success(),
        "infer failed: {}",
        String::from_utf8_lossy(&infer.stderr)
    );
    let verdict = String::from_utf8_lossy(&infer.stdout);
    assert!(verdict.contains("class:"), "{verdict}");
    assert!(verdict.contains("probs:"), "{verdict}");

    // Same seed, same server: the verdict is reproducible.
    let again = privsplit()
        .args(["infer", "--bundle"])
        .arg(out_dir.join("client.bundle"))
        .args(["--server", &addr, "--input", row, "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(verdict, String::from_utf8_lossy(&again.stdout));
}

#[test]
fn infer_against_dead_server_reports_connection_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("artifacts");
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"n_identities": 4, "samples_per_identity": 6, "dim": 3, "hidden_layers": [6],
"train_epochs": 1, "batch_size": 8, "siamese_pairs_per_epoch": 20, "siamese_epochs": 1, "split_grid": [1],
"k_grid": [2], "curve_k": 2, "sigma_grid": [0.1], "n_noise_draws": 1,
"attack_head_hidden": [6], "attack_epochs": 1, "seed": 3, "output_dir": {out_dir:?}}}"#
        ),
    )
    .unwrap();
    assert!(privsplit()
        .args(["run", "--config"])
        .arg(&config)
        .status()
        .unwrap()
        .success());

    let infer = privsplit()
        .args(["infer", "--bundle"])
        .arg(out_dir.join("client.bundle"))
        .args(["--server", "127.0.0.1:1", "--input", "0.1,0.2,0.3", "--seed", "1"])
        .output()
        .unwrap();
    assert!(!infer.status.success());
    let err = String::from_utf8_lossy(&infer.stderr);
    assert!(err.contains("connect"), "unexpected stderr: {err}");
}

#[test]
fn run_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"not_a_real_key": 1}"#).unwrap();
    let run = privsplit()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("not_a_real_key"));
}

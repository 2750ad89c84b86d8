use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use splitadapt::experiment::{read_rows, write_rows, Row};
use splitadapt::files::read_dataset;
use splitadapt_core::data::{generate_shapes, Style, CLIENT_FAMILIES};

const TINY: [&str; 24] = [
    "--set",
    "model.embed_dim=16",
    "--set",
    "model.num_heads=2",
    "--set",
    "model.mlp_hidden=24",
    "--set",
    "model.num_layers=4",
    "--set",
    "model.split=3",
    "--set",
    "server.per_class=12",
    "--set",
    "server.pretrain_epochs=1",
    "--set",
    "server.calib_samples=8",
    "--set",
    "client.pool_per_class=6",
    "--set",
    "client.n_aug=2",
    "--set",
    "adapt.epochs=2",
    "--set",
    "adapt.shots=2",
];

fn bin(output: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splitadapt"));
    c.env_remove("SA_OUTPUT_DIR").arg("--output").arg(output);
    c
}

fn run(output: &Path, args: &[&str]) -> Output {
    bin(output).args(args).output().unwrap()
}

fn rows_in(dir: &Path) -> Vec<Row> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir.join("runs")).unwrap().flatten() {
        let p = e.path().join("results.csv");
        if p.exists() {
            out.extend(read_rows(&p).unwrap());
        }
    }
    out
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn invalid_config_exits_with_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--set", "model.split=6", "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.split"));
    let out = run(dir.path(), &["--set", "client.alpha=lots", "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("client.alpha"));
}

#[test]
fn client_without_server_fails_and_records_it() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port().to_string();
    let out =
        run(dir.path(), &["--set", "run.timeout_secs=2", "client", "--port", &port, "--shots", "3", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let rows = rows_in(dir.path());
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mode, "ERROR");
    assert_eq!(rows[0].run_id, "SA-client-shots3-seed1");
}

#[test]
fn gen_data_matches_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("client.sadt");
    let out = run(
        dir.path(),
        &["gen-data", "--style", "client", "--per-class", "2", "--seed", "4", "--out", path.to_str().unwrap()],
    );
    assert!(out.status.success());
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/client-2pc-seed4.sadt");
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&golden).unwrap());
    let expect = generate_shapes(Style::Client, &CLIENT_FAMILIES, 2, 16, 4).unwrap();
    assert_eq!(read_dataset(&golden).unwrap(), expect);
}

#[test]
fn report_aggregates_every_results_file() {
    let dir = tempfile::tempdir().unwrap();
    let row = |mode: &str, shots: Option<usize>, seed: u64, acc: Option<f64>, ssim: Option<f64>| Row {
        run_id: format!("{mode}-{seed}"),
        mode: mode.into(),
        shots,
        seed,
        accuracy: acc,
        ssim,
        psnr: ssim.map(|s| 20.0 * s),
        wall_seconds: 1.0,
    };
    let a = dir.path().join("runs/a/results.csv");
    let b = dir.path().join("runs/b/nested/results.csv");
    write_rows(&a, &[row("SA", Some(3), 1, Some(0.5), None), row("ERROR", None, 2, None, None)]).unwrap();
    write_rows(
        &b,
        &[
            row("SA", Some(3), 2, Some(0.7), None),
            row("attack-full", None, 1, None, Some(0.25)),
            row("attack-full", None, 2, None, Some(0.75)),
        ],
    )
    .unwrap();
    let out = run(dir.path(), &["report"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    // accuracy 0.5 and 0.7: mean 60.0, sample std 14.1
    assert!(text.contains("| SA | 60.0 ± 14.1 |"), "{text}");
    // SSIM 0.25 and 0.75: mean 0.500, std 0.354; PSNR 5 and 15: mean 10.00, std 7.07
    assert!(text.contains("| attack-full | - | 2 | 0.500 ± 0.354 | 10.00 ± 7.07 |"), "{text}");
    assert!(!text.contains("ERROR"));
}

#[test]
fn serve_and_client_processes_complete_a_session() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(dir.path()).args(TINY).arg("pretrain").output().unwrap().status.success());
    let port = free_port().to_string();
    let mut server = bin(dir.path())
        .args(TINY)
        .args(["serve", "--port", &port, "--sessions", "1"])
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stderr.take().unwrap()).lines();
    assert!(lines.by_ref().map_while(Result::ok).any(|l| l.contains("listening on")), "server never listened");
    let client =
        bin(dir.path()).args(TINY).args(["client", "--port", &port, "--shots", "2", "--seed", "3"]).output().unwrap();
    assert!(client.status.success(), "{}", String::from_utf8_lossy(&client.stderr));
    std::thread::spawn(move || lines.for_each(drop));
    assert!(server.wait().unwrap().success());
    let rows = rows_in(dir.path());
    let client_row = rows.iter().find(|r| r.run_id == "SA-client-shots2-seed3").unwrap();
    let server_row = rows.iter().find(|r| r.mode == "SA-server").unwrap();
    assert!(client_row.accuracy.is_some());
    assert_eq!(client_row.accuracy, server_row.accuracy);
}

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use splitadapt::config::{ExperimentConfig, TransportKind};
use splitadapt::core::attack::{score_images, InverseDecoder};
use splitadapt::core::data::{generate_shapes, Style, CLIENT_FAMILIES, SERVER_FAMILIES};
use splitadapt::core::protocol::{client_session, Message, RepSet, Tag};
use splitadapt::experiment::{
    read_rows, render_report, run_attack, run_baseline, run_sa, run_sweep_point, sa_mode, server_side,
    server_test_accuracy, session_id, summarize, sweep_seeds, train_attacker, write_rows, Baseline, ClientTask,
    Defense, Row, ServerSide,
};
use splitadapt::files::{read_dump, write_atomic, write_dataset, write_dump, write_pgms};
use splitadapt::transport::TcpTransport;
use splitadapt::{output_dir, session, Error};

#[derive(Parser)]
#[command(name = "splitadapt", version, about = "Split adaptation experiments on a toy vision transformer")]
struct Cli {
    /// INI file with `[section]` and `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (SA_OUTPUT_DIR takes precedence).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override one key, e.g. `--set client.laplace=1.2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Grid {
    /// Shots per class; repeatable, defaults to the configured list.
    #[arg(long)]
    shots: Vec<usize>,
    /// Seeds; repeatable, defaults to the configured list.
    #[arg(long)]
    seed: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a shapes dataset to an SADT file.
    GenData {
        #[arg(long, default_value = "server")]
        style: String,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write every image as PGM into this directory.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Pretrain the server model (cached in the output directory).
    Pretrain,
    /// Host SA sessions over TCP.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Concurrent sessions.
        #[arg(long)]
        max_sessions: Option<usize>,
        /// Exit after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Run the client side of one session against a server.
    Client {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Full SA sessions with both parties in this process.
    RunLocal {
        #[command(flatten)]
        grid: Grid,
        #[arg(long)]
        transport: Option<TransportKind>,
        /// Disable HT augmentation of the calibration data.
        #[arg(long)]
        no_ht: bool,
        /// Disable OOD quantization-aware tuning of the backend.
        #[arg(long)]
        no_qat: bool,
        /// Disable patch retrieval augmentation.
        #[arg(long)]
        no_pr: bool,
        /// Write every frame of the last session to this file.
        #[arg(long)]
        tap: Option<PathBuf>,
    },
    /// Comparison baselines.
    Baseline {
        /// linear-probe, quant-frontend, split-learning or all.
        #[arg(long, default_value = "all")]
        kind: String,
        #[command(flatten)]
        grid: Grid,
    },
    /// Reconstruction attack on client uploads.
    Attack {
        /// none, model, laplace, full or all.
        #[arg(long, default_value = "all")]
        defense: String,
        #[arg(long)]
        seed: Vec<u64>,
        /// Also run the Laplace-scale sweep.
        #[arg(long)]
        sweep: bool,
        /// Attack the test upload recorded in a wire-tap dump instead;
        /// `--seed` names the client whose images are the ground truth.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write reconstructions of the first seed as PGM here.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Aggregate every results.csv under the output directory.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_ini(&std::fs::read_to_string(path)?)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    cfg.output_dir = output_dir(&cfg.output_dir);
    match &cli.command {
        Command::RunLocal { transport, no_ht, no_qat, no_pr, .. } => {
            if let Some(t) = transport {
                cfg.transport = *t;
            }
            cfg.use_ht &= !no_ht;
            cfg.use_qat &= !no_qat;
            cfg.client.use_pr &= !no_pr;
        }
        Command::Serve { port, max_sessions, .. } => {
            cfg.port = port.unwrap_or(cfg.port);
            cfg.max_sessions = max_sessions.unwrap_or(cfg.max_sessions);
        }
        Command::Client { host, port, .. } => {
            cfg.host = host.clone().unwrap_or(cfg.host);
            cfg.port = port.unwrap_or(cfg.port);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A run directory with the exact configuration used and its results.
struct RunDir {
    path: PathBuf,
    rows: Vec<Row>,
}

impl RunDir {
    fn create(cfg: &ExperimentConfig, name: &str) -> Result<Self, Error> {
        let path = cfg.output_dir.join("runs").join(name);
        write_atomic(&path.join("config.ini"), cfg.to_ini().as_bytes())?;
        Ok(Self { path, rows: Vec::new() })
    }

    fn push(&mut self, row: Row) -> Result<(), Error> {
        println!(
            "{} accuracy={} ssim={} psnr={} ({:.1}s)",
            row.run_id,
            fmt_opt(row.accuracy),
            fmt_opt(row.ssim),
            fmt_opt(row.psnr),
            row.wall_seconds
        );
        self.rows.push(row);
        self.flush()
    }

    /// Records a failed run and hands the error back.
    fn fail(&mut self, run_id: &str, seed: u64, e: Error) -> Error {
        self.rows.push(Row::error(run_id, seed));
        if let Err(w) = self.flush() {
            log::error!("could not record the failure: {w}");
        }
        e
    }

    fn flush(&self) -> Result<(), Error> {
        write_rows(&self.path.join("results.csv"), &self.rows)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn grid_name(shots: &[usize], seeds: &[u64]) -> String {
    let s: Vec<String> = shots.iter().map(|x| x.to_string()).collect();
    let d: Vec<String> = seeds.iter().map(|x| x.to_string()).collect();
    format!("s{}-seed{}", s.join("_"), d.join("_"))
}

fn or_default<T: Clone>(given: &[T], configured: &[T]) -> Vec<T> {
    if given.is_empty() {
        configured.to_vec()
    } else {
        given.to_vec()
    }
}

fn run(cmd: &Command, cfg: ExperimentConfig) -> Result<(), Error> {
    match cmd {
        Command::GenData { style, per_class, seed, out, pgm } => {
            let style = Style::parse(style)?;
            let families: &[usize] = match style {
                Style::Server => &SERVER_FAMILIES,
                Style::Client => &CLIENT_FAMILIES,
            };
            let data = generate_shapes(style, families, *per_class, cfg.spec.image_size, *seed)?;
            write_dataset(out, &data)?;
            if let Some(dir) = pgm {
                write_pgms(dir, "img", &data.pixels, data.width, data.height)?;
            }
            println!("{} images, {} classes -> {}", data.len(), data.num_classes, out.display());
            Ok(())
        }
        Command::Pretrain => {
            let data = splitadapt::experiment::server_dataset(&cfg)?;
            let (params, head) = splitadapt::experiment::load_or_pretrain(&cfg, &data)?;
            let acc = server_test_accuracy(&cfg, &params, &head)?;
            println!("server test accuracy {acc:.4}");
            println!("checkpoint {}", splitadapt::experiment::pretrain_cache_path(&cfg).display());
            Ok(())
        }
        Command::Serve { sessions, .. } => {
            let side = server_side(&cfg)?;
            let listener = TcpListener::bind((cfg.host.as_str(), cfg.port))?;
            log::info!("listening on {}", listener.local_addr()?);
            let mut dir = RunDir::create(&cfg, &format!("serve-{}", cfg.port))?;
            let reports = session::serve(
                listener,
                Arc::new(side.state),
                cfg.adapt,
                cfg.max_sessions,
                *sessions,
                Duration::from_secs(cfg.timeout_secs),
                |r| log::info!("session {:#x}: {:?} accuracy {:?}", r.session, r.phase, r.accuracy),
            )?;
            for r in reports {
                let mut row = Row::error(&format!("serve-session{:x}", r.session), r.seed);
                if r.completed() {
                    row.mode = "SA-server".into();
                    row.accuracy = r.accuracy;
                }
                dir.push(row)?;
            }
            Ok(())
        }
        Command::Client { shots, seed, .. } => {
            let mut dir = RunDir::create(&cfg, &format!("client-s{shots}-seed{seed}"))?;
            let run_id = format!("SA-client-shots{shots}-seed{seed}");
            let t = Instant::now();
            let result = (|| -> Result<Row, Error> {
                let task = ClientTask::new(&cfg, *shots, *seed)?;
                let timeout = Duration::from_secs(cfg.timeout_secs);
                let transport = TcpTransport::connect((cfg.host.as_str(), cfg.port), timeout)?;
                let report = client_session(
                    transport,
                    session_id(*shots, *seed),
                    &cfg.spec,
                    &cfg.client_config(*seed),
                    &task.data(),
                )?;
                let mut row = Row::error(&run_id, *seed);
                row.mode = sa_mode(&cfg);
                row.shots = Some(*shots);
                row.accuracy = report.accuracy;
                row.wall_seconds = t.elapsed().as_secs_f64();
                Ok(row)
            })();
            match result {
                Ok(row) => dir.push(row),
                Err(e) => Err(dir.fail(&run_id, *seed, e)),
            }
        }
        Command::RunLocal { grid, tap, .. } => {
            let shots = or_default(&grid.shots, &cfg.shots);
            let seeds = or_default(&grid.seed, &cfg.seeds);
            let mut dir = RunDir::create(&cfg, &format!("run-local-{}-{}", sa_mode(&cfg), grid_name(&shots, &seeds)))?;
            let side = server_side(&cfg).map_err(|e| dir.fail("server", 0, e))?;
            for &seed in &seeds {
                for &k in &shots {
                    let run_id = format!("{}-shots{k}-seed{seed}", sa_mode(&cfg));
                    let (row, out) =
                        run_sa(&cfg, &side.state, k, seed, cfg.transport).map_err(|e| dir.fail(&run_id, seed, e))?;
                    if let Some(path) = tap {
                        write_dump(path, out.wire.iter().map(|(_, f)| f.as_slice()))?;
                    }
                    dir.push(row)?;
                }
            }
            Ok(())
        }
        Command::Baseline { kind, grid } => {
            let kinds: Vec<Baseline> = match kind.as_str() {
                "all" => Baseline::ALL.to_vec(),
                k => vec![Baseline::parse(k).ok_or_else(|| config_error("kind", k))?],
            };
            let shots = or_default(&grid.shots, &cfg.shots);
            let seeds = or_default(&grid.seed, &cfg.seeds);
            let mut dir = RunDir::create(&cfg, &format!("baseline-{kind}-{}", grid_name(&shots, &seeds)))?;
            let side = server_side(&cfg).map_err(|e| dir.fail("server", 0, e))?;
            for &seed in &seeds {
                for &k in &shots {
                    for &b in &kinds {
                        let run_id = format!("{}-shots{k}-seed{seed}", b.name());
                        let row = run_baseline(&cfg, &side, b, k, seed).map_err(|e| dir.fail(&run_id, seed, e))?;
                        dir.push(row)?;
                    }
                }
            }
            Ok(())
        }
        Command::Attack { defense, seed, sweep, dump, pgm } => {
            let defenses: Vec<Defense> = match defense.as_str() {
                "all" => Defense::ALL.to_vec(),
                d => vec![Defense::parse(d).ok_or_else(|| config_error("defense", d))?],
            };
            let seeds = or_default(seed, &cfg.attack_seeds);
            let name = match dump {
                Some(_) => format!("attack-dump-seed{}", seeds[0]),
                None => format!("attack-{defense}-{}", grid_name(&[], &seeds)),
            };
            let mut dir = RunDir::create(&cfg, &name)?;
            let side = server_side(&cfg).map_err(|e| dir.fail("server", 0, e))?;
            let (decoder, losses) = train_attacker(&cfg, &side).map_err(|e| dir.fail("decoder", 0, e))?;
            log::info!("decoder MSE {:.5} -> {:.5}", losses.first().unwrap_or(&0.0), losses.last().unwrap_or(&0.0));
            if let Some(path) = dump {
                let row = attack_dump(&cfg, &decoder, path, seeds[0], &dir.path, pgm.as_deref())
                    .map_err(|e| dir.fail("attack-dump", seeds[0], e))?;
                return dir.push(row);
            }
            for &s in &seeds {
                for &d in &defenses {
                    let run_id = format!("attack-{}-seed{s}", d.name());
                    let row = run_attack(&cfg, &side.state, &decoder, d, s).map_err(|e| dir.fail(&run_id, s, e))?;
                    dir.push(row)?;
                }
            }
            if let Some(out) = pgm {
                write_reconstructions(&cfg, &side, &decoder, seeds[0], out)?;
            }
            if *sweep {
                let shots = cfg.shots.iter().copied().min().unwrap_or(1);
                for &b in &cfg.sweep {
                    for (s, acc) in sweep_seeds(&cfg) {
                        let run_id = format!("sweep-b{b}-seed{s}");
                        let row = run_sweep_point(&cfg, &side.state, &decoder, b, shots, s, acc)
                            .map_err(|e| dir.fail(&run_id, s, e))?;
                        dir.push(row)?;
                    }
                }
            }
            Ok(())
        }
        Command::Report => {
            let mut files = Vec::new();
            find_results(&cfg.output_dir, &mut files)?;
            files.sort();
            let mut rows = Vec::new();
            for f in &files {
                rows.extend(read_rows(f)?);
            }
            let text = render_report(&summarize(&rows));
            write_atomic(&cfg.output_dir.join("report.md"), text.as_bytes())?;
            println!("{} rows from {} files\n\n{text}", rows.len(), files.len());
            Ok(())
        }
    }
}

fn config_error(field: &str, value: &str) -> Error {
    Error::Config(splitadapt::config::ConfigError { field: field.into(), message: format!("unknown value {value:?}") })
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            find_results(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "results.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn attack_dump(
    cfg: &ExperimentConfig,
    decoder: &InverseDecoder,
    path: &Path,
    seed: u64,
    run_dir: &Path,
    pgm: Option<&Path>,
) -> Result<Row, Error> {
    let t = Instant::now();
    let frames = read_dump(path)?;
    let upload = frames
        .iter()
        .filter(|f| f.tag == Tag::RepUpload)
        .map(|f| Message::parse(f.tag, &f.payload))
        .find_map(|m| match m {
            Ok(Message::RepUpload(u)) if u.set == RepSet::Test => Some(u.rep),
            _ => None,
        })
        .ok_or_else(|| Error::Session(format!("{} holds no test upload", path.display())))?;
    let shots = cfg.shots.iter().copied().min().unwrap_or(1);
    let task = ClientTask::new(cfg, shots, seed)?;
    let recon = decoder.reconstruct(&upload.dequantize())?;
    let scores = score_images(&recon, &task.test_images)?;
    write_image_scores(&run_dir.join("images.csv"), &scores.per_image)?;
    if let Some(dir) = pgm {
        write_pgms(dir, "recon", recon.data(), cfg.spec.image_size, cfg.spec.image_size)?;
    }
    let mut row = Row::error(&format!("attack-dump-seed{seed}"), seed);
    row.mode = "attack-dump".into();
    row.ssim = Some(scores.ssim);
    row.psnr = Some(scores.psnr);
    row.wall_seconds = t.elapsed().as_secs_f64();
    Ok(row)
}

fn write_image_scores(path: &Path, scores: &[(f64, f64)]) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "ssim", "psnr"])?;
    for (i, (s, p)) in scores.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string(), p.to_string()])?;
    }
    w.flush()?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(write_atomic(path, &bytes)?)
}

/// Ground truth and reconstructions under each defense, side by side as PGMs.
fn write_reconstructions(
    cfg: &ExperimentConfig,
    side: &ServerSide,
    decoder: &InverseDecoder,
    seed: u64,
    dir: &Path,
) -> Result<(), Error> {
    let shots = cfg.shots.iter().copied().min().unwrap_or(1);
    let task = ClientTask::new(cfg, shots, seed)?;
    let n = 8.min(task.test.len());
    let px = cfg.spec.pixels();
    let size = cfg.spec.image_size;
    write_pgms(dir, "truth", &task.test_images.data()[..n * px], size, size)?;
    for d in Defense::ALL {
        let (alpha, laplace) = d.noise(cfg);
        let up = splitadapt::experiment::client_uploads(cfg, &side.state, &task, seed, alpha, laplace)?;
        let recon = decoder.reconstruct(&up.test_noisy.dequantize())?;
        write_pgms(dir, &format!("recon-{}-", d.name()), &recon.data()[..n * px], size, size)?;
    }
    Ok(())
}

//! End-to-end experiment steps and their CSV rows.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use splitadapt_core::adapt::{
    baseline_linear_probe, baseline_quant_frontend_probe, split_accuracy, train_split_learning, LocalSplitServer,
};
use splitadapt_core::attack::{reconstruct_and_score, train_decoder, AttackScores, InverseDecoder};
use splitadapt_core::client::{concat_reps, prepare_uploads, ClientUploads};
use splitadapt_core::data::{client_split, generate_shapes, Dataset, Style, SERVER_FAMILIES};
use splitadapt_core::head::TaskModule;
use splitadapt_core::protocol::ClientData;
use splitadapt_core::quant::QuantizedRep;
use splitadapt_core::rng::derive_seed;
use splitadapt_core::server::{dataset_accuracy, model_logits, prepare_server, pretrain_server_model, ServerState};
use splitadapt_core::tensor::Tensor;
use splitadapt_core::vit::VitParams;

use crate::config::{ExperimentConfig, TransportKind};
use crate::files::{read_checkpoint, write_atomic, write_checkpoint};
use crate::session::{run_session, SessionOutput};
use crate::Error;

/// One CSV record. Empty cells mean "not measured by this mode".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub run_id: String,
    pub mode: String,
    pub shots: Option<usize>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub wall_seconds: f64,
}

impl Row {
    fn new(mode: &str, shots: Option<usize>, seed: u64) -> Self {
        let run_id = match shots {
            Some(s) => format!("{mode}-shots{s}-seed{seed}"),
            None => format!("{mode}-seed{seed}"),
        };
        Self { run_id, mode: mode.into(), shots, seed, accuracy: None, ssim: None, psnr: None, wall_seconds: 0.0 }
    }

    /// Record of a failed run.
    pub fn error(run_id: &str, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            mode: "ERROR".into(),
            shots: None,
            seed,
            accuracy: None,
            ssim: None,
            psnr: None,
            wall_seconds: 0.0,
        }
    }
}

pub fn rows_to_csv(rows: &[Row]) -> Result<Vec<u8>, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<(), Error> {
    Ok(write_atomic(path, &rows_to_csv(rows)?)?)
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn server_dataset(cfg: &ExperimentConfig) -> Result<Dataset, Error> {
    Ok(generate_shapes(Style::Server, &SERVER_FAMILIES, cfg.server_per_class, cfg.spec.image_size, cfg.data_seed)?)
}

pub fn server_test_dataset(cfg: &ExperimentConfig) -> Result<Dataset, Error> {
    let seed = derive_seed(cfg.data_seed, 1);
    Ok(generate_shapes(Style::Server, &SERVER_FAMILIES, cfg.server_test_per_class, cfg.spec.image_size, seed)?)
}

pub fn pretrain_cache_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("cache").join(format!("pretrain-{:016x}.savt", cfg.pretrain_key()))
}

/// Pretrained server model, from the cache when an identical configuration
/// was trained before.
pub fn load_or_pretrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<(VitParams, TaskModule), Error> {
    let path = pretrain_cache_path(cfg);
    if path.exists() {
        let (spec, params, head) = read_checkpoint(&path)?;
        if spec == cfg.spec {
            log::info!("pretrained model from {}", path.display());
            return Ok((params, head));
        }
    }
    log::info!("pretraining for {} epochs", cfg.pretrain.epochs);
    let (params, head) = pretrain_server_model(&cfg.spec, data, &cfg.pretrain)?;
    write_checkpoint(&path, &cfg.spec, &params, &head)?;
    Ok((params, head))
}

pub struct ServerSide {
    pub data: Dataset,
    pub params: VitParams,
    pub head: TaskModule,
    pub state: ServerState,
}

pub fn server_side(cfg: &ExperimentConfig) -> Result<ServerSide, Error> {
    cfg.validate()?;
    let data = server_dataset(cfg)?;
    let (params, head) = load_or_pretrain(cfg, &data)?;
    let state = prepare_server(&params, &head, &data, &cfg.server_config())?;
    Ok(ServerSide { data, params, head, state })
}

/// Float-model accuracy on the held-out server split.
pub fn server_test_accuracy(cfg: &ExperimentConfig, params: &VitParams, head: &TaskModule) -> Result<f64, Error> {
    let test = server_test_dataset(cfg)?;
    Ok(dataset_accuracy(&test, |x| model_logits(&cfg.spec, params, head, x))?)
}

/// A client's few-shot training set and labelled test set for one seed.
pub struct ClientTask {
    pub train: Dataset,
    pub test: Dataset,
    pub train_images: Tensor,
    pub test_images: Tensor,
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
}

impl ClientTask {
    pub fn new(cfg: &ExperimentConfig, shots: usize, seed: u64) -> Result<Self, Error> {
        let split = client_split(cfg.spec.image_size, cfg.pool_per_class, cfg.test_per_class, seed)?;
        let train = split.pool.few_shot(shots, seed)?;
        let test = split.test;
        Ok(Self {
            train_images: train.all_images(),
            test_images: test.all_images(),
            train_labels: train.labels_usize(&(0..train.len()).collect::<Vec<_>>()),
            test_labels: test.labels_usize(&(0..test.len()).collect::<Vec<_>>()),
            train,
            test,
        })
    }

    pub fn classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn data(&self) -> ClientData<'_> {
        ClientData {
            train_images: &self.train_images,
            train_labels: &self.train_labels,
            test_images: &self.test_images,
            test_labels: &self.test_labels,
            classes: self.classes(),
        }
    }
}

/// Mode label of an SA run, naming the disabled components.
pub fn sa_mode(cfg: &ExperimentConfig) -> String {
    let mut m = String::from("SA");
    if !cfg.use_ht {
        m.push_str("-noHT");
    }
    if !cfg.use_qat {
        m.push_str("-noQAT");
    }
    if !cfg.client.use_pr {
        m.push_str("-noPR");
    }
    m
}

pub fn session_id(shots: usize, seed: u64) -> u64 {
    derive_seed(seed, 1000 + shots as u64)
}

/// One full SA session between an in-process server and client.
pub fn run_sa(
    cfg: &ExperimentConfig,
    state: &ServerState,
    shots: usize,
    seed: u64,
    kind: TransportKind,
) -> Result<(Row, SessionOutput), Error> {
    let t = Instant::now();
    let task = ClientTask::new(cfg, shots, seed)?;
    let out = run_session(
        kind,
        state,
        &cfg.adapt_config(seed),
        session_id(shots, seed),
        &cfg.client_config(seed),
        &task.data(),
        Duration::from_secs(cfg.timeout_secs),
    )?;
    if let Some(reason) = &out.server.abort_reason {
        return Err(Error::Session(reason.clone()));
    }
    let mut row = Row::new(&sa_mode(cfg), Some(shots), seed);
    row.accuracy = out.server.accuracy;
    row.wall_seconds = t.elapsed().as_secs_f64();
    Ok((row, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    LinearProbe,
    QuantFrontend,
    SplitLearning,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::LinearProbe, Baseline::QuantFrontend, Baseline::SplitLearning];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::LinearProbe => "linear-probe",
            Baseline::QuantFrontend => "quant-frontend",
            Baseline::SplitLearning => "split-learning",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

pub fn run_baseline(
    cfg: &ExperimentConfig,
    side: &ServerSide,
    which: Baseline,
    shots: usize,
    seed: u64,
) -> Result<Row, Error> {
    let t = Instant::now();
    let task = ClientTask::new(cfg, shots, seed)?;
    let acfg = cfg.adapt_config(seed);
    let train = (&task.train_images, task.train_labels.as_slice());
    let test = (&task.test_images, task.test_labels.as_slice());
    let classes = task.classes();
    let accuracy = match which {
        Baseline::LinearProbe => baseline_linear_probe(&cfg.spec, &side.params, classes, train, test, &acfg)?,
        Baseline::QuantFrontend => baseline_quant_frontend_probe(side.state.package(), classes, train, test, &acfg)?,
        Baseline::SplitLearning => {
            let split = side.params.split(&cfg.spec, cfg.split)?;
            let mut server = LocalSplitServer::new(&split.backend);
            let (trained, head, _) =
                train_split_learning(&split, classes, &task.train_images, &task.train_labels, &acfg, &mut server)?;
            split_accuracy(&trained, &head, &task.test_images, &task.test_labels)?
        }
    };
    let mut row = Row::new(which.name(), Some(shots), seed);
    row.accuracy = Some(accuracy);
    row.wall_seconds = t.elapsed().as_secs_f64();
    Ok(row)
}

fn encode_chunked(state: &ServerState, images: &Tensor) -> Result<QuantizedRep, Error> {
    let n = images.shape()[0];
    let per = images.len() / n.max(1);
    let mut parts = Vec::new();
    for start in (0..n).step_by(128) {
        let end = (start + 128).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
        parts.push(state.package().encode(&chunk)?);
    }
    Ok(concat_reps(&parts)?)
}

/// The attacker's decoder: server data through the noiseless quantized
/// frontend the server itself shipped.
pub fn train_attacker(cfg: &ExperimentConfig, side: &ServerSide) -> Result<(InverseDecoder, Vec<f64>), Error> {
    let images = side.data.all_images();
    let reps = encode_chunked(&side.state, &images)?;
    Ok(train_decoder(&cfg.spec, &reps.dequantize(), &images, &cfg.decoder)?)
}

/// Which client noise is active when the uploads are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defense {
    None,
    ModelNoise,
    Laplace,
    Full,
}

impl Defense {
    pub const ALL: [Defense; 4] = [Defense::None, Defense::ModelNoise, Defense::Laplace, Defense::Full];

    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::ModelNoise => "model",
            Defense::Laplace => "laplace",
            Defense::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }

    /// `(α, b)` with the disabled component zeroed.
    pub fn noise(self, cfg: &ExperimentConfig) -> (f64, f64) {
        let (a, b) = (cfg.client.alpha, cfg.client.laplace);
        match self {
            Defense::None => (0.0, 0.0),
            Defense::ModelNoise => (a, 0.0),
            Defense::Laplace => (0.0, b),
            Defense::Full => (a, b),
        }
    }
}

/// Client uploads for one seed with the given noise levels, through the
/// same client code path a session uses.
pub fn client_uploads(
    cfg: &ExperimentConfig,
    state: &ServerState,
    task: &ClientTask,
    seed: u64,
    alpha: f64,
    laplace: f64,
) -> Result<ClientUploads, Error> {
    let ccfg = splitadapt_core::client::ClientConfig { alpha, laplace, ..cfg.client_config(seed) };
    Ok(prepare_uploads(state.package(), &ccfg, &task.train_images, &task.test_images)?)
}

/// Attack on the uploaded test representations of one seed.
pub fn attack_seed(
    cfg: &ExperimentConfig,
    state: &ServerState,
    decoder: &InverseDecoder,
    seed: u64,
    alpha: f64,
    laplace: f64,
) -> Result<AttackScores, Error> {
    let shots = cfg.shots.iter().copied().min().unwrap_or(1);
    let task = ClientTask::new(cfg, shots, seed)?;
    let up = client_uploads(cfg, state, &task, seed, alpha, laplace)?;
    Ok(reconstruct_and_score(decoder, &up.test_noisy, &task.test_images)?)
}

pub fn run_attack(
    cfg: &ExperimentConfig,
    state: &ServerState,
    decoder: &InverseDecoder,
    defense: Defense,
    seed: u64,
) -> Result<Row, Error> {
    let t = Instant::now();
    let (alpha, laplace) = defense.noise(cfg);
    let s = attack_seed(cfg, state, decoder, seed, alpha, laplace)?;
    let mut row = Row::new(&format!("attack-{}", defense.name()), None, seed);
    row.ssim = Some(s.ssim);
    row.psnr = Some(s.psnr);
    row.wall_seconds = t.elapsed().as_secs_f64();
    Ok(row)
}

/// Laplace-scale sweep at one seed: attack scores always, SA accuracy only
/// when `with_accuracy` (sessions cost far more than attacks).
pub fn run_sweep_point(
    cfg: &ExperimentConfig,
    state: &ServerState,
    decoder: &InverseDecoder,
    laplace: f64,
    shots: usize,
    seed: u64,
    with_accuracy: bool,
) -> Result<Row, Error> {
    let t = Instant::now();
    let mut c = cfg.clone();
    c.client.laplace = laplace;
    let s = attack_seed(&c, state, decoder, seed, c.client.alpha, laplace)?;
    let mut row = Row::new(&format!("sweep-b{laplace}"), Some(shots), seed);
    if with_accuracy {
        row.accuracy = run_sa(&c, state, shots, seed, TransportKind::Channel)?.0.accuracy;
    }
    row.ssim = Some(s.ssim);
    row.psnr = Some(s.psnr);
    row.wall_seconds = t.elapsed().as_secs_f64();
    Ok(row)
}

/// Seeds of the sweep: attack seeds first, then run seeds not among them.
pub fn sweep_seeds(cfg: &ExperimentConfig) -> Vec<(u64, bool)> {
    let mut out: Vec<(u64, bool)> = cfg.attack_seeds.iter().map(|&s| (s, cfg.seeds.contains(&s))).collect();
    out.extend(cfg.seeds.iter().filter(|s| !cfg.attack_seeds.contains(s)).map(|&s| (s, true)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mode: String,
    pub shots: Option<usize>,
    pub runs: usize,
    pub accuracy: Option<(f64, f64)>,
    pub ssim: Option<(f64, f64)>,
    pub psnr: Option<(f64, f64)>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

/// Groups rows by `(mode, shots)` in first-appearance order. ERROR rows are skipped.
pub fn summarize(rows: &[Row]) -> Vec<Summary> {
    let mut keys: Vec<(String, Option<usize>)> = Vec::new();
    for r in rows.iter().filter(|r| r.mode != "ERROR") {
        let k = (r.mode.clone(), r.shots);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(mode, shots)| {
            let group: Vec<&Row> = rows.iter().filter(|r| r.mode == mode && r.shots == shots).collect();
            let col = |f: fn(&Row) -> Option<f64>| mean_std(&group.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            Summary {
                runs: group.len(),
                accuracy: col(|r| r.accuracy),
                ssim: col(|r| r.ssim),
                psnr: col(|r| r.psnr),
                mode,
                shots,
            }
        })
        .collect()
}

/// Markdown tables: accuracy per mode × shots, then SSIM/PSNR per mode.
pub fn render_report(summaries: &[Summary]) -> String {
    let cell = |v: Option<(f64, f64)>, scale: f64, digits: usize| match v {
        Some((m, s)) => format!("{:.*} ± {:.*}", digits, m * scale, digits, s * scale),
        None => "-".into(),
    };
    let mut shots: Vec<usize> = summaries.iter().filter(|s| s.accuracy.is_some()).filter_map(|s| s.shots).collect();
    shots.sort_unstable();
    shots.dedup();
    let mut out = String::from("## Accuracy (%)\n\n| mode |");
    for s in &shots {
        out.push_str(&format!(" {s}-shot |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(shots.len()));
    out.push('\n');
    let mut modes: Vec<&str> = Vec::new();
    for s in summaries.iter().filter(|s| s.accuracy.is_some() && s.shots.is_some()) {
        if !modes.contains(&s.mode.as_str()) {
            modes.push(&s.mode);
        }
    }
    for m in modes {
        out.push_str(&format!("| {m} |"));
        for &k in &shots {
            let v = summaries.iter().find(|s| s.mode == m && s.shots == Some(k)).and_then(|s| s.accuracy);
            out.push_str(&format!(" {} |", cell(v, 100.0, 1)));
        }
        out.push('\n');
    }
    let attacks: Vec<&Summary> = summaries.iter().filter(|s| s.ssim.is_some()).collect();
    if !attacks.is_empty() {
        out.push_str(
            "\n## Reconstruction attack\n\n| mode | shots | runs | SSIM | PSNR (dB) |\n|---|---|---|---|---|\n",
        );
        for s in attacks {
            let shots = s.shots.map_or("-".into(), |k| k.to_string());
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                s.mode,
                shots,
                s.runs,
                cell(s.ssim, 1.0, 3),
                cell(s.psnr, 1.0, 2)
            ));
        }
    }
    out
}

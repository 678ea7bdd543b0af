//! The `scarceops` command line. Human summaries go to stderr; `--json`
//! adds one JSON document on stdout. Failures print a one-line JSON error on
//! stderr and exit 2 (usage), 3 (not found), 4 (validation) or 5 (internal).

pub mod plot;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use scarceops::automl::{AutoMl, AutoMlConfig, SearchSpace};
use scarceops::dataset::{DatasetRecord, ImageContainer, ImportOptions, SplitNaming, IMAGE_BYTES};
use scarceops::embedder::{normalize_pixels, Autoencoder, AutoencoderConfig, Embedder};
use scarceops::fsutil::write_atomic;
use scarceops::metrics::{MetricName, TaskKind};
use scarceops::monitor::{CtStatus, ImageInput, Label, Monitor, MonitorConfig};
use scarceops::nn::Preset;
use scarceops::synthetic::{generate, shift_brightness, Family};
use scarceops::task_model::UNLABELED;
use scarceops::workspace::Workspace;
use scarceops::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "scarceops", version, about = "Dataset fingerprinting, model development and monitored serving for scarce image data")]
pub struct Cli {
    /// Store root directory.
    #[arg(long, env = "SCARCEOPS_STORE", global = true)]
    pub store: Option<PathBuf>,
    /// Print a JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Import, register and list datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train the fingerprinting autoencoder and fingerprint datasets.
    #[command(subcommand)]
    Embedder(EmbedderCmd),
    /// Datasets nearest to a stored dataset in latent space.
    Similar(SimilarArgs),
    #[command(subcommand)]
    Task(TaskCmd),
    /// Run the HTTP service until interrupted.
    Serve(ServeArgs),
    #[command(subcommand)]
    Monitor(MonitorCmd),
    #[command(subcommand)]
    Plot(PlotCmd),
}

#[derive(Args, Debug, Clone)]
pub struct ImportArgs {
    /// NPZ file with `{split}_images` / `{split}_labels` arrays.
    pub file: PathBuf,
    /// Dataset name; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Comma-separated splits that must all be present.
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<String>>,
    /// Resample images of other sizes to 32x32.
    #[arg(long)]
    pub resize: bool,
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Parse and validate an NPZ file and write it in canonical layout.
    Import {
        #[command(flatten)]
        input: ImportArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add an NPZ dataset to the store (a new version if its content changed).
    Register {
        #[command(flatten)]
        input: ImportArgs,
        #[arg(long, default_value = "classification")]
        task_kind: TaskKind,
        #[arg(long, default_value = "")]
        note: String,
    },
    List,
    /// Write a synthetic image family as an NPZ file.
    Synth {
        #[arg(long)]
        family: Family,
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Train, val and test sizes.
        #[arg(long, value_delimiter = ',', default_value = "200,50,50")]
        splits: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum EmbedderCmd {
    /// Train on the training splits of stored datasets and activate the result.
    Train {
        /// Datasets to train on (latest versions); all when omitted.
        #[arg(long, value_delimiter = ',')]
        datasets: Option<Vec<String>>,
        #[arg(long, default_value = "tiny")]
        preset: Preset,
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        /// Cap on training images taken from each dataset.
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Fingerprint datasets with the active embedder.
    Fingerprint {
        /// One dataset; every dataset's latest version when omitted.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        version: Option<u32>,
    },
}

#[derive(Args, Debug)]
pub struct SimilarArgs {
    pub dataset: String,
    #[arg(long)]
    pub version: Option<u32>,
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Args, Debug, Clone)]
pub struct SpaceArgs {
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub fine_tune_epochs: usize,
    /// Learning-rate range `LO,HI` (or a single value).
    #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-2])]
    pub learning_rate: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    pub batch_sizes: Vec<usize>,
}

impl SpaceArgs {
    fn space(&self, seed: u64) -> Result<SearchSpace, CliError> {
        let lr = match self.learning_rate.as_slice() {
            [v] => (*v, *v),
            [lo, hi] => (*lo, *hi),
            _ => return Err(CliError::Usage("--learning-rate takes one value or LO,HI".into())),
        };
        let s = SearchSpace {
            learning_rate: lr,
            batch_sizes: self.batch_sizes.clone(),
            fine_tune_epochs: self.fine_tune_epochs,
            full_epochs: self.epochs,
            trials: self.trials,
            seed,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Subcommand, Debug)]
pub enum TaskCmd {
    Create {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        version: Option<u32>,
        #[arg(long)]
        metric: Option<MetricName>,
        #[arg(long)]
        kind: Option<TaskKind>,
    },
    /// Rank strategies, execute the top `k` and update the task's best model.
    Develop {
        task: String,
        #[arg(short, long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "tiny")]
        preset: Preset,
        #[command(flatten)]
        space: SpaceArgs,
    },
    /// The task's best model over succeeded runs.
    Best { task: String },
}

#[derive(Args, Debug)]
pub struct CtArgs {
    #[arg(long, default_value_t = 100)]
    pub window_size: usize,
    /// Strategies executed per training cycle.
    #[arg(long, default_value_t = 3)]
    pub ct_k: usize,
    #[arg(long, default_value_t = 2)]
    pub ct_trials: usize,
    #[arg(long, default_value_t = 10)]
    pub ct_epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub ct_fine_tune_epochs: usize,
}

impl CtArgs {
    fn config(&self, auto_ct: bool, seed: u64) -> MonitorConfig {
        MonitorConfig {
            window_size: self.window_size,
            auto_ct,
            ct_strategies: self.ct_k,
            ct_space: SearchSpace {
                trials: self.ct_trials,
                full_epochs: self.ct_epochs,
                fine_tune_epochs: self.ct_fine_tune_epochs,
                seed,
                ..SearchSpace::default()
            },
            ..MonitorConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Deploy the best model of these tasks before serving.
    #[arg(long, value_delimiter = ',')]
    pub deploy: Vec<String>,
    /// Do not start training cycles on alerts.
    #[arg(long)]
    pub no_auto_ct: bool,
    #[command(flatten)]
    pub ct: CtArgs,
}

#[derive(Subcommand, Debug)]
pub enum MonitorCmd {
    /// Redeploys the task's model, feeds brightness-shifted images from one
    /// of its splits as labeled feedback and reports alerts and the training
    /// cycle they start.
    SimulateDrift {
        task: String,
        #[arg(long, default_value_t = 0.5)]
        shift: f64,
        #[arg(long, default_value_t = 2)]
        windows: usize,
        /// Source split of the feedback images.
        #[arg(long, default_value = "test")]
        split: String,
        /// Start a training cycle on the first alert and wait for it.
        #[arg(long)]
        ct: bool,
        #[command(flatten)]
        cfg: CtArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum PlotCmd {
    /// SVG scatter of fingerprints coloured by dataset, with mean markers.
    Latent {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        datasets: Option<Vec<String>>,
        /// Plot only this split (and its mean).
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 500)]
        max_points: usize,
        #[arg(long, default_value = "Latent space")]
        title: String,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::NotFound => 3,
                ErrorKind::Validation => 4,
                ErrorKind::Internal => 5,
            },
        }
    }

    pub fn to_json(&self) -> Value {
        let (code, message) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Core(e) => (e.kind().code(), e.to_string()),
        };
        json!({"error": {"code": code, "message": message}})
    }
}

pub struct Output {
    pub human: String,
    pub json: Value,
}

type CliResult = Result<Output, CliError>;

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let err = CliError::Usage(if first.is_empty() { "missing command; see --help".into() } else { first });
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match run(&cli) {
        Ok(out) => {
            if !out.human.is_empty() {
                eprintln!("{}", out.human.trim_end());
            }
            if cli.json {
                println!("{}", out.json);
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn workspace(cli: &Cli) -> Result<Workspace, CliError> {
    match &cli.store {
        Some(p) => Ok(Workspace::open(p)?),
        None => Err(CliError::Usage("no store given: pass --store or set SCARCEOPS_STORE".into())),
    }
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Dataset(c) => dataset(cli, c),
        Command::Embedder(c) => embedder(cli, c),
        Command::Similar(a) => similar(cli, a),
        Command::Task(c) => task(cli, c),
        Command::Serve(a) => serve(cli, a),
        Command::Monitor(c) => monitor(cli, c),
        Command::Plot(c) => plot_cmd(cli, c),
    }
}

fn load_npz(input: &ImportArgs) -> Result<(ImageContainer, String), CliError> {
    let name = match &input.name {
        Some(n) => n.clone(),
        None => input
            .file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Usage("cannot derive a dataset name; pass --name".into()))?,
    };
    let options = ImportOptions {
        splits: input.splits.clone().map_or(SplitNaming::Auto, SplitNaming::Explicit),
        resize: input.resize,
    };
    Ok((ImageContainer::import_npz(&input.file, &name, &options)?, name))
}

fn container_json(c: &ImageContainer) -> Value {
    json!({
        "images": c.len(),
        "classes": c.manifest.classes,
        "splits": c.manifest.splits.iter().map(|s| json!({"name": s.name, "count": s.end - s.start})).collect::<Vec<_>>(),
        "content_hash": c.content_hash(),
    })
}

fn record_json(r: &DatasetRecord) -> Value {
    json!({
        "dataset_id": r.dataset_id,
        "version": r.version,
        "name": r.name,
        "content_hash": r.content_hash,
        "task_kind": r.task_kind,
        "images": r.image_count,
        "classes": r.class_labels,
        "fingerprinted_by": r.fingerprint_ref.as_ref().map(|f| f.embedder_version.clone()),
    })
}

fn dataset(cli: &Cli, cmd: &DatasetCmd) -> CliResult {
    match cmd {
        DatasetCmd::Import { input, out } => {
            let (c, name) = load_npz(input)?;
            c.export_npz(out)?;
            let mut j = container_json(&c);
            j["name"] = json!(name);
            j["out"] = json!(out);
            Ok(Output { human: format!("{name}: {} images -> {}", c.len(), out.display()), json: j })
        }
        DatasetCmd::Register { input, task_kind, note } => {
            let ws = workspace(cli)?;
            let (c, name) = load_npz(input)?;
            let note = if note.is_empty() { format!("imported from {}", input.file.display()) } else { note.clone() };
            let (rec, created) = ws.datasets.register(&c, &name, *task_kind, &note)?;
            let mut j = record_json(&rec);
            j["created"] = json!(created);
            let verb = if created { "registered" } else { "unchanged" };
            Ok(Output { human: format!("{verb} {} ({} images)", rec.key(), rec.image_count), json: j })
        }
        DatasetCmd::List => {
            let ws = workspace(cli)?;
            let records = ws.datasets.list()?;
            let human = records
                .iter()
                .map(|r| format!("{:<24} {:>6} images  {}", r.key(), r.image_count, r.name))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Output { human, json: Value::Array(records.iter().map(record_json).collect()) })
        }
        DatasetCmd::Synth { family, n, classes, splits, out } => {
            let total: usize = splits.iter().sum();
            if total != *n || splits.is_empty() || splits.len() > 3 {
                return Err(CliError::Usage(format!("--splits must list 1 to 3 sizes summing to --n ({n})")));
            }
            if *classes == 0 || *classes > family.max_classes() {
                return Err(CliError::Usage(format!("{family} supports 1 to {} classes", family.max_classes())));
            }
            let set = generate(*family, *n, *classes, cli.seed);
            let names = ["train", "val", "test"];
            let split_list: Vec<(&str, usize)> = splits.iter().enumerate().map(|(i, &c)| (names[i], c)).collect();
            let class_names = (0..*classes).map(|i| format!("class_{i}")).collect();
            let c = ImageContainer::new(family.name(), set.pixels, set.labels, &split_list, class_names)?;
            c.export_npz(out)?;
            let mut j = container_json(&c);
            j["out"] = json!(out);
            Ok(Output { human: format!("{} {} images -> {}", family.name(), n, out.display()), json: j })
        }
    }
}

fn latest_records(ws: &Workspace, ids: Option<&Vec<String>>) -> Result<Vec<DatasetRecord>, CliError> {
    match ids {
        None => Ok(ws.datasets.latest_records()?),
        Some(ids) => ids.iter().map(|id| ws.datasets.get(id, None).map_err(CliError::from)).collect(),
    }
}

fn split_pixels<'a>(c: &'a ImageContainer, split: &str, cap: Option<usize>) -> &'a [u8] {
    let r = c.split(split).map(|s| s.range()).unwrap_or_default();
    let n = cap.map_or(r.len(), |m| m.min(r.len()));
    &c.pixels[r.start * IMAGE_BYTES..(r.start + n) * IMAGE_BYTES]
}

fn embedder(cli: &Cli, cmd: &EmbedderCmd) -> CliResult {
    let ws = workspace(cli)?;
    match cmd {
        EmbedderCmd::Train { datasets, preset, latent_dim, epochs, batch_size, learning_rate, max_images } => {
            let records = latest_records(&ws, datasets.as_ref())?;
            if records.is_empty() {
                return Err(Error::Validation("no datasets to train on".into()).into());
            }
            let mut train = Vec::new();
            let mut val = Vec::new();
            for r in &records {
                let c = ws.datasets.load_container(&r.dataset_id, r.version)?;
                let (t, e) = (c.train_split().to_string(), c.eval_split().to_string());
                train.extend_from_slice(split_pixels(&c, &t, *max_images));
                if e != t {
                    val.extend_from_slice(split_pixels(&c, &e, *max_images));
                }
            }
            let n_train = train.len() / IMAGE_BYTES;
            let n_val = val.len() / IMAGE_BYTES;
            let x = normalize_pixels::<f32>(&train, n_train)?;
            let v = if n_val > 0 { Some(normalize_pixels::<f32>(&val, n_val)?) } else { None };
            let mut ae = Autoencoder::build(AutoencoderConfig {
                preset: *preset,
                latent_dim: *latent_dim,
                learning_rate: *learning_rate,
                batch_size: *batch_size,
                epochs: *epochs,
                seed: cli.seed,
                ..AutoencoderConfig::default()
            })?;
            let report = ae.train(&x, v.as_ref())?;
            let e = Embedder::from_autoencoder(ae);
            let version = ws.install_embedder(&e)?;
            Ok(Output {
                human: format!(
                    "embedder {version} trained on {n_train} images for {epochs} epochs (best epoch {}, loss {:.5})",
                    report.best_epoch,
                    report.best_val_loss()
                ),
                json: json!({
                    "embedder_version": version,
                    "preset": preset.to_string(),
                    "latent_dim": latent_dim,
                    "train_images": n_train,
                    "val_images": n_val,
                    "datasets": records.iter().map(DatasetRecord::key).collect::<Vec<_>>(),
                    "report": report,
                }),
            })
        }
        EmbedderCmd::Fingerprint { dataset, version } => {
            let e = ws.active_embedder()?;
            let targets = match dataset {
                Some(id) => vec![ws.datasets.get(id, *version)?],
                None => ws.datasets.latest_records()?,
            };
            let mut rows = Vec::new();
            let mut human = Vec::new();
            for r in targets {
                let r = ws.fingerprint_dataset(&r.dataset_id, r.version, &e)?;
                let mean = r.fingerprint_ref.as_ref().map(|f| f.embedding.mean_vector.clone()).unwrap_or_default();
                human.push(format!("{:<24} mean {:?}", r.key(), mean.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()));
                rows.push(json!({"dataset_id": r.dataset_id, "version": r.version, "images": r.image_count, "mean": mean}));
            }
            Ok(Output { human: human.join("\n"), json: json!({"embedder_version": e.version(), "datasets": rows}) })
        }
    }
}

fn similar(cli: &Cli, a: &SimilarArgs) -> CliResult {
    let ws = workspace(cli)?;
    let (rec, near) = ws.datasets.similar_to(&a.dataset, a.version, a.k)?;
    let human = near.iter().map(|(r, d)| format!("{d:>10.5}  {}", r.key())).collect::<Vec<_>>().join("\n");
    let rows: Vec<Value> = near
        .iter()
        .map(|(r, d)| json!({"dataset_id": r.dataset_id, "version": r.version, "name": r.name, "distance": d}))
        .collect();
    Ok(Output { human, json: json!({"dataset_id": rec.dataset_id, "version": rec.version, "neighbours": rows}) })
}

fn task(cli: &Cli, cmd: &TaskCmd) -> CliResult {
    let ws = workspace(cli)?;
    match cmd {
        TaskCmd::Create { dataset, version, metric, kind } => {
            let rec = ws.datasets.get(dataset, *version)?;
            let kind = kind.unwrap_or(rec.task_kind);
            let metric = metric.unwrap_or(MetricName::default_for(kind));
            let t = ws.models.create_task(&rec.dataset_id, rec.version, metric, kind)?;
            Ok(Output {
                human: format!("{} on {} ({metric}, A_t = {})", t.task_id, rec.key(), t.current_best_metric),
                json: serde_json::to_value(&t).map_err(Error::from)?,
            })
        }
        TaskCmd::Develop { task, k, preset, space } => {
            let space = space.space(cli.seed)?;
            let config = AutoMlConfig { preset: *preset, ..AutoMlConfig::default() };
            let report = AutoMl::new(&ws.datasets, &ws.models, config).develop(task, *k, &space)?;
            let mut human = Vec::new();
            for o in &report.outcomes {
                let best = o.best.as_ref().map_or("all runs failed".to_string(), |r| format!("best {} = {}", r.metric_name, r.metric_value));
                human.push(format!("{:<18} score {:.4}  {} runs  {best}", o.plan.kind.to_string(), o.plan.score, o.run_ids.len()));
            }
            human.push(format!("best model {} (A_t = {})", report.best_model.model_id, report.current_best_metric));
            Ok(Output {
                human: human.join("\n"),
                json: json!({
                    "task_id": report.task_id,
                    "plans": report.plans,
                    "run_ids": report.run_ids(),
                    "best_model_id": report.best_model.model_id,
                    "best_run_id": report.best_run.run_id,
                    "A_t": report.current_best_metric,
                }),
            })
        }
        TaskCmd::Best { task } => {
            ws.models.task(task)?;
            let (m, r) = ws.models.select_best(task)?;
            Ok(Output {
                human: format!("{}: {} ({} = {})", task, m.model_id, r.metric_name, r.metric_value),
                json: json!({"task_id": task, "model_id": m.model_id, "run_id": r.run_id, "metric": r.metric_name, "value": r.metric_value}),
            })
        }
    }
}

fn serve(cli: &Cli, a: &ServeArgs) -> CliResult {
    let ws = workspace(cli)?;
    let monitor = Monitor::new(ws.clone(), a.ct.config(!a.no_auto_ct, cli.seed));
    for t in &a.deploy {
        let (m, _) = ws.models.select_best(t)?;
        let d = monitor.deploy(t, &m.model_id)?;
        eprintln!("deployed {} for {t} ({})", m.model_id, d.deployment_id);
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let json_out = cli.json;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await?;
        let local = listener.local_addr()?;
        eprintln!("listening on http://{local}");
        if json_out {
            println!("{}", json!({"addr": local.to_string()}));
            let _ = std::io::stdout().flush();
        }
        scarceops_server::serve(listener, monitor, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(Output { human: "stopped".into(), json: json!({"stopped": true}) })
}

fn monitor(cli: &Cli, cmd: &MonitorCmd) -> CliResult {
    let MonitorCmd::SimulateDrift { task, shift, windows, split, ct, cfg } = cmd;
    let ws = workspace(cli)?;
    let m = Monitor::new(ws.clone(), cfg.config(*ct, cli.seed));
    let before = ws.models.task(task)?;
    let model_id = match m.live_deployment(task) {
        Ok(d) => d.model_id,
        Err(Error::NotFound(_)) => ws.models.select_best(task)?.0.model_id,
        Err(e) => return Err(e.into()),
    };
    // A fresh deployment gives an empty window of the requested size.
    let deployed = m.deploy(task, &model_id)?;
    let c = ws.datasets.load_container(&before.dataset_id, before.dataset_version)?;
    let range = c.split(split).map(|s| s.range()).ok_or_else(|| Error::NotFound(format!("split `{split}`")))?;
    let usable: Vec<usize> = range
        .filter(|&i| before.task_kind == TaskKind::Reconstruction || c.labels[i] != UNLABELED)
        .collect();
    if usable.is_empty() {
        return Err(Error::Validation(format!("split `{split}` has no usable images")).into());
    }
    let total = windows * cfg.window_size;
    let mut first_alert = None;
    let mut alerts = Vec::new();
    let mut cycle = None;
    let mut trajectory = Vec::new();
    for step in 0..total {
        let i = usable[step % usable.len()];
        let mut px = c.image(i).to_vec();
        shift_brightness(&mut px, *shift);
        let label = (before.task_kind == TaskKind::Classification).then(|| Label::Index(c.labels[i] as usize));
        let r = m.feedback(task, ImageInput::Bytes(px), label)?;
        trajectory.push(r.point.value);
        if !r.alerts.is_empty() && first_alert.is_none() {
            first_alert = Some(step + 1);
        }
        alerts.extend(r.alerts);
        if let Some(rec) = r.ct {
            cycle = Some(rec.cycle_id);
            break;
        }
    }
    let mut outcome = None;
    if let Some(id) = &cycle {
        m.wait_ct(task);
        outcome = m
            .ct_records(task)?
            .into_iter()
            .rfind(|r| &r.cycle_id == id && matches!(r.status, CtStatus::Succeeded | CtStatus::Failed));
        if let Some(o) = outcome.as_ref().filter(|o| o.status == CtStatus::Failed) {
            return Err(Error::Internal(format!("training cycle {} failed: {}", o.cycle_id, o.error.clone().unwrap_or_default())).into());
        }
    }
    let after = ws.models.task(task)?;
    let live = m.live_deployment(task)?;
    let mut human = vec![format!(
        "{} feedback images shifted by {shift}; first alert after {}",
        trajectory.len(),
        first_alert.map_or("none".to_string(), |n| n.to_string())
    )];
    for a in &alerts {
        human.push(format!("  {} {} ({})", a.alert_id, a.kind, a.message));
    }
    if let Some(o) = &outcome {
        human.push(format!(
            "cycle {}: dataset v{}, best {}, {}",
            o.cycle_id,
            o.dataset_version.unwrap_or_default(),
            o.best_model_id.clone().unwrap_or_default(),
            o.redeployed.as_ref().map_or("kept the live model".to_string(), |d| format!("redeployed as {d}"))
        ));
    }
    human.push(format!("A_t {} -> {}", before.current_best_metric, after.current_best_metric));
    Ok(Output {
        human: human.join("\n"),
        json: json!({
            "task_id": task,
            "shift": shift,
            "feedback": trajectory.len(),
            "window_size": cfg.window_size,
            "windowed_metric": trajectory,
            "first_alert_at": first_alert,
            "alerts": alerts,
            "ct": outcome,
            "deployment_before": deployed,
            "deployment_after": live,
            "redeployed": live.deployment_id != deployed.deployment_id,
            "A_t_before": before.current_best_metric,
            "A_t_after": after.current_best_metric,
        }),
    })
}

fn plot_cmd(cli: &Cli, cmd: &PlotCmd) -> CliResult {
    let PlotCmd::Latent { out, datasets, split, max_points, title } = cmd;
    let ws = workspace(cli)?;
    let ev = ws.active_embedder_version()?;
    let all = ws.datasets.list()?;
    let ids: Vec<String> = match datasets {
        Some(d) => d.clone(),
        None => {
            let mut ids: Vec<String> = all.iter().filter(|r| r.embedding_for(&ev).is_some()).map(|r| r.dataset_id.clone()).collect();
            ids.dedup();
            ids
        }
    };
    let mut series = Vec::new();
    let mut rows = Vec::new();
    for id in &ids {
        let rec = all
            .iter()
            .filter(|r| &r.dataset_id == id && r.embedding_for(&ev).is_some())
            .max_by_key(|r| r.version)
            .ok_or_else(|| Error::NotFound(format!("fingerprints of {id} by embedder {ev}")))?;
        let emb = rec.embedding_for(&ev).expect("filtered above");
        let fps = ws.datasets.fingerprints(&rec.dataset_id, rec.version, &ev)?;
        let (range, mean) = match split {
            Some(s) => (
                rec.split(s).map(|r| r.range()).ok_or_else(|| Error::NotFound(format!("split `{s}` of {}", rec.key())))?,
                emb.per_split.get(s).cloned().ok_or_else(|| Error::NotFound(format!("split `{s}` of {}", rec.key())))?,
            ),
            None => (0..fps.len(), emb.mean_vector.clone()),
        };
        let picked = &fps[range];
        let stride = picked.len().div_ceil((*max_points).max(1)).max(1);
        let coord = |v: &[f32], d: usize| v.get(d).copied().unwrap_or(0.0) as f64;
        let points: Vec<[f64; 2]> = picked.iter().step_by(stride).map(|f| [coord(&f.vector, 0), coord(&f.vector, 1)]).collect();
        let mean2 = [mean.first().copied().unwrap_or(0.0), mean.get(1).copied().unwrap_or(0.0)];
        rows.push(json!({"dataset_id": rec.dataset_id, "version": rec.version, "points": points.len(), "mean": mean}));
        series.push(plot::Series { name: rec.name.clone(), points, mean: mean2 });
    }
    if series.is_empty() {
        return Err(Error::Validation("no fingerprinted datasets to plot".into()).into());
    }
    write_atomic(out, plot::latent_svg(&series, title).as_bytes())?;
    Ok(Output {
        human: format!("{} datasets -> {}", series.len(), out.display()),
        json: json!({"out": out, "embedder_version": ev, "datasets": rows}),
    })
}

/// Used by tests that drive the binary: true if `path` holds an SVG.
pub fn looks_like_svg(path: &Path) -> bool {
    std::fs::read_to_string(path).is_ok_and(|s| s.starts_with("<svg") && s.trim_end().ends_with("</svg>"))
}

//! A workspace with a trained tiny embedder, a two-class blob task and a
//! deployed classifier.

use std::sync::OnceLock;

use scarceops::automl::{AutoMl, AutoMlConfig, SearchSpace};
use scarceops::dataset::ImageContainer;
use scarceops::embedder::{normalize_pixels, Autoencoder, AutoencoderConfig, Embedder};
use scarceops::metrics::{MetricName, TaskKind};
use scarceops::models::TaskSpec;
use scarceops::dataset::IMAGE_BYTES;
use scarceops::monitor::{Alert, AlertKind, ImageInput, Label, MeanShiftDetector, Monitor, MonitorConfig, MonitorState, Outcome, WindowSample};
use scarceops::synthetic::shift_brightness;
use scarceops::task_model::TaskModel;
use scarceops::synthetic::{generate, Family, SyntheticSet};
use scarceops::workspace::Workspace;

pub const TRAIN: usize = 96;
pub const VAL: usize = 200;

pub fn trained_embedder() -> Embedder {
    static CELL: OnceLock<Embedder> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut px = Vec::new();
        for (i, f) in Family::ALL.iter().enumerate() {
            px.extend(generate(*f, 80, f.max_classes(), 500 + i as u64).pixels);
        }
        let x = normalize_pixels(&px, 240).unwrap();
        let mut ae = Autoencoder::build(AutoencoderConfig { batch_size: 16, epochs: 10, seed: 7, ..AutoencoderConfig::default() }).unwrap();
        ae.train(&x, None).unwrap();
        Embedder::from_autoencoder(ae)
    })
    .clone()
}

/// Fresh in-distribution images for the blob task.
pub fn blobs(n: usize, seed: u64) -> SyntheticSet {
    generate(Family::BrightBlobs, n, 2, seed)
}

pub fn blob_container(seed: u64) -> ImageContainer {
    let s = blobs(TRAIN + VAL, seed);
    ImageContainer::new("blobs", s.pixels, s.labels, &[("train", TRAIN), ("val", VAL)], vec!["left".into(), "right".into()]).unwrap()
}

pub fn good_space() -> SearchSpace {
    SearchSpace { learning_rate: (3e-3, 3e-3), batch_sizes: vec![16], trials: 1, full_epochs: 6, fine_tune_epochs: 3, seed: 1 }
}

/// Barely trained: a model continuous training can beat.
pub fn weak_space() -> SearchSpace {
    SearchSpace { learning_rate: (1e-6, 1e-6), batch_sizes: vec![16], trials: 1, full_epochs: 1, fine_tune_epochs: 1, seed: 2 }
}

pub struct Service {
    pub dir: tempfile::TempDir,
    pub ws: Workspace,
    pub monitor: Monitor,
    pub task: TaskSpec,
    pub model_id: String,
}

pub fn service(config: MonitorConfig, space: &SearchSpace) -> Service {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let embedder = trained_embedder();
    ws.install_embedder(&embedder).unwrap();
    let (rec, _) = ws.datasets.register(&blob_container(11), "blobs", TaskKind::Classification, "fixture").unwrap();
    ws.fingerprint_dataset(&rec.dataset_id, rec.version, &embedder).unwrap();
    let task = ws.models.create_task(&rec.dataset_id, rec.version, MetricName::Accuracy, TaskKind::Classification).unwrap();
    let report = AutoMl::new(&ws.datasets, &ws.models, AutoMlConfig::default()).develop(&task.task_id, 1, space).unwrap();
    let model_id = report.best_model.model_id.clone();
    let monitor = Monitor::new(ws.clone(), config);
    monitor.deploy(&task.task_id, &model_id).unwrap();
    let task = ws.models.task(&task.task_id).unwrap();
    Service { dir, ws, monitor, task, model_id }
}

pub fn quiet() -> MonitorConfig {
    MonitorConfig { auto_ct: false, ..MonitorConfig::default() }
}

/// Feeds fresh in-distribution windows straight into copies of the deployed
/// state and counts windows that raise any alert.
pub fn false_alarms(windows: u64) -> (usize, Vec<f64>) {
    let s = service(quiet(), &good_space());
    let t = &s.task.task_id;
    let base = s.monitor.state(t).unwrap();
    let TaskModel::Classifier(net) = s.ws.models.load_model(&s.ws.models.model(&s.model_id).unwrap()).unwrap() else {
        panic!("expected a classifier")
    };
    let embedder = trained_embedder();
    let w = base.window_size;
    let mut alarms = 0;
    let mut zs = Vec::new();
    for seed in 0..windows {
        let set = blobs(w, 10_000 + seed);
        let x = normalize_pixels::<f32>(&set.pixels, w).unwrap();
        let preds = net.predict(&x).unwrap();
        let codes = embedder.embed(&x).unwrap();
        let mut st: MonitorState = base.clone();
        for i in 0..w {
            st.push(WindowSample {
                seq: 0,
                image_id: String::new(),
                fingerprint: codes[i].clone(),
                outcome: Outcome::Label { truth: set.labels[i] as usize, predicted: preds[i] },
            });
        }
        zs.push(st.drift_z());
        if !st.check_drift(&MeanShiftDetector).is_empty() {
            alarms += 1;
        }
    }
    (alarms, zs)
}

/// Feeds two windows of brightness-shifted images through `feedback`;
/// returns the feedback count at the first drift alert, the window size and
/// the alert log.
pub fn brightness_drift(delta: f64) -> (Option<usize>, usize, Vec<Alert>) {
    let s = service(quiet(), &good_space());
    let t = &s.task.task_id;
    let w = s.monitor.config().window_size;
    let mut set = blobs(2 * w, 4242);
    shift_brightness(&mut set.pixels, delta);
    let mut fired = None;
    for i in 0..2 * w {
        let image = ImageInput::Bytes(set.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES].to_vec());
        let r = s.monitor.feedback(t, image, Some(Label::Index(set.labels[i] as usize))).unwrap();
        if r.alerts.iter().any(|a| a.kind == AlertKind::EmbeddingDrift) {
            fired = Some(i + 1);
            break;
        }
    }
    (fired, w, s.monitor.alerts(t).unwrap())
}

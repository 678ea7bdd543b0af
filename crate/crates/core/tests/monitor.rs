mod common;

use std::collections::VecDeque;

use common::service::{blobs, brightness_drift, false_alarms, good_space, quiet, service, trained_embedder, weak_space, VAL};
use rand::Rng;
use scarceops::dataset::IMAGE_BYTES;
use scarceops::embedder::normalize_pixels;
use scarceops::metrics::MetricName;
use scarceops::monitor::{
    AlertKind, CtStatus, DeploymentStatus, ImageInput, Label, MonitorConfig, Prediction,
};
use scarceops::npy::NpyArray;
use scarceops::rng::seeded;
use scarceops::synthetic::shift_brightness;
use scarceops::task_model::TaskModel;
use scarceops::{Error, ErrorKind};

fn class_of(p: &Prediction) -> usize {
    match p {
        Prediction::Class { label, .. } => *label,
        other => panic!("not a class prediction: {other:?}"),
    }
}

#[test]
fn deploy_supersedes_and_rejects_unknown_models() {
    let s = service(quiet(), &good_space());
    let t = &s.task.task_id;
    let first = s.monitor.live_deployment(t).unwrap();
    assert_eq!(first.status, DeploymentStatus::Live);
    assert_eq!(first.model_id, s.model_id);

    let second = s.monitor.deploy(t, &s.model_id).unwrap();
    let all = s.monitor.deployments(t).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(all.iter().filter(|d| d.status == DeploymentStatus::Live).count(), 1);
    assert_eq!(all[0].status, DeploymentStatus::Superseded);
    assert_eq!(s.monitor.live_deployment(t).unwrap(), second);

    assert!(matches!(s.monitor.deploy(t, "model-999999"), Err(Error::NotFound(_))));
    assert!(matches!(s.monitor.deploy("task-999999", &s.model_id), Err(Error::NotFound(_))));
    assert_eq!(s.monitor.live_deployment(t).unwrap(), second);

    // A fresh monitor over the same files sees the same live deployment.
    let again = scarceops::monitor::Monitor::new(s.ws.clone(), quiet());
    assert_eq!(again.live_deployment(t).unwrap(), second);
}

#[test]
fn predict_without_deployment_or_with_bad_payload_fails() {
    let s = service(quiet(), &good_space());
    let other = s.ws.models.create_task("blobs", 1, MetricName::Accuracy, scarceops::metrics::TaskKind::Classification).unwrap();
    let img = blobs(1, 3).pixels;
    assert_eq!(s.monitor.predict(&other.task_id, &img).unwrap_err().kind(), ErrorKind::NotFound);
    assert_eq!(s.monitor.predict(&s.task.task_id, &[]).unwrap_err().kind(), ErrorKind::Validation);
    assert_eq!(s.monitor.predict(&s.task.task_id, &[1, 2, 3]).unwrap_err().kind(), ErrorKind::Validation);
}

#[test]
fn serving_matches_offline_scoring() {
    let s = service(quiet(), &good_space());
    let t = &s.task.task_id;
    let container = s.ws.datasets.load_container("blobs", 1).unwrap();
    let val = container.split("val").unwrap().range();
    let TaskModel::Classifier(net) = s.ws.models.load_model(&s.ws.models.model(&s.model_id).unwrap()).unwrap() else {
        panic!("expected a classifier")
    };
    let x = normalize_pixels::<f32>(&container.pixels[val.start * IMAGE_BYTES..val.end * IMAGE_BYTES], val.len()).unwrap();
    let offline = net.predict(&x).unwrap();
    let embedder = trained_embedder();
    let codes = embedder.embed(&x).unwrap();

    for (j, i) in val.clone().enumerate().step_by(7) {
        let chw = container.image(i);
        let r = s.monitor.predict(t, chw).unwrap();
        assert_eq!(class_of(&r.prediction), offline[j]);
        assert_eq!(r.fingerprint.vector, codes[j]);
        assert_eq!(r.fingerprint.embedder_version, embedder.version());
        // The same image as an HWC NPY array.
        let mut hwc = vec![0u8; IMAGE_BYTES];
        for c in 0..3 {
            for p in 0..1024 {
                hwc[p * 3 + c] = chw[c * 1024 + p];
            }
        }
        let npy = NpyArray::from_u8(vec![32, 32, 3], hwc).unwrap().to_bytes();
        assert_eq!(s.monitor.predict(t, &npy).unwrap(), r);
    }

    // Identical concurrent requests give identical answers.
    let img = container.image(val.start).to_vec();
    let answers: Vec<_> = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..4).map(|_| sc.spawn(|| s.monitor.predict(t, &img).unwrap())).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(answers.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn windowed_accuracy_matches_recount_oracle() {
    let s = service(quiet(), &good_space());
    let t = &s.task.task_id;
    let w = s.monitor.config().window_size;
    let pool = blobs(60, 77);
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    for i in 0..pool.len() {
        let r = s.monitor.predict(t, &pool.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]).unwrap();
        preds.push(class_of(&r.prediction));
        ids.push(r.image_id);
    }
    let mut rng = seeded(5);
    let mut history: VecDeque<bool> = VecDeque::new();
    for call in 0..1000 {
        let i = rng.gen_range(0..pool.len());
        let label = rng.gen_range(0..2usize);
        let input = if call % 3 == 0 {
            ImageInput::Bytes(pool.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES].to_vec())
        } else {
            ImageInput::Id(ids[i].clone())
        };
        let label = if call % 2 == 0 { Label::Index(label) } else { Label::Name(["left", "right"][label].into()) };
        let r = s.monitor.feedback(t, input, Some(label.clone())).unwrap();
        let truth = match label {
            Label::Index(l) => l,
            Label::Name(n) => usize::from(n == "right"),
        };
        history.push_back(truth == preds[i]);
        if history.len() > w {
            history.pop_front();
        }
        let oracle = history.iter().filter(|&&c| c).count() as f64 / history.len() as f64;
        assert_eq!(r.point.value, oracle, "call {call}");
        assert_eq!(r.point.window_size, history.len());
    }
    // One metric point per feedback call, in order.
    let points = s.monitor.metrics(t).unwrap();
    assert_eq!(points.len(), 1000);
    assert!(points.windows(2).all(|p| p[0].timestamp <= p[1].timestamp && p[0].seq < p[1].seq));
    assert_eq!(s.monitor.state(t).unwrap().window.len(), w);

    assert!(matches!(s.monitor.feedback(t, ImageInput::Id("img-unknown".into()), Some(Label::Index(0))), Err(Error::NotFound(_))));
    assert!(matches!(s.monitor.feedback(t, ImageInput::Id(ids[0].clone()), Some(Label::Index(2))), Err(Error::Validation(_))));
    assert!(matches!(s.monitor.feedback(t, ImageInput::Id(ids[0].clone()), None), Err(Error::Validation(_))));
    assert_eq!(s.monitor.metrics(t).unwrap().len(), 1000);
}

#[test]
fn all_correct_alternating_and_all_wrong_windows() {
    let s = service(MonitorConfig { window_size: 10, ..quiet() }, &good_space());
    let t = &s.task.task_id;
    let pool = blobs(10, 91);
    let feed = |i: usize, correct: bool| {
        let r = s.monitor.predict(t, &pool.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]).unwrap();
        let p = class_of(&r.prediction);
        s.monitor.feedback(t, ImageInput::Id(r.image_id), Some(Label::Index(if correct { p } else { 1 - p }))).unwrap()
    };
    for i in 0..10 {
        feed(i, true);
    }
    assert_eq!(s.monitor.metrics(t).unwrap().last().unwrap().value, 1.0);
    for i in 0..10 {
        feed(i, i % 2 == 0);
    }
    assert_eq!(s.monitor.metrics(t).unwrap().last().unwrap().value, 0.5);
    let mut drops = 0;
    for i in 0..10 {
        let r = feed(i, false);
        drops += r.alerts.iter().filter(|a| a.kind == AlertKind::PerformanceDrop).count();
    }
    assert_eq!(s.monitor.metrics(t).unwrap().last().unwrap().value, 0.0);
    assert!(drops >= 1);
    // Re-checking the unchanged window raises nothing new.
    let before = s.monitor.alerts(t).unwrap().len();
    assert!(s.monitor.check_drift(t).unwrap().is_empty());
    assert!(s.monitor.check_drift(t).unwrap().is_empty());
    assert_eq!(s.monitor.alerts(t).unwrap().len(), before);
}

#[test]
fn in_distribution_windows_rarely_alarm() {
    let (alarms, zs) = false_alarms(100);
    assert!(alarms <= 5, "{alarms} false alarms; z = {zs:?}");
}

#[test]
fn brightness_shift_fires_within_two_windows() {
    let (at, w, alerts) = brightness_drift(0.5);
    let at = at.expect("no drift alert within two windows");
    assert!(at <= 2 * w);
    assert!(alerts.iter().any(|a| a.kind == AlertKind::EmbeddingDrift && a.value > 3.0));
}

#[test]
fn ct_is_single_flight_and_coalesces() {
    let s = service(MonitorConfig { window_size: 20, auto_ct: false, ct_strategies: 1, ct_space: good_space(), ..MonitorConfig::default() }, &weak_space());
    let t = &s.task.task_id;
    let pool = blobs(20, 8);
    for i in 0..20 {
        s.monitor
            .feedback(t, ImageInput::Bytes(pool.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES].to_vec()), Some(Label::Index(pool.labels[i] as usize)))
            .unwrap();
    }
    let recs: Vec<_> = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..6).map(|_| sc.spawn(|| s.monitor.trigger_ct(t, None).unwrap())).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(recs.iter().filter(|r| r.status == CtStatus::Queued).count(), 1);
    assert!(recs.iter().all(|r| r.cycle_id == recs[0].cycle_id));
    s.monitor.wait_ct(t);
    assert!(s.monitor.ct_in_flight(t).is_none());
    let log = s.monitor.ct_records(t).unwrap();
    assert_eq!(log.iter().filter(|r| r.status == CtStatus::Queued).count(), 1);
    assert_eq!(log.iter().filter(|r| r.status == CtStatus::Coalesced).count(), 5);
    let done: Vec<_> = log.iter().filter(|r| matches!(r.status, CtStatus::Succeeded | CtStatus::Failed)).collect();
    assert_eq!(done.len(), 1, "{log:?}");
    assert_eq!(done[0].status, CtStatus::Succeeded, "{:?}", done[0].error);
}

#[test]
fn ct_cycle_redeploys_a_better_model_and_keeps_a_t_monotone() {
    let s = service(MonitorConfig { auto_ct: true, ct_strategies: 1, ct_space: good_space(), ..MonitorConfig::default() }, &weak_space());
    let t = &s.task.task_id;
    let before = s.ws.models.task(t).unwrap();
    let old = s.monitor.live_deployment(t).unwrap();
    // Shifted images with true labels: the weak model and the shift both alarm.
    let mut set = blobs(200, 9);
    shift_brightness(&mut set.pixels, 0.5);
    let mut cycles = Vec::new();
    for i in 0..200 {
        let r = s
            .monitor
            .feedback(t, ImageInput::Bytes(set.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES].to_vec()), Some(Label::Index(set.labels[i] as usize)))
            .unwrap();
        if let Some(c) = r.ct {
            cycles.push(c);
            break;
        }
    }
    assert_eq!(cycles.len(), 1, "no alert started a cycle");
    assert!(cycles[0].alert_id.is_some());
    s.monitor.wait_ct(t);
    let log = s.monitor.ct_records(t).unwrap();
    let done = log.iter().find(|r| r.status == CtStatus::Succeeded).unwrap_or_else(|| panic!("{log:?}"));
    let after = s.ws.models.task(t).unwrap();
    assert!(after.current_best_metric.get() >= before.current_best_metric.get());
    assert_eq!(done.metric_after, Some(after.current_best_metric));
    assert_eq!(after.dataset_version, done.dataset_version.unwrap());
    let grown = s.ws.datasets.get("blobs", Some(after.dataset_version)).unwrap();
    assert_eq!(grown.split("train").unwrap().len(), common::service::TRAIN + 100);
    assert_eq!(grown.split("val").unwrap().len(), VAL);
    assert!(grown.fingerprint_ref.is_some());

    let dep = done.redeployed.clone().expect("a better model should be deployed");
    let live = s.monitor.live_deployment(t).unwrap();
    assert_eq!(live.deployment_id, dep);
    assert_ne!(live.model_id, old.model_id);
    assert_eq!(s.monitor.deployments(t).unwrap().iter().filter(|d| d.status == DeploymentStatus::Live).count(), 1);
    // The window starts over for the new deployment.
    assert!(s.monitor.state(t).unwrap().window.is_empty());
}


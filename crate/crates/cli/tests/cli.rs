mod common;

use std::path::Path;
use std::process::{Command, Output};

use dcmamber::data::{load_csv, save_csv, SeriesDataset};
use dcmamber::model::{save_checkpoint, Checkpoint, DcMamber, Variant};
use dcmamber::Tensor;
use dcmamber_cli::commands::{self, CHECKPOINT_FILE, HISTORY_FILE};
use dcmamber_cli::config::{Entry, Origin, RunConfig};

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmamber"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run binary")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn entries(kv: &[(&str, &str)]) -> Vec<Entry> {
    kv.iter()
        .map(|(k, v)| Entry {
            key: k.to_string(),
            value: v.to_string(),
            origin: Origin::CommandLine,
        })
        .collect()
}

/// A small synthetic run that trains in well under a second.
const TINY: [(&str, &str); 11] = [
    ("dataset", "synthetic"),
    ("synth_vars", "3"),
    ("synth_len", "400"),
    ("lookback", "16"),
    ("horizon", "4"),
    ("d_model", "8"),
    ("d_state", "2"),
    ("proj_len", "4"),
    ("batch_size", "16"),
    ("max_steps", "3"),
    ("epochs", "1"),
];

fn tiny(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let out = out.display().to_string();
    let mut kv = TINY.to_vec();
    kv.push(("out", &out));
    kv.extend_from_slice(extra);
    RunConfig::resolve(&[], &entries(&kv)).unwrap()
}

#[test]
fn missing_data_file_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["train", "--data", "no_such_series.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_series.csv"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["train", "--dataset", "synthetic", "--set", "d_modle=8"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d_modle"), "{}", stderr(&o));
}

#[test]
fn epochs_flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut text: String = TINY
        .iter()
        .filter(|(k, _)| !matches!(*k, "max_steps" | "epochs" | "synth_len"))
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    text.push_str("epochs = 3\npatience = 0\nmax_steps = none\nsynth_len = 200\n");
    std::fs::write(dir.path().join("run.conf"), text).unwrap();
    let o = bin(&["train", "--config", "run.conf", "--epochs", "1", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let history = std::fs::read_to_string(dir.path().join("r").join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
}

#[test]
fn ettm1_file_picks_up_its_preset() {
    let cfg = RunConfig::resolve(&[], &entries(&[("data", "series/ETTm1.csv")])).unwrap();
    assert_eq!(cfg.model.d_model, 128);
    assert_eq!(cfg.model.e_layers, 2);
    assert_eq!(cfg.model.d_state, 256);
    assert_eq!(cfg.train.lr, 1e-4);
    let meta = cfg.train_entries();
    let get = |k: &str| meta.iter().find(|(m, _)| m == k).map(|(_, v)| v.as_str());
    assert_eq!(get("lr"), Some("0.0001"));
    assert_eq!(get("preset"), Some("ETTm1/96"));
}

#[test]
fn checkpoint_records_training_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = commands::train(&tiny(dir.path(), &[("lr", "0.002")])).unwrap();
    let ckpt = dcmamber::model::load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(ckpt.meta("lr"), Some("0.002"));
    assert_eq!(ckpt.meta("dataset"), Some("synthetic"));
    assert_eq!(ckpt.config.d_model, 8);
    assert_eq!(ckpt.config.n_vars, 3);
}

#[test]
fn predict_writes_one_horizon_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = commands::train(&tiny(dir.path(), &[])).unwrap();
    let rows = 16;
    let values: Vec<f32> = (0..rows * 3).map(|i| (i as f32 * 0.37).sin()).collect();
    let input = SeriesDataset::new(
        "input",
        vec!["a".into(), "b".into(), "c".into()],
        Tensor::from_vec(&[rows, 3], values).unwrap(),
    )
    .unwrap();
    let input_path = dir.path().join("input.csv");
    save_csv(&input, &input_path).unwrap();
    let (p1, p2) = (dir.path().join("p1.csv"), dir.path().join("p2.csv"));
    commands::predict(&out.checkpoint, &input_path, &p1).unwrap();
    commands::predict(&out.checkpoint, &input_path, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let forecast = load_csv(&p1).unwrap();
    assert_eq!(forecast.len(), 4);
    assert_eq!(forecast.columns, input.columns);
    assert!(forecast.values.data().iter().all(|v| v.is_finite()));
}

#[test]
fn predict_rejects_short_or_mismatched_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = commands::train(&tiny(dir.path(), &[])).unwrap();
    let short = SeriesDataset::new("s", vec!["a".into(), "b".into(), "c".into()], Tensor::zeros(&[15, 3])).unwrap();
    let wide = SeriesDataset::new("w", vec!["a".into(), "b".into()], Tensor::zeros(&[16, 2])).unwrap();
    for (name, ds) in [("short.csv", short), ("wide.csv", wide)] {
        let path = dir.path().join(name);
        save_csv(&ds, &path).unwrap();
        assert!(commands::predict(&out.checkpoint, &path, &dir.path().join("o.csv")).is_err(), "{name}");
    }
}

#[test]
fn constant_series_with_zero_projector_is_predicted_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, vars) = (300, 3);
    let values: Vec<f32> = (0..rows * vars).map(|i| [1.5, -2.0, 40.0][i % vars]).collect();
    let ds = SeriesDataset::new(
        "flat",
        vec!["x".into(), "y".into(), "z".into()],
        Tensor::from_vec(&[rows, vars], values).unwrap(),
    )
    .unwrap();
    let data = dir.path().join("flat.csv");
    save_csv(&ds, &data).unwrap();
    let data_s = data.display().to_string();
    let mut kv: Vec<(&str, &str)> = TINY.iter().copied().filter(|(k, _)| !k.starts_with("synth") && *k != "dataset").collect();
    kv.push(("data", &data_s));
    let cfg = RunConfig::resolve(&[], &entries(&kv)).unwrap();

    let mcfg = commands::model_config(&cfg, &ds).unwrap();
    let (_, mut store) = DcMamber::new::<f32>(mcfg.clone(), 5).unwrap();
    for name in ["projector.weight", "projector.bias"] {
        let id = store.find(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let prepared = commands::prepare(&cfg, &ds, mcfg.lookback, None).unwrap();
    let ckpt = Checkpoint {
        config: mcfg,
        meta: Vec::new(),
        params: store,
        norm: Some(prepared.norm.clone()),
    };
    let path = dir.path().join(CHECKPOINT_FILE);
    save_checkpoint(&path, &ckpt).unwrap();
    let first = commands::eval(&cfg, &path).unwrap();
    assert!(first.metrics.mse <= 1e-4, "{}", first.metrics.mse);
    let (raw_mse, _) = first.metrics.raw.unwrap();
    assert!(raw_mse <= 1e-4, "{raw_mse}");
    let second = commands::eval(&cfg, &path).unwrap();
    assert_eq!(first.metrics, second.metrics);
}

#[test]
fn eval_is_repeatable_and_reads_data_settings_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = commands::train(&tiny(dir.path(), &[])).unwrap();
    let ckpt = out.checkpoint.display().to_string();
    let run = || bin(&["eval", "--checkpoint", &ckpt], dir.path());
    let (a, b) = (run(), run());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8_lossy(&a.stdout);
    assert!(text.contains(&format!("mse {:.6}", out.test.mse)), "{text}");
}

#[test]
fn ablation_of_full_alone_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let rows = commands::ablate(&tiny(dir.path(), &[]), &[Variant::Full]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].variant, Variant::Full);
    assert!(commands::ordering(&rows).is_empty());
    assert!(!commands::full_is_worst(&rows));
}

#[test]
fn single_length_bench_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["bench-scan", "--lengths", "32", "--repeats", "1", "--out", "b.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("32,"));
    let gap: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(gap <= 1e-5);
}

#[test]
fn gradcheck_passes_with_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}

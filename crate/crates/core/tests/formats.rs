use std::fs;
use std::path::PathBuf;

use dcmamber::data::{load_csv, parse_csv, NormStats};
use dcmamber::kv::{parse_kv, parse_override};
use dcmamber::model::{decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, DcMamber, ModelConfig};
use dcmamber::Error;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn kv_seeds_parse_as_expected() {
    let seeds = corpus("config_kv");
    assert!(!seeds.is_empty());
    for (name, bytes) in seeds {
        let text = String::from_utf8(bytes).unwrap();
        let parsed = parse_kv(&text);
        match name.as_str() {
            "duplicate.conf" | "missing_eq.conf" => assert!(parsed.is_err(), "{name}"),
            "override.txt" => assert_eq!(parse_override(&text).unwrap().value, "3"),
            _ => assert!(parsed.is_ok(), "{name}: {parsed:?}"),
        }
    }
}

#[test]
fn csv_seeds_parse_as_expected() {
    for (name, bytes) in corpus("csv_series") {
        let parsed = parse_csv(&bytes[..], &name);
        match name.as_str() {
            "dated.csv" => {
                let ds = parsed.unwrap();
                assert_eq!(ds.columns, ["HUFL", "HULL", "OT"]);
                assert_eq!(ds.len(), 3);
                assert_eq!(ds.row(2), &[5.76, 1.942, 30.038]);
            }
            "plain.csv" => assert_eq!(parsed.unwrap().row(2), &[-1.0, 7.0]),
            "non_numeric.csv" => assert!(matches!(parsed, Err(Error::Parse { row: 2, col: 2, .. })), "{parsed:?}"),
            _ => assert!(parsed.is_err(), "{name}"),
        }
    }
}

#[test]
fn checkpoint_seeds_decode_as_expected() {
    for (name, bytes) in corpus("checkpoint") {
        let decoded = decode_checkpoint(&bytes);
        if name == "tiny.dcm" {
            let ckpt = decoded.unwrap();
            assert_eq!(ckpt.config.d_model, 4);
            assert!(ckpt.norm.is_some());
            let x = dcmamber::Tensor::zeros(&[1, 8, 2]);
            assert_eq!(ckpt.model().unwrap().predict(&ckpt.params, &x).unwrap().shape(), &[1, 4, 2]);
        } else {
            assert!(decoded.is_err(), "{name}");
        }
    }
}

#[test]
fn checkpoint_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::new(8, 4, 3).with_width(8);
    cfg.e_layers = 1;
    cfg.d_state = 2;
    cfg.proj_len = 4;
    let (model, params) = DcMamber::new::<f32>(cfg.clone(), 17).unwrap();
    let csv = dir.path().join("s.csv");
    fs::write(&csv, "a,b,c\n1,2,3\n2,4,8\n0,1,-1\n").unwrap();
    let ckpt = Checkpoint {
        config: cfg,
        meta: vec![("lr".into(), "0.001".into())],
        params,
        norm: Some(NormStats::fit(&load_csv(&csv).unwrap())),
    };
    let path = dir.path().join("m.dcm");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let x = dcmamber::params::Initializer::new(1).uniform::<f32>(&[2, 8, 3], 1.0);
    let (a, b) = (model.predict(&ckpt.params, &x).unwrap(), back.model().unwrap().predict(&back.params, &x).unwrap());
    assert_eq!(a, b);
    assert!(matches!(load_checkpoint(&dir.path().join("missing.dcm")), Err(Error::Io { .. })));
}

//! Acceptance run: one PASS, FAIL or SKIP line per criterion. Exits non-zero
//! when any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use dcmamber::attention::{AttentionConfig, LinearAttention};
use dcmamber::model::Variant;
use dcmamber::ops::Mode;
use dcmamber::params::{Initializer, ParamStore};
use dcmamber::rng::RngState;
use dcmamber::ssm::{selective_scan_parallel, selective_scan_sequential, SsmDiscretization};
use dcmamber::{Scalar, Tensor};
use dcmamber_cli::bench::{bench_scan, BenchSettings};
use dcmamber_cli::commands::{self, CHECKPOINT_FILE, HISTORY_FILE};
use dcmamber_cli::config::{Entry, Origin, RunConfig};

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn judge(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn config(kv: &[(&str, &str)]) -> RunConfig {
    let entries: Vec<Entry> = kv
        .iter()
        .map(|(k, v)| Entry {
            key: k.to_string(),
            value: v.to_string(),
            origin: Origin::CommandLine,
        })
        .collect();
    RunConfig::resolve(&[], &entries).expect("acceptance config")
}

fn pick<T: Copy>(init: &mut Initializer, items: &[T]) -> T {
    items[((init.sample() * items.len() as f64) as usize).min(items.len() - 1)]
}

fn scan_gap<T: Scalar>(seed: u64, len: usize, ch: usize, n: usize) -> f64 {
    let mut init = Initializer::new(seed);
    // step sizes over the usual softplus range, decay rates 1..=n
    let delta = init.uniform::<T>(&[1, len, ch], 0.4995).map(|v| v + T::of(0.5005));
    let a = Tensor::from_vec(&[ch, n], (0..ch * n).map(|i| T::of(-((i % n) as f64 + 1.0))).collect()).unwrap();
    let b = init.uniform::<T>(&[1, len, n], 1.0);
    let c = init.uniform::<T>(&[1, len, n], 1.0);
    let x = init.uniform::<T>(&[1, len, ch], 1.0);
    let disc = SsmDiscretization::new(&delta, &a, &b, &x).unwrap();
    let seq = selective_scan_sequential(&disc, &c).unwrap();
    let par = selective_scan_parallel(&disc, &c).unwrap();
    seq.max_abs_diff(&par)
}

fn scan_equivalence() -> Outcome {
    let started = Instant::now();
    let mut init = Initializer::new(1000);
    let (mut worst32, mut worst64) = (0f64, 0f64);
    for case in 0..1000u64 {
        let len = pick(&mut init, &[1, 2, 7, 128, 512]);
        let ch = 1 + (init.sample() * 32.0) as usize;
        let n = 1 + (init.sample() * 16.0) as usize;
        worst32 = worst32.max(scan_gap::<f32>(case, len, ch.min(32), n.min(16)));
        worst64 = worst64.max(scan_gap::<f64>(case, len, ch.min(32), n.min(16)));
    }
    let secs = started.elapsed().as_secs_f64();
    judge(
        worst32 <= 1e-5 && worst64 <= 1e-10 && secs < 30.0,
        format!("1000 cases, worst gap f32 {worst32:.2e} (limit 1e-5), f64 {worst64:.2e} (limit 1e-10), {secs:.1}s"),
    )
}

/// Plain multi-head softmax attention over all tokens, written with loops.
fn dense_attention(att: &LinearAttention, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (s, d, h) = (att.cfg.seq_len, att.cfg.d_model, att.cfg.heads);
    let dh = d / h;
    let affine = |lin: &dcmamber::layers::Linear, inp: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let w = store.get(lin.weight);
        let b = lin.bias.map(|b| store.get(b).data().to_vec()).unwrap_or(vec![0.0; d]);
        inp.iter()
            .map(|row| (0..d).map(|o| b[o] + (0..d).map(|i| row[i] * w.get(&[i, o])).sum::<f64>()).collect())
            .collect()
    };
    let tokens: Vec<Vec<f64>> = (0..s).map(|t| (0..d).map(|c| x.get(&[0, t, c])).collect()).collect();
    let (q, k, v) = (affine(&att.query, &tokens), affine(&att.key, &tokens), affine(&att.value, &tokens));
    let mut merged = vec![vec![0.0; d]; s];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for t in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|u| cols.clone().map(|c| q[t][c] * k[u][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|z| (z - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                merged[t][c] = (0..s).map(|u| weights[u] / total * v[u][c]).sum();
            }
        }
    }
    let out = affine(&att.output, &merged);
    Tensor::from_vec(&[1, s, d], out.into_iter().flatten().collect()).unwrap()
}

fn linformer_identity() -> Outcome {
    let started = Instant::now();
    let mut init = Initializer::new(2000);
    let mut worst = 0f64;
    for case in 0..100u64 {
        let len = 1 + (init.sample() * 64.0) as usize;
        let heads = pick(&mut init, &[1, 2, 4]);
        let d = heads * pick(&mut init, &[1, 2, 4]);
        let cfg = AttentionConfig {
            d_model: d,
            heads,
            seq_len: len.min(64),
            proj_len: len.min(64),
            share_heads: false,
        };
        let mut store = ParamStore::<f64>::new();
        let mut pinit = Initializer::new(case);
        let att = LinearAttention::init(&mut store, "a", cfg, &mut pinit).unwrap();
        for lin in [&att.query, &att.key, &att.value, &att.output] {
            let b = lin.bias.unwrap();
            let shape = store.get(b).shape().to_vec();
            *store.get_mut(b) = pinit.uniform(&shape, 0.5);
        }
        for proj in [att.key_proj, att.value_proj] {
            let e = store.get_mut(proj);
            e.data_mut().fill(0.0);
            let l = cfg.seq_len;
            for head in 0..heads {
                for i in 0..l {
                    e.set(&[head, i, i], 1.0);
                }
            }
        }
        let x = pinit.uniform::<f64>(&[1, cfg.seq_len, d], 2.0);
        let y = att.apply(&store, &x, Mode::Eval, RngState::new(0)).unwrap();
        worst = worst.max(y.max_abs_diff(&dense_attention(&att, &store, &x)));
    }
    let secs = started.elapsed().as_secs_f64();
    judge(
        worst <= 1e-6 && secs < 10.0,
        format!("100 cases with L <= 64, worst gap {worst:.2e} (limit 1e-6), {secs:.1}s"),
    )
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let reports = commands::gradcheck(1).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let parts: Vec<String> = reports
        .iter()
        .map(|(name, r)| format!("{name} {:.1e}/{:.0e}", r.worst().map_or(0.0, |g| g.max_rel_err), r.tolerance))
        .collect();
    judge(
        reports.iter().all(|(_, r)| r.passed()) && secs < 300.0,
        format!("worst/limit: {}, {secs:.1}s", parts.join(", ")),
    )
}

fn synthetic_forecast(out: &Path) -> Outcome {
    let started = Instant::now();
    let dir = out.display().to_string();
    let cfg = config(&[
        ("dataset", "synthetic"),
        ("synth_vars", "8"),
        ("synth_len", "4000"),
        ("synth_noise", "0.1"),
        ("lookback", "96"),
        ("horizon", "24"),
        ("d_model", "64"),
        ("d_state", "1"),
        ("proj_len", "32"),
        ("max_steps", "500"),
        ("epochs", "10"),
        ("patience", "0"),
        ("out", &dir),
    ]);
    let outcome = commands::train(&cfg).unwrap();
    let ratio = outcome.test.mse / outcome.persistence.mse;
    let secs = started.elapsed().as_secs_f64();
    judge(
        ratio <= 0.5 && outcome.report.steps <= 500,
        format!(
            "test mse {:.4} vs persistence {:.4} (ratio {ratio:.3}, limit 0.5) after {} steps, {secs:.0}s",
            outcome.test.mse, outcome.persistence.mse, outcome.report.steps
        ),
    )
}

fn ettm1(out: &Path) -> Outcome {
    let Ok(path) = std::env::var("DCM_ETTM1_CSV") else {
        return Outcome {
            verdict: Verdict::Skip,
            detail: "set DCM_ETTM1_CSV to the ETTm1 CSV to run".into(),
        };
    };
    let dir = out.display().to_string();
    let cfg = config(&[("data", &path), ("dataset", "ETTm1"), ("horizon", "96"), ("epochs", "3"), ("out", &dir)]);
    let outcome = commands::train(&cfg).unwrap();
    judge(
        outcome.test.mse <= 0.60 && outcome.test.mse < outcome.persistence.mse,
        format!(
            "test mse {:.4} mae {:.4} (limit 0.60), persistence {:.4}",
            outcome.test.mse, outcome.test.mae, outcome.persistence.mse
        ),
    )
}

fn ablation_ordering(out: &Path) -> Outcome {
    let dir = out.display().to_string();
    let cfg = config(&[
        ("dataset", "synthetic"),
        ("lookback", "96"),
        ("horizon", "24"),
        ("d_model", "32"),
        ("d_state", "1"),
        ("proj_len", "32"),
        ("max_steps", "150"),
        ("epochs", "10"),
        ("patience", "0"),
        ("out", &dir),
    ]);
    let variants = [Variant::Full, Variant::NoVEncoder, Variant::NoTEncoder, Variant::BothMixing];
    let rows = commands::ablate(&cfg, &variants).unwrap();
    let mse: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.variant, r.mse)).collect();
    let flagged: Vec<String> = commands::ordering(&rows)
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(v, _)| v.to_string())
        .collect();
    let note = if flagged.is_empty() {
        "full is best".to_string()
    } else {
        format!("flagged: full above {}", flagged.join(", "))
    };
    judge(!commands::full_is_worst(&rows), format!("{}; {note}", mse.join(", ")))
}

fn linear_scaling() -> Outcome {
    let rows = bench_scan(&[256, 2048], &BenchSettings::default()).unwrap();
    let (short, long) = (&rows[0], &rows[1]);
    let ratios = [
        ("sequential scan", long.sequential_ms / short.sequential_ms),
        ("parallel scan", long.parallel_ms / short.parallel_ms),
        ("linear attention", long.attention_ms / short.attention_ms),
    ];
    let text: Vec<String> = ratios.iter().map(|(k, r)| format!("{k} {r:.1}x")).collect();
    judge(
        ratios.iter().all(|(_, r)| *r <= 12.0),
        format!("time at L=2048 over L=256: {} (limit 12x)", text.join(", ")),
    )
}

fn determinism(out: &Path) -> Outcome {
    let run = |sub: &str, threads: usize| {
        let dir = out.join(sub).display().to_string();
        let cfg = config(&[
            ("dataset", "synthetic"),
            ("lookback", "48"),
            ("horizon", "12"),
            ("d_model", "16"),
            ("dropout", "0.1"),
            ("max_steps", "30"),
            ("epochs", "2"),
            ("out", &dir),
        ]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| commands::train(&cfg)).unwrap();
        let read = |f: &str| std::fs::read(out.join(sub).join(f)).unwrap();
        (read(HISTORY_FILE), read(CHECKPOINT_FILE))
    };
    let (h1, c1) = run("first", 1);
    let (h2, c2) = run("second", 3);
    judge(
        h1 == h2 && c1 == c2,
        format!(
            "history {}, checkpoint {} ({} bytes), runs on 1 and 3 worker threads",
            if h1 == h2 { "identical" } else { "differs" },
            if c1 == c2 { "identical" } else { "differs" },
            c1.len()
        ),
    )
}

fn preset_fidelity() -> Outcome {
    let cells = common::published_cells();
    let bad = common::preset_mismatches(&cells);
    judge(
        bad.is_empty() && cells.len() == 32,
        if bad.is_empty() {
            format!("{} cells, 6 settings each, all match", cells.len())
        } else {
            bad.join("; ")
        },
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let criteria: [(&str, Box<dyn Fn() -> Outcome>); 9] = [
        ("scan equivalence", Box::new(scan_equivalence)),
        ("linear attention with identity projections", Box::new(linformer_identity)),
        ("gradient suite", Box::new(gradient_suite)),
        ("synthetic forecasting", Box::new(|| synthetic_forecast(&dir.path().join("synthetic")))),
        ("ETTm1 at desk scale", Box::new(|| ettm1(&dir.path().join("ettm1")))),
        ("ablation ordering", Box::new(|| ablation_ordering(&dir.path().join("ablation")))),
        ("linear scaling", Box::new(linear_scaling)),
        ("determinism", Box::new(|| determinism(&dir.path().join("determinism")))),
        ("preset fidelity", Box::new(preset_fidelity)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("criterion {} {tag} {name}: {}", i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Timing of the sequence kernels across lengths.

use std::fmt::Write as _;
use std::time::Instant;

use dcmamber::attention::{default_heads, AttentionConfig, LinearAttention};
use dcmamber::ops::Mode;
use dcmamber::params::{Initializer, ParamStore};
use dcmamber::rng::RngState;
use dcmamber::ssm::{selective_scan_parallel, selective_scan_sequential, SsmDiscretization};
use dcmamber::Tensor;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchSettings {
    /// Scanned channels, the inner width of a block.
    pub channels: usize,
    pub state: usize,
    /// Token width of the attention kernel.
    pub d_model: usize,
    /// Projected length of the attention kernel, clipped to the length.
    pub proj_len: usize,
    /// Timed runs per kernel and length; the median is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            channels: 64,
            state: 16,
            d_model: 64,
            proj_len: 64,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub sequential_ms: f64,
    pub parallel_ms: f64,
    pub attention_ms: f64,
    /// Largest elementwise gap between the two scans, in `f32`.
    pub max_abs_diff: f64,
}

/// Wall time of one call, in milliseconds.
pub fn time_ms(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

pub fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Random scan inputs of length `len` with step sizes in `[1e-3, 1e-1]`.
pub fn scan_inputs(len: usize, channels: usize, state: usize, seed: u64) -> Result<(SsmDiscretization<f32>, Tensor<f32>)> {
    let mut init = Initializer::new(seed);
    let delta = init.uniform::<f32>(&[1, len, channels], 0.0495).map(|v| v + 0.0505);
    let a = Tensor::from_vec(
        &[channels, state],
        (0..channels * state).map(|i| -((i % state) as f32 + 1.0)).collect(),
    )?;
    let b = init.uniform::<f32>(&[1, len, state], 1.0);
    let c = init.uniform::<f32>(&[1, len, state], 1.0);
    let x = init.uniform::<f32>(&[1, len, channels], 1.0);
    Ok((SsmDiscretization::new(&delta, &a, &b, &x)?, c))
}

/// An attention layer over `len` tokens and an input for it.
pub fn attention_inputs(len: usize, s: &BenchSettings) -> Result<(LinearAttention, ParamStore<f32>, Tensor<f32>)> {
    let mut init = Initializer::new(s.seed);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig {
        d_model: s.d_model,
        heads: default_heads(s.d_model),
        seq_len: len,
        proj_len: s.proj_len.min(len),
        share_heads: false,
    };
    let attn = LinearAttention::init(&mut store, "attention", cfg, &mut init)?;
    let x = init.uniform::<f32>(&[1, len, s.d_model], 1.0);
    Ok((attn, store, x))
}

struct Case {
    disc: SsmDiscretization<f32>,
    c: Tensor<f32>,
    attn: LinearAttention,
    store: ParamStore<f32>,
    x: Tensor<f32>,
    /// Samples for the sequential scan, the parallel scan and attention.
    samples: [Vec<f64>; 3],
}

impl Case {
    fn run(&mut self) -> Result<()> {
        let (disc, c) = (&self.disc, &self.c);
        let t0 = time_ms(|| {
            std::hint::black_box(selective_scan_sequential(disc, c)?);
            Ok(())
        })?;
        let t1 = time_ms(|| {
            std::hint::black_box(selective_scan_parallel(disc, c)?);
            Ok(())
        })?;
        let t2 = time_ms(|| {
            std::hint::black_box(self.attn.apply(&self.store, &self.x, Mode::Eval, RngState::new(0))?);
            Ok(())
        })?;
        for (s, t) in self.samples.iter_mut().zip([t0, t1, t2]) {
            s.push(t);
        }
        Ok(())
    }
}

/// Medians over `repeats` rounds after one warm-up round. Each round visits
/// every length, so slow spells on a shared machine hit all lengths alike.
pub fn bench_scan(lengths: &[usize], s: &BenchSettings) -> Result<Vec<BenchRow>> {
    let mut cases = Vec::with_capacity(lengths.len());
    let mut gaps = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let (disc, c) = scan_inputs(len, s.channels, s.state, s.seed)?;
        gaps.push(selective_scan_sequential(&disc, &c)?.max_abs_diff(&selective_scan_parallel(&disc, &c)?));
        let (attn, store, x) = attention_inputs(len, s)?;
        cases.push(Case {
            disc,
            c,
            attn,
            store,
            x,
            samples: Default::default(),
        });
    }
    for case in &mut cases {
        case.run()?;
        case.samples = Default::default();
    }
    for _ in 0..s.repeats.max(1) {
        for case in &mut cases {
            case.run()?;
        }
    }
    let rows: Vec<BenchRow> = cases
        .into_iter()
        .zip(lengths.iter().zip(gaps))
        .map(|(case, (&length, max_abs_diff))| {
            let [seq, par, att] = case.samples.map(median);
            BenchRow {
                length,
                sequential_ms: seq,
                parallel_ms: par,
                attention_ms: att,
                max_abs_diff,
            }
        })
        .collect();
    for r in &rows {
        log::info!(
            "length {}: sequential {:.3} ms, parallel {:.3} ms, attention {:.3} ms",
            r.length,
            r.sequential_ms,
            r.parallel_ms,
            r.attention_ms
        );
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("length,sequential_ms,parallel_ms,attention_ms,max_abs_diff\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:e}",
            r.length, r.sequential_ms, r.parallel_ms, r.attention_ms, r.max_abs_diff
        );
    }
    s
}

//! Series ingestion, splits, windowing, standardization and the synthetic
//! lag-coupled dataset.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// A multivariate series held in memory, `values: [T, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub name: String,
    pub columns: Vec<String>,
    pub values: Tensor<f32>,
    pub frequency: Option<String>,
    /// Row of the parent series this view starts at.
    pub origin: usize,
}

impl SeriesDataset {
    pub fn new(name: impl Into<String>, columns: Vec<String>, values: Tensor<f32>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != columns.len() {
            return Err(Error::shape(
                "dataset",
                format!("values {:?} with {} column names", values.shape(), columns.len()),
            ));
        }
        if !values.is_finite() {
            return Err(Error::InvalidArgument("dataset holds non-finite values".into()));
        }
        Ok(SeriesDataset {
            name: name.into(),
            columns,
            values,
            frequency: None,
            origin: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vars(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values.data()[t * self.vars()..][..self.vars()]
    }

    /// Copy of rows `range`, remembering where it came from.
    pub fn view(&self, range: Range<usize>) -> Result<SeriesDataset> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "rows {range:?} outside a series of {} rows",
                self.len()
            )));
        }
        let v = self.vars();
        let data = self.values.data()[range.start * v..range.end * v].to_vec();
        Ok(SeriesDataset {
            name: self.name.clone(),
            columns: self.columns.clone(),
            values: Tensor::from_vec(&[range.len(), v], data)?,
            frequency: self.frequency.clone(),
            origin: self.origin + range.start,
        })
    }
}

/// Reads a CSV with a header row. A leading column named `date` is skipped;
/// every other cell must parse as a finite number.
pub fn parse_csv(reader: impl Read, name: &str) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, col: 0, msg: e.to_string() })?
        .clone();
    let skip = usize::from(header.get(0).is_some_and(|h| h.trim().eq_ignore_ascii_case("date")));
    let columns: Vec<String> = header.iter().skip(skip).map(|h| h.trim().to_string()).collect();
    if columns.is_empty() {
        return Err(Error::Parse { row: 1, col: 0, msg: "no value columns".into() });
    }
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, col: 0, msg: e.to_string() })?;
        for (j, cell) in rec.iter().enumerate().skip(skip) {
            let col = j + 1;
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                col,
                msg: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, col, msg: format!("non-finite cell {cell:?}") });
            }
            data.push(v as f32);
        }
    }
    let rows = data.len() / columns.len();
    if rows == 0 {
        return Err(Error::Parse { row: 2, col: 0, msg: "no data rows".into() });
    }
    SeriesDataset::new(name, columns.clone(), Tensor::from_vec(&[rows, columns.len()], data)?)
}

pub fn load_csv(path: &Path) -> Result<SeriesDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(std::io::BufReader::new(file), &name).map_err(|e| match e {
        Error::Parse { row, col, msg } => Error::Parse {
            row,
            col,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Writes the dataset in the dialect [`parse_csv`] reads. Values use the
/// shortest representation that parses back to the same `f32`.
pub fn write_csv(ds: &SeriesDataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    w.write_record(&ds.columns).map_err(fail)?;
    for t in 0..ds.len() {
        w.write_record(ds.row(t).iter().map(|v| v.to_string())).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv write failed: {e}")))?;
    Ok(())
}

pub fn save_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

/// Row boundaries of the three splits. Validation and test views start
/// `overlap` rows before their boundary so their first target is reachable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
    pub overlap: usize,
}

impl SplitSpec {
    /// Boundaries giving `counts` lookback windows per split, where a view of
    /// `n` rows holds `n - lookback + 1` of them.
    pub fn from_counts(counts: (usize, usize, usize), lookback: usize) -> Result<Self> {
        let (tr, va, te) = counts;
        if tr == 0 || va == 0 || te == 0 || lookback == 0 {
            return Err(Error::InvalidArgument(format!("split counts {counts:?} must be positive")));
        }
        let train_end = tr + lookback - 1;
        let val_end = train_end + va - 1;
        Ok(SplitSpec {
            train_end,
            val_end,
            test_end: val_end + te - 1,
            overlap: lookback,
        })
    }

    /// Fractions of `rows` for train and test, the remainder for validation.
    pub fn from_ratios(rows: usize, ratios: (f64, f64, f64), lookback: usize) -> Result<Self> {
        let (tr, va, te) = ratios;
        if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || (tr + va + te - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be fractions summing to 1")));
        }
        let n_train = (rows as f64 * tr) as usize;
        let n_test = (rows as f64 * te) as usize;
        let n_val = rows - n_train - n_test;
        if n_train < lookback || n_val == 0 || n_test == 0 {
            return Err(Error::InvalidArgument(format!(
                "ratios {ratios:?} of {rows} rows leave an empty or too-short split"
            )));
        }
        Ok(SplitSpec {
            train_end: n_train,
            val_end: n_train + n_val,
            test_end: rows,
            overlap: lookback,
        })
    }

    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end.saturating_sub(self.overlap)..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end.saturating_sub(self.overlap)..self.test_end
    }

    fn check(&self, rows: usize) -> Result<()> {
        if !(self.overlap <= self.train_end && self.train_end < self.val_end && self.val_end < self.test_end) {
            return Err(Error::InvalidArgument(format!("split boundaries out of order: {self:?}")));
        }
        if self.test_end > rows {
            return Err(Error::InvalidArgument(format!(
                "split needs {} rows, dataset has {rows}",
                self.test_end
            )));
        }
        Ok(())
    }
}

/// Splits how the published benchmarks were cut.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnownDataset {
    pub name: &'static str,
    pub vars: usize,
    /// Lookback windows (at `L = 96`) per split.
    pub counts: (usize, usize, usize),
    /// Fallback ratios if the file is shorter than the counts require.
    pub ratios: (f64, f64, f64),
}

pub const ETT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);
pub const PEMS_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

pub const KNOWN_DATASETS: [KnownDataset; 8] = [
    KnownDataset { name: "ETTm1", vars: 7, counts: (34465, 11521, 11521), ratios: ETT_RATIOS },
    KnownDataset { name: "Weather", vars: 21, counts: (36792, 5271, 10540), ratios: ETT_RATIOS },
    KnownDataset { name: "ECL", vars: 321, counts: (18317, 2633, 5261), ratios: ETT_RATIOS },
    KnownDataset { name: "Solar", vars: 137, counts: (36601, 5161, 10417), ratios: ETT_RATIOS },
    KnownDataset { name: "PEMS03", vars: 358, counts: (15617, 5135, 5135), ratios: PEMS_RATIOS },
    KnownDataset { name: "PEMS04", vars: 307, counts: (10172, 3375, 3375), ratios: PEMS_RATIOS },
    KnownDataset { name: "PEMS07", vars: 883, counts: (16911, 5622, 5622), ratios: PEMS_RATIOS },
    KnownDataset { name: "PEMS08", vars: 170, counts: (10690, 3548, 3548), ratios: PEMS_RATIOS },
];

/// Matches common spellings: `ETTm1`, `ettm1`, `electricity` for ECL,
/// `solar_AL` or `Solar-Energy` for Solar, `PEMS08` and so on.
pub fn known_dataset(name: &str) -> Option<&'static KnownDataset> {
    let n = name.to_ascii_lowercase();
    let key = match n.as_str() {
        "electricity" => "ecl",
        "solar_al" | "solar-al" | "solar_at" | "solar-energy" | "solar_energy" => "solar",
        other => other,
    };
    KNOWN_DATASETS.iter().find(|d| d.name.eq_ignore_ascii_case(key))
}

/// How to cut a series into train/val/test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitRule {
    /// The published split for a recognised dataset, else these ratios.
    Auto((f64, f64, f64)),
    Ratios((f64, f64, f64)),
    Explicit(SplitSpec),
}

pub struct Splits {
    pub spec: SplitSpec,
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
}

pub fn split(ds: &SeriesDataset, rule: SplitRule, lookback: usize) -> Result<Splits> {
    let rows = ds.len();
    let spec = match rule {
        SplitRule::Explicit(s) => s,
        SplitRule::Ratios(r) => SplitSpec::from_ratios(rows, r, lookback)?,
        SplitRule::Auto(r) => match known_dataset(&ds.name) {
            Some(k) => {
                let s = SplitSpec::from_counts(k.counts, lookback)?;
                if s.test_end <= rows {
                    s
                } else {
                    log::warn!(
                        "{} has {rows} rows, published split needs {}; using ratios {:?}",
                        k.name,
                        s.test_end,
                        k.ratios
                    );
                    SplitSpec::from_ratios(rows, k.ratios, lookback)?
                }
            }
            None => SplitSpec::from_ratios(rows, r, lookback)?,
        },
    };
    spec.check(rows)?;
    Ok(Splits {
        spec,
        train: ds.view(spec.train())?,
        val: ds.view(spec.val())?,
        test: ds.view(spec.test())?,
    })
}

/// Per-variable mean and standard deviation, `[V]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Tensor<f32>,
    pub std: Tensor<f32>,
}

impl NormStats {
    pub fn new(mean: Tensor<f32>, std: Tensor<f32>) -> Result<Self> {
        if mean.rank() != 1 || mean.shape() != std.shape() {
            return Err(Error::shape("norm_stats", format!("mean {:?}, std {:?}", mean.shape(), std.shape())));
        }
        if std.data().iter().any(|&s| !(s > 0.0) || !s.is_finite()) || !mean.is_finite() {
            return Err(Error::InvalidArgument("normalization std must be positive and finite".into()));
        }
        Ok(NormStats { mean, std })
    }

    /// Statistics of `train`; zero-variance variables get std 1.
    pub fn fit(train: &SeriesDataset) -> Self {
        let (t, v) = (train.len(), train.vars());
        let mut mean = vec![0f64; v];
        let mut var = vec![0f64; v];
        for r in 0..t {
            for (m, &x) in mean.iter_mut().zip(train.row(r)) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        for r in 0..t {
            for ((s, &m), &x) in var.iter_mut().zip(&mean).zip(train.row(r)) {
                *s += (x as f64 - m).powi(2);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / t as f64).sqrt();
                if sd > 1e-12 && (sd as f32) > 0.0 {
                    sd
                } else {
                    log::warn!("variable {} has zero variance on the training split; using std 1", train.columns[j]);
                    1.0
                }
            })
            .collect();
        NormStats {
            mean: Tensor::from_f64(&[v], &mean).unwrap(),
            std: Tensor::from_f64(&[v], &std).unwrap(),
        }
    }

    pub fn vars(&self) -> usize {
        self.mean.numel()
    }

    fn check(&self, x: &Tensor<f32>) -> Result<()> {
        if x.last_dim() != self.vars() {
            return Err(Error::shape(
                "standardize",
                format!("values {:?} against {} variables", x.shape(), self.vars()),
            ));
        }
        Ok(())
    }

    /// `(x - mean) / std` along the last axis.
    pub fn standardize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check(x)?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(self.vars()) {
            for ((v, &m), &s) in row.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = ((*v as f64 - m as f64) / s as f64) as f32;
            }
        }
        Ok(out)
    }

    pub fn destandardize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check(x)?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(self.vars()) {
            for ((v, &m), &s) in row.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = (*v as f64 * s as f64 + m as f64) as f32;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        Ok(SeriesDataset {
            values: self.standardize(&ds.values)?,
            ..ds.clone()
        })
    }
}

/// A mini-batch of aligned input and target windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[bs, L, V]`
    pub inputs: Tensor<f32>,
    /// `[bs, W, V]`, the `W` rows right after each input window.
    pub targets: Tensor<f32>,
    /// First input row of each window within the view.
    pub starts: Vec<usize>,
}

/// All stride-1 (lookback, horizon) windows of a view.
#[derive(Clone, Copy, Debug)]
pub struct Windows<'a> {
    ds: &'a SeriesDataset,
    lookback: usize,
    horizon: usize,
}

pub fn window_count(rows: usize, lookback: usize, horizon: usize) -> Option<usize> {
    (rows + 1).checked_sub(lookback + horizon).filter(|&n| n > 0)
}

impl<'a> Windows<'a> {
    pub fn new(ds: &'a SeriesDataset, lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 || window_count(ds.len(), lookback, horizon).is_none() {
            return Err(Error::InvalidArgument(format!(
                "{} rows cannot hold a window of {lookback} + {horizon}",
                ds.len()
            )));
        }
        Ok(Windows { ds, lookback, horizon })
    }

    pub fn len(&self) -> usize {
        window_count(self.ds.len(), self.lookback, self.horizon).unwrap()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn batch(&self, starts: &[usize]) -> WindowBatch {
        let v = self.ds.vars();
        let (l, w) = (self.lookback, self.horizon);
        let data = self.ds.values.data();
        let mut inputs = Vec::with_capacity(starts.len() * l * v);
        let mut targets = Vec::with_capacity(starts.len() * w * v);
        for &s in starts {
            assert!(s < self.len(), "window {s} out of range");
            inputs.extend_from_slice(&data[s * v..(s + l) * v]);
            targets.extend_from_slice(&data[(s + l) * v..(s + l + w) * v]);
        }
        WindowBatch {
            inputs: Tensor::from_vec(&[starts.len(), l, v], inputs).unwrap(),
            targets: Tensor::from_vec(&[starts.len(), w, v], targets).unwrap(),
            starts: starts.to_vec(),
        }
    }

    /// Consecutive batches in window order.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = WindowBatch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batches(idx, batch_size)
    }

    /// Batches over a seeded permutation of all windows.
    pub fn shuffled(&self, batch_size: usize, rng: RngState) -> impl Iterator<Item = WindowBatch> + '_ {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng.stream());
        self.batches(idx, batch_size)
    }

    fn batches(&self, idx: Vec<usize>, batch_size: usize) -> impl Iterator<Item = WindowBatch> + '_ {
        let bs = batch_size.max(1);
        let n = idx.len().div_ceil(bs);
        (0..n).map(move |i| self.batch(&idx[i * bs..((i + 1) * bs).min(idx.len())]))
    }
}

/// Parameters of the lag-coupled sinusoid generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub vars: usize,
    pub len: usize,
    /// Lag of variable `j` behind variable 0, for `j >= 1`.
    pub lags: Vec<usize>,
    pub scales: Vec<f64>,
    pub noise: f64,
}

/// Period of the main cycle of variable 0.
pub const SYNTH_PERIOD: f64 = 24.0;
/// A second, slower cycle with a period incommensurate with the first.
pub const SYNTH_SLOW_PERIOD: f64 = 72.0 * std::f64::consts::PI;

impl SynthConfig {
    /// Lags `2j` and scales `0.5 + 0.1 j` for variables `j >= 1`.
    pub fn new(seed: u64, vars: usize, len: usize, noise: f64) -> Self {
        let others = vars.saturating_sub(1);
        SynthConfig {
            seed,
            vars,
            len,
            lags: (1..=others).map(|j| 2 * j).collect(),
            scales: (1..=others).map(|j| 0.5 + 0.1 * j as f64).collect(),
            noise,
        }
    }
}

pub fn synth_base(t: f64) -> f64 {
    use std::f64::consts::TAU;
    (TAU * t / SYNTH_PERIOD).sin() + 0.4 * (TAU * t / SYNTH_SLOW_PERIOD).sin()
}

pub fn synth(cfg: &SynthConfig) -> Result<SeriesDataset> {
    let (v, n) = (cfg.vars, cfg.len);
    if v < 2 {
        return Err(Error::InvalidArgument(format!("synthetic data needs at least 2 variables, got {v}")));
    }
    if cfg.lags.len() != v - 1 || cfg.scales.len() != v - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} lags and {} scales for {} coupled variables",
            cfg.lags.len(),
            cfg.scales.len(),
            v - 1
        )));
    }
    if let Some(&lag) = cfg.lags.iter().find(|&&lag| lag >= n) {
        return Err(Error::InvalidArgument(format!("lag {lag} not shorter than the series ({n} rows)")));
    }
    let noise = Normal::new(0.0, cfg.noise)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma {}: {e}", cfg.noise)))?;
    let mut rng = RngState::new(cfg.seed).stream();
    let mut data = Vec::with_capacity(n * v);
    for t in 0..n {
        data.push(synth_base(t as f64) as f32);
        for j in 1..v {
            let lagged = synth_base(t as f64 - cfg.lags[j - 1] as f64);
            data.push((cfg.scales[j - 1] * lagged + noise.sample(&mut rng)) as f32);
        }
    }
    let columns = (0..v).map(|j| format!("var{j}")).collect();
    let mut ds = SeriesDataset::new("synthetic", columns, Tensor::from_vec(&[n, v], data)?)?;
    ds.frequency = Some("step".into());
    Ok(ds)
}

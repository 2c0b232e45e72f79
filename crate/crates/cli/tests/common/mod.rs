//! Helpers shared by the integration tests of the command-line crate.
#![allow(dead_code)]

use std::path::PathBuf;

use dcmamber_cli::presets::preset;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// One column of a hyperparameter table: dataset, horizon and its values
/// keyed by normalized row label (`el`, `bs`, `lr`, `dmodel`, `dropout`, `dstate`).
#[derive(Debug, Clone)]
pub struct Cell {
    pub dataset: String,
    pub horizon: usize,
    pub values: Vec<(String, String)>,
}

fn cells_of(row: &str) -> Vec<String> {
    row.trim()
        .trim_end_matches("\\\\")
        .split('&')
        .map(|c| c.trim().to_string())
        .collect()
}

fn label(raw: &str) -> String {
    raw.replace(['$', ' '], "").replace("\\_", "").replace("\\rm", "")
}

/// Names in `\multicolumn{n}{spec}{Name}` groups, one per spanned column.
fn group_names(row: &str) -> Vec<String> {
    let mut names = Vec::new();
    for part in row.split("\\multicolumn").skip(1) {
        let args: Vec<&str> = part
            .split('}')
            .take(3)
            .map(|a| a.trim_start_matches(|c: char| c == '{' || c.is_whitespace()))
            .collect();
        let (Some(span), Some(name)) = (args.first().and_then(|s| s.parse::<usize>().ok()), args.get(2)) else {
            continue;
        };
        if *name == "Models" {
            continue;
        }
        names.extend(std::iter::repeat_n(name.to_string(), span));
    }
    names
}

/// Parses every `tabular` environment of hyperparameter rows.
pub fn parse_tables(text: &str) -> Vec<Cell> {
    let mut out = Vec::new();
    for table in text.split("\\begin{tabular}").skip(1) {
        let body = table.split("\\end{tabular}").next().unwrap_or("");
        let mut datasets = Vec::new();
        let mut horizons = Vec::new();
        let mut rows = Vec::new();
        for line in body.lines() {
            if line.contains("{Models}") {
                datasets = group_names(line);
            } else if line.contains("{Horizon}") {
                horizons = cells_of(line.split_once('&').map_or("", |(_, r)| r))
                    .iter()
                    .map(|h| h.parse::<usize>().expect("horizon"))
                    .collect();
            } else if line.trim_start().starts_with('&') {
                let cells = cells_of(line);
                rows.push((label(&cells[1]), cells[2..].to_vec()));
            }
        }
        assert_eq!(datasets.len(), horizons.len(), "dataset and horizon columns differ");
        for (i, (d, h)) in datasets.iter().zip(&horizons).enumerate() {
            out.push(Cell {
                dataset: d.clone(),
                horizon: *h,
                values: rows.iter().map(|(k, v)| (k.clone(), v[i].clone())).collect(),
            });
        }
    }
    out
}

/// Every disagreement between the parsed tables and the shipped presets.
pub fn preset_mismatches(cells: &[Cell]) -> Vec<String> {
    let mut bad = Vec::new();
    for c in cells {
        let Some(p) = preset(&c.dataset, c.horizon) else {
            bad.push(format!("{}/{}: no preset", c.dataset, c.horizon));
            continue;
        };
        for (k, v) in &c.values {
            let ok = match k.as_str() {
                "el" => v.parse::<usize>().ok() == Some(p.e_layers),
                "bs" => v.parse::<usize>().ok() == Some(p.batch_size),
                "lr" => v.parse::<f64>().ok() == Some(p.lr),
                "dmodel" => v.parse::<usize>().ok() == Some(p.d_model),
                "dropout" => v.parse::<f64>().ok() == Some(p.dropout),
                "dstate" => v.parse::<usize>().ok() == Some(p.d_state),
                other => {
                    bad.push(format!("{}/{}: unknown row {other:?}", c.dataset, c.horizon));
                    continue;
                }
            };
            if !ok {
                bad.push(format!("{}/{}: {k} is {v} in the table but differs in the preset", c.dataset, c.horizon));
            }
        }
    }
    bad
}

pub fn published_cells() -> Vec<Cell> {
    let text = std::fs::read_to_string(fixture("published_hyperparameters.tex")).expect("fixture");
    parse_tables(&text)
}

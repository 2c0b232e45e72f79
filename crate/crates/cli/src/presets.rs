//! Per-dataset, per-horizon hyperparameters of the published runs.

use dcmamber::data::known_dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub dataset: &'static str,
    pub horizon: usize,
    pub e_layers: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub d_model: usize,
    pub dropout: f64,
    pub d_state: usize,
}

const fn p(
    dataset: &'static str,
    horizon: usize,
    e_layers: usize,
    batch_size: usize,
    lr: f64,
    d_model: usize,
    d_state: usize,
) -> Preset {
    Preset {
        dataset,
        horizon,
        e_layers,
        batch_size,
        lr,
        d_model,
        dropout: 0.1,
        d_state,
    }
}

#[rustfmt::skip]
pub const PRESETS: [Preset; 32] = [
    p("PEMS03", 12, 4, 32, 5e-4, 512, 128),
    p("PEMS03", 24, 4, 32, 5e-4, 512, 128),
    p("PEMS03", 48, 4, 32, 5e-4, 512, 256),
    p("PEMS03", 96, 4, 32, 5e-4, 512, 256),
    p("PEMS04", 12, 4, 32, 5e-4, 1024, 256),
    p("PEMS04", 24, 4, 32, 5e-4, 1024, 256),
    p("PEMS04", 48, 4, 32, 5e-4, 1024, 32),
    p("PEMS04", 96, 4, 32, 5e-4, 1024, 32),
    p("PEMS07", 12, 2, 32, 1e-3, 512, 256),
    p("PEMS07", 24, 2, 32, 1e-3, 512, 256),
    p("PEMS07", 48, 4, 16, 1e-3, 512, 256),
    p("PEMS07", 96, 4, 16, 1e-3, 512, 32),
    p("PEMS08", 12, 2, 32, 5e-4, 512, 256),
    p("PEMS08", 24, 2, 32, 5e-4, 512, 256),
    p("PEMS08", 48, 4, 16, 1e-4, 512, 256),
    p("PEMS08", 96, 4, 16, 1e-4, 512, 256),
    p("ECL", 96, 3, 16, 1e-3, 512, 256),
    p("ECL", 192, 3, 16, 1e-3, 512, 128),
    p("ECL", 336, 3, 16, 1e-3, 512, 256),
    p("ECL", 720, 3, 16, 1e-3, 512, 128),
    p("Solar", 96, 2, 16, 5e-4, 512, 256),
    p("Solar", 192, 2, 16, 5e-4, 512, 256),
    p("Solar", 336, 2, 16, 5e-4, 512, 256),
    p("Solar", 720, 2, 16, 5e-4, 512, 256),
    p("Weather", 96, 3, 32, 5e-5, 128, 128),
    p("Weather", 192, 3, 32, 1e-4, 512, 8),
    p("Weather", 336, 3, 32, 1e-3, 512, 128),
    p("Weather", 720, 3, 32, 1e-4, 512, 32),
    p("ETTm1", 96, 2, 32, 1e-4, 128, 256),
    p("ETTm1", 192, 2, 32, 1e-4, 128, 256),
    p("ETTm1", 336, 2, 32, 1e-4, 128, 256),
    p("ETTm1", 720, 2, 32, 1e-4, 128, 256),
];

/// The preset for a dataset (any spelling [`known_dataset`] accepts) and horizon.
pub fn preset(dataset: &str, horizon: usize) -> Option<&'static Preset> {
    let name = known_dataset(dataset)?.name;
    PRESETS.iter().find(|p| p.dataset == name && p.horizon == horizon)
}

impl Preset {
    /// The preset as config entries.
    pub fn entries(&self) -> [(&'static str, String); 6] {
        [
            ("e_layers", self.e_layers.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("d_model", self.d_model.to_string()),
            ("dropout", self.dropout.to_string()),
            ("d_state", self.d_state.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_accepts_aliases() {
        assert_eq!(preset("electricity", 96).unwrap().dataset, "ECL");
        assert_eq!(preset("solar_AL", 720).unwrap().d_state, 256);
        assert_eq!(preset("ettm1", 96).unwrap().d_model, 128);
        assert!(preset("ETTm1", 97).is_none());
        assert!(preset("synthetic", 96).is_none());
    }

    #[test]
    fn one_preset_per_cell() {
        for (i, a) in PRESETS.iter().enumerate() {
            assert!(known_dataset(a.dataset).is_some(), "{}", a.dataset);
            for b in &PRESETS[i + 1..] {
                assert!((a.dataset, a.horizon) != (b.dataset, b.horizon));
            }
        }
    }
}

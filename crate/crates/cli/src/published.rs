//! Published test-set MSE/MAE of the reference model, for side-by-side reports.

use dcmamber::data::known_dataset;

#[rustfmt::skip]
const RESULTS: [(&str, usize, f64, f64); 32] = [
    ("PEMS03", 12, 0.061, 0.163), ("PEMS03", 24, 0.080, 0.186),
    ("PEMS03", 48, 0.114, 0.225), ("PEMS03", 96, 0.169, 0.280),
    ("PEMS04", 12, 0.069, 0.163), ("PEMS04", 24, 0.076, 0.179),
    ("PEMS04", 48, 0.088, 0.195), ("PEMS04", 96, 0.100, 0.207),
    ("PEMS07", 12, 0.059, 0.151), ("PEMS07", 24, 0.071, 0.168),
    ("PEMS07", 48, 0.090, 0.188), ("PEMS07", 96, 0.103, 0.200),
    ("PEMS08", 12, 0.076, 0.172), ("PEMS08", 24, 0.100, 0.198),
    ("PEMS08", 48, 0.196, 0.223), ("PEMS08", 96, 0.217, 0.244),
    ("ECL", 96, 0.139, 0.235), ("ECL", 192, 0.163, 0.259),
    ("ECL", 336, 0.176, 0.273), ("ECL", 720, 0.197, 0.294),
    ("Solar", 96, 0.200, 0.228), ("Solar", 192, 0.235, 0.261),
    ("Solar", 336, 0.247, 0.272), ("Solar", 720, 0.248, 0.274),
    ("Weather", 96, 0.158, 0.206), ("Weather", 192, 0.218, 0.260),
    ("Weather", 336, 0.270, 0.296), ("Weather", 720, 0.352, 0.351),
    ("ETTm1", 96, 0.329, 0.367), ("ETTm1", 192, 0.388, 0.404),
    ("ETTm1", 336, 0.423, 0.429), ("ETTm1", 720, 0.490, 0.461),
];

/// Published `(mse, mae)` on the standardized test split.
pub fn published(dataset: &str, horizon: usize) -> Option<(f64, f64)> {
    let name = known_dataset(dataset)?.name;
    RESULTS
        .iter()
        .find(|r| r.0 == name && r.1 == horizon)
        .map(|r| (r.2, r.3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ettm1_short_horizon() {
        assert_eq!(published("ETTm1", 96), Some((0.329, 0.367)));
        assert_eq!(published("electricity", 720), Some((0.197, 0.294)));
        assert_eq!(published("ETTm1", 48), None);
    }
}

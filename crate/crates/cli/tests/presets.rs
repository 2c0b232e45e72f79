mod common;

use common::{parse_tables, preset_mismatches, published_cells};
use dcmamber_cli::presets::PRESETS;

#[test]
fn tables_have_every_cell_and_row() {
    let cells = published_cells();
    assert_eq!(cells.len(), 32);
    for c in &cells {
        assert_eq!(c.values.len(), 6, "{}/{}", c.dataset, c.horizon);
    }
}

#[test]
fn presets_match_published_tables() {
    let cells = published_cells();
    let bad = preset_mismatches(&cells);
    assert!(bad.is_empty(), "{bad:#?}");
    assert_eq!(cells.len(), PRESETS.len());
}

#[test]
fn altered_table_is_caught() {
    let text = std::fs::read_to_string(common::fixture("published_hyperparameters.tex")).unwrap();
    let altered = text.replacen("& $bs$ & 32", "& $bs$ & 64", 1);
    let bad = preset_mismatches(&parse_tables(&altered));
    assert_eq!(bad.len(), 1, "{bad:#?}");
    assert!(bad[0].starts_with("PEMS03/12: bs"), "{}", bad[0]);
}

use std::path::PathBuf;

use iss_node::cli::verify::{baked_matrix, GOLDEN_TOY_NAME};
use iss_node::exporter::{emit_veriloga, toy_model, toy_scaling};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy.va")
}

#[test]
fn toy_model_matches_golden_file() {
    let text = emit_veriloga(&toy_model(), GOLDEN_TOY_NAME, Some(&toy_scaling())).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(golden_path(), &text).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    assert_eq!(text, golden, "regenerate with UPDATE_GOLDEN=1 after reviewing the diff");
}

#[test]
fn golden_file_bakes_the_realized_matrix() {
    let p = toy_model();
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    let a = baked_matrix(&golden, 3, 2).unwrap();
    assert_eq!(a, p.effective_a().unwrap());
    assert_ne!(a, p.a_theta);
}

//! The oracles must stay independent of the engine they check.

#[test]
fn manifest_declares_no_dependencies() {
    let manifest = include_str!("../Cargo.toml");
    let mut in_deps = false;
    for line in manifest.lines().map(str::trim) {
        if line.starts_with('[') {
            in_deps = line.contains("dependencies");
            continue;
        }
        assert!(!(in_deps && !line.is_empty() && !line.starts_with('#')), "oracle crate declares a dependency: {line}");
    }
}

#[test]
fn sources_never_mention_the_engine() {
    let src = include_str!("../src/lib.rs");
    for banned in ["narvid::", "extern crate narvid", "use narvid"] {
        assert!(!src.contains(banned), "oracle source references `{banned}`");
    }
}

#[test]
fn hand_checked_values() {
    // row [1.0, 0.9, 0.5, 0.2], lambda = 1: std 0.32016, gaps 0.1, 0.5, 0.8
    let s =
        vec![vec![1.0, 0.9, 0.5, 0.2], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
    let rows = narvid_oracle::hard_rows(&s, 1.0);
    assert_eq!(rows[0].iter().copied().collect::<Vec<_>>(), vec![1]);

    assert_eq!(narvid_oracle::nucleus(&[0.5, 0.3, 0.2], 0.4), vec![0]);
    assert_eq!(narvid_oracle::nucleus(&[0.25; 4], 0.5), vec![0, 1]);

    let uniform = vec![vec![0.3; 2]; 2];
    assert!((narvid_oracle::info_nce(&uniform, 0.1) - 2f64.ln()).abs() < 1e-12);
}

use std::path::Path;
use std::process::Command;

const EXPORTS: [&str; 11] = [
    "kgb_last_error",
    "kgb_version",
    "kgb_model_load",
    "kgb_model_free",
    "kgb_model_num_items",
    "kgb_model_dim",
    "kgb_model_item_index",
    "kgb_model_score",
    "kgb_metrics",
    "kgb_disentanglement_loss",
    "kgb_run_experiment",
];

fn header() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kgbridge.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in EXPORTS {
        assert!(text.contains(&format!("{name}(")), "{name} missing");
    }
    assert!(text.contains("typedef struct KgbModel KgbModel;"));
    assert!(text.contains("KGB_STATUS_OK = 0"));
}

#[test]
fn header_compiles_as_c() {
    let src = format!("#include \"{}\"\nint main(void) {{ return KGB_STATUS_OK; }}\n", header().display());
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("probe.c");
    std::fs::write(&c, src).unwrap();
    let Ok(out) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&c).output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

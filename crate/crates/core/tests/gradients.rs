use quan::engine::registry::{registry, run_all, CaseKind, DEFAULT_SEED, GRADCHECK_TOLERANCE};

#[test]
fn every_layer_and_loss_matches_central_differences() {
    let rows = run_all(DEFAULT_SEED);
    for r in &rows {
        println!("{:<20} {:<5} rel {:>9.3e} abs {:>9.3e} n {:>5} inert {:>3} {:?}", r.name, r.kind.name(), r.max_rel_error, r.max_abs_error, r.checked, r.inert, r.error);
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn second_seed_also_passes() {
    for r in run_all(7) {
        assert!(r.passed(), "{} {:e} {:?}", r.name, r.max_rel_error, r.error);
    }
}

#[test]
fn registry_covers_the_surface() {
    let names: Vec<_> = registry().iter().map(|c| c.name).collect();
    for required in [
        "qconv_separable",
        "qconv_full_hamilton",
        "iqbn",
        "silu",
        "relu",
        "qprelu",
        "qmaxpool",
        "qsppf",
        "qc3k2",
        "qc2psa",
        "cls_softmax",
        "cls_bce",
        "ciou",
        "angular",
        "reg",
        "smooth",
        "total",
    ] {
        assert!(names.contains(&required), "{required}");
    }
    assert!(registry().iter().filter(|c| c.kind == CaseKind::Loss).count() >= 6);
    assert_eq!(GRADCHECK_TOLERANCE, 1e-6);
}

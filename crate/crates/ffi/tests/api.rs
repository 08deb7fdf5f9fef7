use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use scope_ffi::*;

fn last_error() -> String {
    let p = scope_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn masked_mean_of_selected_rows() {
    let f = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
    let mut out = [0f32; 2];
    let st = unsafe { scope_masked_mean(f.as_ptr(), 3, 2, [1u8, 0, 1].as_ptr(), out.as_mut_ptr()) };
    assert_eq!(st, ScopeStatus::Ok);
    assert_eq!(out, [3.0, 4.0]);
    let st = unsafe { scope_masked_mean(f.as_ptr(), 3, 2, [0u8, 0, 0].as_ptr(), out.as_mut_ptr()) };
    assert_eq!(st, ScopeStatus::EmptyInput);
    assert!(last_error().contains("no points"));
}

#[test]
fn null_pointers_are_reported() {
    let mut out = 0f64;
    let st = unsafe { scope_cosine(ptr::null(), [1.0f32].as_ptr(), 1, 1e-12, &mut out) };
    assert_eq!(st, ScopeStatus::NullPointer);
    assert_eq!(unsafe { scope_bank_len(ptr::null()) }, 0);
    unsafe { scope_bank_free(ptr::null_mut()) };
    unsafe { scope_classifier_free(ptr::null_mut()) };
}

#[test]
fn cosine_matches_hand_value() {
    let mut out = 0f64;
    let st = unsafe { scope_cosine([1.0f32, 0.0].as_ptr(), [1.0f32, 1.0].as_ptr(), 2, 1e-12, &mut out) };
    assert_eq!(st, ScopeStatus::Ok);
    assert!((out - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
}

#[test]
fn success_clears_previous_error() {
    let mut out = 0f64;
    unsafe { scope_cosine([0.0f32].as_ptr(), [1.0f32].as_ptr(), 1, 1e-12, &mut out) };
    assert!(!scope_last_error().is_null());
    unsafe { scope_cosine([1.0f32].as_ptr(), [1.0f32].as_ptr(), 1, 1e-12, &mut out) };
    assert!(scope_last_error().is_null());
}

#[test]
fn bank_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("b.ipbb").to_str().unwrap()).unwrap();
    let rows = [0.5f32, -1.0, 2.0, 0.25, 3.0, 1.0];
    let mut bank = ptr::null_mut();
    unsafe {
        assert_eq!(scope_bank_from_rows(rows.as_ptr(), 2, 3, &mut bank), ScopeStatus::Ok);
        assert_eq!(scope_bank_save(bank, path.as_ptr()), ScopeStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(scope_bank_load(path.as_ptr(), &mut loaded), ScopeStatus::Ok);
        assert_eq!(scope_bank_len(loaded), 2);
        assert_eq!(scope_bank_dim(loaded), 3);
        let mut row = [0f32; 3];
        assert_eq!(scope_bank_get(loaded, 1, row.as_mut_ptr(), 3), ScopeStatus::Ok);
        assert_eq!(row, [0.25, 3.0, 1.0]);
        assert_eq!(scope_bank_get(loaded, 2, row.as_mut_ptr(), 3), ScopeStatus::InvalidArgument);
        scope_bank_free(bank);
        scope_bank_free(loaded);
    }
    let missing = CString::new(dir.path().join("none.ipbb").to_str().unwrap()).unwrap();
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { scope_bank_load(missing.as_ptr(), &mut b) }, ScopeStatus::Io);
    assert!(b.is_null());
}

#[test]
fn corrupt_bank_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ipbb");
    std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { scope_bank_load(path.as_ptr(), &mut b) }, ScopeStatus::Format);
    assert!(last_error().contains("magic"));
}

#[test]
fn retrieve_orders_by_similarity_then_index() {
    // rows 1 and 2 are identical, so their tie goes to the lower index
    let rows = [0.0f32, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    let mut bank = ptr::null_mut();
    let mut idx = [0usize; 4];
    let mut sims = [0f64; 4];
    let mut n = 0usize;
    unsafe {
        scope_bank_from_rows(rows.as_ptr(), 4, 2, &mut bank);
        let st = scope_retrieve(bank, [1.0f32, 0.0].as_ptr(), 2, 10, 1e-12, idx.as_mut_ptr(), sims.as_mut_ptr(), &mut n);
        assert_eq!(st, ScopeStatus::Ok);
        scope_bank_free(bank);
    }
    assert_eq!(n, 4);
    assert_eq!(idx, [1, 2, 3, 0]);
    assert_eq!(sims[0], 1.0);
}

#[test]
fn enrich_identities() {
    let p = [3.0f32, 4.0];
    let ctx = [1.0f32, 0.0, 0.0, 1.0];
    let mut out = [0f32; 2];
    unsafe {
        assert_eq!(scope_enrich(p.as_ptr(), ctx.as_ptr(), 2, 2, 1.0, 1e-12, out.as_mut_ptr()), ScopeStatus::Ok);
        assert_eq!(out, p);
        assert_eq!(scope_enrich(p.as_ptr(), ptr::null(), 0, 2, 0.3, 1e-12, out.as_mut_ptr()), ScopeStatus::Ok);
        assert_eq!(out, p);
        assert_eq!(scope_enrich(p.as_ptr(), ctx.as_ptr(), 1, 2, 0.0, 1e-12, out.as_mut_ptr()), ScopeStatus::Ok);
        assert_eq!(out, [1.0, 0.0]);
        assert_eq!(
            scope_enrich(p.as_ptr(), ctx.as_ptr(), 2, 2, 1.5, 1e-12, out.as_mut_ptr()),
            ScopeStatus::InvalidArgument
        );
    }
}

#[test]
fn classifier_stages_and_ties() {
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(scope_classifier_new(2, &mut c), ScopeStatus::Ok);
        let mut out = [0i32; 1];
        assert_eq!(
            scope_classifier_predict(c, [1.0f32, 0.0].as_ptr(), 1, 2, out.as_mut_ptr()),
            ScopeStatus::EmptyInput
        );
        let base = [1.0f32, 0.0];
        assert_eq!(scope_classifier_append_stage(c, 0, [4].as_ptr(), base.as_ptr(), 1), ScopeStatus::Ok);
        // identical row registered later never wins a tie
        assert_eq!(scope_classifier_append_stage(c, 1, [9].as_ptr(), base.as_ptr(), 1), ScopeStatus::Ok);
        assert_eq!(
            scope_classifier_append_stage(c, 2, [4].as_ptr(), base.as_ptr(), 1),
            ScopeStatus::DuplicateClass
        );
        assert_eq!(scope_classifier_len(c), 2);
        assert_eq!(scope_classifier_predict(c, [2.0f32, 0.0].as_ptr(), 1, 2, out.as_mut_ptr()), ScopeStatus::Ok);
        assert_eq!(out, [4]);
        assert_eq!(
            scope_classifier_predict(c, [2.0f32, 0.0, 1.0].as_ptr(), 1, 3, out.as_mut_ptr()),
            ScopeStatus::DimensionMismatch
        );
        scope_classifier_free(c);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/scope.h")).unwrap();
    for name in [
        "scope_version",
        "scope_last_error",
        "scope_harmonic_mean",
        "scope_masked_mean",
        "scope_cosine",
        "scope_bank_from_rows",
        "scope_bank_load",
        "scope_bank_save",
        "scope_bank_len",
        "scope_bank_dim",
        "scope_bank_get",
        "scope_bank_free",
        "scope_retrieve",
        "scope_enrich",
        "scope_classifier_new",
        "scope_classifier_append_stage",
        "scope_classifier_len",
        "scope_classifier_predict",
        "scope_classifier_free",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct ScopeBank ScopeBank;"));
}

/// Compile and run `tests/smoke.c` against the static library when a C compiler is present.
#[test]
fn c_smoke_program() {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let lib = [deps.to_path_buf(), deps.parent().unwrap().to_path_buf()]
        .into_iter()
        .map(|d| d.join("libscope_ffi.a"))
        .find(|p| p.exists());
    let Some(lib) = lib else {
        eprintln!("static library not found next to the test binary; skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let manifest = env!("CARGO_MANIFEST_DIR");
    let status = Command::new("cc")
        .arg(format!("{manifest}/tests/smoke.c"))
        .arg(format!("-I{manifest}/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

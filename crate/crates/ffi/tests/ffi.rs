use std::ffi::{CStr, CString};
use std::ptr;

use dbfem_ffi::*;

fn last_error() -> String {
    let p = dbfem_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn create(preset: &str, variant: &str, seed: u64) -> *mut DbfemModel {
    let (p, v) = (CString::new(preset).unwrap(), CString::new(variant).unwrap());
    let mut m = ptr::null_mut();
    let s = unsafe { dbfem_model_create(p.as_ptr(), v.as_ptr(), seed, &mut m) };
    assert_eq!(s, DbfemStatus::Ok);
    m
}

fn shape(m: *const DbfemModel) -> ([usize; 3], [usize; 3], usize) {
    let (mut g, mut r, mut k) = ([0; 3], [0; 3], 0);
    let s = unsafe { dbfem_model_input_shape(m, g.as_mut_ptr(), r.as_mut_ptr(), &mut k) };
    assert_eq!(s, DbfemStatus::Ok);
    (g, r, k)
}

fn predict(m: *const DbfemModel, batch: usize) -> Vec<f32> {
    let (g, r, k) = shape(m);
    let global: Vec<f32> = (0..batch * g.iter().product::<usize>())
        .map(|i| (i % 13) as f32 / 13.0)
        .collect();
    let regions: Vec<f32> = (0..batch * r.iter().product::<usize>())
        .map(|i| (i % 7) as f32 / 7.0)
        .collect();
    let mut out = vec![0f32; batch * k];
    let s = unsafe {
        dbfem_model_predict(
            m,
            batch,
            global.as_ptr(),
            global.len(),
            regions.as_ptr(),
            regions.len(),
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(s, DbfemStatus::Ok, "{}", last_error());
    out
}

#[test]
fn create_predict_and_count() {
    let m = create("desk", "DBFEM+CAFFM", 1);
    let (g, r, k) = shape(m);
    assert_eq!((g, r, k), ([1, 40, 32], [5, 16, 16], 5));
    // zero-initialised head
    assert!(predict(m, 2).iter().all(|&v| v == 0.0));

    let (mut params, mut macs) = (0u64, 0u64);
    unsafe {
        assert_eq!(dbfem_model_param_count(m, &mut params), DbfemStatus::Ok);
        assert_eq!(dbfem_model_flops(m, &mut macs), DbfemStatus::Ok);
    }
    let cfg = dbfem::ModelConfig::desk();
    assert_eq!(params, dbfem::param_count(&cfg).unwrap());
    assert_eq!(macs, dbfem::flops_estimate(&cfg, &dbfem::InputShape::of(&cfg)).unwrap());
    unsafe { dbfem_model_free(m) };
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = create("desk", "GFEM", 4);
    unsafe {
        assert_eq!(dbfem_model_save(m, path.as_ptr()), DbfemStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(dbfem_model_load(path.as_ptr(), &mut back), DbfemStatus::Ok);
        assert_eq!(predict(m, 1), predict(back, 1));
        dbfem_model_free(back);
        dbfem_model_free(m);
    }
}

#[test]
fn errors_are_reported() {
    let mut m = ptr::null_mut();
    let bad = CString::new("huge").unwrap();
    let v = CString::new("DBFEM").unwrap();
    unsafe {
        assert_eq!(
            dbfem_model_create(bad.as_ptr(), v.as_ptr(), 0, &mut m),
            DbfemStatus::InvalidArgument
        );
        assert!(last_error().contains("huge"));
        assert_eq!(
            dbfem_model_create(ptr::null(), v.as_ptr(), 0, &mut m),
            DbfemStatus::NullPointer
        );
        let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
        assert_eq!(dbfem_model_load(missing.as_ptr(), &mut m), DbfemStatus::Io);
        assert!(m.is_null());

        let model = create("desk", "LFEM", 0);
        let mut out = [0f32; 5];
        let x = [0f32; 3];
        assert_eq!(
            dbfem_model_predict(model, 1, x.as_ptr(), 3, x.as_ptr(), 3, out.as_mut_ptr(), 5),
            DbfemStatus::Shape
        );
        dbfem_model_free(model);
        dbfem_model_free(ptr::null_mut());
    }
    // a successful call clears the message
    let mut lr = 0.0;
    assert_eq!(unsafe { dbfem_lr_at(0, 1e-3, 100, 0.9, &mut lr) }, DbfemStatus::Ok);
    assert!(dbfem_last_error().is_null());
}

#[test]
fn schedule_metrics_and_labels() {
    let mut lr = 0.0;
    unsafe {
        assert_eq!(dbfem_lr_at(450, 1e-3, 100, 0.9, &mut lr), DbfemStatus::Ok);
        assert!((lr - 6.561e-4).abs() < 1e-12);
        assert_eq!(dbfem_lr_at(0, 1e-3, 0, 0.9, &mut lr), DbfemStatus::InvalidArgument);

        let counts = [1u64, 1, 0, 2];
        let mut m = DbfemMetrics::default();
        assert_eq!(dbfem_metrics(counts.as_ptr(), 2, &mut m), DbfemStatus::Ok);
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.uar, 0.75);
        assert!((m.uf1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        let zeros = [0u64; 4];
        assert_eq!(dbfem_metrics(zeros.as_ptr(), 2, &mut m), DbfemStatus::InvalidArgument);

        let mut class = 99;
        for (raw, want) in [("Happiness", 0), ("Fear", 4), ("Sadness", 4), ("Repression", 3)] {
            let c = CString::new(raw).unwrap();
            assert_eq!(dbfem_merge_label(c.as_ptr(), &mut class), DbfemStatus::Ok);
            assert_eq!(class, want, "{raw}");
        }
        let mut region = 99;
        assert_eq!(dbfem_region_for_au(12, &mut region), DbfemStatus::Ok);
        assert_eq!(region, 1);
        assert_eq!(dbfem_region_for_au(3, &mut region), DbfemStatus::NotFound);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/dbfem.h");
    for name in [
        "dbfem_last_error",
        "dbfem_model_create",
        "dbfem_model_load",
        "dbfem_model_save",
        "dbfem_model_free",
        "dbfem_model_param_count",
        "dbfem_model_flops",
        "dbfem_model_input_shape",
        "dbfem_model_predict",
        "dbfem_lr_at",
        "dbfem_metrics",
        "dbfem_merge_label",
        "dbfem_region_for_au",
        "typedef struct DbfemModel DbfemModel;",
        "DBFEM_STATUS_NOT_FOUND = 6",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use tabgen::augmentor::{augment_probs, serialize_target, TreeEnsembleModel};
use tabgen::ingest::{read_csv, Dataset, SplitSpec};
use tabgen::metadata::fallback_reformat;
use tabgen::pipeline::{prepare_split, PipelineSettings};
use tabgen::serializer::{serialize_features, SerializationConfig};
use tabgen_ffi::*;

fn loans_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/registry/loans.csv")
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = tabgen_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    tabgen_string_free(s);
    out
}

fn loans() -> Dataset {
    let path = loans_csv();
    let mut d = read_csv("loans", &path, std::fs::File::open(&path).unwrap()).unwrap();
    d.target_column = Some("approved".into());
    d
}

/// Fits on the fixture and saves the model to `dir`.
fn fitted(dir: &Path) -> (TreeEnsembleModel, PathBuf) {
    let d = loans();
    let meta = fallback_reformat(&d).unwrap();
    let prep = prepare_split(&d, &meta, SplitSpec::new(0.8, 0).unwrap(), &PipelineSettings::default()).unwrap();
    let model = prep.model.expect("model fits");
    let path = dir.join("loans.model.json");
    model.save(&path).unwrap();
    ((*model).clone(), path)
}

unsafe fn open_model(path: &Path) -> *mut TabgenModel {
    let mut m = ptr::null_mut();
    let p = c(path.to_str().unwrap());
    assert_eq!(tabgen_model_load(p.as_ptr(), &mut m), TabgenStatus::Ok);
    m
}

unsafe fn open_file(path: &Path, target: Option<&str>) -> *mut TabgenDataset {
    let mut ds = ptr::null_mut();
    let p = c(path.to_str().unwrap());
    let t = target.map(c);
    let st = tabgen_dataset_from_file(p.as_ptr(), t.as_ref().map_or(ptr::null(), |t| t.as_ptr()), &mut ds);
    assert_eq!(st, TabgenStatus::Ok);
    ds
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = fitted(dir.path());
    let d = loans();
    unsafe {
        let m = open_model(&path);
        let ds = open_file(&loans_csv(), Some("approved"));
        let k = tabgen_model_num_classes(m);
        assert_eq!(k, model.space.len());
        assert_eq!(tabgen_dataset_num_rows(ds), d.num_rows());
        let t = d.target_index().unwrap();
        let mut buf = vec![0.0; k];
        for (i, row) in d.rows.iter().enumerate() {
            let want = model.ensemble.predict_proba(&model.encoder.transform_row(row)).unwrap();
            assert_eq!(tabgen_model_predict_proba(m, ds, i, buf.as_mut_ptr(), k), TabgenStatus::Ok);
            assert_eq!(buf, want, "row {i}");

            let class = model.space.class_of(&row.cells[t]).unwrap();
            let mut out = ptr::null_mut();
            assert_eq!(tabgen_model_augment(m, ds, i, &mut out), TabgenStatus::Ok);
            assert_eq!(take(out), serialize_target(&augment_probs(&want, class).unwrap()));

            assert_eq!(tabgen_dataset_serialize_row(ds, i, &mut out), TabgenStatus::Ok);
            assert_eq!(take(out), serialize_features(row, &d, &SerializationConfig::default()));
        }
        tabgen_dataset_free(ds);
        tabgen_model_free(m);
    }
}

#[test]
fn features_are_matched_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = fitted(dir.path());
    // Same table with the columns reversed.
    let text = std::fs::read_to_string(loans_csv()).unwrap();
    let reversed: String = text
        .lines()
        .map(|l| l.split(',').rev().collect::<Vec<_>>().join(",") + "\n")
        .collect();
    unsafe {
        let m = open_model(&path);
        let a = open_file(&loans_csv(), None);
        let mut b = ptr::null_mut();
        let (id, body) = (c("rev"), c(&reversed));
        assert_eq!(tabgen_dataset_from_csv(id.as_ptr(), body.as_ptr(), ptr::null(), &mut b), TabgenStatus::Ok);
        let k = tabgen_model_num_classes(m);
        let (mut pa, mut pb) = (vec![0.0; k], vec![0.0; k]);
        for i in 0..tabgen_dataset_num_rows(a) {
            tabgen_model_predict_proba(m, a, i, pa.as_mut_ptr(), k);
            tabgen_model_predict_proba(m, b, i, pb.as_mut_ptr(), k);
            assert_eq!(pa, pb);
        }
        // Without a target the augmented text cannot be built.
        let mut out = ptr::null_mut();
        assert_eq!(tabgen_model_augment(m, a, 0, &mut out), TabgenStatus::InvalidArgument);
        assert!(out.is_null());

        // A table missing a feature column is rejected.
        let mut small = ptr::null_mut();
        let body = c("annual_income,approved\n1.0,Yes\n");
        tabgen_dataset_from_csv(id.as_ptr(), body.as_ptr(), ptr::null(), &mut small);
        assert_eq!(tabgen_model_predict_proba(m, small, 0, pa.as_mut_ptr(), k), TabgenStatus::Model);
        assert!(last_error().contains("applicant-age"), "{}", last_error());

        for h in [a, b, small] {
            tabgen_dataset_free(h);
        }
        tabgen_model_free(m);
    }
}

#[test]
fn argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = fitted(dir.path());
    unsafe {
        let m = open_model(&path);
        let ds = open_file(&loans_csv(), Some("APPROVED"));
        let n = tabgen_dataset_num_rows(ds);
        let mut one = [0.0];
        assert_eq!(tabgen_model_predict_proba(m, ds, 0, one.as_mut_ptr(), 1), TabgenStatus::InvalidArgument);
        let mut two = [0.0; 2];
        assert_eq!(tabgen_model_predict_proba(m, ds, n, two.as_mut_ptr(), 2), TabgenStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        assert_eq!(tabgen_model_predict_proba(m, ptr::null(), 0, two.as_mut_ptr(), 2), TabgenStatus::NullArgument);

        let mut h = ptr::null_mut();
        let bad = c(dir.path().join("absent.json").to_str().unwrap());
        assert_eq!(tabgen_model_load(bad.as_ptr(), &mut h), TabgenStatus::Io);
        let junk = dir.path().join("junk.json");
        std::fs::write(&junk, "{}").unwrap();
        let junk = c(junk.to_str().unwrap());
        assert_eq!(tabgen_model_load(junk.as_ptr(), &mut h), TabgenStatus::Model);
        assert!(h.is_null());

        let mut d = ptr::null_mut();
        let id = c("x");
        let target = c("nope");
        let body = c("a,b\n1,2\n");
        assert_eq!(tabgen_dataset_from_csv(id.as_ptr(), body.as_ptr(), target.as_ptr(), &mut d), TabgenStatus::InvalidArgument);
        let ragged = c("a,b\n1,2,3\n");
        assert_eq!(tabgen_dataset_from_csv(id.as_ptr(), ragged.as_ptr(), ptr::null(), &mut d), TabgenStatus::Parse);
        let latin1 = [b'a', 0xE9, 0];
        assert_eq!(
            tabgen_dataset_from_csv(latin1.as_ptr().cast(), body.as_ptr(), ptr::null(), &mut d),
            TabgenStatus::InvalidUtf8
        );
        assert_eq!(tabgen_dataset_from_csv(id.as_ptr(), body.as_ptr(), ptr::null(), ptr::null_mut()), TabgenStatus::NullArgument);
        assert!(d.is_null());

        assert_eq!(tabgen_dataset_num_rows(ptr::null()), 0);
        assert_eq!(tabgen_model_num_classes(ptr::null()), 0);
        tabgen_dataset_free(ptr::null_mut());
        tabgen_model_free(ptr::null_mut());
        tabgen_string_free(ptr::null_mut());
        tabgen_dataset_free(ds);
        tabgen_model_free(m);
    }
}

#[test]
fn parse_and_render() {
    unsafe {
        let mut class = usize::MAX;
        let mut status = TabgenParseStatus::Failed;
        let t = c("class 0: 0.2; class 1: 0.7; class 2: 0.1.");
        assert_eq!(tabgen_parse_prediction(t.as_ptr(), 3, &mut class, &mut status), TabgenStatus::Ok);
        assert_eq!((class, status), (1, TabgenParseStatus::Ok));

        let t = c("class 0: 0.2; class 1: 0.7");
        tabgen_parse_prediction(t.as_ptr(), 3, &mut class, &mut status);
        assert_eq!(status, TabgenParseStatus::Truncated);

        class = 99;
        let t = c("no numbers here");
        tabgen_parse_prediction(t.as_ptr(), 3, &mut class, &mut status);
        assert_eq!((class, status), (99, TabgenParseStatus::Failed));
        assert_eq!(tabgen_parse_prediction(t.as_ptr(), 3, ptr::null_mut(), &mut status), TabgenStatus::Ok);

        let p = [0.25, 0.75, 0.0];
        let mut out = ptr::null_mut();
        assert_eq!(tabgen_serialize_probs(p.as_ptr(), 3, &mut out), TabgenStatus::Ok);
        assert_eq!(take(out), "class 0: 0.25; class 1: 0.75; class 2: 0.0.");
        let nan = [f64::NAN];
        assert_eq!(tabgen_serialize_probs(nan.as_ptr(), 1, &mut out), TabgenStatus::InvalidArgument);
        assert_eq!(tabgen_serialize_probs(ptr::null(), 0, &mut out), TabgenStatus::NullArgument);

        let v = CStr::from_ptr(tabgen_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tabgen.h")).unwrap();
    assert!(header.contains("#ifndef TABGEN_H"));
    assert!(header.contains("typedef struct TabgenModel TabgenModel;"));
    assert!(header.contains("TABGEN_STATUS_PANIC = 7"));
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}

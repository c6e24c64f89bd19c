//! Exercises the C ABI end to end from Rust: synth, train, save, reload,
//! predict, evaluate, and the error paths.

use std::ffi::{CStr, CString};
use std::ptr;

use capsfuse_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cf_last_error()) }
        .to_string_lossy()
        .into_owned()
}

const SPEC: &str = r#"{
    "n": 160,
    "dims": { "text_a": 6, "text_b": 6, "image": 5, "numeric": 4 },
    "mode": { "kind": "separable" },
    "positive_rate": 0.3,
    "noise_sigma": 0.4,
    "seed": 11
}"#;

const CONFIG: &str = r#"{
    "model": { "fusion": "add", "d_f": 8, "classifier_hidden": 8,
               "numeric_hidden": [6], "numeric_embed_dim": 4 },
    "train": { "epochs": 6, "batch_size": 32, "seed": 2, "patience": 0 }
}"#;

#[test]
fn full_round_trip_through_the_c_abi() {
    unsafe {
        let mut ds: *mut CfDataset = ptr::null_mut();
        let status = cf_dataset_synth(c(SPEC).as_ptr(), &mut ds);
        assert_eq!(status, CfStatus::Ok, "{}", last_error());
        assert_eq!(cf_dataset_n_samples(ds), 160);

        let mut model: *mut CfModel = ptr::null_mut();
        let status = cf_train(ds, c(CONFIG).as_ptr(), &mut model);
        assert_eq!(status, CfStatus::Ok, "{}", last_error());

        let strategy = cf_model_strategy(model);
        assert_eq!(CStr::from_ptr(strategy).to_str().unwrap(), "addition");
        cf_string_free(strategy);
        assert_eq!(cf_model_n_classes(model), 2);

        // Save and reload both handles through temp files.
        let dir = tempfile::tempdir().unwrap();
        let ds_path = c(dir.path().join("d.cfds").to_str().unwrap());
        let model_path = c(dir.path().join("m.cfmd").to_str().unwrap());
        assert_eq!(cf_dataset_write(ds, ds_path.as_ptr()), CfStatus::Ok);
        assert_eq!(cf_model_write(model, model_path.as_ptr()), CfStatus::Ok);

        let mut ds2: *mut CfDataset = ptr::null_mut();
        assert_eq!(cf_dataset_read(ds_path.as_ptr(), &mut ds2), CfStatus::Ok);
        let mut model2: *mut CfModel = ptr::null_mut();
        assert_eq!(
            cf_model_read(model_path.as_ptr(), &mut model2),
            CfStatus::Ok
        );

        // Predictions from the original and reloaded models agree exactly.
        let len = 160 * 2;
        let mut probs1 = vec![0.0f64; len];
        let mut probs2 = vec![0.0f64; len];
        assert_eq!(
            cf_model_predict(model, ds, probs1.as_mut_ptr(), len),
            CfStatus::Ok
        );
        assert_eq!(
            cf_model_predict(model2, ds2, probs2.as_mut_ptr(), len),
            CfStatus::Ok
        );
        assert_eq!(probs1, probs2);
        for row in probs1.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }

        let mut report: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(
            cf_model_evaluate_json(model, ds, 0.1, &mut report),
            CfStatus::Ok
        );
        let json = CStr::from_ptr(report).to_str().unwrap();
        let value: serde_json::Value = serde_json::from_str(json).unwrap();
        assert!(value.get("auc").is_some() && value.get("f1").is_some());
        cf_string_free(report);

        cf_model_free(model);
        cf_model_free(model2);
        cf_dataset_free(ds);
        cf_dataset_free(ds2);
    }
}

#[test]
fn error_paths_set_status_and_message() {
    unsafe {
        // Null pointers.
        let mut ds: *mut CfDataset = ptr::null_mut();
        assert_eq!(
            cf_dataset_synth(ptr::null(), &mut ds),
            CfStatus::NullPointer
        );
        assert!(last_error().contains("null"));

        // Invalid generator spec.
        let bad = c(r#"{ "n": 5 }"#);
        assert_eq!(
            cf_dataset_synth(bad.as_ptr(), &mut ds),
            CfStatus::InvalidConfig
        );

        // Bad config rate surfaces as InvalidConfig with a message.
        let spec = c(SPEC.replace("0.3", "1.7").as_str());
        assert_eq!(
            cf_dataset_synth(spec.as_ptr(), &mut ds),
            CfStatus::InvalidConfig
        );
        assert!(last_error().contains("positive_rate"), "{}", last_error());

        // Missing file.
        let missing = c("/nonexistent/path.cfds");
        assert_eq!(cf_dataset_read(missing.as_ptr(), &mut ds), CfStatus::Error);

        // Wrong buffer size.
        let mut good: *mut CfDataset = ptr::null_mut();
        assert_eq!(cf_dataset_synth(c(SPEC).as_ptr(), &mut good), CfStatus::Ok);
        let mut model: *mut CfModel = ptr::null_mut();
        assert_eq!(cf_train(good, c(CONFIG).as_ptr(), &mut model), CfStatus::Ok);
        let mut too_small = vec![0.0f64; 3];
        assert_eq!(
            cf_model_predict(model, good, too_small.as_mut_ptr(), 3),
            CfStatus::BufferSize
        );
        cf_model_free(model);
        cf_dataset_free(good);
    }
}

#[test]
fn generated_header_covers_the_surface() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("capsfuse.h");
    let text = std::fs::read_to_string(&header).expect("header generated by build.rs");
    for symbol in [
        "cf_version",
        "cf_last_error",
        "cf_dataset_synth",
        "cf_dataset_read",
        "cf_dataset_write",
        "cf_dataset_n_samples",
        "cf_dataset_free",
        "cf_train",
        "cf_model_read",
        "cf_model_write",
        "cf_model_predict",
        "cf_model_evaluate_json",
        "cf_model_free",
        "cf_string_free",
        "CfStatus",
        "CfDataset",
        "CfModel",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}

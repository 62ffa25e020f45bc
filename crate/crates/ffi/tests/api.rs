use std::ffi::{CStr, CString};
use std::ptr;

use hdphmm_ffi::*;

fn last_error() -> String {
    let p = hdphmm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_dataset(seed: u64) -> *mut HdphmmDataset {
    let config = CString::new(r#"{"n_cells": 6, "n_bins": 240, "n_states": 12}"#).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { hdphmm_simulate(config.as_ptr(), seed, &mut ds) }, HdphmmStatus::Ok);
    ds
}

#[test]
fn counts_round_trip() {
    let data: Vec<u64> = (0..12).collect();
    let mut counts = ptr::null_mut();
    unsafe {
        assert_eq!(hdphmm_counts_new(data.as_ptr(), 3, 4, &mut counts), HdphmmStatus::Ok);
        let (mut c, mut t) = (0, 0);
        assert_eq!(hdphmm_counts_shape(counts, &mut c, &mut t), HdphmmStatus::Ok);
        assert_eq!((c, t), (3, 4));
        let mut len = 0;
        assert_eq!(hdphmm_counts_data(counts, ptr::null_mut(), &mut len), HdphmmStatus::BufferTooSmall);
        assert_eq!(len, 12);
        let mut back = vec![0u64; len];
        assert_eq!(hdphmm_counts_data(counts, back.as_mut_ptr(), &mut len), HdphmmStatus::Ok);
        assert_eq!(back, data);
        let mut part = ptr::null_mut();
        assert_eq!(hdphmm_counts_slice(counts, 1, 3, &mut part), HdphmmStatus::Ok);
        let mut len = 6;
        let mut buf = vec![0u64; 6];
        assert_eq!(hdphmm_counts_data(part, buf.as_mut_ptr(), &mut len), HdphmmStatus::Ok);
        assert_eq!(buf, vec![1, 2, 5, 6, 9, 10]);
        assert_eq!(hdphmm_counts_slice(counts, 3, 3, &mut part), HdphmmStatus::Invalid);
        hdphmm_counts_free(part);
        hdphmm_counts_free(counts);
    }
}

#[test]
fn error_codes_and_messages() {
    unsafe {
        let mut counts = ptr::null_mut();
        assert_eq!(hdphmm_counts_new(ptr::null(), 1, 1, &mut counts), HdphmmStatus::NullPointer);
        assert!(last_error().contains("data"));
        let missing = CString::new("/nonexistent/counts.csv").unwrap();
        assert_eq!(hdphmm_counts_load_csv(missing.as_ptr(), &mut counts), HdphmmStatus::Io);
        let bad = CString::new(r#"{"n_bins": 0}"#).unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(hdphmm_simulate(bad.as_ptr(), 0, &mut ds), HdphmmStatus::Invalid);
        let typo = CString::new(r#"{"n_bin": 10}"#).unwrap();
        assert_eq!(hdphmm_simulate(typo.as_ptr(), 0, &mut ds), HdphmmStatus::Invalid);
        assert!(last_error().contains("n_bin"));
        // Freeing null is a no-op.
        hdphmm_counts_free(ptr::null_mut());
        hdphmm_fit_free(ptr::null_mut());
        hdphmm_dataset_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(hdphmm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn unknown_method_is_invalid() {
    let ds = small_dataset(1);
    unsafe {
        let mut counts = ptr::null_mut();
        assert_eq!(hdphmm_dataset_counts(ds, &mut counts), HdphmmStatus::Ok);
        let method = CString::new("gibbs").unwrap();
        let mut fit = ptr::null_mut();
        assert_eq!(hdphmm_fit(counts, method.as_ptr(), ptr::null(), 0, &mut fit), HdphmmStatus::Invalid);
        assert!(last_error().contains("gibbs"));
        assert!(fit.is_null());
        hdphmm_counts_free(counts);
        hdphmm_dataset_free(ds);
    }
}

fn fit_and_score(method: &str, options: &str) -> (f64, usize, Vec<f64>) {
    let ds = small_dataset(2);
    unsafe {
        let mut counts = ptr::null_mut();
        assert_eq!(hdphmm_dataset_counts(ds, &mut counts), HdphmmStatus::Ok);
        let mut len = 0;
        assert_eq!(hdphmm_dataset_states(ds, ptr::null_mut(), &mut len), HdphmmStatus::BufferTooSmall);
        assert_eq!(len, 240);
        let (mut train, mut test) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(hdphmm_counts_slice(counts, 0, 200, &mut train), HdphmmStatus::Ok);
        assert_eq!(hdphmm_counts_slice(counts, 200, 240, &mut test), HdphmmStatus::Ok);
        let m = CString::new(method).unwrap();
        let o = CString::new(options).unwrap();
        let mut fit = ptr::null_mut();
        let status = hdphmm_fit(train, m.as_ptr(), o.as_ptr(), 3, &mut fit);
        assert_eq!(status, HdphmmStatus::Ok, "{}", last_error());
        let mut n_states = 0;
        assert_eq!(hdphmm_fit_n_states(fit, &mut n_states), HdphmmStatus::Ok);
        let mut ll = 0.0;
        assert_eq!(hdphmm_fit_predictive_ll(fit, test, 10, 5, &mut ll), HdphmmStatus::Ok);
        let mut bps = 0.0;
        assert_eq!(hdphmm_bits_per_spike(train, test, ll, &mut bps), HdphmmStatus::Ok);
        let mut len = 40 * n_states;
        let mut marg = vec![0.0; len];
        assert_eq!(hdphmm_fit_state_marginals(fit, test, marg.as_mut_ptr(), &mut len), HdphmmStatus::Ok);
        hdphmm_fit_free(fit);
        hdphmm_counts_free(train);
        hdphmm_counts_free(test);
        hdphmm_counts_free(counts);
        hdphmm_dataset_free(ds);
        (bps, n_states, marg)
    }
}

#[test]
fn variational_fit_through_the_c_api() {
    let (bps, m, marg) = fit_and_score("vb", r#"{"vb": {"n_states": 12}}"#);
    assert_eq!(m, 12);
    assert!(bps.is_finite());
    for row in marg.chunks(m) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gibbs_fit_through_the_c_api_is_seeded() {
    let opts = r#"{"gibbs": {"n_states": 12, "n_iters": 30}, "n_keep": 5}"#;
    let (a, m, marg) = fit_and_score("mcmc-hmc", opts);
    let (b, _, _) = fit_and_score("mcmc-hmc", opts);
    assert_eq!(a, b);
    assert_eq!(m, 12);
    for row in marg.chunks(m) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

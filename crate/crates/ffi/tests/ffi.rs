use std::ffi::{CStr, CString};
use std::ptr;

use alpha_pooling::alphapool::PoolConfig;
use alpha_pooling::dualclf::train_dual;
use alpha_pooling::featio::FeatureMap;
use alpha_pooling::kernelview::{descriptor, gram_matrix, GramBackend};
use alpha_pooling_ffi::*;

fn last_error() -> Option<String> {
    let p = alpha_pool_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn sample(id: &str, shift: f64) -> FeatureMap {
    FeatureMap::single(id, 2, 2, 3, (0..12).map(|i| 0.1 + shift + 0.2 * i as f64).collect()).unwrap()
}

fn handle(fm: &FeatureMap) -> *mut AlphaPoolFeatureMap {
    let bytes = fm.to_bytes();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { alpha_pool_fmap_from_buffer(bytes.as_ptr(), bytes.len(), &mut h) }, AlphaPoolStatus::Ok);
    h
}

#[test]
fn pool_matches_the_library() {
    let fm = sample("a", 0.0);
    let h = handle(&fm);
    assert_eq!(unsafe { alpha_pool_fmap_dim(h) }, 3);
    assert_eq!(unsafe { alpha_pool_fmap_location_count(h) }, 4);
    let cfg = alpha_pool_default_config();
    let mut n = 0usize;
    let st = unsafe { alpha_pool_pool(h, cfg, ptr::null(), ptr::null_mut(), 0, &mut n) };
    assert_eq!(st, AlphaPoolStatus::BufferTooSmall);
    assert_eq!(n, 9);
    assert!(last_error().unwrap().contains("9 values"));
    let mut buf = vec![0.0; n];
    assert_eq!(unsafe { alpha_pool_pool(h, cfg, ptr::null(), buf.as_mut_ptr(), buf.len(), &mut n) }, AlphaPoolStatus::Ok);
    assert_eq!(last_error(), None);
    assert_eq!(buf, descriptor(&fm, &PoolConfig::default(), &GramBackend::Exact).unwrap());
    unsafe { alpha_pool_fmap_free(h) };
}

#[test]
fn sketch_plan_and_kernel() {
    let (a, b) = (sample("a", 0.0), sample("b", 0.3));
    let (ha, hb) = (handle(&a), handle(&b));
    let cfg = alpha_pool_default_config();
    let mut k = 0.0;
    assert_eq!(unsafe { alpha_pool_kernel(ha, hb, cfg, ptr::null(), &mut k) }, AlphaPoolStatus::Ok);
    let za = descriptor(&a, &PoolConfig::default(), &GramBackend::Exact).unwrap();
    let zb = descriptor(&b, &PoolConfig::default(), &GramBackend::Exact).unwrap();
    assert_eq!(k, za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>());

    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { alpha_pool_sketch_plan_new(3, 64, 7, &mut plan) }, AlphaPoolStatus::Ok);
    let mut n = 0usize;
    let mut buf = vec![0.0; 64];
    assert_eq!(unsafe { alpha_pool_pool(ha, cfg, plan, buf.as_mut_ptr(), 64, &mut n) }, AlphaPoolStatus::Ok);
    assert_eq!(n, 64);
    let mut ks = 0.0;
    assert_eq!(unsafe { alpha_pool_kernel(ha, hb, cfg, plan, &mut ks) }, AlphaPoolStatus::Ok);
    assert!(ks.is_finite());

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { alpha_pool_sketch_plan_new(3, 0, 7, &mut bad) }, AlphaPoolStatus::InvalidArgument);
    assert!(bad.is_null());
    unsafe {
        alpha_pool_sketch_plan_free(plan);
        alpha_pool_fmap_free(ha);
        alpha_pool_fmap_free(hb);
    }
}

#[test]
fn errors_are_reported() {
    let cfg = alpha_pool_default_config();
    let mut k = 0.0;
    assert_eq!(unsafe { alpha_pool_kernel(ptr::null(), ptr::null(), cfg, ptr::null(), &mut k) }, AlphaPoolStatus::NullPointer);
    assert!(last_error().unwrap().contains("null"));

    let mut h = ptr::null_mut();
    let junk = b"NOTAMAP";
    assert_eq!(unsafe { alpha_pool_fmap_from_buffer(junk.as_ptr(), junk.len(), &mut h) }, AlphaPoolStatus::Format);
    assert!(last_error().unwrap().contains("magic"));

    let missing = CString::new("/nonexistent/x.fmap").unwrap();
    assert_eq!(unsafe { alpha_pool_fmap_read(missing.as_ptr(), &mut h) }, AlphaPoolStatus::Io);

    let fm = handle(&sample("a", 0.0));
    let bad = AlphaPoolConfig { alpha: 0.5, ..cfg };
    let mut n = 0usize;
    assert_eq!(unsafe { alpha_pool_pool(fm, bad, ptr::null(), ptr::null_mut(), 0, &mut n) }, AlphaPoolStatus::InvalidArgument);
    let other = FeatureMap::single("w", 1, 1, 2, vec![1.0, 2.0]).unwrap();
    let ho = handle(&other);
    assert_eq!(unsafe { alpha_pool_kernel(fm, ho, cfg, ptr::null(), &mut k) }, AlphaPoolStatus::InvalidArgument);
    unsafe {
        alpha_pool_fmap_free(fm);
        alpha_pool_fmap_free(ho);
        alpha_pool_fmap_free(ptr::null_mut());
    }
}

#[test]
fn last_error_is_per_thread() {
    let mut h = ptr::null_mut();
    let junk = b"xx";
    assert_eq!(unsafe { alpha_pool_fmap_from_buffer(junk.as_ptr(), junk.len(), &mut h) }, AlphaPoolStatus::Format);
    let other = std::thread::spawn(|| last_error()).join().unwrap();
    assert_eq!(other, None);
    assert!(last_error().is_some());
}

#[test]
fn values_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let fm = sample("file", 0.1);
    let path = dir.path().join("m.fmap");
    alpha_pooling::featio::write_fmap(&fm, &path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut from_file = ptr::null_mut();
    assert_eq!(unsafe { alpha_pool_fmap_read(c.as_ptr(), &mut from_file) }, AlphaPoolStatus::Ok);

    let id = CString::new("file").unwrap();
    let values = fm.scales()[0].values().to_vec();
    let mut from_values = ptr::null_mut();
    assert_eq!(unsafe { alpha_pool_fmap_from_values(id.as_ptr(), 2, 2, 3, values.as_ptr(), &mut from_values) }, AlphaPoolStatus::Ok);

    let cfg = alpha_pool_default_config();
    let (mut ka, mut kb) = (0.0, 0.0);
    unsafe {
        alpha_pool_kernel(from_file, from_file, cfg, ptr::null(), &mut ka);
        alpha_pool_kernel(from_values, from_file, cfg, ptr::null(), &mut kb);
    }
    assert!((ka - 1.0).abs() < 1e-12);
    assert_eq!(ka, kb);
    unsafe {
        alpha_pool_fmap_free(from_file);
        alpha_pool_fmap_free(from_values);
    }
}

#[test]
fn classifier_scores_match() {
    let maps = vec![sample("a", 0.0), sample("b", 0.5), sample("c", 1.0)];
    let cfg = PoolConfig::default();
    let k = gram_matrix(&maps, &cfg, &GramBackend::Exact).unwrap();
    let clf = train_dual(&k, &[0, 1, 0], 2, 1e-2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("classifier.json");
    clf.write(&path).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { alpha_pool_classifier_read(c.as_ptr(), &mut h) }, AlphaPoolStatus::Ok);
    assert_eq!(unsafe { alpha_pool_classifier_class_count(h) }, 2);
    assert_eq!(unsafe { alpha_pool_classifier_train_count(h) }, 3);
    let row = k.row(1).to_vec();
    let mut scores = [0.0; 2];
    assert_eq!(unsafe { alpha_pool_classifier_score(h, row.as_ptr(), row.len(), scores.as_mut_ptr(), 2) }, AlphaPoolStatus::Ok);
    assert_eq!(scores.to_vec(), clf.score(&row).unwrap());
    assert_eq!(unsafe { alpha_pool_classifier_score(h, row.as_ptr(), 2, scores.as_mut_ptr(), 2) }, AlphaPoolStatus::InvalidArgument);
    assert_eq!(unsafe { alpha_pool_classifier_score(h, row.as_ptr(), 3, scores.as_mut_ptr(), 1) }, AlphaPoolStatus::BufferTooSmall);
    unsafe { alpha_pool_classifier_free(h) };

    let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { alpha_pool_classifier_read(missing.as_ptr(), &mut h) }, AlphaPoolStatus::Io);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/alpha_pooling.h")).unwrap();
    for name in [
        "alpha_pool_last_error_message",
        "alpha_pool_fmap_read",
        "alpha_pool_fmap_from_buffer",
        "alpha_pool_pool",
        "alpha_pool_kernel",
        "alpha_pool_classifier_score",
        "alpha_pool_sketch_plan_free",
        "ALPHA_POOL_STATUS_BUFFER_TOO_SMALL",
        "typedef struct AlphaPoolFeatureMap AlphaPoolFeatureMap",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    // the header must be valid C when a compiler is around
    if let Ok(o) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut child| {
            use std::io::Write;
            let src = format!("{header}\nint main(void) {{ AlphaPoolConfig c = alpha_pool_default_config(); return (int)c.alpha - 1; }}\n");
            child.stdin.take().unwrap().write_all(src.as_bytes())?;
            child.wait_with_output()
        })
    {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alpha_pooling::featio::{read_fmap, write_fmap, DatasetManifest, FeatureMap, ManifestEntry};
use alpha_pooling::influence::InfluenceReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_alpha-pool"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_manifest(dir: &Path, name: &str, maps: &[(FeatureMap, usize)], classes: usize) -> PathBuf {
    let mut entries = Vec::new();
    for (fm, label) in maps {
        let rel = PathBuf::from(format!("{}.fmap", fm.image_id()));
        write_fmap(fm, dir.join(&rel)).unwrap();
        entries.push(ManifestEntry {
            fmap: rel,
            label: *label,
            mask: None,
        });
    }
    let m = DatasetManifest {
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        entries,
        base_dir: dir.to_path_buf(),
    };
    let p = dir.join(name);
    m.write(&p).unwrap();
    p
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pool_alpha_two_writes_the_bilinear_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    let toy = FeatureMap::single("toy", 1, 2, 2, vec![1.0, 2.0, 3.0, 0.5]).unwrap();
    let m = write_manifest(dir.path(), "toy.manifest", &[(toy, 0)], 1);
    let out = dir.path().join("out");
    ok(&["--alpha", "2", "--epsilon", "0", "--signed-sqrt", "false", "--l2-normalize", "false", "--out", s(&out), "pool", "--manifest", s(&m)]);
    // mean of y y^T over [1, 2] and [3, 0.5]
    let want = FeatureMap::single("toy", 1, 1, 4, vec![5.0, 1.75, 1.75, 2.125]).unwrap();
    assert_eq!(fs::read(out.join("descriptors/toy.fmap")).unwrap(), want.to_bytes());
    let listed = DatasetManifest::read(out.join("descriptors.manifest")).unwrap().load().unwrap();
    assert_eq!(listed.maps, vec![want]);
}

#[test]
fn alpha_changes_descriptors_and_both_parse() {
    let dir = tempfile::tempdir().unwrap();
    let toy = FeatureMap::single("toy", 2, 2, 3, (0..12).map(|i| 0.1 + i as f64 * 0.3).collect()).unwrap();
    let m = write_manifest(dir.path(), "toy.manifest", &[(toy, 0)], 1);
    let (a1, a2) = (dir.path().join("a1"), dir.path().join("a2"));
    ok(&["--alpha", "1", "--out", s(&a1), "pool", "--manifest", s(&m)]);
    ok(&["--alpha", "2", "--out", s(&a2), "pool", "--manifest", s(&m)]);
    let (f1, f2) = (a1.join("descriptors/toy.fmap"), a2.join("descriptors/toy.fmap"));
    assert_ne!(fs::read(&f1).unwrap(), fs::read(&f2).unwrap());
    assert_eq!(read_fmap(&f1).unwrap().dim(), 9);
    assert_eq!(read_fmap(&f2).unwrap().dim(), 9);
}

#[test]
fn sketched_pool_has_the_requested_length() {
    let dir = tempfile::tempdir().unwrap();
    let toy = FeatureMap::single("toy", 2, 2, 3, (0..12).map(|i| i as f64).collect()).unwrap();
    let m = write_manifest(dir.path(), "toy.manifest", &[(toy, 0)], 1);
    ok(&["--sketch-dim", "100", "--out", s(dir.path()), "pool", "--manifest", s(&m)]);
    assert_eq!(read_fmap(dir.path().join("descriptors/toy.fmap")).unwrap().dim(), 100);
}

fn pipeline(out: &Path, extra: &[&str]) {
    let o = s(out);
    let with = |args: &[&str]| -> Vec<String> { extra.iter().chain(args).map(|a| a.to_string()).collect() };
    let d = format!("{o}/data");
    let exec = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };
    exec(with(&["--out", &d, "synth", "--images-per-class", "4", "--split"]));
    exec(with(&["--out", &format!("{o}/pool"), "pool", "--manifest", &format!("{d}/train.manifest")]));
    exec(with(&["--out", &format!("{o}/kernel"), "kernel", "--manifest", &format!("{d}/train.manifest"), "--against", &format!("{d}/test.manifest")]));
    exec(with(&["--out", &format!("{o}/train"), "train", "--manifest", &format!("{d}/train.manifest")]));
    let clf = format!("{o}/train/classifier.json");
    let tm = format!("{d}/train.manifest");
    let vm = format!("{d}/test.manifest");
    exec(with(&["--out", &format!("{o}/explain"), "explain", "--classifier", &clf, "--train-manifest", &tm, "--test-manifest", &vm]));
    exec(with(&["--out", &format!("{o}/parts"), "parts", "--classifier", &clf, "--train-manifest", &tm, "--test-manifest", &vm]));
    exec(with(&["--out", &format!("{o}/norms"), "norms", "--manifest", &tm, "--left", "0", "--right", "1"]));
    exec(with(&["--out", &format!("{o}/fit"), "fit-alpha", "--train-manifest", &tm, "--valid-manifest", &vm, "--epochs", "5"]));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &["--seed", "3", "--format", "structured"]);
    let first = snapshot(dir.path());
    assert!(first.keys().any(|p| p.ends_with("explain.jsonl")));
    assert!(first.keys().any(|p| p.starts_with("explain/overlays")));
    pipeline(dir.path(), &["--seed", "3", "--format", "structured"]);
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), &["--threads", "1"]);
    pipeline(b.path(), &["--threads", "3"]);
    let strip = |m: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> { m.into_iter().filter(|(p, _)| !p.ends_with("run.json")).collect() };
    let (sa, sb) = (strip(snapshot(a.path())), strip(snapshot(b.path())));
    let differing: Vec<_> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    assert!(differing.is_empty(), "{differing:?}");
}

#[test]
fn run_record_holds_the_configuration() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--alpha", "2.5", "--seed", "9", "--out", s(dir.path()), "synth", "--images-per-class", "1"]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(v["options"]["alpha"], 2.5);
    assert_eq!(v["options"]["seed"], 9);
    assert_eq!(v["command"]["name"], "synth");
    assert_eq!(v["command"]["images_per_class"], 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    let missing = run(&["--out", o, "explain", "--classifier", &format!("{o}/nope.json"), "--train-manifest", "x", "--test-manifest", "y"]);
    assert_eq!(missing.status.code(), Some(2));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("classifier not found"));
    assert_eq!(err.trim_end().lines().count(), 1);

    assert_eq!(run(&["--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["--alpha", "0.5", "--out", o, "synth"]).status.code(), Some(2));
    assert_eq!(run(&["--out", o, "pool", "--manifest", &format!("{o}/none.manifest")]).status.code(), Some(2));

    // the softmax head refuses descriptors above its size limit: a computation error
    let d = format!("{o}/wide");
    ok(&["--out", &d, "synth", "--dim", "65", "--images-per-class", "2", "--height", "2", "--width", "2", "--split", "--fraction", "0.2"]);
    let fit = run(&["--out", o, "fit-alpha", "--train-manifest", &format!("{d}/train.manifest"), "--valid-manifest", &format!("{d}/test.manifest"), "--epochs", "1"]);
    assert_eq!(fit.status.code(), Some(1), "{}", String::from_utf8_lossy(&fit.stderr));
}

#[test]
fn explain_single_training_image_is_fully_attributed() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    let train = FeatureMap::single("only", 2, 2, 2, vec![1.0, 0.2, 0.5, 0.5, 0.1, 0.9, 0.3, 0.3]).unwrap();
    let test = FeatureMap::single("query", 2, 2, 2, vec![0.8, 0.1, 0.4, 0.6, 0.2, 0.7, 0.5, 0.5]).unwrap();
    let tm = write_manifest(dir.path(), "train.manifest", &[(train, 0)], 1);
    let vm = write_manifest(dir.path(), "test.manifest", &[(test, 0)], 1);
    ok(&["--out", o, "train", "--manifest", s(&tm)]);
    ok(&["--out", o, "explain", "--classifier", &format!("{o}/classifier.json"), "--train-manifest", s(&tm), "--test-manifest", s(&vm)]);
    let text = fs::read_to_string(dir.path().join("explain.jsonl")).unwrap();
    let r: InfluenceReport = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(r.images.len(), 1);
    assert!(r.images[0].beta > 0.0);
    assert!((r.images[0].share.unwrap() - 100.0).abs() < 1e-9);
    assert!(fs::read_to_string(dir.path().join("explain.txt")).unwrap().contains("share 100.0%"));
    assert!(dir.path().join("overlays/query.ppm").is_file());
}

#[test]
fn explain_top_region_falls_in_the_discriminative_part() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    let d = format!("{o}/data");
    ok(&["--out", &d, "synth", "--images-per-class", "10", "--split"]);
    let raw = ["--alpha", "2", "--signed-sqrt", "false", "--l2-normalize", "false"];
    let tm = format!("{d}/train.manifest");
    let vm = format!("{d}/test.manifest");
    let mut args: Vec<&str> = raw.to_vec();
    args.extend(["--out", o, "train", "--manifest", &tm]);
    ok(&args);
    let clf = format!("{o}/classifier.json");
    ok(&["--out", o, "explain", "--classifier", &clf, "--train-manifest", &tm, "--test-manifest", &vm]);
    let test = DatasetManifest::read(&vm).unwrap().load().unwrap();
    let reports: Vec<InfluenceReport> = fs::read_to_string(dir.path().join("explain.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), test.len());
    let inside = reports
        .iter()
        .zip(&test.masks)
        .filter(|(r, mask)| {
            let g = r.top_region.as_ref().unwrap();
            let (_, w, ids) = &mask.as_ref().unwrap().scales[g.test_loc.scale];
            ids[g.test_loc.row * w + g.test_loc.col] != 0
        })
        .count();
    assert!(inside * 10 >= reports.len() * 8, "{inside}/{}", reports.len());
}

#[test]
fn verify_passes_on_bundled_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["--format", "structured", "--out", s(dir.path()), "verify"]);
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|v| v["record"] == "suite").count(), 7);
    assert!(lines.iter().all(|v| v["passed"] == true));
    assert!(dir.path().join("verify.json").is_file());
}

#[test]
fn verify_reports_kink_exclusions_at_zero_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["--epsilon", "0", "--format", "structured", "--out", s(dir.path()), "verify", "--suite", "gradients"]);
    let first: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(first["suite"], "gradients");
    assert_eq!(first["passed"], true);
    assert!(first["excluded"].as_u64().unwrap() > 0);
    assert!(first["detail"].as_str().unwrap().contains("excluded as kinks"));
}

#[test]
fn verify_fails_on_a_corrupted_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fixtures");
    fs::create_dir(&fx).unwrap();
    let good = FeatureMap::single("a", 2, 2, 2, vec![0.5, 1.0, 0.3, 0.2, 0.9, 0.4, 0.6, 0.7]).unwrap();
    write_fmap(&good, fx.join("a.fmap")).unwrap();
    write_fmap(&FeatureMap::single("b", 1, 3, 2, vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2]).unwrap(), fx.join("b.fmap")).unwrap();
    ok(&["--out", s(dir.path()), "verify", "--fixtures", s(&fx)]);
    let mut bytes = good.to_bytes();
    bytes.truncate(bytes.len() - 9);
    fs::write(fx.join("a.fmap"), bytes).unwrap();
    let o = run(&["--out", s(dir.path()), "verify", "--fixtures", s(&fx)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL fixture_io"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fixture_io"));
}

#[test]
fn norms_and_parts_outputs() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[]);
    let parts = fs::read_to_string(dir.path().join("parts/parts.tsv")).unwrap();
    assert!(parts.starts_with("test\\train\tbackground\tpart1"));
    let total: f64 = parts.lines().skip(1).flat_map(|l| l.split('\t').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    for f in ["norms_left.ppm", "norms_right.ppm", "matches.ppm"] {
        assert!(fs::read(dir.path().join("norms").join(f)).unwrap().starts_with(b"P6\n"));
    }
    let traj = fs::read_to_string(dir.path().join("fit/alpha_trajectory.tsv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 6);
}

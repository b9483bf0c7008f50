use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convleak::formats::{read_powers, read_trace};
use convleak::imgio::{encode_idx_images, load_pgm};
use convleak::pipeline::correlation;
use convleak::Image;
use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/mnist")
        .join(name)
}

fn run(out: &Path, args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_convleak"));
    cmd.env_remove("CONVLEAK_SEED")
        .env("RUST_LOG", "warn")
        .arg("--set")
        .arg(format!("out_dir={}", out.display()))
        .arg("--set")
        .arg(format!("images={}", data("digits-images-idx3-ubyte").display()))
        .arg("--set")
        .arg(format!("labels={}", data("digits-labels-idx1-ubyte").display()));
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn count(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .map(|d| {
            d.filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == ext)
            })
            .count()
        })
        .unwrap_or(0)
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn one_image_nine_kernels_artifact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&run(out, &["simulate"], &["image_count=1"]));
    assert_eq!(count(&out.join("traces"), "ptrc"), 9);
    assert_eq!(count(&out.join("truth"), "pcyc"), 9);
    assert_eq!(count(&out.join("schedules"), "jsonl"), 1);
    let m = manifest(out);
    assert_eq!(m["images"].as_array().unwrap().len(), 1);
    assert_eq!(m["images"][0]["runs"].as_array().unwrap().len(), 9);
    assert_eq!(m["total_valid_cycles"], 676);
    assert!(m["images"][0]["runs"][3]["noise_seed"].is_u64());
}

#[test]
fn simulation_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sets = ["image_count=2", "snr_db=20"];
    ok(&run(out, &["simulate"], &sets));
    let first = snapshot(out);
    ok(&run(out, &["simulate"], &sets));
    assert_eq!(first, snapshot(out));
}

#[test]
fn valid_cycle_total_for_five_hundred_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&run(out, &["simulate"], &["image_count=500", "kernel_count=1"]));
    assert_eq!(manifest(out)["total_valid_cycles"], 500 * 676);
    assert_eq!(count(&out.join("traces"), "ptrc"), 500);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 3\nimage_count = 1\nkernel_count = 1\n").unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_convleak"))
        .env("CONVLEAK_SEED", "77")
        .arg("--config")
        .arg(&cfg)
        .arg("--set")
        .arg(format!("out_dir={}", out.display()))
        .arg("--set")
        .arg(format!("images={}", data("digits-images-idx3-ubyte").display()))
        .arg("simulate")
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(manifest(&out)["seed"], 77);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["simulate"], &["no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = run(dir.path(), &["simulate"], &["delta=abc"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["simulate"], &["image_offset=9999", "image_count=5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn noiseless_extraction_matches_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sets = ["image_count=1", "kernel_count=2", "lowpass_cutoff=none"];
    ok(&run(out, &["simulate"], &sets));
    ok(&run(out, &["extract"], &sets));
    for k in 0..2 {
        let e = read_powers::<f64>(out.join(format!("extracted/img00000_k{k}.pcyc"))).unwrap();
        let t = read_powers::<f64>(out.join(format!("truth/img00000_k{k}.pcyc"))).unwrap();
        assert_eq!(e.len(), t.len());
        assert!(correlation(&e.values, &t.values) > 0.999);
        let (se, st): (f64, f64) = (e.values.iter().sum(), t.values.iter().sum());
        assert!(((se - st) / st).abs() < 0.005, "{se} vs {st}");
    }
    let report = fs::read_to_string(out.join("extract_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn extraction_is_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sets = ["image_count=1", "kernel_count=3", "snr_db=20"];
    ok(&run(out, &["simulate"], &sets));
    let traces: Vec<String> = (0..3)
        .map(|k| out.join(format!("traces/img00000_k{k}.ptrc")).display().to_string())
        .collect();
    let mut fwd = vec!["extract"];
    fwd.extend(traces.iter().map(String::as_str));
    ok(&run(out, &fwd, &sets));
    let a = snapshot(&out.join("extracted"));
    let mut rev = vec!["extract"];
    rev.extend(traces.iter().rev().map(String::as_str));
    ok(&run(out, &rev, &sets));
    assert_eq!(a, snapshot(&out.join("extracted")));
    assert_eq!(a.len(), 3);
}

#[test]
fn corrupt_trace_is_a_data_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let bad = out.join("broken_k0.ptrc");
    fs::write(&bad, b"NOPE0000000000000000000000000000").unwrap();
    let o = run(out, &["extract", bad.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken_k0.ptrc"));
}

#[test]
fn trace_files_follow_manifest_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&run(out, &["simulate"], &["image_count=1", "kernel_count=1"]));
    let m = manifest(out);
    let t = read_trace::<f64>(out.join(m["images"][0]["runs"][0]["trace"].as_str().unwrap())).unwrap();
    let total = m["images"][0]["total_cycles"].as_u64().unwrap() as usize;
    assert_eq!(t.cycles, total + 12);
    assert_eq!(t.len(), t.cycles * t.samples_per_cycle);
}

#[test]
fn random_scheduling_blocks_template_build() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["build-template"],
        &["scheduling=random", "profile_count=2"],
    );
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("random scheduling"));
}

#[test]
fn missing_labels_degrade_to_label_free_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sets = ["image_count=2", "kernel_count=1", "power_source=direct"];
    ok(&run(out, &["simulate"], &sets));
    ok(&run(out, &["attack-bg"], &sets));
    let mut no_labels = sets.to_vec();
    no_labels.push("labels=none");
    let o = run(out, &["eval"], &no_labels);
    ok(&o);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("labels"), "{stderr}");
    let summary = fs::read_to_string(out.join("eval_bg_summary.csv")).unwrap();
    assert!(summary.contains("mean_pixel_accuracy"));
    assert!(!summary.contains("recognition_accuracy"));
    assert!(!out.join("eval_bg_map.csv").exists());
}

#[test]
fn stages_restart_from_files_and_build_the_panel() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sets = ["image_count=10", "profile_count=60", "snr_db=30"];
    for cmd in ["simulate", "extract", "attack-bg", "build-template", "attack-template", "eval"] {
        ok(&run(out, &[cmd], &sets));
    }
    let panel = load_pgm(out.join("panel.pgm")).unwrap();
    assert_eq!(panel.dims(), (10 * 29 - 1, 3 * 29 - 1));
    let bg = fs::read_to_string(out.join("bg_report.csv")).unwrap();
    assert_eq!(bg.lines().count(), 11);
    for family in ["clean", "bg", "greedy", "avg"] {
        assert!(out.join(format!("eval_{family}_rows.csv")).exists(), "{family}");
    }
    // eval alone reruns from files and reproduces its outputs
    let before = fs::read(out.join("eval_greedy_rows.csv")).unwrap();
    ok(&run(out, &["eval"], &sets));
    assert_eq!(before, fs::read(out.join("eval_greedy_rows.csv")).unwrap());
}

#[test]
fn custom_dataset_and_kernel_file() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<Image> = (0..2)
        .map(|i| {
            let mut img = Image::filled(12, 12, 0);
            for y in 3..8 {
                img.set(4 + i, y, 200);
            }
            img
        })
        .collect();
    let idx = dir.path().join("tiny-idx3-ubyte");
    fs::write(&idx, encode_idx_images(&imgs).unwrap()).unwrap();
    let kfile = dir.path().join("k.txt");
    fs::write(&kfile, "K=3\n1 -1 1\n1 1 -1\n-1 1 1\nbias=0\n").unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_convleak"))
        .env_remove("CONVLEAK_SEED")
        .args(["--set", &format!("out_dir={}", out.display())])
        .args(["--set", &format!("images={}", idx.display())])
        .args(["--set", "labels=none"])
        .args(["--set", &format!("kernels={}", kfile.display())])
        .args(["--set", "line_size=12", "--set", "image_count=2"])
        .arg("simulate")
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(manifest(&out)["total_valid_cycles"], 2 * 100);
    assert_eq!(manifest(&out)["kernel_count"], 1);
}

#[test]
fn bad_kernel_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let kfile = dir.path().join("k.txt");
    fs::write(&kfile, "K=3\n1 1\n").unwrap();
    let o = run(
        dir.path(),
        &["simulate"],
        &[&format!("kernels={}", kfile.display()), "image_count=1"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k.txt"));
}

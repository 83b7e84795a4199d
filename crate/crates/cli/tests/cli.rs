use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hiercurric::dataprep::ImageTensor;
use hiercurric::model::{build_model, ModelSpec};

const EXAMPLE: &str = "\
root>animal
root>vehicle
animal>dog
animal>fish
dog>poodle
dog>beagle
vehicle>car
car>suv
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hiercurric"));
    c.env_remove("HIERCURRIC_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn sgd(batch: usize) -> String {
    format!(
        "base_lr = 0.01\nmomentum = 0.9\nweight_decay = 0.0005\nlr_gamma = 0.1\nlr_step = 100000\nbatch_size = {batch}\ndropout_rate = 0.5\n"
    )
}

fn phase(table: &str, level: &str, iters: u64, lr_override: Option<f64>) -> String {
    let mut sgd = sgd(4);
    if let Some(lr) = lr_override {
        sgd = sgd.replace("base_lr = 0.01", &format!("base_lr = {lr}"));
    }
    format!(
        "[{table}]\nmax_iterations = {iters}\neval_every = 2\ncheckpoint_every = 3\nseed = 5\ntask_level = \"{level}\"\n[{table}.sgd]\n{sgd}"
    )
}

/// A small synthetic experiment with the given regime kinds.
fn experiment(kinds: &[&str], lr: Option<f64>) -> String {
    let mut t = String::from(
        "[data]\nholdout_per_sub = 2\n[data.synth]\nn_basic = 2\nsubs_per_basic = 2\nimage_size = [1, 8, 8]\n\
         prototype_scale = 0.25\nsubordinate_scale = 0.05\nnoise_scale = 0.2\nsamples_per_sub = 6\nseed = 3\n\
         [model]\nname = \"desk\"\ninput = [1, 8, 8]\ninit_std = 0.1\n",
    );
    for k in kinds {
        t += &format!("[[regimes]]\nkind = \"{k}\"\n");
        match *k {
            "reference" => {}
            "reference_extended" => t += &phase("regimes.phase_a", "sub", 3, lr),
            _ => t += &phase("regimes.phase_a", "basic", 3, lr),
        }
        t += &phase("regimes.phase_b", "sub", 4, lr);
    }
    t
}

#[test]
fn taxonomy_writes_golden_labelmap() {
    let dir = tempfile::tempdir().unwrap();
    let syn = write(dir.path(), "synsets.txt", EXAMPLE);
    let marks = write(dir.path(), "marks.txt", "dog\nfish\ncar\n");
    let out = dir.path().join("out");
    let o = run(&["taxonomy", "--synsets", s(&syn), "--marks", s(&marks), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let golden = "leaf_id,sub_index,basic_index,basic_id\n\
                  beagle,0,1,dog\n\
                  fish,1,2,fish\n\
                  poodle,2,1,dog\n\
                  suv,3,0,car\n";
    assert_eq!(fs::read_to_string(out.join("labelmap.csv")).unwrap(), golden);
    assert_eq!(fs::read_to_string(out.join("heights.csv")).unwrap(), "height,count\n0,1\n1,2\n");
}

#[test]
fn taxonomy_missing_marks_fails_closed() {
    let dir = tempfile::tempdir().unwrap();
    let syn = write(dir.path(), "synsets.txt", EXAMPLE);
    let out = dir.path().join("out");
    let o = run(&["taxonomy", "--synsets", s(&syn), "--marks", s(&dir.path().join("absent.txt")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn taxonomy_uncovered_leaf_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let syn = write(dir.path(), "synsets.txt", EXAMPLE);
    let marks = write(dir.path(), "marks.txt", "dog\ncar\n");
    let out = dir.path().join("out");
    let o = run(&["taxonomy", "--synsets", s(&syn), "--marks", s(&marks), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fish"));
    assert!(!out.exists());
}

#[test]
fn height_mode_changes_only_the_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let syn = write(dir.path(), "synsets.txt", EXAMPLE);
    let marks = write(dir.path(), "marks.txt", "animal\ncar\n");
    let (long, short) = (dir.path().join("long"), dir.path().join("short"));
    for (mode, out) in [("longest", &long), ("shortest", &short)] {
        let o = run(&["taxonomy", "--synsets", s(&syn), "--marks", s(&marks), "--height-mode", mode, "--out", s(out)]);
        assert!(o.status.success());
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&long, "labelmap.csv"), read(&short, "labelmap.csv"));
    assert_eq!(String::from_utf8(read(&long, "heights.csv")).unwrap(), "height,count\n1,1\n2,1\n");
    assert_eq!(String::from_utf8(read(&short, "heights.csv")).unwrap(), "height,count\n1,2\n");
}

#[test]
fn synth_standard_has_600_samples_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(&["synth", "--seed", "7", "--out", s(out)]).status.success());
    }
    assert_eq!(csv_rows(&a.join("manifest.csv")).len(), 600);
    assert_eq!(fs::read(a.join("manifest.csv")).unwrap(), fs::read(b.join("manifest.csv")).unwrap());
    let img = "images/b03s02_0049.tensor";
    assert_eq!(fs::read(a.join(img)).unwrap(), fs::read(b.join(img)).unwrap());
    assert_eq!(fs::read_to_string(a.join("marks.txt")).unwrap(), "b00\nb01\nb02\nb03\n");
}

#[test]
fn synth_requires_seed_and_output() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--seed", "1"]).status.code(), Some(2));
    let out = dir.path().join("env");
    let o = bin().args(["synth", "--seed", "1", "--samples-per-sub", "2"]).env("HIERCURRIC_OUT", &out).output().unwrap();
    assert!(o.status.success());
    assert_eq!(csv_rows(&out.join("manifest.csv")).len(), 24);
}

fn small_synth(dir: &Path, name: &str, samples: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let o = run(&[
        "synth",
        "--seed",
        &seed.to_string(),
        "--n-basic",
        "2",
        "--subs-per-basic",
        "2",
        "--samples-per-sub",
        &samples.to_string(),
        "--image-size",
        "1,8,8",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn dedup_of_a_set_against_itself_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), "syn", 5, 1);
    let m = d.join("manifest.csv");
    let out = dir.path().join("dd");
    assert!(run(&["dedup", "--set-a", s(&m), "--set-b", s(&m), "--threshold", "1.0", "--out", s(&out)]).status.success());
    assert!(csv_rows(&out.join("overlaps.csv")).is_empty());
    assert_eq!(csv_rows(&out.join("filtered_a.csv")).len(), 20);
}

#[test]
fn prepare_counts_sum_to_manifest_size() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_synth(dir.path(), "syn", 5, 2);
    let out = dir.path().join("prep");
    let o = run(&[
        "prepare",
        "--manifest",
        s(&d.join("manifest.csv")),
        "--synsets",
        s(&d.join("synsets.txt")),
        "--marks",
        s(&d.join("marks.txt")),
        "--cap",
        "7",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let counts = csv_rows(&out.join("category_counts.csv"));
    assert_eq!(counts.len(), 2);
    let total: usize = counts.iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    let manifest = csv_rows(&out.join("manifest.csv"));
    assert_eq!(total, 14);
    assert_eq!(total, manifest.len());
    assert!(manifest.iter().all(|r| Path::new(&r[1]).is_absolute() && Path::new(&r[1]).exists()));
}

#[test]
fn csv_outputs_quote_commas_and_quotes() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::new(1, 4, 4, (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
    let other = ImageTensor::new(1, 4, 4, (0..16).map(|v| ((v * 7) % 16) as f64 / 16.0).collect()).unwrap();
    img.save(&dir.path().join("a.tensor")).unwrap();
    img.save(&dir.path().join("b.tensor")).unwrap();
    other.save(&dir.path().join("c.tensor")).unwrap();
    let a = write(dir.path(), "a.csv", "sample_id,path,leaf_id\n\"x,1\",a.tensor,leaf\n\"odd\"\"id\",c.tensor,leaf\n");
    let b = write(dir.path(), "b.csv", "sample_id,path,leaf_id\n\"y, 2\",b.tensor,leaf\n");
    let out = dir.path().join("dd");
    assert!(run(&["dedup", "--set-a", s(&a), "--set-b", s(&b), "--out", s(&out)]).status.success());
    let text = fs::read_to_string(out.join("overlaps.csv")).unwrap();
    assert!(text.contains("\"x,1\",\"y, 2\",1.000000"), "{text}");
    let rows = csv_rows(&out.join("filtered_a.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "odd\"id");
}

#[test]
fn train_dry_run_prints_shapes_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", &experiment(&["reference", "facilitated_replicated_head"], None));
    let out = dir.path().join("out");
    let o = run(&["train", s(&cfg), "--dry-run", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("fc5        [4]"), "{text}");
    assert!(text.contains("fc5        [2]"), "{text}");
    assert!(text.contains("conv1      [32, 8, 8]"), "{text}");
    assert!(!out.exists());
}

#[test]
fn train_rejects_bad_configs_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let good = experiment(&["reference"], None);
    let unknown = write(dir.path(), "unknown.toml", &good.replace("[model]\n", "[model]\ndepth = 3\n"));
    assert_eq!(run(&["train", s(&unknown), "--dry-run"]).status.code(), Some(2));
    let dup = write(dir.path(), "dup.toml", &experiment(&["reference", "reference"], None));
    assert_eq!(run(&["train", s(&dup), "--dry-run"]).status.code(), Some(2));
    assert_eq!(run(&["train", s(&dir.path().join("missing.toml")), "--dry-run"]).status.code(), Some(2));
}

#[test]
fn train_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", &experiment(&["facilitated_replicated_head"], None));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["train", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let r = "facilitated_replicated_head";
    let read = |d: &Path, f: &str| fs::read(d.join(r).join(f)).unwrap();
    assert_eq!(read(&a, "curves.csv"), read(&b, "curves.csv"));
    for ck in ["phase_a_iter00000003.hcck", "phase_b_iter00000006.hcck", "phase_b_iter00000007.hcck"] {
        assert_eq!(read(&a, &format!("checkpoints/{ck}")), read(&b, &format!("checkpoints/{ck}")));
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("MANIFEST.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(fs::read(a.join("MANIFEST.json")).unwrap(), fs::read(b.join("MANIFEST.json")).unwrap());
}

#[test]
fn train_refuses_output_of_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", &experiment(&["reference"], None));
    let out = dir.path().join("out");
    assert!(run(&["train", s(&cfg), "--out", s(&out)]).status.success());
    assert!(run(&["train", s(&cfg), "--out", s(&out)]).status.success());
    assert_eq!(run(&["train", s(&cfg), "--seed", "99", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn train_all_five_regimes_gives_five_directories() {
    let dir = tempfile::tempdir().unwrap();
    let kinds = [
        "reference",
        "reference_extended",
        "random_subset_pretrain",
        "facilitated_random_head",
        "facilitated_replicated_head",
    ];
    let cfg = write(dir.path(), "exp.toml", &experiment(&kinds, None));
    let out = dir.path().join("out");
    let o = run(&["train", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut dirs: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    dirs.sort();
    let mut expected: Vec<String> = kinds.iter().map(|k| k.to_string()).collect();
    expected.sort();
    assert_eq!(dirs, expected);
    for k in kinds {
        let finals: serde_json::Value = serde_json::from_slice(&fs::read(out.join(k).join("final.json")).unwrap()).unwrap();
        assert!(finals["final"]["phase_b/val/top1"].is_number(), "{k}");
    }
}

#[test]
fn train_numeric_fault_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", &experiment(&["reference"], Some(1e12)));
    let o = run(&["train", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

fn probe_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let d = small_synth(dir, "transfer", 40, 11);
    let ck = dir.join("model.hcck");
    build_model(&ModelSpec::desk_with_input([1, 8, 8], 4), 1).unwrap().save(&ck).unwrap();
    (ck, d.join("manifest.csv"))
}

#[test]
fn probe_over_two_sizes_gives_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, m) = probe_fixture(dir.path());
    let before = fs::read(&ck).unwrap();
    let out = dir.path().join("probe");
    let o = run(&[
        "probe",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&m),
        "--n-train",
        "15,30",
        "--iterations",
        "30",
        "--max-test",
        "10",
        "--seed",
        "4",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("summary.csv"));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["15", "30"]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[1].parse::<f64>().unwrap())));
    assert!(out.join("probe_n15/probe.json").exists() && out.join("probe_n30/per_class_recall.csv").exists());
    assert_eq!(fs::read(&ck).unwrap(), before);
}

#[test]
fn probe_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, m) = probe_fixture(dir.path());
    let o = run(&["probe", "--checkpoint", s(&ck), "--manifest", s(&m), "--n-train", "15", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_over_three_checkpoints_is_sorted_by_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let (_, m) = probe_fixture(dir.path());
    let mut paths = Vec::new();
    for (i, it) in [300u64, 100, 200].into_iter().enumerate() {
        let mut ck = build_model(&ModelSpec::desk_with_input([1, 8, 8], 4), i as u64).unwrap();
        ck.iteration = it;
        let p = dir.path().join(format!("ck{it}.hcck"));
        ck.save(&p).unwrap();
        paths.push(p);
    }
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep", "--checkpoints"];
    args.extend(paths.iter().map(|p| s(p)));
    args.extend(["--manifest", s(&m), "--n-train", "15", "--iterations", "20", "--max-test", "10", "--seed", "2", "--out", s(&out)]);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), ["100", "200", "300"]);
    assert!(rows.iter().all(|r| r[0] == "transfer"));
    assert!(rows[0][2].ends_with("ck100.hcck"));
}

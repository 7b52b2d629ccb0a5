use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cdsnas::eval::{evaluate_retrieval, generate_synthetic, RetrievalIndex, SyntheticSpec};
use cdsnas::experiments::TEST_SEED_OFFSET;
use cdsnas::model::Model;
use cdsnas::neck::NeckVariant;
use cdsnas::nn::ParamStore;
use cdsnas::space::{candidate_set, fixtures, scale_descriptor, ArchitectureDescriptor, SpaceKind};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cdsnas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdsnas"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("CDSNAS_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

const DESK: [&str; 4] = ["--beta", "0.25", "--gamma", "0.25"];

#[test]
fn planted_search_selects_planted_branch() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&cdsnas(dir.path(), &["search", "--space", "cds", "--topk", "2", "--seed", "1", "--task", "planted"]));
    let d = ArchitectureDescriptor::parse(&read(dir.path(), "arch.txt")).unwrap();
    assert!(d.layers.iter().all(|&l| l == candidate_set(SpaceKind::Cds)[1]), "{d}");
    assert_eq!(stdout, d.to_text());
    assert!(dir.path().join("model.ckpt").exists());
    let log = read(dir.path(), "search_log.csv");
    assert!(log.starts_with("# command = search\n# seed = 1\n"));
}

#[test]
fn derive_reproduces_search_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cdsnas(dir.path(), &["search", "--task", "planted", "--space", "cs", "--seed", "4"]));
    let searched = read(dir.path(), "arch.txt");
    fs::remove_file(dir.path().join("arch.txt")).unwrap();
    assert_eq!(ok(&cdsnas(dir.path(), &["derive", "--space", "cs"])), searched);
    assert_eq!(read(dir.path(), "arch.txt"), searched);
}

#[test]
fn search_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["search", "--seed", "3", "--max-steps", "6"];
    ok(&cdsnas(a.path(), &args));
    ok(&cdsnas(b.path(), &args));
    for f in ["arch.txt", "search_log.csv", "model.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["search", "--topk", "0"],
        vec!["search", "--topk", "13"],
        vec!["train", "--partitions", "many"],
        vec!["train", "--fixture", "resnet"],
        vec!["analyze", "--frobnicate", "1"],
        vec!["teleport"],
    ] {
        let out = cdsnas(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
    let out = cdsnas(dir.path(), &["search", "--topk", "0"]);
    let line = stderr(&out);
    assert!(line.starts_with("error code=2 kind=usage:") && line.lines().count() == 1, "{line}");
}

#[test]
fn config_file_and_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# planted run\ntask = planted\nspace = cs\nmax_steps = 40\n").unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_cdsnas"));
        c.arg("search").arg("--config").arg(&cfg).args(extra).arg("--out-dir").arg(dir.path());
        match env {
            Some(s) => c.env("CDSNAS_SEED", s),
            None => c.env_remove("CDSNAS_SEED"),
        };
        ok(&c.output().unwrap());
        read(dir.path(), "search_log.csv")
    };
    let log = run(&[], Some("17"));
    assert!(log.contains("# seed = 17\n") && log.contains("# task = planted\n"));
    assert!(run(&["--seed", "2"], Some("17")).contains("# seed = 2\n"));
    assert!(run(&["--max-steps", "3"], None).contains("# max_steps = 3\n"));
    fs::write(&cfg, "seed = 1\nwidth = 9\n").unwrap();
    let out = cdsnas(dir.path(), &["search", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"));
}

#[test]
fn unparseable_descriptor_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    let mut text = scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).unwrap().to_text();
    text = text.replacen("k2=7", "k2=8", 1);
    fs::write(&bad, text).unwrap();
    let out = cdsnas(dir.path(), &["train", "--arch", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn train_then_eval_with_ablation_arms() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--fixture", "cdnet", "--max-steps", "4", "--synthetic-ids", "6", "--synthetic-instances", "5"];
    for (neck, parts, width) in [("bnneck", "2", 128), ("fblneck", "0", 128), ("fblneck", "1", 160)] {
        let mut args = vec!["train", "--neck", neck, "--partitions", parts];
        args.extend(base);
        args.extend(DESK);
        let stdout = ok(&cdsnas(dir.path(), &args));
        assert!(stdout.contains(&format!("embedding width {width}")), "{stdout}");
        let log = read(dir.path(), "train_log.csv");
        assert!(log.contains(&format!("# neck = {neck}\n")));
        assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 5);
        args[0] = "eval";
        let first = ok(&cdsnas(dir.path(), &args));
        let csv = read(dir.path(), "metrics.csv");
        assert!(csv.starts_with("metric,value\nrank1,"));
        assert_eq!(ok(&cdsnas(dir.path(), &args)), first);
        assert_eq!(read(dir.path(), "metrics.csv"), csv);
    }
}

#[test]
fn width_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--fixture", "cdnet", "--max-steps", "1", "--synthetic-ids", "4", "--synthetic-instances", "5"];
    args.extend(DESK);
    ok(&cdsnas(dir.path(), &args));
    args[0] = "eval";
    args.extend(["--partitions", "3"]);
    let out = cdsnas(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("width"), "{}", stderr(&out));
}

#[test]
fn memorized_training_set_retrieves_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train", "--fixture", "cdnet", "--seed", "5", "--epochs", "60", "--erasing", "0", "--synthetic-ids", "4",
        "--synthetic-instances", "5",
    ];
    args.extend(DESK);
    ok(&cdsnas(dir.path(), &args));
    args[0] = "eval";
    args.extend(["--split", "train"]);
    let stdout = ok(&cdsnas(dir.path(), &args));
    assert!(read(dir.path(), "metrics.csv").contains("rank1,1\n"), "{stdout}");
}

/// Labels drawn independently of the images, so an untrained network's
/// retrieval quality is one draw from the label-permutation null.
#[test]
fn random_network_on_label_free_data_matches_permutation_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        identities: 24,
        instances: 8,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let mut data = generate_synthetic::<f32>(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    data.labels.shuffle(&mut rng);
    let cache = dir.path().join("shuffled.ckpt");
    data.save(&cache).unwrap();

    let mut args = vec!["train", "--fixture", "cdnet", "--seed", "2", "--max-steps", "0", "--dataset", cache.to_str().unwrap()];
    args.extend(DESK);
    ok(&cdsnas(dir.path(), &args));
    args[0] = "eval";
    ok(&cdsnas(dir.path(), &args));
    let csv = read(dir.path(), "metrics.csv");
    let observed: f64 = csv.lines().find_map(|l| l.strip_prefix("mAP,")).unwrap().parse().unwrap();

    let d = scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).unwrap();
    let mut store = ParamStore::new();
    let model = Model::from_descriptor(&mut store, 2, &d, 24, NeckVariant::Fbl, 2).unwrap();
    let emb = model.embed(&store, &data.images, 64).unwrap();
    let m = evaluate_retrieval(&RetrievalIndex::all_vs_all(&emb, data.labels.clone()).unwrap()).unwrap();
    assert_eq!(m.map, observed);
    let null: Vec<f64> = (0..200)
        .map(|_| {
            let mut labels = data.labels.clone();
            labels.shuffle(&mut rng);
            evaluate_retrieval(&RetrievalIndex::all_vs_all(&emb, labels).unwrap()).unwrap().map
        })
        .collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
    let z = (observed - mean) / sd;
    assert!(z.abs() < 3.0, "observed {observed:.4} null {mean:.4} +- {sd:.4} z {z:.2}");
}

/// The same untrained network on the real labels: random features already
/// separate identities, so this sits far above the permutation null.
#[test]
fn random_network_on_real_labels_beats_permutation_baseline() {
    let spec = SyntheticSpec {
        identities: 24,
        instances: 8,
        seed: 2 + TEST_SEED_OFFSET,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic::<f32>(&spec).unwrap();
    let d = scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).unwrap();
    let mut store = ParamStore::new();
    let model = Model::from_descriptor(&mut store, 2, &d, 24, NeckVariant::Fbl, 2).unwrap();
    let emb = model.embed(&store, &data.images, 64).unwrap();
    let map = |labels: Vec<usize>| evaluate_retrieval(&RetrievalIndex::all_vs_all(&emb, labels).unwrap()).unwrap().map;
    let observed = map(data.labels.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let best_null = (0..50)
        .map(|_| {
            let mut labels = data.labels.clone();
            labels.shuffle(&mut rng);
            map(labels)
        })
        .fold(0.0, f64::max);
    assert!(observed > best_null, "{observed} vs {best_null}");
}

#[test]
fn analyze_reports_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let cd = ok(&cdsnas(dir.path(), &["analyze", "--fixture", "cdnet"]));
    assert!(cd.contains("\ndepth 9\n") && cd.contains("input 256x128"), "{cd}");
    let top1 = ok(&cdsnas(dir.path(), &["analyze", "--fixture", "cdnet-top1"]));
    assert!(top1.contains("\ndepth 10\n"));
    let cs = ok(&cdsnas(dir.path(), &["analyze", "--fixture", "cnet"]));
    assert!(cs.contains("space cs (size 46656)") && cs.contains("\ndepth 6\n"));
    let half = ok(&cdsnas(dir.path(), &["analyze", "--fixture", "cnet", "--gamma", "0.5"]));
    assert!(half.contains("input 128x64"));
    let file = dir.path().join("arch.txt");
    fs::write(&file, fixtures::cdnet().to_text()).unwrap();
    assert_eq!(ok(&cdsnas(dir.path(), &["analyze", "--arch", file.to_str().unwrap()])), cd);
}

#[test]
fn selftest_passes_and_detects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&cdsnas(dir.path(), &["selftest"]));
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.contains("PASS gradients/alpha_frozen_gate"));
    for op in ["conv2d", "triplet", "softmax"] {
        let out = cdsnas(dir.path(), &["selftest", "--inject-fault", op]);
        assert_ne!(out.status.code(), Some(0), "{op}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradients/"), "{op}");
    }
    assert_eq!(cdsnas(dir.path(), &["selftest", "--inject-fault", "nosuchop"]).status.code(), Some(2));
}

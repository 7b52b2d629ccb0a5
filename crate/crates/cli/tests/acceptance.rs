//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Pass criterion numbers as arguments to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cdsnas::checkpoint::Checkpoint;
use cdsnas::eval::{generate_synthetic, SyntheticSpec};
use cdsnas::experiments::{
    micro_rank_correlation, planted_trial, train_and_evaluate, AblationSettings, MicroSearchSettings, PLANTED_BRANCH,
};
use cdsnas::model::Model;
use cdsnas::neck::{NeckVariant, HEAD_SCOPE};
use cdsnas::nn::ParamStore;
use cdsnas::space::{analyze, candidate_set, fixtures, scale_descriptor, space_size, ArchitectureDescriptor, SpaceKind};
use cdsnas::train::{train, TrainConfig};
use cdsnas::verify::{gating_suite, gradient_suite, metric_suite, straight_through_draws, GRAD_TOLERANCE};
use cdsnas::Tensor;

const SEEDS: u64 = 5;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

type Check = fn() -> Result<Verdict, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn space_cardinality() -> Result<Verdict, String> {
    let sets = (candidate_set(SpaceKind::Cs).len(), candidate_set(SpaceKind::Cds).len());
    let sizes = (space_size(SpaceKind::Cs), space_size(SpaceKind::Cds));
    Ok(verdict(
        sets == (6, 12) && sizes == (46656, 2985984),
        format!("candidates {sets:?}, spaces {sizes:?}"),
    ))
}

fn gradient_checks() -> Result<Verdict, String> {
    let r = gradient_suite(20, 0, None).map_err(err)?;
    let fewest = r.lines.iter().map(|l| l.cases).min().unwrap_or(0);
    let worst = r.lines.iter().map(|l| l.worst).fold(0.0, f64::max);
    let alpha = r.lines.iter().any(|l| l.name == "alpha_frozen_gate" && l.passed);
    let failed: Vec<&str> = r.failures().map(|l| l.name.as_str()).collect();
    Ok(verdict(
        r.passed() && fewest >= 20 && alpha,
        format!(
            "{} families, >= {fewest} cases each, worst rel {worst:.2e} (tol {GRAD_TOLERANCE:e}), failed {failed:?}",
            r.lines.len()
        ),
    ))
}

fn gating_equivalence() -> Result<Verdict, String> {
    let r = gating_suite(0).map_err(err)?;
    let lines: Vec<_> = r.lines.iter().filter(|l| l.name.starts_with("top")).collect();
    let ok = lines.len() == 8 && lines.iter().all(|l| l.passed);
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    Ok(verdict(ok, format!("k = 1..4, {} checks, failed {failed:?}", lines.len())))
}

fn straight_through() -> Result<Verdict, String> {
    let bad = straight_through_draws(1000, 0).map_err(err)?;
    Ok(verdict(bad == 0, format!("{bad} of 1000 draws differ")))
}

fn planted_search() -> Result<Verdict, String> {
    let mut found = 0;
    let mut notes = Vec::new();
    for seed in 0..SEEDS {
        let t = planted_trial(seed, 2, 500).map_err(err)?;
        let ok = t.selected == PLANTED_BRANCH && t.oracle_best == PLANTED_BRANCH && t.steps <= 500;
        found += ok as usize;
        notes.push(format!("seed {seed}: argmax {} oracle {} in {} steps", t.selected, t.oracle_best, t.steps));
    }
    Ok(verdict(found == SEEDS as usize, format!("{found}/{SEEDS}; {}", notes.join("; "))))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn rank_correlation() -> Result<Verdict, String> {
    let mut rhos = Vec::new();
    for seed in 0..SEEDS {
        let r = micro_rank_correlation(&MicroSearchSettings::desk(seed)).map_err(err)?;
        eprintln!("  criterion 6 seed {seed}: rho {:.3} alpha {:?}", r.correlation, r.alpha.layers());
        rhos.push(r.correlation);
    }
    let shown: Vec<String> = rhos.iter().map(|r| format!("{r:.3}")).collect();
    let m = median(&mut rhos);
    Ok(verdict(m >= 0.5, format!("median rho {m:.3} (need >= 0.5), seeds [{}]", shown.join(", "))))
}

fn fixtures_depths() -> Result<Verdict, String> {
    let mut depths = Vec::new();
    for d in [fixtures::cnet(), fixtures::cdnet(), fixtures::cdnet_top1()] {
        let back = ArchitectureDescriptor::parse(&d.to_text()).map_err(err)?;
        if back != d {
            return Ok(verdict(false, format!("{} does not round-trip", d.kind)));
        }
        let mut store = ParamStore::<f32>::new();
        Model::from_descriptor(&mut store, 0, &d, 10, NeckVariant::Fbl, 2).map_err(err)?;
        depths.push((d.depth(), analyze(&d).depth));
    }
    let ok = depths == [(6, 6), (9, 9), (10, 10)];
    Ok(verdict(ok, format!("depths {:?}", depths.iter().map(|d| d.1).collect::<Vec<_>>())))
}

fn width_ladder() -> Result<Verdict, String> {
    // 96x48 input: the second-stage map is 12 rows high, divisible by 1..4
    let d = scale_descriptor(&fixtures::cdnet(), 1.0, 0.375).map_err(err)?;
    let (h, w) = d.input_resolution();
    let images = Tensor::<f32>::zeros(vec![2, 3, h, w]);
    let mut widths = Vec::new();
    for p in 0..=4 {
        let mut store = ParamStore::new();
        let model = Model::from_descriptor(&mut store, 0, &d, 10, NeckVariant::Fbl, p).map_err(err)?;
        let e = model.embed(&store, &images, 2).map_err(err)?;
        widths.push((model.neck.config.inference_width(), e.shape()[1]));
    }
    let ok = widths.iter().map(|w| w.1).eq([512, 640, 768, 896, 1024]) && widths.iter().all(|w| w.0 == w.1);
    Ok(verdict(ok, format!("partitions 0..4 -> {:?}", widths.iter().map(|w| w.1).collect::<Vec<_>>())))
}

fn removability() -> Result<Verdict, String> {
    let d = scale_descriptor(&fixtures::cdnet(), 0.25, 0.25).map_err(err)?;
    let data = generate_synthetic::<f32>(&SyntheticSpec {
        identities: 6,
        instances: 5,
        ..SyntheticSpec::default()
    })
    .map_err(err)?;
    let mut store = ParamStore::new();
    let model = Model::from_descriptor(&mut store, 0, &d, data.classes(), NeckVariant::Fbl, 2).map_err(err)?;
    let cfg = TrainConfig {
        max_steps: Some(5),
        ..TrainConfig::default()
    };
    train(&model, &mut store, &data, &cfg, |_| {}).map_err(err)?;
    let mut ck = Checkpoint::from_store(&store);
    let stripped = ck.strip_prefix(&format!("{HEAD_SCOPE}."));
    let mut fresh = ParamStore::new();
    Model::from_descriptor(&mut fresh, 99, &d, data.classes(), NeckVariant::Fbl, 2).map_err(err)?;
    ck.load_into(&mut fresh, false).map_err(err)?;
    let heads_differ = fresh
        .iter()
        .zip(store.iter())
        .any(|((_, a), (_, b))| a.name.starts_with(HEAD_SCOPE) && a.value != b.value);
    let before = model.embed(&store, &data.images, 16).map_err(err)?;
    let after = model.embed(&fresh, &data.images, 16).map_err(err)?;
    Ok(verdict(
        stripped > 0 && heads_differ && before == after,
        format!("{stripped} head tensors stripped, embeddings identical: {}", before == after),
    ))
}

fn neck_ablation() -> Result<Verdict, String> {
    let variants = [NeckVariant::Fbl, NeckVariant::Bl, NeckVariant::Bn];
    let mut sums = [0.0; 3];
    for seed in 0..SEEDS {
        let s = AblationSettings::desk(seed);
        for (i, &v) in variants.iter().enumerate() {
            let m = train_and_evaluate::<f32>(&s, v).map_err(err)?;
            eprintln!("  criterion 10 seed {seed}: {v} {m}");
            sums[i] += m.map;
        }
    }
    let [fbl, bl, bn] = sums.map(|s| 100.0 * s / SEEDS as f64);
    let ordered = fbl >= bl && bl >= bn;
    Ok(verdict(
        fbl - bn >= 2.0,
        format!(
            "mean mAP fblneck {fbl:.2} blneck {bl:.2} bnneck {bn:.2}; fbl - bn {:.2} (need >= 2); full ordering {}",
            fbl - bn,
            if ordered { "holds" } else { "does not hold" }
        ),
    ))
}

fn metric_oracle() -> Result<Verdict, String> {
    let r = metric_suite(50, 0).map_err(err)?;
    let cases: usize = r.lines.iter().map(|l| l.cases).sum();
    Ok(verdict(r.passed() && cases >= 50, format!("{cases} instances, exact match: {}", r.passed())))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cdsnas"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("CDSNAS_SEED")
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn determinism() -> Result<Verdict, String> {
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    for d in &dirs {
        run_cli(d.path(), &["search", "--seed", "7", "--max-steps", "30"])?;
    }
    let arch = dirs[0].path().join("arch.txt");
    for d in &dirs {
        run_cli(d.path(), &["train", "--seed", "7", "--max-steps", "30", "--arch", arch.to_str().unwrap()])?;
    }
    let mut differ = Vec::new();
    for f in ["arch.txt", "search_log.csv", "train_log.csv", "model.ckpt"] {
        let a = fs::read(dirs[0].path().join(f)).map_err(err)?;
        let b = fs::read(dirs[1].path().join(f)).map_err(err)?;
        if a != b {
            differ.push(f);
        }
    }
    Ok(verdict(differ.is_empty(), format!("search + train twice, differing files {differ:?}")))
}

fn main() {
    let criteria: [(usize, &str, Duration, Check); 12] = [
        (1, "space cardinality", Duration::from_secs(1), space_cardinality),
        (2, "gradient suite", Duration::from_secs(300), gradient_checks),
        (3, "gating equivalence", Duration::from_secs(60), gating_equivalence),
        (4, "straight-through identity", Duration::from_secs(1), straight_through),
        (5, "planted-branch search", Duration::from_secs(600), planted_search),
        (6, "search-quality rank correlation", Duration::from_secs(3600), rank_correlation),
        (7, "fixture descriptors", Duration::from_secs(10), fixtures_depths),
        (8, "feature-dim ladder", Duration::from_secs(10), width_ladder),
        (9, "neck removability", Duration::from_secs(60), removability),
        (10, "neck ablation direction", Duration::from_secs(5400), neck_ablation),
        (11, "metric oracle", Duration::from_secs(10), metric_oracle),
        (12, "determinism", Duration::from_secs(900), determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = check().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let took = start.elapsed();
        let passed = v.passed && took <= budget;
        failed += !passed as usize;
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

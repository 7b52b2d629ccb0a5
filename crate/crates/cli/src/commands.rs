use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cdsnas::autodiff::OpKind;
use cdsnas::checkpoint::Checkpoint;
use cdsnas::eval::{
    evaluate_retrieval, generate_synthetic, planted_features, planted_model, planted_positions, split_train_val,
    Dataset, PlantedSpec, RetrievalIndex, RetrievalMetrics, SyntheticSpec,
};
use cdsnas::experiments::TEST_SEED_OFFSET;
use cdsnas::model::Model;
use cdsnas::neck::HEAD_SCOPE;
use cdsnas::nn::{ParamStore, Schedule};
use cdsnas::search::{derive, search, AlphaParams, SearchConfig, StepRecord};
use cdsnas::space::{analyze, fixtures, scale_descriptor, ArchitectureDescriptor, SpaceKind};
use cdsnas::tensor::{Element, Tensor};
use cdsnas::train::{train, TrainConfig, TrainRecord};
use cdsnas::verify::{gating_suite, gradient_suite, metric_suite, SuiteReport};

use crate::config::{RunConfig, Split, Task};
use crate::failure::Failure;

pub const ARCH_FILE: &str = "arch.txt";
pub const SEARCH_LOG: &str = "search_log.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Records the inference embedding width of a trained model.
pub const WIDTH_KEY: &str = "meta.inference_width";

const DESK_SCALE: f64 = 0.25;
const SEARCH_EPOCHS: usize = 40;
const TRAIN_EPOCHS: usize = 30;
const PLANTED_STEPS: usize = 500;
const PLANTED_BRANCH: usize = 1;
const VAL_PER_IDENTITY: usize = 4;
const EMBED_CHUNK: usize = 64;

type Outcome<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| io_failure(path, e))
}

/// Line-oriented CSV log whose first lines record the resolved config.
struct Log {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl Log {
    fn open(path: PathBuf, cfg: &RunConfig, command: &str, header: &str) -> Outcome<Self> {
        let mut log = Self {
            out: create(&path)?,
            path,
            error: None,
        };
        log.line(cfg.embedded(command).trim_end());
        log.line(header);
        Ok(log)
    }

    fn line(&mut self, s: &str) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{s}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Outcome {
        match self.error.take() {
            Some(e) => Err(io_failure(&self.path, e)),
            None => self.out.flush().map_err(|e| io_failure(&self.path, e)),
        }
    }
}

fn search_config(cfg: &RunConfig, epochs: usize, max_steps: Option<usize>) -> SearchConfig {
    SearchConfig {
        k: cfg.topk,
        epochs,
        identities: cfg.identities,
        instances: cfg.instances,
        w_lr: Schedule::Cosine {
            initial: cfg.w_lr,
            min: 1e-4,
            epochs,
        },
        alpha_lr: Schedule::Step {
            initial: cfg.alpha_lr,
            milestones: vec![80, 160],
            factor: 0.1,
        },
        seed: cfg.seed,
        max_steps,
        ..SearchConfig::default()
    }
}

fn check_topk(cfg: &RunConfig) -> Outcome {
    let n = cfg.space.candidate_count();
    if cfg.topk == 0 || cfg.topk > n {
        return Err(Failure::usage(format!("topk must lie in 1..={n} for the {} space, got {}", cfg.space, cfg.topk)));
    }
    Ok(())
}

fn check_batch(cfg: &RunConfig) -> Outcome {
    if cfg.identities < 2 || cfg.instances < 2 {
        return Err(Failure::usage("batches need at least 2 identities and 2 instances"));
    }
    if !(0.0..=1.0).contains(&cfg.erasing) {
        return Err(Failure::usage(format!("erasing probability {} outside [0, 1]", cfg.erasing)));
    }
    if cfg.epochs == Some(0) {
        return Err(Failure::usage("epochs must be positive"));
    }
    Ok(())
}

fn synthetic_spec(cfg: &RunConfig, resolution: (usize, usize)) -> SyntheticSpec {
    SyntheticSpec {
        identities: cfg.synthetic_ids,
        instances: cfg.synthetic_instances,
        height: resolution.0,
        width: resolution.1,
        seed: cfg.seed,
        ..SyntheticSpec::default()
    }
}

/// The configured dataset cache, or synthetic identities drawn from the
/// seed. `held_out` selects identities disjoint from the training ones.
fn dataset<T: Element>(cfg: &RunConfig, resolution: (usize, usize), held_out: bool) -> Outcome<Dataset<T>> {
    let d = match &cfg.dataset {
        Some(path) => Dataset::load(path)?,
        None => {
            let mut spec = synthetic_spec(cfg, resolution);
            if held_out {
                spec.seed = spec.seed.wrapping_add(TEST_SEED_OFFSET);
            }
            generate_synthetic(&spec)?
        }
    };
    let s = d.image_shape();
    if s[1..] != [resolution.0, resolution.1] {
        return Err(Failure::data(format!(
            "images are {}x{}, the architecture expects {}x{}",
            s[1], s[2], resolution.0, resolution.1
        )));
    }
    Ok(d)
}

fn search_template(kind: SpaceKind, beta: f64, gamma: f64) -> Outcome<ArchitectureDescriptor> {
    let base = match kind {
        SpaceKind::Cs => fixtures::cnet(),
        SpaceKind::Cds => fixtures::cdnet(),
    };
    Ok(scale_descriptor(&base, beta, gamma)?)
}

pub fn cmd_search(cfg: &RunConfig) -> Outcome {
    check_topk(cfg)?;
    check_batch(cfg)?;
    let (beta, gamma) = (cfg.beta.unwrap_or(DESK_SCALE), cfg.gamma.unwrap_or(DESK_SCALE));
    let mut ck = Checkpoint::new();
    let alpha = match cfg.task {
        Task::Planted => {
            let data = planted_features::<f64>(&PlantedSpec {
                seed: cfg.seed,
                ..PlantedSpec::default()
            })?;
            let (tr, va) = split_train_val(&data.labels, VAL_PER_IDENTITY, cfg.seed)?;
            let (train_set, val_set) = (data.subset(&tr)?, data.subset(&va)?);
            let positions = planted_positions(6, cfg.space.candidate_count(), PLANTED_BRANCH);
            let mut store = ParamStore::new();
            let model = planted_model(&mut store, cfg.seed, &positions, train_set.image_shape()[0], train_set.classes())?;
            let alpha = AlphaParams::zeros(&model.backbone.branch_counts())?;
            let max = Some(cfg.max_steps.unwrap_or(PLANTED_STEPS));
            let scfg = search_config(cfg, cfg.epochs_or(PLANTED_STEPS), max);
            run_search(cfg, &model, store, alpha, &scfg, &train_set, &val_set, &mut ck)?
        }
        Task::Synthetic => {
            let template = search_template(cfg.space, beta, gamma)?;
            let data = dataset::<f32>(cfg, template.input_resolution(), false)?;
            let (tr, va) = split_train_val(&data.labels, VAL_PER_IDENTITY, cfg.seed)?;
            let (train_set, val_set) = (data.subset(&tr)?, data.subset(&va)?);
            let mut store = ParamStore::new();
            let model = Model::supernet(&mut store, cfg.seed, cfg.space, &template, train_set.classes())?;
            let alpha = AlphaParams::for_space(cfg.space);
            let scfg = search_config(cfg, cfg.epochs_or(SEARCH_EPOCHS), cfg.max_steps);
            run_search(cfg, &model, store, alpha, &scfg, &train_set, &val_set, &mut ck)?
        }
    };
    let d = derive(&alpha, cfg.space, beta, gamma)?;
    ck.write(cfg.out_path(CHECKPOINT_FILE))?;
    write_file(&cfg.out_path(ARCH_FILE), &d.to_text())?;
    print!("{d}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_search<T: Element>(
    cfg: &RunConfig,
    model: &Model,
    store: ParamStore<T>,
    alpha: AlphaParams,
    scfg: &SearchConfig,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    ck: &mut Checkpoint,
) -> Outcome<AlphaParams> {
    let mut log = Log::open(cfg.out_path(SEARCH_LOG), cfg, "search", &StepRecord::csv_header(&alpha))?;
    let result = search(model, store, alpha, scfg, train_set, val_set, |r| log.line(&r.csv_row()));
    log.finish()?;
    let out = result?;
    *ck = Checkpoint::from_store(&out.store);
    out.alpha.write_to(ck);
    eprintln!("search: {} steps", out.steps);
    Ok(out.alpha)
}

pub fn cmd_derive(cfg: &RunConfig) -> Outcome {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_path(CHECKPOINT_FILE));
    let ck = Checkpoint::read(&path)?;
    let alpha = AlphaParams::read_from(&ck)?;
    let d = derive(&alpha, cfg.space, cfg.beta.unwrap_or(DESK_SCALE), cfg.gamma.unwrap_or(DESK_SCALE))?;
    write_file(&cfg.out_path(ARCH_FILE), &d.to_text())?;
    print!("{d}");
    Ok(())
}

/// The descriptor named by `fixture` or read from `arch`, with any
/// configured width and resolution multipliers applied.
pub fn load_descriptor(cfg: &RunConfig) -> Outcome<ArchitectureDescriptor> {
    let d = match (&cfg.fixture, &cfg.arch) {
        (Some(_), Some(_)) => return Err(Failure::usage("give either fixture or arch, not both")),
        (Some(name), None) => match name.as_str() {
            "cnet" => fixtures::cnet(),
            "cdnet" => fixtures::cdnet(),
            "cdnet-top1" => fixtures::cdnet_top1(),
            other => return Err(Failure::usage(format!("unknown fixture `{other}` (cnet, cdnet, cdnet-top1)"))),
        },
        (None, arch) => {
            let path = arch.clone().unwrap_or_else(|| cfg.out_path(ARCH_FILE));
            let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
            ArchitectureDescriptor::parse(&text).map_err(|e| {
                let mut f = Failure::from(e);
                f.message = format!("{}: {}", path.display(), f.message);
                f
            })?
        }
    };
    if cfg.beta.is_none() && cfg.gamma.is_none() {
        return Ok(d);
    }
    Ok(scale_descriptor(&d, cfg.beta.unwrap_or(d.beta), cfg.gamma.unwrap_or(d.gamma))?)
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    let epochs = cfg.epochs_or(TRAIN_EPOCHS);
    let mut t = TrainConfig {
        epochs,
        identities: cfg.identities,
        instances: cfg.instances,
        lr: Schedule::Cosine {
            initial: cfg.lr,
            min: cfg.lr / 100.0,
            epochs,
        },
        seed: cfg.seed,
        max_steps: cfg.max_steps,
        ..TrainConfig::default()
    };
    t.erasing.probability = cfg.erasing;
    t
}

pub fn cmd_train(cfg: &RunConfig) -> Outcome {
    check_batch(cfg)?;
    let d = load_descriptor(cfg)?;
    let data = dataset::<f32>(cfg, d.input_resolution(), false)?;
    let mut store = ParamStore::new();
    let model = Model::from_descriptor(&mut store, cfg.seed, &d, data.classes(), cfg.neck, cfg.partitions)?;
    let mut log = Log::open(cfg.out_path(TRAIN_LOG), cfg, "train", TrainRecord::CSV_HEADER)?;
    let mut last = None;
    let result = train(&model, &mut store, &data, &train_config(cfg), |r| {
        log.line(&r.csv_row());
        last = Some(r.losses.total);
    });
    log.finish()?;
    let steps = result?;
    let mut ck = Checkpoint::from_store(&store);
    let width = model.neck.config.inference_width();
    ck.insert(WIDTH_KEY, &Tensor::new(vec![1], vec![width as f64])?);
    ck.write(cfg.out_path(CHECKPOINT_FILE))?;
    match last {
        Some(l) => println!("trained {steps} steps, final loss {l:.6}, embedding width {width}"),
        None => println!("trained 0 steps, embedding width {width}"),
    }
    Ok(())
}

/// Loads every non-head tensor of `store` from `ck`; head tensors are not
/// needed for inference and may have been stripped.
fn load_inference<T: Element>(ck: &Checkpoint, store: &mut ParamStore<T>) -> Outcome {
    let needed: Vec<String> = store
        .iter()
        .map(|(_, e)| e.name.clone())
        .filter(|n| !n.starts_with(&format!("{HEAD_SCOPE}.")))
        .collect();
    if let Some(missing) = needed.iter().find(|n| ck.get::<T>(n).is_none()) {
        return Err(Failure::from(cdsnas::Error::Checkpoint(format!("missing tensor `{missing}`"))));
    }
    let mut body = ck.clone();
    body.strip_prefix(&format!("{HEAD_SCOPE}."));
    body.load_into(store, false)?;
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Outcome<RetrievalMetrics> {
    let d = load_descriptor(cfg)?;
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_path(CHECKPOINT_FILE));
    let ck = Checkpoint::read(&path)?;
    let data = dataset::<f32>(cfg, d.input_resolution(), cfg.split == Split::Test)?;
    let mut store = ParamStore::new();
    let model = Model::from_descriptor(&mut store, cfg.seed, &d, data.classes(), cfg.neck, cfg.partitions)?;
    let width = model.neck.config.inference_width();
    if let Some(stored) = ck.get::<f64>(WIDTH_KEY) {
        let stored = stored.data()[0] as usize;
        if stored != width {
            return Err(Failure {
                kind: "shape",
                ..Failure::data(format!(
                    "checkpoint embedding width {stored} does not match configured width {width} (neck {}, partitions {})",
                    cfg.neck, cfg.partitions
                ))
            });
        }
    }
    load_inference(&ck, &mut store)?;
    let emb = model.embed(&store, &data.images, EMBED_CHUNK)?;
    Ok(evaluate_retrieval(&RetrievalIndex::all_vs_all(&emb, data.labels.clone())?)?)
}

pub fn cmd_eval(cfg: &RunConfig) -> Outcome {
    let m = evaluate(cfg)?;
    write_file(&cfg.out_path(METRICS_FILE), &m.to_csv())?;
    println!("{m}");
    Ok(())
}

pub fn analysis_report(d: &ArchitectureDescriptor) -> String {
    let a = analyze(d);
    let (h, w) = d.input_resolution();
    let mut out = format!(
        "space {} (size {})\nbeta {} gamma {}\ninput {h}x{w}\nparams {}\nmult-adds {}\ndepth {}\n",
        d.kind, a.space_size, d.beta, d.gamma, a.params, a.macs, a.depth
    );
    out.push_str("position op channels resolution params mult-adds receptive-field\n");
    for l in &a.layers {
        out.push_str(&format!(
            "{} {} {} {}x{} {} {} {}\n",
            l.position,
            l.spec.label(),
            l.channels,
            l.resolution.0,
            l.resolution.1,
            l.params,
            l.macs,
            l.receptive_field
        ));
    }
    out
}

pub fn cmd_analyze(cfg: &RunConfig) -> Outcome {
    print!("{}", analysis_report(&load_descriptor(cfg)?));
    Ok(())
}

pub fn selftest_reports(cases: usize, seed: u64, fault: Option<OpKind>) -> Outcome<Vec<SuiteReport>> {
    Ok(vec![
        gradient_suite(cases, seed, fault)?,
        gating_suite(seed)?,
        metric_suite(50, seed)?,
    ])
}

pub fn cmd_selftest(cfg: &RunConfig, cases: usize, fault: Option<&str>) -> Outcome<bool> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<String> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Failure::usage(format!("unknown op `{name}` ({})", names.join(", ")))
        })?),
    };
    if cases == 0 {
        return Err(Failure::usage("selftest needs at least one case per family"));
    }
    let reports = selftest_reports(cases, cfg.seed, fault)?;
    let mut ok = true;
    for r in &reports {
        print!("{r}");
        ok &= r.passed();
    }
    let failed: usize = reports.iter().map(|r| r.failures().count()).sum();
    let total: usize = reports.iter().map(|r| r.lines.len()).sum();
    println!("selftest: {} of {total} checks passed", total - failed);
    Ok(ok)
}

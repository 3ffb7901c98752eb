//! `rdad`: dataset generation, training, detection, evaluation and ablation.

mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use rdad::ablation::{find_arm, table1_arms, table2_arms, AblationReport, Arm, ArmResult};
use rdad::datagen::{self, Scene, Split, CLASS_NAMES};
use rdad::evaluation::{self, Detection};
use rdad::model::detect_all;
use rdad::rda::MergeKind;
use rdad::training::{self, TrainLog};
use rdad::{checkpoint, DetectionModel, Error, RunConfig};

#[derive(Parser)]
#[command(name = "rdad", version, about = "Region decomposition and assembly detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Train a detector and write a run directory.
    Train(TrainArgs),
    /// Run a trained detector and write a JSON-lines detection dump.
    Detect(DetectArgs),
    /// Score a detection dump against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate the ablation arms over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration; every split of its dataset block is written.
    #[arg(long, conflicts_with = "spec")]
    config: Option<PathBuf>,
    /// A single scene specification; written as one dataset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    Max,
    Sum,
    Concat,
}

impl From<MergeArg> for MergeKind {
    fn from(m: MergeArg) -> Self {
        match m {
            MergeArg::Max => MergeKind::Max,
            MergeArg::Sum => MergeKind::Sum,
            MergeArg::Concat => MergeKind::Concat,
        }
    }
}

#[derive(Args, Default)]
struct ModelOverrides {
    /// Comma-separated proposal scale set, e.g. `0.7,1,1.5`.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f32>>,
    /// Whole-region branch only.
    #[arg(long)]
    no_decomp: bool,
    #[arg(long)]
    no_upsample: bool,
    #[arg(long, value_enum)]
    merge: Option<MergeArg>,
    /// Part-branch kernel size (3 or 5).
    #[arg(long)]
    m: Option<usize>,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = &self.scales {
            cfg.mrp.scale_set = s.clone();
        }
        if self.no_decomp {
            cfg.rda.use_decomposition = false;
        }
        if self.no_upsample {
            cfg.rda.use_upsample = false;
        }
        if let Some(m) = self.merge {
            cfg.rda.merge = m.into();
        }
        if let Some(m) = self.m {
            cfg.rda.m = m;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on an exported dataset instead of generating the training split.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Stop after this many iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    overrides: ModelOverrides,
}

#[derive(Args)]
struct DetectArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Run configuration; defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    image: Option<PathBuf>,
    /// Image id recorded for `--image`.
    #[arg(long, default_value_t = 0)]
    image_id: usize,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Detection dump; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for annotated PPM renders.
    #[arg(long)]
    render: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    /// Dataset directory or annotations file.
    #[arg(long)]
    gts: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f32,
    #[arg(long, default_value_t = CLASS_NAMES.len())]
    classes: usize,
    /// Also print the IoU sweep, size buckets and average recall.
    #[arg(long)]
    coco: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Test,
    Occluded,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "occluded")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "all")]
    table: TableArg,
    /// Explicit comma-separated arm names (overrides --table).
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
}

/// Failure with its exit code: 1 for bad input, 2 for runtime errors.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("RDAD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| invalid(format!("RDAD_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            message: e.to_string(),
        })
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| Failure {
        code: 2,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

fn gen_data(a: GenDataArgs) -> CliResult {
    if let Some(spec_path) = &a.spec {
        let text = std::fs::read_to_string(spec_path).map_err(|e| invalid(format!("{}: {e}", spec_path.display())))?;
        let mut spec: datagen::DatasetSpec =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", spec_path.display())))?;
        if let Some(seed) = a.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        datagen::export_dataset(&spec, &a.out)?;
        println!("wrote {} images to {}", spec.num_images, a.out.display());
        return Ok(());
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.dataset.scene.seed = seed;
    }
    cfg.validate()?;
    for (split, name) in [
        (Split::Train, "train"),
        (Split::Val, "val"),
        (Split::Test, "test"),
        (Split::OccludedTest, "occluded_test"),
    ] {
        let spec = cfg.dataset.split(split);
        if spec.num_images == 0 {
            continue;
        }
        datagen::export_dataset(&spec, &a.out.join(name))?;
        println!("{name}: {} images", spec.num_images);
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(n) = a.iterations {
        cfg.training.max_iterations = Some(n);
    }
    cfg.validate()?;
    let train_set = match &a.dataset {
        Some(dir) => datagen::load_dataset(dir)?,
        None => datagen::gen_scenes(&cfg.dataset.split(Split::Train))?,
    };
    let val_spec = cfg.dataset.split(Split::Val);
    let val_set = if cfg.training.val_every > 0 && val_spec.num_images > 0 {
        datagen::gen_scenes(&val_spec)?
    } else {
        Vec::new()
    };

    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), cfg.to_json())?;
    let run = serde_json::json!({
        "version": rdad::VERSION,
        "seed": cfg.training.seed,
        "iterations": cfg.training.total_iterations(),
    });
    write_file(
        &a.out.join("run.json"),
        serde_json::to_string_pretty(&run).expect("json"),
    )?;

    let mut model = DetectionModel::new(&cfg.model_config())?;
    let start = Instant::now();
    let total = cfg.training.total_iterations();
    let log = training::train(&mut model, &train_set, &val_set, &cfg.training, &cfg.eval, |row| {
        let it = row.iteration + 1;
        if it % 100 == 0 || it == total || row.val_map.is_some() {
            let l = &row.losses;
            let val = row.val_map.map_or(String::new(), |m| format!(" val_map {m:.3}"));
            eprintln!(
                "[{it:>5}/{total}] {:>6.1}s loss {:.4} (rpn {:.4}/{:.4} rda {:.4}/{:.4}){val}",
                start.elapsed().as_secs_f32(),
                l.total,
                l.rpn_cls,
                l.rpn_reg,
                l.rda_cls,
                l.rda_reg
            );
        }
    })?;
    log.write_csv(&a.out.join("loss.csv"))?;
    checkpoint::save(&a.out.join("model.ckpt"), &model.store)?;
    summarize(&log);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn summarize(log: &TrainLog) {
    if let (Some(first), Some(last)) = (log.rows.first(), log.rows.last()) {
        println!(
            "{} iterations, loss {:.4} -> {:.4}",
            log.rows.len(),
            first.losses.total,
            last.losses.total
        );
    }
}

fn load_model(ckpt: &Path, config: Option<&Path>) -> CliResult<(RunConfig, DetectionModel)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let mut model = DetectionModel::new(&cfg.model_config())?;
    checkpoint::load(ckpt, &mut model.store)?;
    Ok((cfg, model))
}

fn detect(a: DetectArgs) -> CliResult {
    let (cfg, model) = load_model(&a.model, a.config.as_deref())?;
    let scenes: Vec<Scene> = match (&a.image, &a.dataset) {
        (Some(img), _) => vec![Scene {
            image_id: a.image_id,
            image: datagen::read_image(img)?,
            annotations: Vec::new(),
        }],
        (None, Some(dir)) => datagen::load_dataset(dir)?,
        (None, None) => return Err(invalid("one of --image or --dataset is required")),
    };
    let dets = detect_all(&model, &scenes, &cfg.eval)?;
    match &a.out {
        Some(path) => {
            evaluation::write_detections(path, &dets)?;
            eprintln!(
                "{} detections on {} images -> {}",
                dets.len(),
                scenes.len(),
                path.display()
            );
        }
        None => {
            for d in &dets {
                println!("{}", serde_json::to_string(d).expect("json"));
            }
        }
    }
    if let Some(dir) = &a.render {
        create_dir(dir)?;
        for s in &scenes {
            let mine: Vec<&Detection> = dets.iter().filter(|d| d.image_id == s.image_id).collect();
            let path = dir.join(format!("{:05}.ppm", s.image_id));
            write_file(
                &path,
                render::annotated_ppm(&s.image, &mine, cfg.eval.score_threshold.max(0.3)),
            )?;
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if a.classes == 0 {
        return Err(invalid("--classes must be positive"));
    }
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(invalid("--iou must be in (0, 1]"));
    }
    let dets = evaluation::read_detections(&a.dets)?;
    let gts = datagen::load_annotations(&a.gts)?;
    let report = evaluation::evaluate(&dets, &gts, a.classes, a.iou);
    print!("{}", evaluation::format_report(&report, &CLASS_NAMES));
    if a.coco {
        let c = evaluation::coco_sweep(&dets, &gts, a.classes);
        let f = |v: Option<f32>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        println!("mAP@[.5:.95] {}", f(c.map));
        println!("AP small {} medium {} large {}", f(c.small), f(c.medium), f(c.large));
        println!("AR@1 {} AR@10 {} AR@100 {}", f(c.ar[0]), f(c.ar[1]), f(c.ar[2]));
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    let base = load_config(a.config.as_deref())?;
    base.validate()?;
    if a.seeds.is_empty() {
        return Err(invalid("--seeds must not be empty"));
    }
    let arms: Vec<Arm> = match &a.arms {
        Some(names) => names
            .iter()
            .map(|n| find_arm(n).ok_or_else(|| invalid(format!("unknown arm {n:?}"))))
            .collect::<CliResult<_>>()?,
        None => match a.table {
            TableArg::One => table1_arms(),
            TableArg::Two => table2_arms(),
            TableArg::All => table1_arms().into_iter().chain(table2_arms()).collect(),
        },
    };
    let split = match a.split {
        SplitArg::Test => Split::Test,
        SplitArg::Occluded => Split::OccludedTest,
    };
    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), base.to_json())?;
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|i| a.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let maps: Vec<Option<f32>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let m = rdad::ablation::run_arm(&base, &arms[i], seed, split)?;
            eprintln!(
                "{} seed {seed}: {}",
                arms[i].name,
                m.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            Ok(m)
        })
        .collect::<rdad::Result<_>>()?;
    let results = arms
        .iter()
        .enumerate()
        .map(|(i, arm)| ArmResult {
            arm: arm.clone(),
            maps: maps[i * a.seeds.len()..(i + 1) * a.seeds.len()].to_vec(),
        })
        .collect();
    let report = AblationReport {
        seeds: a.seeds.clone(),
        results,
    };
    write_file(&a.out.join("ablation.csv"), report.to_csv())?;
    write_file(&a.out.join("ablation.md"), report.to_markdown())?;
    print!("{}", report.to_markdown());
    Ok(())
}

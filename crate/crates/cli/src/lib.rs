//! `protoid` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

mod config;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use protoid::classify::{classify_multiview, AggregationMethod};
use protoid::contrastive::{train, ContrastiveError};
use protoid::encoder::{load_image, save_checkpoint, ConvEncoder, EncoderError, EncoderHandle};
use protoid::eval::{
    emit_report, evaluate, ingest_dataset, load_manifest, load_queries, meshes_from_manifest, mine_similar_pairs,
    queries_from_manifest, save_manifest, sweep_multiview, sweep_viewpoints, unique_objects, Report, ReportFormat,
};
use protoid::geometry::primitives::sandbox_meshes;
use protoid::geometry::{expand_grid, load_mesh, Mesh, ViewGrid};
use protoid::prototypes::{build_set, load_set, save_set, SamplingMode, SamplingStrategy};
use protoid::renderer::render_batch;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

fn data(e: impl Display) -> CliError {
    CliError::Data(e.to_string())
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "protoid", version, about = "Identify 3D-printed objects by comparing photos with rendered CAD prototypes")]
struct Cli {
    /// Worker threads for rendering and encoding (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render every mesh from a viewpoint grid into <out>/<object_id>/<elev>_<azim>_<inplane>.png.
    Render(RenderArgs),
    /// Contrastively fine-tune an encoder on rendered view pairs.
    Train(TrainArgs),
    /// Build a classification set (one prototype per mesh).
    BuildSet(BuildSetArgs),
    /// Rank the objects of a set for one or more photos of the same object.
    Classify(ClassifyArgs),
    /// Evaluate top-1/top-5 accuracy on a manifest's labeled photos.
    Evaluate(EvaluateArgs),
    /// Sweep prototype view counts or query view counts.
    Sweep(SweepArgs),
    /// Build a manifest from a dataset folder.
    Ingest(IngestArgs),
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Folder of .stl/.obj meshes, or `sandbox` for the built-in shapes.
    #[arg(long)]
    meshes: String,
    #[arg(long)]
    out: PathBuf,
    /// Grid `ELEV,ELEV:AZ_STEP[:INPLANE]`.
    #[arg(long, default_value = "30,60:30")]
    grid: String,
    /// Image side in pixels (overrides the config).
    #[arg(long)]
    size: Option<u32>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    meshes: String,
    /// Folder of background images for compositing.
    #[arg(long)]
    backgrounds: Option<PathBuf>,
    /// Output checkpoint (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Starting encoder: a checkpoint path, or `conv` for a fresh network.
    #[arg(long, default_value = "conv")]
    init: String,
    /// Manifest whose objects are reserved for evaluation.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Disable rotation-shifted positives.
    #[arg(long)]
    no_rotation: bool,
    #[arg(long)]
    size: Option<u32>,
}

#[derive(Debug, Args)]
struct BuildSetArgs {
    #[arg(long)]
    meshes: String,
    /// Checkpoint path, `pixel:N`, or `external:DIM:SIZE:COMMAND`.
    #[arg(long)]
    encoder: String,
    /// `MODE:N[:ELEVS][:SEED]`, e.g. `uniform:24:30,60`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    set_id: Option<String>,
    #[arg(long)]
    size: Option<u32>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long = "image", required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    #[arg(long)]
    set: PathBuf,
    #[arg(long)]
    encoder: String,
    /// single | majority_vote | score_average
    #[arg(long)]
    agg: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Print the ranking as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    set: PathBuf,
    #[arg(long)]
    encoder: String,
    /// `similar` or `condition:TAG`.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    agg: Option<String>,
    /// Output folder for report.{txt,csv,json,png}.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKind {
    Viewpoints,
    Multiview,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    encoder: String,
    /// Classification set (multiview sweeps).
    #[arg(long)]
    set: Option<PathBuf>,
    /// Restrict queries to one condition tag.
    #[arg(long)]
    condition: Option<String>,
    /// Comma-separated prototype view counts (viewpoints) or query view counts (multiview).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    size: Option<u32>,
    /// Output folder for sweep.{csv,txt,png}.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("protoid: {e}");
            e.exit_code()
        }
        Err(_) => 3,
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?.finish(cli.seed, cli.workers);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Render(a) => cmd_render(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::BuildSet(a) => cmd_build_set(a, cfg),
        Command::Classify(a) => cmd_classify(a, cfg),
        Command::Evaluate(a) => cmd_evaluate(a, cfg),
        Command::Sweep(a) => cmd_sweep(a, cfg),
        Command::Ingest(a) => cmd_ingest(a, cfg),
    })
}

/// Loads every .stl/.obj directly inside `spec`, sorted by name, or the
/// built-in sandbox for `sandbox`.
pub fn load_meshes(spec: &str) -> Result<Vec<Mesh>, CliError> {
    if spec == "sandbox" {
        return Ok(sandbox_meshes());
    }
    let dir = Path::new(spec);
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read mesh folder {spec}: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("stl") || x.eq_ignore_ascii_case("obj"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no .stl/.obj meshes in {spec}")));
    }
    paths.iter().map(|p| load_mesh(p).map_err(data)).collect()
}

/// Resolves `conv` (a fresh network from the config) or any spec accepted
/// by [`EncoderHandle::from_spec`].
pub fn load_encoder(spec: &str, cfg: &RunConfig) -> Result<EncoderHandle, CliError> {
    if spec == "conv" {
        return Ok(ConvEncoder::new("conv", cfg.conv.clone()).into());
    }
    EncoderHandle::from_spec(spec).map_err(|e| match e {
        EncoderError::InvalidSpec(_) => usage(e),
        _ => data(e),
    })
}

fn parse_agg(s: &str) -> Result<AggregationMethod, CliError> {
    s.parse().map_err(|e| usage(format!("{e}")))
}

/// Applies the config's master seed to random strategies that do not name
/// their own seed.
fn parse_strategy(spec: &str, cfg: &RunConfig) -> Result<SamplingStrategy, CliError> {
    let mut s = SamplingStrategy::parse(spec).map_err(usage)?;
    if s.mode == SamplingMode::Random && spec.split(':').count() < 4 {
        s.seed = cfg.seed;
    }
    Ok(s)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(write_err(dir))
}

/// `<file>.run.json` next to a file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn cmd_render(a: RenderArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(s) = a.size {
        cfg.render.image_size_px = s;
    }
    let grid = ViewGrid::parse(&a.grid).map_err(usage)?;
    let views = expand_grid(&grid).map_err(usage)?;
    cfg.render.validate().map_err(usage)?;
    let meshes = load_meshes(&a.meshes)?;
    ensure_dir(&a.out)?;
    let mut n = 0;
    for m in &meshes {
        for r in render_batch(m, &views, &cfg.render).map_err(data)? {
            r.save_png(&a.out).map_err(|e| CliError::Internal(e.to_string()))?;
            n += 1;
        }
    }
    config::write_run_record(&a.out.join("run.json"), "render", &cfg)?;
    println!("rendered {n} views of {} meshes into {}", meshes.len(), a.out.display());
    Ok(())
}

fn load_backgrounds(dir: &Path) -> Result<Vec<image::RgbImage>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read backgrounds {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| load_image(p).map_err(data)).collect()
}

fn cmd_train(a: TrainArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(s) = a.size {
        cfg.render.image_size_px = s;
    }
    if let Some(s) = a.steps {
        cfg.train.epochs = 1;
        cfg.train.steps_per_epoch = Some(s);
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(t) = a.temperature {
        cfg.train.temperature = t;
    }
    if a.no_rotation {
        cfg.train.augmentations.rotation_positive = false;
    }
    let backgrounds = match &a.backgrounds {
        Some(d) => load_backgrounds(d)?,
        None => {
            cfg.train.augmentations.background_composite = false;
            Vec::new()
        }
    };
    cfg.train.validate().map_err(usage)?;
    let init = load_encoder(&a.init, &cfg)?;
    let meshes = load_meshes(&a.meshes)?;
    let holdout: Vec<String> = match &a.holdout {
        Some(p) => {
            let ids: BTreeSet<String> = load_manifest(p).map_err(data)?.into_iter().map(|r| r.id).collect();
            ids.into_iter().collect()
        }
        None => Vec::new(),
    };
    let (trained, log) = train(&init, &meshes, &cfg.train, &cfg.render, &backgrounds, &holdout).map_err(|e| match e {
        ContrastiveError::NonFinite(_) | ContrastiveError::NonFiniteAtStep { .. } => CliError::Internal(e.to_string()),
        ContrastiveError::InvalidConfig(_) => usage(e),
        _ => data(e),
    })?;
    ensure_parent(&a.out)?;
    save_checkpoint(&trained, &a.out).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut log_path = a.out.clone().into_os_string();
    log_path.push(".log.jsonl");
    log.write_jsonl(PathBuf::from(&log_path)).map_err(|e| CliError::Internal(e.to_string()))?;
    config::write_run_record(&sidecar(&a.out), "train", &cfg)?;
    let losses = log.losses();
    println!(
        "trained {} for {} steps: loss {:.4} -> {:.4}; checkpoint {}",
        trained.encoder_id(),
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_build_set(a: BuildSetArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(s) = a.size {
        cfg.render.image_size_px = s;
    }
    if let Some(s) = a.strategy {
        cfg.prototypes.strategy = s;
    }
    if a.set_id.is_some() {
        cfg.prototypes.set_id = a.set_id;
    }
    let strategy = parse_strategy(&cfg.prototypes.strategy, &cfg)?;
    cfg.render.validate().map_err(usage)?;
    let enc = load_encoder(&a.encoder, &cfg)?;
    let meshes = load_meshes(&a.meshes)?;
    let mut set = build_set(&meshes, &strategy, &enc, &cfg.render).map_err(data)?;
    if let Some(id) = &cfg.prototypes.set_id {
        set.set_id = id.clone();
    }
    ensure_parent(&a.out)?;
    save_set(&set, &a.out).map_err(|e| CliError::Internal(e.to_string()))?;
    config::write_run_record(&sidecar(&a.out), "build-set", &cfg)?;
    println!("built {} with {} prototypes ({}) -> {}", set.set_id, set.len(), set.encoder_id, a.out.display());
    Ok(())
}

fn cmd_classify(a: ClassifyArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(s) = &a.agg {
        cfg.classify.agg = Some(parse_agg(s)?);
    }
    if let Some(k) = a.top_k {
        cfg.classify.top_k = k;
    }
    let method = cfg.classify.agg.unwrap_or(if a.images.len() == 1 {
        AggregationMethod::Single
    } else {
        AggregationMethod::ScoreAverage
    });
    let set = load_set(&a.set).map_err(data)?;
    let enc = load_encoder(&a.encoder, &cfg)?;
    let images = a.images.iter().map(|p| load_image(p).map_err(data)).collect::<Result<Vec<_>, _>>()?;
    let query_ref = a.images.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
    let ranking = classify_multiview(&images, &set, &enc, method).map_err(data)?.with_query_ref(query_ref);
    let record = ranking.record(cfg.classify.top_k);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&record).expect("record serializes"));
    } else {
        println!("set {} | {} | {} image(s)", set.set_id, method, images.len());
        for (i, c) in record.candidates.iter().enumerate() {
            println!("{:>3}  {:<32} {:.6}", i + 1, c.object_id, c.score);
        }
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(s) = &a.agg {
        cfg.evaluate.agg = parse_agg(s)?;
    }
    enum Subset {
        Similar,
        Condition(String),
    }
    let subset = match a.subset.as_deref() {
        None => None,
        Some("similar") => Some(Subset::Similar),
        Some(s) => match s.strip_prefix("condition:") {
            Some(tag) if !tag.is_empty() => Some(Subset::Condition(tag.to_string())),
            _ => return Err(usage(format!("bad --subset {s:?}; expected similar or condition:TAG"))),
        },
    };
    let records = load_manifest(&a.manifest).map_err(data)?;
    let mut set = load_set(&a.set).map_err(data)?;
    let enc = load_encoder(&a.encoder, &cfg)?;
    let mut queries = match &subset {
        Some(Subset::Condition(tag)) => queries_from_manifest(&records, Some(tag)),
        _ => queries_from_manifest(&records, None),
    };
    if let Some(Subset::Similar) = subset {
        let ids = unique_objects(&mine_similar_pairs(&set, cfg.evaluate.similar_pairs).map_err(data)?);
        set = set.subset(&ids).map_err(data)?;
        let keep: BTreeSet<&String> = ids.iter().collect();
        queries.retain(|q| keep.contains(&q.true_object_id));
    }
    if queries.is_empty() {
        return Err(CliError::Data("no query photos selected".into()));
    }
    let mut report = evaluate(&queries, &set, &enc, cfg.evaluate.agg).map_err(data)?;
    report.config_digest = cfg.digest();
    ensure_dir(&a.out)?;
    for (name, fmt) in [
        ("report.txt", ReportFormat::TextTable),
        ("report.csv", ReportFormat::Csv),
        ("report.png", ReportFormat::PlotPng),
    ] {
        emit_report(Report::Eval(&report), fmt, a.out.join(name)).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let json_path = a.out.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")
        .map_err(write_err(&json_path))?;
    config::write_run_record(&a.out.join("run.json"), "evaluate", &cfg)?;
    let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
    println!(
        "{} queries: top-1 {} top-5 {} -> {}",
        report.n_queries,
        pct(report.top1),
        pct(report.top5),
        a.out.display()
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    if let Some(s) = a.size {
        cfg.render.image_size_px = s;
    }
    if let Some(t) = a.trials {
        cfg.sweep.trials = t;
    }
    if let Some(v) = a.values.clone() {
        match a.kind {
            SweepKind::Viewpoints => cfg.sweep.n_values = v,
            SweepKind::Multiview => cfg.sweep.m_values = v,
        }
    }
    let records = load_manifest(&a.manifest).map_err(data)?;
    let enc = load_encoder(&a.encoder, &cfg)?;
    let queries = load_queries(&queries_from_manifest(&records, a.condition.as_deref())).map_err(data)?;
    if queries.is_empty() {
        return Err(CliError::Data("no query photos selected".into()));
    }
    let table = match a.kind {
        SweepKind::Viewpoints => {
            let strategies = cfg
                .sweep
                .strategies
                .iter()
                .map(|s| parse_strategy(s, &cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let meshes = meshes_from_manifest(&records).map_err(data)?;
            sweep_viewpoints(&meshes, &queries, &enc, &cfg.render, &cfg.sweep.n_values, &strategies, cfg.sweep.trials)
        }
        SweepKind::Multiview => {
            let set_path = a.set.as_ref().ok_or_else(|| usage("--set is required for --kind multiview"))?;
            let set = load_set(set_path).map_err(data)?;
            sweep_multiview(&queries, &set, &enc, &cfg.sweep.m_values, &cfg.sweep.methods, cfg.sweep.trials, cfg.seed)
        }
    }
    .map_err(|e| match e {
        protoid::eval::EvalError::InvalidSweep(_) => usage(e),
        _ => data(e),
    })?;
    ensure_dir(&a.out)?;
    for (name, fmt) in [
        ("sweep.csv", ReportFormat::Csv),
        ("sweep.txt", ReportFormat::TextTable),
        ("sweep.png", ReportFormat::PlotPng),
    ] {
        emit_report(Report::Sweep(&table), fmt, a.out.join(name)).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    config::write_run_record(&a.out.join("run.json"), "sweep", &cfg)?;
    print!("{}", protoid::eval::report::sweep_text(&table));
    Ok(())
}

fn cmd_ingest(a: IngestArgs, cfg: RunConfig) -> Result<(), CliError> {
    let records = ingest_dataset(&a.dataset).map_err(data)?;
    ensure_parent(&a.out)?;
    save_manifest(&records, &a.out).map_err(|e| CliError::Internal(e.to_string()))?;
    config::write_run_record(&sidecar(&a.out), "ingest", &cfg)?;
    let photos: usize = records.iter().map(|r| r.photos.len()).sum();
    println!("{} records, {photos} photos -> {}", records.len(), a.out.display());
    Ok(())
}

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dreamlab_client::{RemoteBlackBox, RetryPolicy};
use dreamlab_core::baselines::{kennen_star_train, random_expected_accuracy, KennenStarModel};
use dreamlab_core::datasets::{DatasetFormat, SyntheticSpec};
use dreamlab_core::dream::{self, Prediction, TrainedDream};
use dreamlab_core::evalkit::{
    export_features, leave_one_domain_out, render_summary, write_reports, AuditLog, GapReport, LodoConfig, Method,
    ModelPool,
};
use dreamlab_core::modelzoo::{
    build_zoo, load_model, load_zoo, ArchConfig, BuildOptions, TrainBudget, ZooManifest, MANIFEST_FILE,
};
use dreamlab_core::probing::{harvest, query_black_box, BlackBox, OutputMatrix, QuerySet};
use dreamlab_core::schema::{AttributeSchema, SplitCounts, SplitRole};
use dreamlab_server::Faults;

use crate::config::{load_dream_config, DataConfig, DomainSource, ExperimentConfig, FileData};
use crate::invalid;
use crate::stages::{self, Provenance};

#[derive(Debug, Parser)]
#[command(name = "dream-lab", version = crate::VERSION, about = "Black-box model attribute inference across domains")]
pub struct Cli {
    /// Threads for zoo training and probing.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train or serve white-box models.
    #[command(subcommand)]
    Zoo(ZooCmd),
    /// Build query sets and collect model outputs.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Train DREAM or infer attributes of a black box.
    #[command(subcommand)]
    Dream(DreamCmd),
    /// KENNEN* and random-guess baselines.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Evaluation protocols.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run every stage of an experiment config, reusing cached stages.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ZooCmd {
    Build(ZooBuild),
    /// Expose one zoo model over HTTP as a probability-only black box.
    Serve {
        #[arg(long)]
        zoo_dir: PathBuf,
        /// Model id; defaults to the first test model.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Answer the first N requests with 503.
        #[arg(long, default_value_t = 0)]
        fail_first: usize,
    },
}

/// Train a model zoo, either from an experiment config or from flags.
#[derive(Debug, Args)]
pub struct ZooBuild {
    /// Experiment config; its schema, data and zoo sections are used.
    #[arg(long, conflicts_with_all = ["schema", "domains", "synthetic"])]
    config: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// NAME=PATH pairs, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "synthetic")]
    domains: Vec<String>,
    #[arg(long, value_enum, default_value = "imagedir")]
    format: FormatArg,
    #[arg(long, default_value_t = 28)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Generate this many synthetic domains instead of loading images.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Models per domain as TRAIN,VAL,TEST.
    #[arg(long, default_value = "120,24,24")]
    counts: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training seeds per attribute combination.
    #[arg(long, default_value_t = 5)]
    seeds_per_combo: u32,
    #[arg(long)]
    disjoint_combos: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory; defaults to the stage cache for --config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after this many new models (the build resumes on the next call).
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FormatArg {
    Idx,
    Imagedir,
}

#[derive(Debug, Subcommand)]
pub enum ProbeCmd {
    /// Draw a fixed query set from a zoo's domain datasets.
    BuildQueries {
        #[arg(long)]
        zoo_dir: PathBuf,
        /// Source domains; defaults to all.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output stem; writes STEM.drm and STEM.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect output vectors of zoo models on a query set.
    Harvest {
        #[arg(long)]
        zoo_dir: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "train")]
        roles: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    /// Query set the model was trained on.
    #[arg(long)]
    queries: PathBuf,
    /// Base URL of a remote black box.
    #[arg(long, conflicts_with = "target_weights", required_unless_present = "target_weights")]
    target: Option<String>,
    /// Weight file of a zoo model (ZOO/weights/ID.drm).
    #[arg(long)]
    target_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    retries: usize,
}

#[derive(Debug, Subcommand)]
pub enum DreamCmd {
    Train {
        /// Output matrix stem from `probe harvest`.
        #[arg(long)]
        outputs: PathBuf,
        /// DREAM config, bare or as the `dream` section of an experiment.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f32>,
    },
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Write the generator features of every output row as CSV.
    ExportFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum BaselineCmd {
    KennenTrain {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    KennenInfer {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Expected accuracy of uniform guessing.
    Random {
        #[arg(long)]
        schema: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Hold out each domain in turn and score every method on it.
    Lodo(LodoArgs),
}

#[derive(Debug, Args)]
pub struct LodoArgs {
    /// A zoo directory, or a directory of zoo directories.
    #[arg(long)]
    zoo_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "dream,kennen,random")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    /// Experiment config supplying queries, dream and eval settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n_queries: usize,
    #[arg(long, default_value_t = 1)]
    query_seed: u64,
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f32>,
}

pub fn execute(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(invalid(anyhow!("--workers must be at least 1")));
    }
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    match cli.command {
        Command::Zoo(ZooCmd::Build(args)) => zoo_build(args, cli.workers),
        Command::Zoo(ZooCmd::Serve {
            zoo_dir,
            model,
            addr,
            fail_first,
        }) => zoo_serve(&zoo_dir, model.as_deref(), addr, fail_first),
        Command::Probe(cmd) => probe(cmd),
        Command::Dream(cmd) => dream_cmd(cmd),
        Command::Baseline(cmd) => baseline(cmd),
        Command::Eval(EvalCmd::Lodo(args)) => eval_lodo(args),
        Command::Run { config } => run(&config, cli.workers).map(|_| ()),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(invalid)
}

fn parse_counts(s: &str) -> Result<SplitCounts> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| invalid(anyhow!("--counts {s:?}: {e}")))?;
    match parts[..] {
        [train, val, test] => Ok(SplitCounts { train, val, test }),
        _ => Err(invalid(anyhow!("--counts takes TRAIN,VAL,TEST, got {s:?}"))),
    }
}

fn parse_roles(items: &[String]) -> Result<Vec<SplitRole>> {
    items
        .iter()
        .map(|r| match r.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(SplitRole::Train),
            "val" => Ok(SplitRole::Val),
            "test" => Ok(SplitRole::Test),
            other => Err(invalid(anyhow!("unknown split role {other:?}"))),
        })
        .collect()
}

fn parse_methods(items: &[String]) -> Result<Vec<Method>> {
    items
        .iter()
        .map(|m| m.parse::<Method>().map_err(|e| invalid(anyhow!(e))))
        .collect()
}

/// Builds an experiment config from `zoo build` flags.
fn flags_config(a: &ZooBuild) -> Result<ExperimentConfig> {
    let schema = a
        .schema
        .clone()
        .ok_or_else(|| invalid(anyhow!("either --config or --schema is required")))?;
    let data = match a.synthetic {
        Some(n) => DataConfig::Synthetic(SyntheticSpec {
            n_domains: n,
            classes: 7,
            n_per_class: 60,
            image_size: 16,
            style_shift: 1.0,
            seed: a.seed,
        }),
        None => {
            if a.domains.is_empty() {
                return Err(invalid(anyhow!("either --domains or --synthetic is required")));
            }
            let domains = a
                .domains
                .iter()
                .map(|d| {
                    let (name, path) = d
                        .split_once('=')
                        .ok_or_else(|| invalid(anyhow!("--domains entry {d:?} is not NAME=PATH")))?;
                    Ok(DomainSource {
                        name: name.trim().to_string(),
                        format: match a.format {
                            FormatArg::Idx => DatasetFormat::Idx,
                            FormatArg::Imagedir => DatasetFormat::Imagedir,
                        },
                        path: PathBuf::from(path.trim()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            DataConfig::Files(FileData {
                domains,
                image_size: (a.image_size, a.image_size),
                channels: a.channels,
                classes: None,
            })
        }
    };
    let mut budget = TrainBudget::default();
    if let Some(e) = a.epochs {
        budget.epochs = e;
    }
    let cfg = ExperimentConfig {
        schema,
        data,
        zoo: crate::config::ZooConfig {
            counts: parse_counts(&a.counts)?,
            seeds: a.seeds_per_combo,
            sample_seed: a.seed,
            disjoint_combos: a.disjoint_combos,
            arch: ArchConfig::default(),
            budget,
        },
        queries: crate::config::QueryConfig { n: 100, seed: 1 },
        dream: Default::default(),
        eval: crate::config::EvalConfig {
            trials: 1,
            lambda_grid: dream::LAMBDA_GRID.to_vec(),
            methods: vec![Method::Random],
            targets: Vec::new(),
            score_roles: vec![SplitRole::Test],
            gap_home: None,
        },
        out_dir: PathBuf::from("runs"),
        workers: 1,
    };
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn zoo_build(a: ZooBuild, workers: usize) -> Result<()> {
    let from_file = a.config.is_some();
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => flags_config(&a)?,
    };
    if let Some(e) = a.epochs {
        cfg.zoo.budget.epochs = e;
    }
    cfg.workers = workers;
    let datasets = cfg.data.load().context("zoo build")?;
    let dir = match (&a.out, from_file, a.limit) {
        (None, true, None) => {
            let stage = stages::zoo_stage(&cfg, &datasets)?;
            println!(
                "zoo: {} {}",
                if stage.cached { "cached" } else { "built" },
                stage.dir.display()
            );
            return Ok(());
        }
        (Some(out), _, _) => out.clone(),
        (None, _, _) => {
            return Err(invalid(anyhow!(
                "--out is required unless --config is given without --limit"
            )))
        }
    };
    let split = stages::sample_split(&cfg)?;
    let schema = cfg.load_schema()?;
    let report = build_zoo(
        &dir,
        &split,
        &schema,
        &datasets,
        &cfg.zoo.arch,
        &cfg.zoo.budget,
        &BuildOptions {
            workers,
            limit: a.limit,
        },
    )
    .context("zoo build")?;
    stages::write_data_file(&dir, &cfg.data)?;
    let complete = report.trained + report.failed + report.skipped == split.len();
    if complete {
        stages::write_provenance(
            &dir,
            &Provenance {
                stage: "zoo".into(),
                key: String::new(),
                config_hash: stages::config_hash(&cfg),
                git_describe: stages::git_describe().into(),
                upstream: Vec::new(),
            },
        )?;
    }
    println!(
        "zoo: trained {} failed {} already present {} -> {}",
        report.trained,
        report.failed,
        report.skipped,
        dir.display()
    );
    Ok(())
}

fn zoo_serve(zoo_dir: &Path, model: Option<&str>, addr: SocketAddr, fail_first: usize) -> Result<()> {
    let manifest = ZooManifest::load(zoo_dir).map_err(invalid)?;
    let id = match model {
        Some(id) => id.to_string(),
        None => manifest
            .ok_records()
            .find(|r| r.role == SplitRole::Test)
            .or_else(|| manifest.ok_records().next())
            .map(|r| r.id.clone())
            .ok_or_else(|| anyhow!("{} holds no trained model", zoo_dir.display()))?,
    };
    let trained = load_model(zoo_dir, &id)?;
    let faults = if fail_first > 0 {
        Faults::fail_next(fail_first, dreamlab_server::StatusCode::SERVICE_UNAVAILABLE)
    } else {
        Faults::none()
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("serving {id} on http://{}", listener.local_addr()?);
        let app = dreamlab_server::router(Arc::new(trained), faults);
        dreamlab_server::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn zoo_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST_FILE).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))
        .map_err(invalid)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(invalid(anyhow!("{} holds no zoo manifest", root.display())));
    }
    Ok(dirs)
}

fn zoo_datasets(dirs: &[PathBuf]) -> Result<Vec<dreamlab_core::datasets::DomainDataset>> {
    let mut out: Vec<dreamlab_core::datasets::DomainDataset> = Vec::new();
    for d in dirs {
        for ds in stages::read_data_file(d).map_err(invalid)?.load()? {
            if !out.iter().any(|o| o.name == ds.name) {
                out.push(ds);
            }
        }
    }
    Ok(out)
}

fn probe(cmd: ProbeCmd) -> Result<()> {
    match cmd {
        ProbeCmd::BuildQueries {
            zoo_dir,
            domains,
            n,
            seed,
            out,
        } => {
            let data = zoo_datasets(&[zoo_dir])?;
            let picked: Vec<_> = data
                .iter()
                .filter(|d| domains.is_empty() || domains.contains(&d.name))
                .collect();
            if picked.is_empty() {
                return Err(invalid(anyhow!("none of {domains:?} is a zoo domain")));
            }
            let q = QuerySet::build(&picked, n, seed)?;
            q.save(&out)?;
            println!("queries: {} images, hash {}", q.len(), q.hash);
        }
        ProbeCmd::Harvest {
            zoo_dir,
            queries,
            domains,
            roles,
            out,
        } => {
            let roles = parse_roles(&roles)?;
            let q = QuerySet::load(&queries).map_err(invalid)?;
            let (manifest, models) = load_zoo(&zoo_dir)?;
            let picked: Vec<_> = manifest
                .ok_records()
                .zip(&models)
                .filter(|(r, m)| roles.contains(&r.role) && (domains.is_empty() || domains.contains(&m.spec.domain)))
                .map(|(_, m)| m)
                .collect();
            if picked.is_empty() {
                bail!("no models match the requested domains and roles");
            }
            let o = harvest(&picked, &q)?;
            o.save(&out)?;
            println!("outputs: {} rows of width {}", o.len(), o.width());
        }
    }
    Ok(())
}

fn load_outputs(stem: &Path) -> Result<OutputMatrix> {
    OutputMatrix::load(stem).map_err(invalid)
}

fn load_schema(path: &Path) -> Result<AttributeSchema> {
    AttributeSchema::load(path).map_err(invalid)
}

fn target_vector(t: &TargetArgs, query_hash: &str) -> Result<Vec<f32>> {
    let q = QuerySet::load(&t.queries).map_err(invalid)?;
    let bb: Box<dyn BlackBox> = match (&t.target, &t.target_weights) {
        (Some(url), _) => Box::new(
            RemoteBlackBox::new(
                url,
                RetryPolicy {
                    retries: t.retries,
                    ..Default::default()
                },
            )
            .map_err(invalid)?,
        ),
        (None, Some(w)) => {
            let id = w
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| invalid(anyhow!("{}: not a weight file", w.display())))?;
            let zoo = w
                .parent()
                .and_then(Path::parent)
                .ok_or_else(|| invalid(anyhow!("{}: expected ZOO/weights/ID.drm", w.display())))?;
            Box::new(load_model(zoo, id)?)
        }
        (None, None) => return Err(invalid(anyhow!("--target or --target-weights is required"))),
    };
    Ok(query_black_box(bb.as_ref(), &q, query_hash)?)
}

fn print_prediction(p: &Prediction) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(p)?);
    Ok(())
}

fn dream_cmd(cmd: DreamCmd) -> Result<()> {
    match cmd {
        DreamCmd::Train {
            outputs,
            config,
            schema,
            out,
            lambda,
        } => {
            let mut cfg = load_dream_config(&config).map_err(invalid)?;
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            cfg.validate().map_err(invalid)?;
            let o = load_outputs(&outputs)?;
            let schema = load_schema(&schema)?;
            let m = dream::train(&o, &schema, &cfg)?;
            m.save(&out)?;
            println!("dream: {} epochs ({:?}) -> {}", m.log.len(), m.stop, out.display());
        }
        DreamCmd::Infer { model, target } => {
            let m = TrainedDream::load(&model).map_err(invalid)?;
            let v = target_vector(&target, &m.query_hash)?;
            print_prediction(&m.infer(&v)?)?;
        }
        DreamCmd::ExportFeatures { model, outputs, out } => {
            let m = TrainedDream::load(&model).map_err(invalid)?;
            let o = load_outputs(&outputs)?;
            export_features(&m.generator, &o, &out)?;
            println!("features: {} rows -> {}", o.len(), out.display());
        }
    }
    Ok(())
}

fn baseline(cmd: BaselineCmd) -> Result<()> {
    match cmd {
        BaselineCmd::KennenTrain {
            outputs,
            config,
            schema,
            out,
        } => {
            let cfg = load_dream_config(&config).map_err(invalid)?;
            let o = load_outputs(&outputs)?;
            let schema = load_schema(&schema)?;
            let m = kennen_star_train(&o, &schema, &cfg)?;
            m.save(&out)?;
            println!("kennen*: {} epochs -> {}", m.log.len(), out.display());
        }
        BaselineCmd::KennenInfer { model, target } => {
            let m = KennenStarModel::load(&model).map_err(invalid)?;
            let v = target_vector(&target, &m.query_hash)?;
            print_prediction(&m.predict(&v)?)?;
        }
        BaselineCmd::Random { schema } => {
            let s = load_schema(&schema)?;
            let r = random_expected_accuracy(&s);
            let names = s.shorts();
            for (n, v) in names.iter().zip(&r.per_attribute) {
                println!("{n:>8} {v:.2}");
            }
            println!("{:>8} {:.2}", "Avg", r.average);
        }
    }
    Ok(())
}

fn eval_lodo(a: LodoArgs) -> Result<()> {
    let dirs = zoo_dirs(&a.zoo_dir)?;
    let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    let pool = ModelPool::load(&refs).map_err(invalid)?;
    let datasets = zoo_datasets(&dirs)?;
    let mut lodo = match &a.config {
        Some(p) => load_config(p)?.lodo(),
        None => LodoConfig {
            n_queries: a.n_queries,
            query_seed: a.query_seed,
            ..Default::default()
        },
    };
    lodo.trials = a.trials;
    lodo.methods = parse_methods(&a.methods)?;
    if !a.targets.is_empty() {
        lodo.targets = a.targets.clone();
    }
    if !a.lambda_grid.is_empty() {
        lodo.lambda_grid = a.lambda_grid.clone();
    }
    lodo.validate().map_err(invalid)?;
    let mut audit = AuditLog::new();
    let reports = leave_one_domain_out(&pool, &datasets, &lodo, &mut audit)?;
    write_reports(&a.out, &reports)?;
    audit.save(&a.out.join("audit.jsonl"))?;
    print!("{}", render_summary(&reports));
    Ok(())
}

/// Runs the zoo and eval stages of `config`, then publishes the report to
/// `<out_dir>/report`. Returns that directory.
pub fn run(config: &Path, workers: usize) -> Result<PathBuf> {
    let mut cfg = load_config(config)?;
    if workers > 1 {
        cfg.workers = workers;
    }
    let datasets = cfg.data.load().context("loading datasets")?;
    let zoo = stages::zoo_stage(&cfg, &datasets)?;
    println!(
        "zoo: {} ({})",
        if zoo.cached { "cached" } else { "done" },
        zoo.dir.display()
    );
    let eval = stages::eval_stage(&cfg, &zoo, &datasets)?;
    println!(
        "eval: {} ({})",
        if eval.cached { "cached" } else { "done" },
        eval.dir.display()
    );
    let report = cfg.out_dir.join("report");
    stages::publish(&eval.dir, &report)?;
    print!("{}", std::fs::read_to_string(report.join("summary.txt"))?);
    if let Ok(text) = std::fs::read_to_string(report.join("gap.json")) {
        let gap: GapReport = serde_json::from_str(&text)?;
        println!(
            "KENNEN* from {}: in-domain {:.2}, other domains {:.2}, gap {:.2}",
            gap.home, gap.in_domain.average, gap.cross_domain.average, gap.gap
        );
    }
    println!("report: {}", report.display());
    Ok(report)
}

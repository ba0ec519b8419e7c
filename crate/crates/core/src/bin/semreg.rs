use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semreg::instances::{extract_instances_with_report, CategoryConfig};
use semreg::io::{self, DatasetManifest, RunConfig};
use semreg::nets::Model;
use semreg::pipeline::{self, EvalPair};
use semreg::training::{self, generate_scene_pair, split_seed, synthetic_pairs};
use semreg::{Error, Result};

/// Semantic-instance matching and registration of labeled LiDAR scans.
#[derive(Parser, Debug)]
#[command(name = "semreg", version, arg_required_else_help = true)]
struct Cli {
    /// key = value run configuration (defaults when absent).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model weights (SGM1 checkpoint).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    output: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scan pairs with a manifest.
    Synth {
        /// Number of pairs (default: eval.pairs).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Cluster one labeled scan into instances.
    Extract { scan: PathBuf, labels: PathBuf },
    /// Match the instances of two labeled scans.
    Match {
        scan_a: PathBuf,
        labels_a: PathBuf,
        scan_b: PathBuf,
        labels_b: PathBuf,
    },
    /// Register scan A onto scan B.
    Register {
        scan_a: PathBuf,
        labels_a: PathBuf,
        scan_b: PathBuf,
        labels_b: PathBuf,
    },
    /// Train on synthetic pairs and write a checkpoint.
    Train,
    /// Evaluate on a manifest, or on held-out synthetic pairs without one.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: RunConfig,
    categories: CategoryConfig,
    seed: u64,
    output: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Ctx {
    fn model(&self) -> Result<Model> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::validation("--checkpoint is required"))?;
        let mut model = Model::new(self.cfg.model.clone(), 0)?;
        io::load_checkpoint(&mut model, path)?;
        Ok(model)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output).map_err(|e| io_err(&self.output, e))?;
        Ok(self.output.join(name))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn labeled(scan: &Path, labels: &Path) -> Result<semreg::instances::SemanticPointCloud> {
    io::read_labeled_scan(scan, labels)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::validation("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let categories = match &cfg.categories {
        Some(p) => CategoryConfig::load(p)?,
        None => CategoryConfig::default(),
    };
    if categories.num_categories() != cfg.model.num_categories {
        return Err(Error::validation(format!(
            "category table has {} classes but model.num_categories = {}",
            categories.num_categories(),
            cfg.model.num_categories
        )));
    }
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(cfg.train.seed),
        cfg,
        categories,
        output: cli.output,
        checkpoint: cli.checkpoint,
    };
    match cli.command {
        Command::Synth { count } => synth(&ctx, count.unwrap_or(ctx.cfg.eval_pairs)),
        Command::Extract { scan, labels } => extract(&ctx, &scan, &labels),
        Command::Match {
            scan_a,
            labels_a,
            scan_b,
            labels_b,
        } => match_cmd(&ctx, &scan_a, &labels_a, &scan_b, &labels_b),
        Command::Register {
            scan_a,
            labels_a,
            scan_b,
            labels_b,
        } => register(&ctx, &scan_a, &labels_a, &scan_b, &labels_b),
        Command::Train => train(&ctx),
        Command::Eval { manifest } => eval(&ctx, manifest.as_deref()),
    }
}

fn synthetic_eval_pair(ctx: &Ctx, i: usize) -> Result<EvalPair> {
    let seed = split_seed(ctx.seed, 2).wrapping_add(i as u64);
    let p = generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(seed), &ctx.cfg.generator)?;
    Ok(EvalPair {
        name: format!("synthetic_{i:06}"),
        x: p.x,
        y: p.y,
        gt: p.gt,
    })
}

fn synth(ctx: &Ctx, count: usize) -> Result<()> {
    let pairs: Vec<_> = (0..count)
        .map(|i| {
            let seed = split_seed(ctx.seed, 2).wrapping_add(i as u64);
            generate_scene_pair(&mut ChaCha8Rng::seed_from_u64(seed), &ctx.cfg.generator)
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(&ctx.output).map_err(|e| io_err(&ctx.output, e))?;
    let manifest = io::write_synthetic_dataset(&ctx.output, &pairs)?;
    println!("wrote {count} pairs, manifest {}", manifest.display());
    Ok(())
}

fn extract(ctx: &Ctx, scan: &Path, labels: &Path) -> Result<()> {
    let cloud = labeled(scan, labels)?;
    let (instances, report) = extract_instances_with_report(&cloud, &ctx.categories, ctx.cfg.model.shape_points)?;
    let mut s = String::from("# id category name cx cy cz points\n");
    for inst in &instances {
        let c = inst.centroid;
        let name = &ctx.categories.category(inst.category_index).name;
        writeln!(
            s,
            "{} {} {} {:.6} {:.6} {:.6} {}",
            inst.id, inst.category_index, name, c.x, c.y, c.z, inst.point_count
        )
        .expect("writing to a string");
    }
    let path = ctx.out("instances.txt")?;
    write_text(&path, &s)?;
    println!(
        "{} instances ({} ignored points, {} unknown-label points, {} small clusters) -> {}",
        instances.len(),
        report.ignored_points,
        report.unknown_count(),
        report.small_clusters,
        path.display()
    );
    Ok(())
}

fn match_cmd(ctx: &Ctx, sa: &Path, la: &Path, sb: &Path, lb: &Path) -> Result<()> {
    let model = ctx.model()?;
    let (x, y) = (labeled(sa, la)?, labeled(sb, lb)?);
    let k = model.config.shape_points;
    let ix = semreg::instances::extract_instances(&x, &ctx.categories, k)?;
    let iy = semreg::instances::extract_instances(&y, &ctx.categories, k)?;
    if ix.is_empty() || iy.is_empty() {
        return Err(Error::validation(format!(
            "no instances to match ({} and {})",
            ix.len(),
            iy.len()
        )));
    }
    let (c, iters) = pipeline::match_instances(&ix, &iy, &model, &ctx.cfg.registration)?;
    let path = ctx.out("correspondences.txt")?;
    c.write(&path)?;
    println!("{} correspondences, sinkhorn {iters} iterations -> {}", c.len(), path.display());
    Ok(())
}

fn register(ctx: &Ctx, sa: &Path, la: &Path, sb: &Path, lb: &Path) -> Result<()> {
    let model = ctx.model()?;
    let (x, y) = (labeled(sa, la)?, labeled(sb, lb)?);
    let r = pipeline::register_pair(&x, &y, &model, &ctx.categories, &ctx.cfg.registration);
    let diag = serde_json::to_string_pretty(&r.diagnostics).expect("diagnostics serialize") + "\n";
    write_text(&ctx.out("diagnostics.json")?, &diag)?;
    r.correspondences.write(&ctx.out("correspondences.txt")?)?;
    if let Some(reason) = &r.diagnostics.skipped {
        return Err(Error::validation(format!("registration skipped: {reason}")));
    }
    if let Some(err) = &r.diagnostics.error {
        return Err(Error::validation(format!("registration failed: {err}")));
    }
    let fine = r.fine.expect("fine transform present when neither skipped nor failed");
    let path = ctx.out("transform.txt")?;
    write_text(&path, &io::format_transform(&fine))?;
    println!(
        "{} correspondences, icp converged {:?} -> {}",
        r.diagnostics.correspondences,
        r.diagnostics.icp_converged,
        path.display()
    );
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    let mut tcfg = c.train.clone();
    tcfg.seed = ctx.seed;
    let mut model = Model::new(c.model.clone(), ctx.seed)?;
    let make = |count, split| {
        synthetic_pairs(
            count,
            split_seed(ctx.seed, split),
            &c.generator,
            &ctx.categories,
            &model,
            tcfg.graph_k,
            tcfg.beta,
        )
    };
    let pairs = make(c.train_pairs, 0)?;
    let validation = make(c.validation_pairs, 1)?;
    if pairs.is_empty() {
        return Err(Error::validation("no pairs"));
    }
    println!("training on {} pairs, validating on {}", pairs.len(), validation.len());
    let history = training::train(&mut model, &pairs, &validation, &tcfg, |r| {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
        println!(
            "epoch {:3}  loss {:.4}  val IP {}  val IR {}  lr {:.3e}",
            r.epoch,
            r.mean_loss,
            opt(r.val_ip),
            opt(r.val_ir),
            r.lr
        );
    })?;
    let ckpt = ctx.out("model.sgm")?;
    io::save_checkpoint(&model, &ckpt)?;
    let hist: String = history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history serializes") + "\n")
        .collect();
    write_text(&ctx.out("history.jsonl")?, &hist)?;
    let mut used = c.clone();
    used.train.seed = ctx.seed;
    write_text(&ctx.out("config.txt")?, &used.to_text())?;
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

fn eval(ctx: &Ctx, manifest: Option<&Path>) -> Result<()> {
    let model = ctx.model()?;
    let reg = &ctx.cfg.registration;
    let report = match manifest {
        Some(path) => {
            let m = DatasetManifest::load(path)?;
            let pairs = m.pairs();
            if pairs.is_empty() {
                return Err(Error::validation("no pairs"));
            }
            let poses = m.read_all_poses()?;
            pipeline::evaluate_with(
                pairs.len(),
                |i| m.load_pair(&pairs[i], &poses, &ctx.cfg.velo_to_cam),
                &model,
                &ctx.categories,
                reg,
            )
        }
        None => {
            if ctx.cfg.eval_pairs == 0 {
                return Err(Error::validation("no pairs"));
            }
            pipeline::evaluate_with(
                ctx.cfg.eval_pairs,
                |i| synthetic_eval_pair(ctx, i),
                &model,
                &ctx.categories,
                reg,
            )
        }
    };
    std::fs::create_dir_all(&ctx.output).map_err(|e| io_err(&ctx.output, e))?;
    report.write(&ctx.output)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

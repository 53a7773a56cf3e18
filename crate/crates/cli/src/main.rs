mod ablate;
mod config;
mod run;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dropsplat::autograd::{finite_diff_check, LossSpec};
use dropsplat::dataset::{load_cloud, random_test_scene, save_cloud, save_png, save_scene, Split};
use dropsplat::regularizer::sample_drop_mask;
use dropsplat::render::{render, RenderSettings};
use dropsplat::rng::{stream, Stream};
use dropsplat::trainer::{evaluate, train};
use dropsplat::Image;
use rand::Rng;

use config::{SceneArgs, TrainArgs};
use run::HistogramSpec;

#[derive(Parser)]
#[command(name = "dropsplat", version, about = "Gaussian splatting with random Gaussian dropping")]
struct Cli {
    /// Worker threads for rendering (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train(TrainCmd),
    /// Sweep the regularizer ablations over several seeds.
    Ablate(AblateCmd),
    /// Compare analytic gradients with finite differences on random scenes.
    GradCheck(GradCheckCmd),
    /// Render a saved cloud from the scene cameras.
    Render(RenderCmd),
    /// Report PSNR and SSIM of a saved cloud.
    Eval(EvalCmd),
    /// Train and export the count of high-gradient Gaussians per depth bin.
    Histogram(HistogramCmd),
    /// Write a synthetic scene and its ground-truth cloud to disk.
    Generate(GenerateCmd),
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Run directory (default: runs/<variant>_seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5e-4)]
    threshold: f64,
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Tables to sweep: 5 (drop rate and schedule), 6 (selective), 7 (L1).
    #[arg(long, value_delimiter = ',', default_values_t = vec![5u8, 6, 7])]
    tables: Vec<u8>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckCmd {
    #[arg(long, default_value_t = 5)]
    gaussians: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Also hold a random drop plan of this rate fixed during the check.
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value_t = 1)]
    sh_degree: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct RenderCmd {
    #[arg(long)]
    cloud: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    cloud: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct HistogramCmd {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 5e-4)]
    threshold: f64,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateCmd {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::GradCheck(c) => cmd_grad_check(c),
        Command::Render(c) => cmd_render(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Histogram(c) => cmd_histogram(c),
        Command::Generate(c) => cmd_generate(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn train_and_write(
    name: &str,
    scene_args: &SceneArgs,
    args: &TrainArgs,
    out: Option<PathBuf>,
    hist: HistogramSpec,
) -> anyhow::Result<PathBuf> {
    let file = config::load_file(args.config.as_deref())?;
    let cfg = config::effective(&file, scene_args, args)?;
    let scene = config::load(&cfg, scene_args, cfg.train.seed)?;
    let outcome = train(&scene.bundle, &cfg.train)?;
    let dir = out.unwrap_or_else(|| run::default_run_dir(&cfg.train.regularizer.label(), cfg.train.seed));
    let command = std::env::args().collect::<Vec<_>>().join(" ");
    run::write_run(&dir, &command, &cfg, &scene, &outcome, hist)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "{name}: iter {} train PSNR {:.3} test PSNR {:.3} gaussians {}",
            last.iter, last.train_psnr, last.test_psnr, last.n_gaussians
        );
    }
    println!("wrote {}", dir.display());
    Ok(dir)
}

fn cmd_train(c: TrainCmd) -> anyhow::Result<bool> {
    let hist = HistogramSpec { threshold: c.threshold, bins: c.bins };
    train_and_write("train", &c.scene, &c.train, c.out, hist)?;
    Ok(true)
}

fn cmd_histogram(c: HistogramCmd) -> anyhow::Result<bool> {
    let hist = HistogramSpec { threshold: c.threshold, bins: c.bins };
    let dir = train_and_write("histogram", &c.scene, &c.train, Some(c.out), hist)?;
    print!("{}", fs::read_to_string(dir.join(run::HISTOGRAM_FILE))?);
    Ok(true)
}

fn cmd_ablate(c: AblateCmd) -> anyhow::Result<bool> {
    let file = config::load_file(c.train.config.as_deref())?;
    let cfg = config::effective(&file, &c.scene, &c.train)?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join(run::CONFIG_FILE), toml::to_string(&cfg)?)?;
    let summaries = ablate::run(&cfg, &c.scene, &c.tables, c.seeds, &c.out, |m| eprintln!("{m}"))?;
    for (table, rows) in summaries {
        println!("table {table}");
        for r in rows {
            println!(
                "  {:<34} test PSNR {:.3} train PSNR {:.3} gap {:.3}",
                r.variant, r.test_psnr, r.train_psnr, r.gap
            );
        }
    }
    Ok(true)
}

fn cmd_grad_check(c: GradCheckCmd) -> anyhow::Result<bool> {
    if c.gaussians == 0 || c.scenes == 0 {
        bail!("--gaussians and --scenes must be positive");
    }
    let mut rng = stream(c.seed, Stream::GradCheck);
    let settings = RenderSettings::default();
    let mut worst: f64 = 0.0;
    for s in 0..c.scenes {
        let (cloud, cam) = random_test_scene(c.gaussians, c.resolution, c.resolution, c.sh_degree, &mut rng)?;
        let n = c.resolution * c.resolution * 3;
        let weights = Image::from_vec(c.resolution, c.resolution, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let plan = if c.drop_rate > 0.0 { Some(sample_drop_mask(cloud.len(), c.drop_rate, &mut rng)?) } else { None };
        let report = finite_diff_check(&cloud, &cam, plan.as_ref(), &LossSpec::Weighted(&weights), c.step, &settings)?;
        for cr in &report.classes {
            println!(
                "scene {s} {:<14} max rel error {:.3e} compared {} skipped {}",
                cr.class.name(),
                cr.max_rel_error,
                cr.compared,
                cr.skipped
            );
        }
        worst = worst.max(report.max_rel_error());
    }
    let pass = worst < c.tolerance;
    println!("max relative error {worst:.3e} ({})", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn splits(s: SplitArg) -> Vec<Split> {
    match s {
        SplitArg::Train => vec![Split::Train],
        SplitArg::Test => vec![Split::Test],
        SplitArg::All => vec![Split::Train, Split::Test],
    }
}

fn cmd_render(c: RenderCmd) -> anyhow::Result<bool> {
    let file = config::load_file(c.config.as_deref())?;
    let cfg = config::effective(&file, &c.scene, &TrainArgs::default())?;
    let scene = config::load(&cfg, &c.scene, cfg.train.seed)?;
    let cloud = load_cloud(&c.cloud)?;
    let settings = RenderSettings { background: cfg.train.background };
    fs::create_dir_all(&c.out)?;
    for split in splits(c.split) {
        for (k, view) in scene.bundle.split(split).enumerate() {
            let out = render(&cloud, &view.camera, None, &settings)?;
            let path = c.out.join(format!("{}_{k:03}.png", format!("{split:?}").to_lowercase()));
            save_png(&out.image, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(true)
}

fn cmd_eval(c: EvalCmd) -> anyhow::Result<bool> {
    let file = config::load_file(c.config.as_deref())?;
    let cfg = config::effective(&file, &c.scene, &TrainArgs::default())?;
    let scene = config::load(&cfg, &c.scene, cfg.train.seed)?;
    let cloud = load_cloud(&c.cloud)?;
    let settings = RenderSettings { background: cfg.train.background };
    for split in splits(c.split) {
        let e = evaluate(&cloud, &scene.bundle, split, &settings)?;
        for (k, (p, s)) in e.per_view.iter().enumerate() {
            println!("{split:?} view {k}: PSNR {p:.4} SSIM {s:.6}");
        }
        println!("{split:?} mean: PSNR {:.4} SSIM {:.6}", e.mean_psnr, e.mean_ssim);
    }
    Ok(true)
}

fn cmd_generate(c: GenerateCmd) -> anyhow::Result<bool> {
    let file = config::load_file(c.config.as_deref())?;
    let mut scene_args = c.scene.clone();
    scene_args.synthetic = true;
    let cfg = config::effective(&file, &scene_args, &TrainArgs::default())?;
    let scene = config::load(&cfg, &scene_args, c.seed)?;
    let manifest = save_scene(&scene.bundle, &c.out)?;
    let gt = scene.ground_truth.context("synthetic scene has a ground truth")?;
    save_cloud(&gt, &c.out.join("ground_truth.json"))?;
    println!("wrote {} and {}", manifest.display(), c.out.join("ground_truth.json").display());
    Ok(true)
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cscn::data::{load_cube, load_labels, load_split, save_cube, save_labels, save_split, split, LabelMask};
use cscn::harness::train::write_trace;
use cscn::harness::{
    ablate, evaluate, load_model, render_labels, render_weights, save_model, train, AblationAxis, OptimizerKind,
    TrainConfig, SEED_ENV,
};
use cscn::params::write_atomic;
use cscn::spectra::{degrade, derivative, synth_scene, DerivativeSpec, NoiseSpec, SynthSceneSpec};

#[derive(Parser, Debug)]
#[command(name = "cscn", version, about = "Dual-encoder hyperspectral segmentation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled scene.
    Synth(SynthArgs),
    /// Spectral finite difference of a cube.
    Derive(DeriveArgs),
    /// Add sensor noise to a cube.
    Degrade(DegradeArgs),
    /// Train a model and write a checkpoint and loss trace.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run one ablation axis over several seeds.
    Ablate(AblateArgs),
    /// Write a label raster or a model's predictions as PNG.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: u16,
    #[arg(long, default_value_t = 16)]
    bands: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Confusable pairs as `a:b`, comma separated, e.g. `1:2,3:4`.
    #[arg(long, default_value = "1:2")]
    pairs: String,
    #[arg(long, default_value_t = 4)]
    block: usize,
    #[arg(long, default_value_t = 0.03)]
    oscillation: f64,
    #[arg(long, default_value_t = 0.05)]
    brightness: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    order: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Gaussian sigma as a fraction of each band's range.
    #[arg(long, default_value_t = 0.05)]
    gaussian: f64,
    #[arg(long, default_value_t = 0.01)]
    salt_pepper: f64,
    #[arg(long, default_value_t = 0.1)]
    stripe_amplitude: f64,
    #[arg(long, default_value_t = 0.05)]
    stripe_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use momentum SGD at lr 1e-3 instead of the configured optimizer.
    #[arg(long)]
    benchmark: bool,
    /// Existing split (base path); drawn from `--ratio` and the seed otherwise.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Loss trace CSV; defaults to `<checkpoint>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Test report JSON; printed when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split base path; defaults to the one saved next to the checkpoint.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    axis: AblationAxis,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: bool,
    /// Number of seeds, counted up from the config seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Label raster to draw.
    #[arg(long, conflicts_with = "checkpoint")]
    labels: Option<PathBuf>,
    /// Draw this model's predictions on `--cube` instead.
    #[arg(long, requires = "cube")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write one `A_M` map per fusion stage here.
    #[arg(long, requires = "checkpoint")]
    weights_dir: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Derive(a) => {
            let cube = load_cube(&a.input)?;
            save_cube(&derivative(&cube, DerivativeSpec::new(a.order, a.step)?)?, &a.output)?;
            Ok(())
        }
        Command::Degrade(a) => {
            let noise = NoiseSpec {
                gaussian_sigma: a.gaussian,
                salt_pepper_rate: a.salt_pepper,
                stripe_amplitude: a.stripe_amplitude,
                stripe_fraction: a.stripe_fraction,
                seed: a.seed,
            };
            save_cube(&degrade(&load_cube(&a.input)?, &noise)?, &a.output)?;
            Ok(())
        }
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Render(a) => run_render(a),
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(u16, u16)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').with_context(|| format!("pair `{p}` is not `a:b`"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSceneSpec {
        class_count: a.classes,
        bands: a.bands,
        height: a.height,
        width: a.width,
        confusable_pairs: parse_pairs(&a.pairs)?,
        magnitude_noise_sigma: a.noise,
        seed: a.seed,
        block: a.block,
        oscillation: a.oscillation,
        brightness_sigma: a.brightness,
    };
    let (cube, mask) = synth_scene(&spec)?;
    save_cube(&cube, &a.cube)?;
    save_labels(&mask, &a.labels)?;
    Ok(())
}

fn load_config(path: Option<&Path>, benchmark: bool) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if benchmark {
        let b = TrainConfig::benchmark();
        cfg.optimizer = OptimizerKind::MomentumSgd;
        cfg.learning_rate = b.learning_rate;
    }
    cfg.apply_env().with_context(|| format!("reading {SEED_ENV}"))?;
    Ok(cfg)
}

fn split_base(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".split");
    PathBuf::from(s)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_data(d: &DataArgs) -> Result<(cscn::spectra::HsiCube, LabelMask)> {
    let cube = load_cube(&d.cube).with_context(|| format!("loading {}", d.cube.display()))?;
    let mask = load_labels(&d.labels).with_context(|| format!("loading {}", d.labels.display()))?;
    Ok((cube, mask))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.benchmark)?;
    let (cube, mask) = load_data(&a.data)?;
    let sp = match &a.split {
        Some(base) => load_split(base)?,
        None => split(&mask, a.ratio, cfg.seed)?,
    };
    let run = train(&cube, &mask, &sp, &cfg)?;
    save_model(&run.model, &cfg, &a.checkpoint)?;
    save_split(&sp, &split_base(&a.checkpoint))?;
    let trace = a.trace.unwrap_or_else(|| with_suffix(&a.checkpoint, ".trace.csv"));
    write_trace(&run.record.trace, &trace)?;
    let json = run.record.report.to_json()?;
    match a.report {
        Some(p) => write_atomic(&p, json.as_bytes())?,
        None => println!("{json}"),
    }
    eprintln!(
        "trained {} epochs in {:.1}s; test CF1 {:.4}",
        cfg.epochs, run.record.wall_seconds, run.record.report.cf1
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (cube, mask) = load_data(&a.data)?;
    let base = a.split.unwrap_or_else(|| split_base(&a.checkpoint));
    let sp = load_split(&base).with_context(|| format!("loading split {}", base.display()))?;
    let json = evaluate(&a.checkpoint, &cube, &mask, &sp)?.to_json()?;
    match a.out {
        Some(p) => write_atomic(&p, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.benchmark)?;
    if a.seeds == 0 {
        bail!("--seeds must be positive");
    }
    let (cube, mask) = load_data(&a.data)?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + a.seeds).collect();
    let table = ablate(&cube, &mask, &cfg, a.axis, &seeds, a.ratio)?;
    table.write_csv(&a.out)?;
    for m in table.means() {
        println!("{:<20} OA {:.4}  AA {:.4}  kappa {:.4}  CF1 {:.4}", m.variant, m.oa, m.aa, m.kappa, m.cf1);
    }
    Ok(())
}

fn run_render(a: RenderArgs) -> Result<()> {
    match (&a.labels, &a.checkpoint) {
        (Some(path), None) => {
            let mask = load_labels(path)?;
            render_labels(mask.labels(), mask.height(), mask.width(), &a.out)?;
        }
        (None, Some(ckpt)) => {
            let (model, _) = load_model(ckpt)?;
            let cube = load_cube(a.cube.as_deref().expect("clap requires --cube"))?;
            let input = model.cfg.prepare(&cube)?;
            render_labels(&model.predict(&input)?, input.height, input.width, &a.out)?;
            if let Some(dir) = &a.weights_dir {
                std::fs::create_dir_all(dir)?;
                let maps = model.weight_maps(&input)?;
                if maps.is_empty() {
                    eprintln!("model has no learned fusion weights");
                }
                // Deepest stage first.
                let n = maps.len();
                for (i, map) in maps.iter().enumerate() {
                    render_weights(map, &dir.join(format!("weights_stage{}.png", n - i)))?;
                }
            }
        }
        _ => bail!("pass exactly one of --labels or --checkpoint"),
    }
    Ok(())
}

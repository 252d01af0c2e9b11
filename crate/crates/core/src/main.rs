use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sonarsynth::config::PipelineConfig;
use sonarsynth::pipeline;
use sonarsynth::Error;

#[derive(Parser)]
#[command(name = "sonarsynth", version, about = "Synthetic sonar training-image generation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every run (overrides the config and SONARSYNTH_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stylizing steps per autoencoder step.
    #[arg(long)]
    t_style_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Colormap, noise and normalize depth frames into base images.
    Basegen {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the style network on base images and style exemplars.
    TrainStyle {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Render every content image in one style.
    Stylize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        style_id: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a manifest into flipped, jittered polarity pairs.
    Augment {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        copies: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATKI and Gram distances between two image sets.
    EvalStyle {
        /// Directory of PNGs or a manifest.
        set_a: PathBuf,
        set_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `random` or `aligned`.
        #[arg(long)]
        pairing: Option<String>,
    },
    /// Precision-recall curve and AP for a detections CSV.
    EvalDetect {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Base images, training, stylization and augmentation in one run.
    Pipeline {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
}

fn apply_train_flags(cfg: &mut PipelineConfig, f: &TrainFlags) {
    if let Some(v) = f.iterations {
        cfg.train.iterations = v;
    }
    if let Some(v) = f.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = f.t_style_steps {
        cfg.train.t_style_steps = v;
    }
    if let Some(v) = f.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = f.base_width {
        cfg.network.base_width = v;
    }
    if let Some(v) = f.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli)?;
    let opt = |p: &Option<PathBuf>| p.as_deref().map(Path::to_path_buf);
    match &cli.command {
        Command::Basegen { manifest, out } => {
            let m = pipeline::cmd_basegen(&cfg, opt(manifest).as_deref(), out)?;
            println!("wrote {} base images to {}", m.content.len(), out.display());
        }
        Command::TrainStyle {
            manifest,
            out,
            resume,
            train,
        } => {
            apply_train_flags(&mut cfg, train);
            let o = pipeline::cmd_train_style(&cfg, opt(manifest).as_deref(), out, *resume)?;
            if let Some(last) = o.metrics.last() {
                println!("iteration {}: L_total {}", last.iteration, last.total());
            }
            if let Some(p) = &o.final_checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Stylize {
            checkpoint,
            manifest,
            style_id,
            out,
        } => {
            let m = pipeline::cmd_stylize(&cfg, opt(checkpoint).as_deref(), opt(manifest).as_deref(), *style_id, out)?;
            println!("wrote {} stylized images to {}", m.content.len(), out.display());
        }
        Command::Augment { manifest, copies, out } => {
            let copies = copies.unwrap_or(cfg.pipeline.copies);
            cfg.pipeline.copies = copies;
            let m = pipeline::cmd_augment(&cfg, opt(manifest).as_deref(), copies, out)?;
            println!("wrote {} augmented images to {}", m.content.len(), out.display());
        }
        Command::EvalStyle {
            set_a,
            set_b,
            out,
            pairing,
        } => {
            if let Some(p) = pairing {
                cfg.eval.pairing = p.clone();
            }
            print_json(&pipeline::cmd_eval_style(&cfg, set_a, set_b, out)?);
        }
        Command::EvalDetect {
            detections,
            manifest,
            threshold,
            out,
        } => {
            if let Some(t) = threshold {
                cfg.eval.iou_threshold = *t;
            }
            let curve = pipeline::cmd_eval_detect(&cfg, detections, opt(manifest).as_deref(), out)?;
            print_json(&serde_json::json!({ "ap": curve.ap }));
        }
        Command::Pipeline { manifest, out, train } => {
            apply_train_flags(&mut cfg, train);
            print_json(&pipeline::cmd_pipeline(&cfg, opt(manifest).as_deref(), out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

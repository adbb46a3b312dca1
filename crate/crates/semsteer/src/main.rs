use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semsteer::checkpoint::{Checkpoint, CheckpointError};
use semsteer::config::{ConfigError, RunConfig};
use semsteer::pipeline::{self, PipelineError};
use semsteer::server::{self, parse_alphas, AppState, Models};
use semsteer::{exit, io, verify};
use semsteer_core::models::{ClassLabel, Generator, Scorer};
use semsteer_core::shapeworld::{sample_attribute_dataset_sized, AttributeId, LabeledImage, ShapeClass, DEFAULT_COUNT};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "semsteer", version, about = "Learn and apply attribute steering directions in a generator's latent space")]
struct Cli {
    /// JSON run configuration; anything it leaves out keeps its default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set steering.steps=200`. Wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render labelled images to PGM files plus an index.
    GenData {
        /// Only this attribute; all four when omitted.
        #[arg(long)]
        attribute: Option<AttributeId>,
        #[arg(long, default_value_t = DEFAULT_COUNT)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the class-conditional generator.
    TrainGenerator {
        /// PGM dataset directory; rendered from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the scorer backbone on shape classes, then retrain its head on attributes.
    TrainScorer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also pretrain on permuted labels and report that holdout accuracy.
        #[arg(long)]
        shuffled_control: bool,
    },
    /// Learn a steering direction for one attribute.
    TrainDirection {
        #[arg(long)]
        attribute: AttributeId,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render `G(z + αθ, y)` for a list of α side by side.
    RenderStrip {
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Shape class, by name or index.
        #[arg(long)]
        class: String,
        #[arg(long)]
        seed: u64,
        /// Comma-separated α values.
        #[arg(long, allow_hyphen_values = true)]
        alphas: String,
        #[arg(long)]
        truncation: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score curves, monotonicity and semantic shift of a direction.
    Evaluate {
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Report JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-seed score curves as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Gradient checks, zero-direction loss, linear oracle and a determinism replay.
    Verify,
    /// Every stage end to end, writing artifacts to the configured out_dir.
    Run,
    /// Serve the explorer API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory holding generator.smst, scorer.smst and direction_*.smst.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Other(String),
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Pipeline(PipelineError::Incompatible { .. }) => exit::INCOMPATIBLE,
            _ => exit::USAGE,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

fn or_default(path: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.out_dir.join(name))
}

fn dataset(cfg: &RunConfig, dir: &Option<PathBuf>) -> Result<Vec<LabeledImage>, CliError> {
    match dir {
        Some(d) => Ok(io::read_dataset(d)?),
        None => Ok(pipeline::dataset(cfg)?),
    }
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    Ok(io::write_file(path, &ckpt.to_bytes())?)
}

fn parse_class(raw: &str) -> Result<ClassLabel, CliError> {
    let class = match raw.parse::<usize>() {
        Ok(i) => ShapeClass::from_index(i),
        Err(_) => ShapeClass::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(raw)),
    };
    class
        .map(|c| ClassLabel(c.index()))
        .ok_or_else(|| CliError::Other(format!("unknown class {raw:?} (expected disc, cross, star, ring or 0-3)")))
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData {
            attribute,
            count,
            seed,
            size,
            out,
        } => {
            let attrs = attribute.map_or(AttributeId::ALL.to_vec(), |a| vec![a]);
            let seed = seed.unwrap_or(cfg.data.seed);
            let size = size.unwrap_or(cfg.data.image_size);
            for a in attrs {
                let images = sample_attribute_dataset_sized(a, *count, seed, size).map_err(PipelineError::from)?;
                io::write_dataset(out, &images)?;
                println!("{a}: {} images", images.len());
            }
        }
        Command::TrainGenerator { data, out } => {
            let data = dataset(&cfg, data)?;
            let trained = pipeline::train_generator_stage(&cfg, &data)?;
            let out = or_default(out, &cfg, "generator.smst");
            save(&pipeline::generator_checkpoint(&cfg, &trained), &out)?;
            println!("reconstruction mse {:.6}", trained.final_mse);
            println!("wrote {} (digest {})", out.display(), trained.generator.digest());
        }
        Command::TrainScorer {
            data,
            out,
            shuffled_control,
        } => {
            let data = dataset(&cfg, data)?;
            let stage = pipeline::train_scorer_stage(&cfg, &data)?;
            let out = or_default(out, &cfg, "scorer.smst");
            save(&pipeline::scorer_checkpoint(&cfg, &stage), &out)?;
            println!("backbone holdout accuracy {:.4}", stage.backbone.holdout_accuracy);
            println!("head holdout accuracy {:.4}", stage.head.holdout_accuracy);
            println!("backbone unchanged by head retraining: {}", stage.backbone_unchanged());
            if *shuffled_control {
                println!("shuffled-label holdout accuracy {:.4}", pipeline::shuffled_label_control(&cfg, &data)?);
            }
            println!("wrote {} (digest {})", out.display(), stage.params().digest());
        }
        Command::TrainDirection {
            attribute,
            generator,
            scorer,
            out,
        } => {
            let g = Checkpoint::load(&or_default(generator, &cfg, "generator.smst"))?.to_generator()?;
            let s = Checkpoint::load(&or_default(scorer, &cfg, "scorer.smst"))?.to_scorer()?;
            let trained = pipeline::train_direction_stage(&cfg, &g, &s, *attribute)?;
            let out = or_default(out, &cfg, &format!("direction_{attribute}.smst"));
            save(&pipeline::direction_checkpoint(&cfg, &trained.direction), &out)?;
            println!("final loss {:.6}", trained.direction.final_loss);
            println!("wrote {}", out.display());
        }
        Command::RenderStrip {
            direction,
            generator,
            class,
            seed,
            alphas,
            truncation,
            out,
        } => {
            let dir = Checkpoint::load(direction)?.to_direction()?;
            let g = Checkpoint::load(&or_default(generator, &cfg, "generator.smst"))?.to_generator()?;
            pipeline::check_compatible(&dir, &g.digest(), None)?;
            let class = parse_class(class)?;
            let alphas = parse_alphas(alphas).map_err(CliError::Other)?;
            let z = pipeline::seed_latent(&g, *seed, truncation.unwrap_or(cfg.evaluation.truncation))?;
            io::write_file(out, &pipeline::strip_png(&g, &dir, &z, class, &alphas)?)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            direction,
            generator,
            scorer,
            seeds,
            out,
            curves,
        } => {
            let dir = Checkpoint::load(direction)?.to_direction()?;
            let g = Checkpoint::load(&or_default(generator, &cfg, "generator.smst"))?.to_generator()?;
            let s = Checkpoint::load(&or_default(scorer, &cfg, "scorer.smst"))?.to_scorer()?;
            pipeline::check_compatible(&dir, &g.digest(), Some(&s.digest()))?;
            let eval_seeds = pipeline::eval_seeds(&cfg, &g, seeds.unwrap_or(cfg.evaluation.seeds))?;
            let report = pipeline::evaluate_stage(&cfg, &g, &s, &dir, &eval_seeds)?;
            let text = pipeline::report_json(&report);
            match out {
                Some(p) => {
                    io::write_file(p, &text)?;
                    eprintln!(
                        "{}: monotonicity {:.3}, score gap {:.3}; wrote {}",
                        report.attribute,
                        report.monotonicity_rate,
                        report.score_gap,
                        p.display()
                    );
                }
                None => print!("{}", String::from_utf8_lossy(&text)),
            }
            if let Some(p) = curves {
                io::write_file(p, &io::score_curves_csv(&report.grid, &report.curves)?)?;
            }
        }
        Command::Verify => {
            let results = verify::run_all(|r| println!("{r}"));
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                println!("{failed} check(s) failed");
                return Ok(exit::VERIFY_FAILED);
            }
            println!("all {} checks passed", results.len());
        }
        Command::Run => {
            let summary = pipeline::run_pipeline(&cfg, |line| println!("{line}"))?;
            let report: Vec<_> = summary
                .reports
                .iter()
                .map(|r| json!({ "attribute": r.attribute, "monotonicity_rate": r.monotonicity_rate, "score_gap": r.score_gap }))
                .collect();
            println!("wrote {} files to {}", summary.files.len(), cfg.out_dir.display());
            println!("{}", serde_json::to_string(&report).expect("summary serializes"));
        }
        Command::Serve {
            port,
            host,
            dir,
            export_dir,
        } => {
            let dir = dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let models = Models::load_dir(&dir)?;
            let export = export_dir.clone().unwrap_or_else(|| dir.join("exports"));
            let state = AppState::new(models, cfg.evaluation.truncation, export);
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Other(e.to_string()))?;
            rt.block_on(server::serve(state, host, *port))
                .map_err(|e| CliError::Other(format!("server: {e}")))?;
        }
    }
    Ok(exit::OK)
}

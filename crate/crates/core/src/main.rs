//! Command-line interface: train either stage, enhance images, and run
//! the proxy quality evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use uwf_enhance::error::{EnhanceError, Result};
use uwf_enhance::eval::{assess_dir, plot_histograms, write_report_csv};
use uwf_enhance::fred::FredNet;
use uwf_enhance::imaging::{load_image, save_image, BitDepth};
use uwf_enhance::rice::RiceNet;
use uwf_enhance::training::{enhance_with, train_fred, train_rice, TrainConfig};

#[derive(Parser)]
#[command(
    name = "uwf-enhance",
    version,
    about = "Two-stage deblurring and illumination compensation for ultra-wide-field retinal images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    Fred,
    Rice,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage from a config file.
    Train {
        /// Which stage to train.
        #[arg(long, value_enum)]
        stage: Stage,
        /// Path to a flat `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Repeatable `key=value` override applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Stage-1 checkpoint for stage-2 training
        /// (default: <out_dir>/fred.ckpt when stage 1 is enabled).
        #[arg(long)]
        fred_ckpt: Option<PathBuf>,
    },
    /// Enhance one image or every image in a directory.
    Enhance {
        /// Input image file or directory.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for enhanced PNGs.
        #[arg(long)]
        output: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        fred: Option<PathBuf>,
        /// Stage-2 checkpoint.
        #[arg(long)]
        rice: Option<PathBuf>,
        /// Skip the deblurring stage.
        #[arg(long)]
        no_fred: bool,
        /// Skip the illumination stage.
        #[arg(long)]
        no_rice: bool,
        /// Also write `<name>.deblur.png` and `<name>.ratio.png`.
        #[arg(long)]
        save_intermediate: bool,
        /// Bound on concurrent per-image workers.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compute proxy quality metrics over a directory.
    Evaluate {
        /// Directory of images to assess.
        #[arg(long)]
        dir: PathBuf,
        /// Optional baseline directory for per-metric deltas.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        report: PathBuf,
        /// Optional histogram plot PNG.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Bound on concurrent per-image workers.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            stage,
            config,
            set,
            fred_ckpt,
        } => cmd_train(stage, &config, &set, fred_ckpt.as_deref()),
        Command::Enhance {
            input,
            output,
            fred,
            rice,
            no_fred,
            no_rice,
            save_intermediate,
            jobs,
        } => cmd_enhance(
            &input,
            &output,
            fred.as_deref(),
            rice.as_deref(),
            no_fred,
            no_rice,
            save_intermediate,
            jobs,
        ),
        Command::Evaluate {
            dir,
            baseline,
            report,
            plot,
            jobs,
        } => cmd_evaluate(&dir, baseline.as_deref(), &report, plot.as_deref(), jobs),
    }
}

fn cmd_train(
    stage: Stage,
    config_path: &Path,
    overrides: &[String],
    fred_ckpt: Option<&Path>,
) -> Result<()> {
    let mut cfg = TrainConfig::load(config_path)?;
    for item in overrides {
        let Some((key, value)) = item.split_once('=') else {
            return Err(EnhanceError::Config(format!(
                "--set expects KEY=VALUE, got `{item}`"
            )));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    if let Ok(seed) = std::env::var("UWF_ENHANCE_SEED") {
        cfg.seed = seed.parse().map_err(|_| {
            EnhanceError::Config(format!("UWF_ENHANCE_SEED must be an integer, got `{seed}`"))
        })?;
    }
    match stage {
        Stage::Fred => {
            let outcome = train_fred(&cfg)?;
            println!(
                "stage 1 done: checkpoint {}, loss log {}",
                outcome.checkpoint.display(),
                outcome.loss_csv.display()
            );
        }
        Stage::Rice => {
            let default_ckpt = cfg.out_dir.join("fred.ckpt");
            let ckpt = if cfg.ablation.use_fred {
                Some(fred_ckpt.map(Path::to_path_buf).unwrap_or(default_ckpt))
            } else {
                None
            };
            let outcome = train_rice(&cfg, ckpt.as_deref())?;
            println!(
                "stage 2 done: checkpoint {}, loss log {}",
                outcome.checkpoint.display(),
                outcome.loss_csv.display()
            );
        }
    }
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| EnhanceError::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(EnhanceError::Config(format!(
                "no valid images found in {}",
                input.display()
            )));
        }
        return Ok(files);
    }
    Err(EnhanceError::Config(format!(
        "input {} is neither a file nor a directory",
        input.display()
    )))
}

#[allow(clippy::too_many_arguments)]
fn cmd_enhance(
    input: &Path,
    output: &Path,
    fred_ckpt: Option<&Path>,
    rice_ckpt: Option<&Path>,
    no_fred: bool,
    no_rice: bool,
    save_intermediate: bool,
    jobs: Option<usize>,
) -> Result<()> {
    let files = list_inputs(input)?;
    let fred = match (no_fred, fred_ckpt) {
        (true, _) => None,
        (false, Some(p)) => Some(FredNet::load(p)?),
        (false, None) => {
            return Err(EnhanceError::Config(
                "deblurring is enabled but --fred was not given (use --no-fred to skip)".into(),
            ))
        }
    };
    let rice = match (no_rice, rice_ckpt) {
        (true, _) => None,
        (false, Some(p)) => Some(RiceNet::load(p)?),
        (false, None) => {
            return Err(EnhanceError::Config(
                "illumination compensation is enabled but --rice was not given (use --no-rice to skip)"
                    .into(),
            ))
        }
    };
    std::fs::create_dir_all(output).map_err(|e| EnhanceError::io(output, e))?;
    let process = |path: &PathBuf| -> Result<()> {
        let img = load_image(path)?;
        let result = enhance_with(&img, fred.as_ref(), rice.as_ref())?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        save_image(&result.enhanced, &output.join(format!("{stem}.png")), BitDepth::Eight)?;
        if save_intermediate {
            save_image(
                &result.deblurred,
                &output.join(format!("{stem}.deblur.png")),
                BitDepth::Eight,
            )?;
            save_image(
                &result.ratio,
                &output.join(format!("{stem}.ratio.png")),
                BitDepth::Eight,
            )?;
        }
        Ok(())
    };
    let results: Vec<Result<()>> = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EnhanceError::Config(format!("thread pool: {e}")))?
            .install(|| files.par_iter().map(process).collect()),
        None => files.par_iter().map(process).collect(),
    };
    for r in results {
        r?;
    }
    println!("enhanced {} image(s) into {}", files.len(), output.display());
    Ok(())
}

fn cmd_evaluate(
    dir: &Path,
    baseline: Option<&Path>,
    report_path: &Path,
    plot: Option<&Path>,
    jobs: Option<usize>,
) -> Result<()> {
    let report = assess_dir(dir, jobs)?;
    let base = baseline.map(|b| assess_dir(b, jobs)).transpose()?;
    write_report_csv(&report, base.as_ref(), report_path)?;
    if let Some(plot_path) = plot {
        plot_histograms(&report, base.as_ref(), plot_path)?;
    }
    println!(
        "assessed {} image(s); report at {}",
        report.records.len(),
        report_path.display()
    );
    Ok(())
}
